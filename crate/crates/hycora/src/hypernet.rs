//! Lightweight hyper-network mapping (character ID, layer ID) to a
//! role-specific low-rank matrix.
//!
//! Character and layer embeddings are concatenated, projected into a hidden
//! state, passed through N residual blocks, and decoded by a low-rank
//! output head (a k-bottleneck factorization of the output projection).
//! The same trunk can carry a second head when a strategy also generates
//! the B matrix.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tape::{NodeId, Tape};
use crate::tensor::{MatMul, Tensor};

fn default_residual_skip() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperNetConfig {
    /// Role-embedding dimension.
    pub d_c: usize,
    /// Layer-embedding dimension.
    pub d_l: usize,
    /// Hidden dimension of the trunk.
    pub d_h: usize,
    /// Residual block count.
    pub n_blocks: usize,
    /// Bottleneck rank of the output head.
    pub k: usize,
    /// Adapter rank.
    pub r: usize,
    /// Input dimension of the target site's weight (columns of W0).
    pub d: usize,
    /// Add the block input back onto the block output.
    #[serde(default = "default_residual_skip")]
    pub residual_skip: bool,
}

impl HyperNetConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_c", self.d_c),
            ("d_l", self.d_l),
            ("d_h", self.d_h),
            ("k", self.k),
            ("r", self.r),
            ("d", self.d),
        ] {
            if v == 0 {
                return Err(Error::config(format!("hypernet {name} must be >= 1")));
            }
        }
        let out = self.r * self.d;
        if self.k > self.d_h.min(out) {
            return Err(Error::config(format!(
                "bottleneck k = {} must be <= min(d_h = {}, r*d = {out})",
                self.k, self.d_h
            )));
        }
        Ok(())
    }
}

/// One residual block: h ← W2·ReLU(W1·h + b1) + b2 (+ h when skip is on).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Low-rank output head: out = U·(D·h + b_d) + b_u, reshaped row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputHead {
    /// D: k × d_h.
    pub down: Tensor,
    pub b_down: Tensor,
    /// U: (out_rows · out_cols) × k.
    pub up: Tensor,
    pub b_up: Tensor,
    pub out_rows: usize,
    pub out_cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperNetParams {
    pub cfg: HyperNetConfig,
    pub num_roles: usize,
    pub num_sites: usize,
    /// C × d_c.
    pub role_table: Tensor,
    /// L_sites × d_l.
    pub layer_table: Tensor,
    /// d_h × (d_c + d_l).
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub blocks: Vec<BlockParams>,
    pub head_a: Option<OutputHead>,
    pub head_b: Option<OutputHead>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSel {
    A,
    B,
}

fn init_head(
    out_rows: usize,
    out_cols: usize,
    k: usize,
    d_h: usize,
    zero_up: bool,
    rng: &mut ChaCha8Rng,
) -> OutputHead {
    let out = out_rows * out_cols;
    OutputHead {
        down: Tensor::kaiming_uniform(k, d_h, rng),
        b_down: Tensor::zeros(1, k),
        up: if zero_up {
            Tensor::zeros(out, k)
        } else {
            Tensor::kaiming_uniform(out, k, rng)
        },
        b_up: Tensor::zeros(1, out),
        out_rows,
        out_cols,
    }
}

/// Construct trunk + requested heads. The `bool` on each head controls
/// whether its U and b_u start at zero (making generated matrices exactly
/// zero); the B head also carries its output row count m.
pub fn init_with_heads(
    cfg: &HyperNetConfig,
    num_roles: usize,
    num_sites: usize,
    head_a: Option<bool>,
    head_b: Option<(usize, bool)>,
    seed: u64,
) -> Result<HyperNetParams> {
    cfg.validate()?;
    if num_roles == 0 || num_sites == 0 {
        return Err(Error::config("hypernet needs >= 1 role and >= 1 site"));
    }
    let mut rng = rng_for(seed, "hypernet");
    let role_table = Tensor::randn(num_roles, cfg.d_c, 1.0, &mut rng);
    let layer_table = Tensor::randn(num_sites, cfg.d_l, 1.0, &mut rng);
    let w_in = Tensor::kaiming_uniform(cfg.d_h, cfg.d_c + cfg.d_l, &mut rng);
    let b_in = Tensor::zeros(1, cfg.d_h);
    let blocks = (0..cfg.n_blocks)
        .map(|_| BlockParams {
            w1: Tensor::kaiming_uniform(cfg.d_h, cfg.d_h, &mut rng),
            b1: Tensor::zeros(1, cfg.d_h),
            w2: Tensor::kaiming_uniform(cfg.d_h, cfg.d_h, &mut rng),
            b2: Tensor::zeros(1, cfg.d_h),
        })
        .collect();
    let head_a = head_a.map(|zero| init_head(cfg.r, cfg.d, cfg.k, cfg.d_h, zero, &mut rng));
    let head_b = match head_b {
        Some((m, zero)) => {
            if cfg.k > cfg.d_h.min(m * cfg.r) {
                return Err(Error::config(format!(
                    "bottleneck k = {} must be <= min(d_h = {}, m*r = {})",
                    cfg.k,
                    cfg.d_h,
                    m * cfg.r
                )));
            }
            Some(init_head(m, cfg.r, cfg.k, cfg.d_h, zero, &mut rng))
        }
        None => None,
    };
    Ok(HyperNetParams {
        cfg: cfg.clone(),
        num_roles,
        num_sites,
        role_table,
        layer_table,
        w_in,
        b_in,
        blocks,
        head_a,
        head_b,
    })
}

/// Standalone hyper-network constructor: trunk plus an A head whose U and
/// b_u start at zero, so every generated matrix is exactly zero.
pub fn init_hypernet(
    cfg: &HyperNetConfig,
    num_roles: usize,
    num_sites: usize,
    seed: u64,
) -> Result<HyperNetParams> {
    init_with_heads(cfg, num_roles, num_sites, Some(true), None, seed)
}

/// Tape node handles for the trunk tensors.
pub struct TrunkNodes {
    pub role_table: NodeId,
    pub layer_table: NodeId,
    pub w_in: NodeId,
    pub b_in: NodeId,
    /// [w1, b1, w2, b2] per block.
    pub blocks: Vec<[NodeId; 4]>,
}

/// Tape node handles for one output head.
pub struct HeadNodes {
    pub down: NodeId,
    pub b_down: NodeId,
    pub up: NodeId,
    pub b_up: NodeId,
    pub out_rows: usize,
    pub out_cols: usize,
}

/// Record the generation of one role/layer matrix on the tape and return
/// the node holding the out_rows × out_cols result.
pub fn generate_on_tape(
    tape: &mut Tape,
    cfg: &HyperNetConfig,
    trunk: &TrunkNodes,
    head: &HeadNodes,
    char_id: usize,
    layer_id: usize,
) -> NodeId {
    let e_c = tape.gather_rows(trunk.role_table, &[char_id]);
    let e_l = tape.gather_rows(trunk.layer_table, &[layer_id]);
    let e = tape.concat_cols(&[e_c, e_l]);
    let pre = tape.matmul(e, trunk.w_in, MatMul::NT);
    let pre = tape.add_row(pre, trunk.b_in);
    let mut h = tape.relu(pre);
    for block in &trunk.blocks {
        let t = tape.matmul(h, block[0], MatMul::NT);
        let t = tape.add_row(t, block[1]);
        let t = tape.relu(t);
        let t = tape.matmul(t, block[2], MatMul::NT);
        let t = tape.add_row(t, block[3]);
        h = if cfg.residual_skip { tape.add(t, h) } else { t };
    }
    let z = tape.matmul(h, head.down, MatMul::NT);
    let z = tape.add_row(z, head.b_down);
    let out = tape.matmul(z, head.up, MatMul::NT);
    let out = tape.add_row(out, head.b_up);
    tape.reshape(out, head.out_rows, head.out_cols)
}

impl HyperNetParams {
    pub fn trunk_nodes(&self, tape: &mut Tape) -> TrunkNodes {
        TrunkNodes {
            role_table: tape.leaf(self.role_table.clone()),
            layer_table: tape.leaf(self.layer_table.clone()),
            w_in: tape.leaf(self.w_in.clone()),
            b_in: tape.leaf(self.b_in.clone()),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    [
                        tape.leaf(b.w1.clone()),
                        tape.leaf(b.b1.clone()),
                        tape.leaf(b.w2.clone()),
                        tape.leaf(b.b2.clone()),
                    ]
                })
                .collect(),
        }
    }

    pub fn head_nodes(&self, tape: &mut Tape, which: HeadSel) -> Result<HeadNodes> {
        let head = match which {
            HeadSel::A => self.head_a.as_ref(),
            HeadSel::B => self.head_b.as_ref(),
        }
        .ok_or_else(|| Error::config("requested head not present on hyper-network"))?;
        Ok(HeadNodes {
            down: tape.leaf(head.down.clone()),
            b_down: tape.leaf(head.b_down.clone()),
            up: tape.leaf(head.up.clone()),
            b_up: tape.leaf(head.b_up.clone()),
            out_rows: head.out_rows,
            out_cols: head.out_cols,
        })
    }

    fn check_ids(&self, char_id: usize, layer_id: usize) -> Result<()> {
        if char_id >= self.num_roles {
            return Err(Error::lookup(format!(
                "char_id {char_id} out of range (num_roles = {})",
                self.num_roles
            )));
        }
        if layer_id >= self.num_sites {
            return Err(Error::lookup(format!(
                "layer_id {layer_id} out of range (num_sites = {})",
                self.num_sites
            )));
        }
        Ok(())
    }

    /// Generate the role/layer matrix for the selected head.
    pub fn generate(&self, char_id: usize, layer_id: usize, which: HeadSel) -> Result<Tensor> {
        self.check_ids(char_id, layer_id)?;
        let mut tape = Tape::new();
        let trunk = self.trunk_nodes(&mut tape);
        let head = self.head_nodes(&mut tape, which)?;
        let out = generate_on_tape(&mut tape, &self.cfg, &trunk, &head, char_id, layer_id);
        Ok(tape.value(out).clone())
    }

    /// The role-specific A matrix (r × d).
    pub fn generate_a(&self, char_id: usize, layer_id: usize) -> Result<Tensor> {
        self.generate(char_id, layer_id, HeadSel::A)
    }

    /// The role-embedding row consumed by the contrastive head.
    pub fn role_embedding(&self, char_id: usize) -> Result<Tensor> {
        if char_id >= self.num_roles {
            return Err(Error::lookup(format!(
                "char_id {char_id} out of range (num_roles = {})",
                self.num_roles
            )));
        }
        Ok(self.role_table.gather_rows(&[char_id]))
    }

    /// Append one freshly initialized role-embedding row; every other
    /// parameter is untouched, so the trainable count grows by exactly d_c.
    pub fn add_role(&mut self, seed: u64) {
        let mut rng = rng_for(seed, "add-role");
        let new_row = Tensor::randn(1, self.cfg.d_c, 1.0, &mut rng);
        self.role_table = Tensor::concat_rows(&[&self.role_table, &new_row]);
        self.num_roles += 1;
    }

    /// Total scalar count across trunk and present heads.
    pub fn param_count(&self) -> usize {
        let mut n = self.role_table.len()
            + self.layer_table.len()
            + self.w_in.len()
            + self.b_in.len();
        for b in &self.blocks {
            n += b.w1.len() + b.b1.len() + b.w2.len() + b.b2.len();
        }
        for head in [&self.head_a, &self.head_b].into_iter().flatten() {
            n += head.down.len() + head.b_down.len() + head.up.len() + head.b_up.len();
        }
        n
    }
}

/// Closed-form scalar count for a trunk with the given table sizes.
pub fn trunk_param_count(cfg: &HyperNetConfig, num_roles: usize, num_sites: usize) -> usize {
    num_roles * cfg.d_c
        + num_sites * cfg.d_l
        + cfg.d_h * (cfg.d_c + cfg.d_l)
        + cfg.d_h
        + cfg.n_blocks * (2 * cfg.d_h * cfg.d_h + 2 * cfg.d_h)
}

/// Closed-form scalar count for one output head of the given output size.
pub fn head_param_count(cfg: &HyperNetConfig, out: usize) -> usize {
    cfg.k * cfg.d_h + cfg.k + out * cfg.k + out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> HyperNetConfig {
        HyperNetConfig {
            d_c: 4,
            d_l: 2,
            d_h: 8,
            n_blocks: 1,
            k: 3,
            r: 2,
            d: 8,
            residual_skip: true,
        }
    }

    #[test]
    fn fresh_init_generates_zero() {
        let hn = init_hypernet(&small_cfg(), 5, 2, 42).unwrap();
        let a = hn.generate_a(0, 0).unwrap();
        assert_eq!(a.shape(), (2, 8));
        assert!(a.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_hypernet(&small_cfg(), 5, 2, 42).unwrap();
        let b = init_hypernet(&small_cfg(), 5, 2, 42).unwrap();
        assert_eq!(a, b);
        let c = init_hypernet(&small_cfg(), 5, 2, 43).unwrap();
        assert_ne!(a.role_table, c.role_table);
    }

    #[test]
    fn role_table_shape() {
        let hn = init_hypernet(&small_cfg(), 5, 2, 1).unwrap();
        assert_eq!(hn.role_table.shape(), (5, 4));
        assert_eq!(hn.layer_table.shape(), (2, 2));
    }

    #[test]
    fn hand_evaluated_single_unit() {
        // d_c = d_l = d_h = k = r = d = 1, N = 0, all weights 1, biases 0,
        // e_c = e_l = [1]: h0 = ReLU(1 + 1) = 2, A = 1·(1·2) = [[2]].
        let cfg = HyperNetConfig {
            d_c: 1,
            d_l: 1,
            d_h: 1,
            n_blocks: 0,
            k: 1,
            r: 1,
            d: 1,
            residual_skip: true,
        };
        let hn = HyperNetParams {
            cfg,
            num_roles: 1,
            num_sites: 1,
            role_table: Tensor::from_vec(1, 1, vec![1.0]),
            layer_table: Tensor::from_vec(1, 1, vec![1.0]),
            w_in: Tensor::from_vec(1, 2, vec![1.0, 1.0]),
            b_in: Tensor::zeros(1, 1),
            blocks: vec![],
            head_a: Some(OutputHead {
                down: Tensor::from_vec(1, 1, vec![1.0]),
                b_down: Tensor::zeros(1, 1),
                up: Tensor::from_vec(1, 1, vec![1.0]),
                b_up: Tensor::zeros(1, 1),
                out_rows: 1,
                out_cols: 1,
            }),
            head_b: None,
        };
        let a = hn.generate_a(0, 0).unwrap();
        assert_eq!(a.data(), &[2.0]);
    }

    #[test]
    fn all_zero_params_give_zero_matrix() {
        let cfg = small_cfg();
        let mut hn = init_hypernet(&cfg, 2, 2, 9).unwrap();
        for t in [&mut hn.role_table, &mut hn.layer_table, &mut hn.w_in] {
            t.data_mut().fill(0.0);
        }
        for b in &mut hn.blocks {
            b.w1.data_mut().fill(0.0);
            b.w2.data_mut().fill(0.0);
        }
        let a = hn.generate_a(1, 1).unwrap();
        assert!(a.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn generate_is_pure() {
        let mut hn = init_hypernet(&small_cfg(), 3, 2, 7).unwrap();
        // give the head nonzero output
        if let Some(h) = hn.head_a.as_mut() {
            let mut rng = rng_for(1, "u");
            h.up = Tensor::kaiming_uniform(h.up.rows(), h.up.cols(), &mut rng);
        }
        let a1 = hn.generate_a(2, 1).unwrap();
        let a2 = hn.generate_a(2, 1).unwrap();
        assert_eq!(a1, a2);
        assert!(a1.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let hn = init_hypernet(&small_cfg(), 3, 2, 7).unwrap();
        assert!(matches!(hn.generate_a(3, 0), Err(Error::Lookup(_))));
        assert!(matches!(hn.generate_a(0, 2), Err(Error::Lookup(_))));
        assert!(matches!(hn.role_embedding(5), Err(Error::Lookup(_))));
    }

    #[test]
    fn role_embedding_is_table_row() {
        let hn = init_hypernet(&small_cfg(), 3, 2, 7).unwrap();
        let e = hn.role_embedding(1).unwrap();
        assert_eq!(e.data(), hn.role_table.row(1));
        let e0 = hn.role_embedding(0).unwrap();
        assert_ne!(e.data(), e0.data());
    }

    #[test]
    fn add_role_grows_by_dc_and_preserves_existing() {
        let mut hn = init_hypernet(&small_cfg(), 3, 2, 7).unwrap();
        if let Some(h) = hn.head_a.as_mut() {
            let mut rng = rng_for(2, "u2");
            h.up = Tensor::kaiming_uniform(h.up.rows(), h.up.cols(), &mut rng);
        }
        let before = hn.param_count();
        let a_before = hn.generate_a(1, 0).unwrap();
        hn.add_role(99);
        assert_eq!(hn.param_count() - before, 4); // d_c = 4
        assert_eq!(hn.num_roles, 4);
        assert_eq!(hn.generate_a(1, 0).unwrap(), a_before);
        hn.add_role(100);
        hn.add_role(101);
        assert_eq!(hn.role_table.rows(), 6);
    }

    #[test]
    fn bottleneck_constraint_enforced() {
        let mut cfg = small_cfg();
        cfg.k = 9; // > d_h = 8
        assert!(matches!(
            init_hypernet(&cfg, 2, 2, 1),
            Err(Error::Config(_))
        ));
        let mut cfg2 = small_cfg();
        cfg2.r = 1;
        cfg2.d = 2;
        cfg2.k = 3; // > r*d = 2
        assert!(matches!(
            init_hypernet(&cfg2, 2, 2, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn residual_skip_changes_output() {
        let mut cfg = small_cfg();
        cfg.residual_skip = true;
        let with_skip = init_with_heads(&cfg, 2, 2, Some(false), None, 5).unwrap();
        cfg.residual_skip = false;
        let without = init_with_heads(&cfg, 2, 2, Some(false), None, 5).unwrap();
        let a = with_skip.generate_a(0, 0).unwrap();
        let b = without.generate_a(0, 0).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn closed_form_counts_match_enumeration() {
        let cfg = small_cfg();
        let hn = init_with_heads(&cfg, 5, 2, Some(true), Some((8, false)), 3).unwrap();
        let expected = trunk_param_count(&cfg, 5, 2)
            + head_param_count(&cfg, cfg.r * cfg.d)
            + head_param_count(&cfg, 8 * cfg.r);
        assert_eq!(hn.param_count(), expected);
        // trunk + A head at these dims enumerates to 315
        assert_eq!(
            trunk_param_count(&cfg, 5, 2) + head_param_count(&cfg, cfg.r * cfg.d),
            315
        );
    }

    #[test]
    fn tape_gradients_flow_to_trunk() {
        let cfg = small_cfg();
        let hn = init_with_heads(&cfg, 2, 2, Some(false), None, 5).unwrap();
        let mut tape = Tape::new();
        let trunk = hn.trunk_nodes(&mut tape);
        let head = hn.head_nodes(&mut tape, HeadSel::A).unwrap();
        let a = generate_on_tape(&mut tape, &cfg, &trunk, &head, 1, 0);
        let w = Tensor::from_vec(2, 8, (0..16).map(|i| 0.1 * i as f64).collect());
        let loss = tape.weighted_sum(a, w);
        let grads = tape.backward(loss);
        assert!(grads.of(trunk.role_table).is_some());
        let rt_grad = grads.of(trunk.role_table).unwrap();
        // only the used row receives gradient
        assert!(rt_grad.row(1).iter().any(|v| *v != 0.0));
        assert!(rt_grad.row(0).iter().all(|v| *v == 0.0));
    }
}
