//! Adapter sites and strategy assembly.
//!
//! Every site wraps one frozen projection weight W0 (m × d) with the
//! low-rank update out = W0·x + (α/r)·B·A·x. Strategies differ in where A
//! and B come from: generated per role by the hyper-network, shared
//! trainable, or per-role trainable. Exactly one side starts at zero so
//! the adapted model initially equals the frozen backbone while gradients
//! still flow.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    forward_on_tape, last_content_index, Backbone, BackboneConfig, BackboneLayout, ByteTokenizer,
    HiddenStates, SiteSpec, EOS,
};
use crate::error::{Error, Result};
use crate::hypernet::{
    generate_on_tape, head_param_count, init_with_heads, trunk_param_count, HeadNodes, HeadSel,
    HyperNetConfig, TrunkNodes,
};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::rng_for;
use crate::tape::{NodeId, Tape};
use crate::tensor::{MatMul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterStrategy {
    /// Role-specific A from the hyper-network, shared trainable B.
    Hycora,
    /// Both A and B generated by the hyper-network (two heads, one trunk).
    RspARspB,
    /// Shared trainable A, role-specific B from the hyper-network.
    MrsARspB,
    /// One trainable (A, B) pair shared by all roles.
    SharedLora,
    /// A trainable (A, B) pair per role.
    IndependentLora,
}

impl AdapterStrategy {
    pub const ALL: [AdapterStrategy; 5] = [
        AdapterStrategy::Hycora,
        AdapterStrategy::RspARspB,
        AdapterStrategy::MrsARspB,
        AdapterStrategy::SharedLora,
        AdapterStrategy::IndependentLora,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AdapterStrategy::Hycora => "HyCoRA",
            AdapterStrategy::RspARspB => "RspA_RspB",
            AdapterStrategy::MrsARspB => "MrsA_RspB",
            AdapterStrategy::SharedLora => "SharedLoRA",
            AdapterStrategy::IndependentLora => "IndependentLoRA",
        }
    }

    pub fn parse(s: &str) -> Result<AdapterStrategy> {
        match s.to_ascii_lowercase().as_str() {
            "hycora" => Ok(AdapterStrategy::Hycora),
            "rsp_a_rsp_b" | "rspa_rspb" => Ok(AdapterStrategy::RspARspB),
            "mrs_a_rsp_b" | "mrsa_rspb" => Ok(AdapterStrategy::MrsARspB),
            "shared_lora" | "sharedlora" => Ok(AdapterStrategy::SharedLora),
            "independent_lora" | "independentlora" => Ok(AdapterStrategy::IndependentLora),
            other => Err(Error::config(format!("unknown strategy: {other}"))),
        }
    }

    /// Strategies with a hyper-network also expose role embeddings (and can
    /// therefore train with the hyper-contrastive loss).
    pub fn uses_hypernet(&self) -> bool {
        matches!(
            self,
            AdapterStrategy::Hycora | AdapterStrategy::RspARspB | AdapterStrategy::MrsARspB
        )
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 8,
            alpha: 16.0,
        }
    }
}

/// Per-component trainable-parameter counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub hypernet: usize,
    pub shared_b: usize,
    pub shared_a: usize,
    pub per_role_adapters: usize,
    pub contrastive_head: usize,
    pub total_trainable: usize,
    pub num_roles: usize,
}

/// Store indices of one hyper-network output head.
#[derive(Debug, Clone)]
pub struct HeadIdx {
    pub down: usize,
    pub b_down: usize,
    pub up: usize,
    pub b_up: usize,
    pub out_rows: usize,
    pub out_cols: usize,
}

/// Store indices of the hyper-network tensors.
#[derive(Debug, Clone)]
pub struct HyperIdx {
    pub role_table: usize,
    pub layer_table: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub blocks: Vec<[usize; 4]>,
    pub head_a: Option<HeadIdx>,
    pub head_b: Option<HeadIdx>,
}

/// Adapter tensor indices per strategy.
#[derive(Debug, Clone)]
pub enum AdapterIdx {
    Hycora { b_sh: Vec<usize> },
    RspARspB,
    MrsARspB { a_shared: Vec<usize> },
    SharedLora { a: Vec<usize>, b: Vec<usize> },
    IndependentLora { a: Vec<Vec<usize>>, b: Vec<Vec<usize>> },
    /// Frozen per-(site, role) A lookup table with trainable shared B;
    /// stands in for the hyper-network in forward-equivalence oracles.
    FixedA { table: Vec<Vec<Tensor>>, b_sh: Vec<usize> },
}

/// The adapted model: frozen backbone, adapter parameters, and (for
/// hyper-strategies) the hyper-network, all in one parameter store.
#[derive(Debug, Clone)]
pub struct HyperModel {
    pub bb_cfg: BackboneConfig,
    pub layout: BackboneLayout,
    pub store: ParamStore,
    pub strategy: AdapterStrategy,
    pub adapter_cfg: AdapterConfig,
    pub hyper_cfg: Option<HyperNetConfig>,
    pub hyper_idx: Option<HyperIdx>,
    pub adapter_idx: AdapterIdx,
    pub sites: Vec<SiteSpec>,
    pub num_roles: usize,
}

fn move_hypernet_into_store(
    store: &mut ParamStore,
    hn: crate::hypernet::HyperNetParams,
) -> HyperIdx {
    let t = ParamGroup::HypernetTrunk;
    let h = ParamGroup::HypernetHead;
    let role_table = store.add("hypernet.role_table", hn.role_table, true, t);
    let layer_table = store.add("hypernet.layer_table", hn.layer_table, true, t);
    let w_in = store.add("hypernet.w_in", hn.w_in, true, t);
    let b_in = store.add("hypernet.b_in", hn.b_in, true, t);
    let mut blocks = Vec::new();
    for (i, b) in hn.blocks.into_iter().enumerate() {
        blocks.push([
            store.add(format!("hypernet.block{i}.w1"), b.w1, true, t),
            store.add(format!("hypernet.block{i}.b1"), b.b1, true, t),
            store.add(format!("hypernet.block{i}.w2"), b.w2, true, t),
            store.add(format!("hypernet.block{i}.b2"), b.b2, true, t),
        ]);
    }
    let add_head = |store: &mut ParamStore, name: &str, head: crate::hypernet::OutputHead| {
        HeadIdx {
            out_rows: head.out_rows,
            out_cols: head.out_cols,
            down: store.add(format!("hypernet.{name}.down"), head.down, true, h),
            b_down: store.add(format!("hypernet.{name}.b_down"), head.b_down, true, h),
            up: store.add(format!("hypernet.{name}.up"), head.up, true, h),
            b_up: store.add(format!("hypernet.{name}.b_up"), head.b_up, true, h),
        }
    };
    let head_a = hn.head_a.map(|head| add_head(store, "head_a", head));
    let head_b = hn.head_b.map(|head| add_head(store, "head_b", head));
    HyperIdx {
        role_table,
        layer_table,
        w_in,
        b_in,
        blocks,
        head_a,
        head_b,
    }
}

/// Wrap every adapter site of the backbone under the given strategy.
/// Consumes the backbone; its (frozen) tensors keep their store slots.
pub fn attach(
    strategy: AdapterStrategy,
    backbone: Backbone,
    hyper_cfg: &HyperNetConfig,
    adapter_cfg: AdapterConfig,
    num_roles: usize,
    seed: u64,
) -> Result<HyperModel> {
    if num_roles == 0 {
        return Err(Error::config("num_roles must be >= 1"));
    }
    if adapter_cfg.rank == 0 {
        return Err(Error::config("adapter rank must be >= 1"));
    }
    let sites = backbone.sites();
    let (m, d) = (sites[0].m, sites[0].d);
    if sites.iter().any(|s| s.m != m || s.d != d) {
        return Err(Error::config(
            "adapter sites have heterogeneous shapes; a single hyper-network serves one shape group",
        ));
    }
    let Backbone {
        cfg: bb_cfg,
        mut store,
        layout,
    } = backbone;

    let r = adapter_cfg.rank;
    let mut cfg = hyper_cfg.clone();
    cfg.r = r;
    cfg.d = d;

    let mut rng = rng_for(seed, "attach");

    let (hyper_idx, adapter_idx) = match strategy {
        AdapterStrategy::Hycora => {
            // A head free, B_sh zero
            let hn = init_with_heads(&cfg, num_roles, sites.len(), Some(false), None, seed)?;
            let idx = move_hypernet_into_store(&mut store, hn);
            let b_sh = sites
                .iter()
                .map(|s| {
                    store.add(
                        format!("adapter.site{}.b_sh", s.site_id),
                        Tensor::zeros(m, r),
                        true,
                        ParamGroup::SharedB,
                    )
                })
                .collect();
            (Some(idx), AdapterIdx::Hycora { b_sh })
        }
        AdapterStrategy::RspARspB => {
            // A head free, B head zero
            let hn = init_with_heads(
                &cfg,
                num_roles,
                sites.len(),
                Some(false),
                Some((m, true)),
                seed,
            )?;
            let idx = move_hypernet_into_store(&mut store, hn);
            (Some(idx), AdapterIdx::RspARspB)
        }
        AdapterStrategy::MrsARspB => {
            // shared A free, B head zero
            let hn = init_with_heads(&cfg, num_roles, sites.len(), None, Some((m, true)), seed)?;
            let idx = move_hypernet_into_store(&mut store, hn);
            let a_shared = sites
                .iter()
                .map(|s| {
                    store.add(
                        format!("adapter.site{}.a_shared", s.site_id),
                        Tensor::kaiming_uniform(r, d, &mut rng),
                        true,
                        ParamGroup::SharedA,
                    )
                })
                .collect();
            (Some(idx), AdapterIdx::MrsARspB { a_shared })
        }
        AdapterStrategy::SharedLora => {
            let a = sites
                .iter()
                .map(|s| {
                    store.add(
                        format!("adapter.site{}.a_shared", s.site_id),
                        Tensor::kaiming_uniform(r, d, &mut rng),
                        true,
                        ParamGroup::SharedA,
                    )
                })
                .collect();
            let b = sites
                .iter()
                .map(|s| {
                    store.add(
                        format!("adapter.site{}.b_sh", s.site_id),
                        Tensor::zeros(m, r),
                        true,
                        ParamGroup::SharedB,
                    )
                })
                .collect();
            (None, AdapterIdx::SharedLora { a, b })
        }
        AdapterStrategy::IndependentLora => {
            let mut a = Vec::with_capacity(num_roles);
            let mut b = Vec::with_capacity(num_roles);
            for role in 0..num_roles {
                let ar = sites
                    .iter()
                    .map(|s| {
                        store.add(
                            format!("adapter.role{role}.site{}.a", s.site_id),
                            Tensor::kaiming_uniform(r, d, &mut rng),
                            true,
                            ParamGroup::PerRoleAdapter,
                        )
                    })
                    .collect();
                let br = sites
                    .iter()
                    .map(|s| {
                        store.add(
                            format!("adapter.role{role}.site{}.b", s.site_id),
                            Tensor::zeros(m, r),
                            true,
                            ParamGroup::PerRoleAdapter,
                        )
                    })
                    .collect();
                a.push(ar);
                b.push(br);
            }
            (None, AdapterIdx::IndependentLora { a, b })
        }
    };

    Ok(HyperModel {
        bb_cfg,
        layout,
        store,
        strategy,
        adapter_cfg,
        hyper_cfg: if strategy.uses_hypernet() { Some(cfg) } else { None },
        hyper_idx,
        adapter_idx,
        sites,
        num_roles,
    })
}

/// A HyCoRA-shaped model whose A matrices come from a frozen lookup table
/// (`table[site][role]`) instead of a hyper-network. Oracle for the
/// strategy-independence of the adapter forward pass.
pub fn attach_fixed_a(
    backbone: Backbone,
    adapter_cfg: AdapterConfig,
    table: Vec<Vec<Tensor>>,
    num_roles: usize,
) -> Result<HyperModel> {
    let sites = backbone.sites();
    if table.len() != sites.len() {
        return Err(Error::config("fixed-A table must have one row set per site"));
    }
    for (s, per_site) in sites.iter().zip(&table) {
        if per_site.len() != num_roles {
            return Err(Error::config("fixed-A table must cover every role"));
        }
        for a in per_site {
            if a.shape() != (adapter_cfg.rank, s.d) {
                return Err(Error::config("fixed-A matrix shape mismatch"));
            }
        }
    }
    let Backbone {
        cfg: bb_cfg,
        mut store,
        layout,
    } = backbone;
    let b_sh = sites
        .iter()
        .map(|s| {
            store.add(
                format!("adapter.site{}.b_sh", s.site_id),
                Tensor::zeros(s.m, adapter_cfg.rank),
                true,
                ParamGroup::SharedB,
            )
        })
        .collect();
    Ok(HyperModel {
        bb_cfg,
        layout,
        store,
        strategy: AdapterStrategy::Hycora,
        adapter_cfg,
        hyper_cfg: None,
        hyper_idx: None,
        adapter_idx: AdapterIdx::FixedA { table, b_sh },
        sites,
        num_roles,
    })
}

/// Node caches for one recorded tape: parameter leaves are created once,
/// per-(role, site) adapter matrices are generated once and reused.
#[derive(Default)]
pub struct TapeBinding {
    param_nodes: BTreeMap<usize, NodeId>,
    pairs: BTreeMap<(usize, usize), (NodeId, NodeId)>,
    trunk: Option<TrunkNodes>,
}

impl TapeBinding {
    pub fn new() -> Self {
        TapeBinding::default()
    }
}

impl HyperModel {
    fn param_node(&self, tape: &mut Tape, binding: &mut TapeBinding, idx: usize) -> NodeId {
        if let Some(&n) = binding.param_nodes.get(&idx) {
            return n;
        }
        let n = self.store.tape_node(tape, idx);
        binding.param_nodes.insert(idx, n);
        n
    }

    fn ensure_trunk(&self, tape: &mut Tape, binding: &mut TapeBinding) -> Result<()> {
        if binding.trunk.is_some() {
            return Ok(());
        }
        let hi = self
            .hyper_idx
            .as_ref()
            .ok_or_else(|| Error::config("strategy has no hyper-network"))?;
        let blocks = hi.blocks.clone();
        let trunk = TrunkNodes {
            role_table: self.param_node(tape, binding, hi.role_table),
            layer_table: self.param_node(tape, binding, hi.layer_table),
            w_in: self.param_node(tape, binding, hi.w_in),
            b_in: self.param_node(tape, binding, hi.b_in),
            blocks: blocks
                .iter()
                .map(|b| {
                    [
                        self.param_node(tape, binding, b[0]),
                        self.param_node(tape, binding, b[1]),
                        self.param_node(tape, binding, b[2]),
                        self.param_node(tape, binding, b[3]),
                    ]
                })
                .collect(),
        };
        binding.trunk = Some(trunk);
        Ok(())
    }

    fn head_nodes(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        which: HeadSel,
    ) -> Result<HeadNodes> {
        let hi = self
            .hyper_idx
            .as_ref()
            .ok_or_else(|| Error::config("strategy has no hyper-network"))?;
        let head = match which {
            HeadSel::A => hi.head_a.as_ref(),
            HeadSel::B => hi.head_b.as_ref(),
        }
        .ok_or_else(|| Error::config("requested hyper-network head not present"))?
        .clone();
        Ok(HeadNodes {
            down: self.param_node(tape, binding, head.down),
            b_down: self.param_node(tape, binding, head.b_down),
            up: self.param_node(tape, binding, head.up),
            b_up: self.param_node(tape, binding, head.b_up),
            out_rows: head.out_rows,
            out_cols: head.out_cols,
        })
    }

    /// Role-table node for contrastive projections (hyper-strategies only).
    pub fn role_table_node(&self, tape: &mut Tape, binding: &mut TapeBinding) -> Result<NodeId> {
        let hi = self
            .hyper_idx
            .as_ref()
            .ok_or_else(|| Error::config("strategy has no role embeddings"))?;
        Ok(self.param_node(tape, binding, hi.role_table))
    }

    pub fn check_role(&self, role_id: usize) -> Result<()> {
        if role_id >= self.num_roles {
            return Err(Error::lookup(format!(
                "role_id {role_id} out of range (num_roles = {})",
                self.num_roles
            )));
        }
        Ok(())
    }

    fn gen_on_tape(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        which: HeadSel,
        role: usize,
        site: usize,
    ) -> Result<NodeId> {
        self.ensure_trunk(tape, binding)?;
        let head = self.head_nodes(tape, binding, which)?;
        let cfg = self
            .hyper_cfg
            .as_ref()
            .ok_or_else(|| Error::config("missing hyper config"))?;
        let trunk = binding.trunk.take().expect("trunk built above");
        let node = generate_on_tape(tape, cfg, &trunk, &head, role, site);
        binding.trunk = Some(trunk);
        Ok(node)
    }

    /// Tape nodes of the effective (A, B) for one role at one site.
    pub fn site_nodes(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        role: usize,
        site: usize,
    ) -> Result<(NodeId, NodeId)> {
        self.check_role(role)?;
        if let Some(&pair) = binding.pairs.get(&(role, site)) {
            return Ok(pair);
        }
        let pair = match &self.adapter_idx {
            AdapterIdx::Hycora { b_sh } => {
                let a = self.gen_on_tape(tape, binding, HeadSel::A, role, site)?;
                let b = self.param_node(tape, binding, b_sh[site]);
                (a, b)
            }
            AdapterIdx::RspARspB => {
                let a = self.gen_on_tape(tape, binding, HeadSel::A, role, site)?;
                let b = self.gen_on_tape(tape, binding, HeadSel::B, role, site)?;
                (a, b)
            }
            AdapterIdx::MrsARspB { a_shared } => {
                let a = self.param_node(tape, binding, a_shared[site]);
                let b = self.gen_on_tape(tape, binding, HeadSel::B, role, site)?;
                (a, b)
            }
            AdapterIdx::SharedLora { a, b } => (
                self.param_node(tape, binding, a[site]),
                self.param_node(tape, binding, b[site]),
            ),
            AdapterIdx::IndependentLora { a, b } => (
                self.param_node(tape, binding, a[role][site]),
                self.param_node(tape, binding, b[role][site]),
            ),
            AdapterIdx::FixedA { table, b_sh } => {
                let a = tape.leaf(table[site][role].clone());
                let b = self.param_node(tape, binding, b_sh[site]);
                (a, b)
            }
        };
        binding.pairs.insert((role, site), pair);
        Ok(pair)
    }

    /// Record one sample's forward pass with this model's adapters.
    pub fn forward_sample_on_tape(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        tokens: &[u32],
        role_id: usize,
    ) -> Result<crate::backbone::ForwardNodes> {
        self.check_role(role_id)?;
        // resolve adapter pairs up front so the hook below cannot fail
        for site in 0..self.sites.len() {
            self.site_nodes(tape, binding, role_id, site)?;
        }
        let scaling = self.adapter_cfg.alpha / self.adapter_cfg.rank as f64;
        let pairs: BTreeMap<usize, (NodeId, NodeId)> = (0..self.sites.len())
            .map(|s| (s, binding.pairs[&(role_id, s)]))
            .collect();
        forward_on_tape(
            tape,
            &self.bb_cfg,
            &self.store,
            &self.layout,
            tokens,
            &mut |tape, site, x| {
                let (a, b) = pairs[&site];
                let ax = tape.matmul(x, a, MatMul::NT);
                let bax = tape.matmul(ax, b, MatMul::NT);
                Some(tape.scale(bax, scaling))
            },
        )
    }

    /// Forward pass returning concrete logits and hidden states.
    pub fn forward_infer(&self, tokens: &[u32], role_id: usize) -> Result<(Tensor, HiddenStates)> {
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let out = self.forward_sample_on_tape(&mut tape, &mut binding, tokens, role_id)?;
        Ok((
            tape.value(out.logits).clone(),
            HiddenStates {
                states: tape.value(out.hidden).clone(),
                final_index: last_content_index(tokens),
            },
        ))
    }

    /// Concrete effective (A, B) for one role at one site.
    pub fn site_matrices(&self, role: usize, site: usize) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let (a, b) = self.site_nodes(&mut tape, &mut binding, role, site)?;
        Ok((tape.value(a).clone(), tape.value(b).clone()))
    }

    /// Adapter forward for a single input vector at one site.
    pub fn site_forward(&self, x: &Tensor, site: usize, role_id: usize) -> Result<Tensor> {
        let (a, b) = self.site_matrices(role_id, site)?;
        let w0 = self.store.get(self.sites[site].w0);
        Ok(site_forward_raw(w0, &a, &b, self.adapter_cfg.alpha, x))
    }

    /// Role-embedding row (hyper-strategies only).
    pub fn role_embedding(&self, role_id: usize) -> Result<Tensor> {
        self.check_role(role_id)?;
        let hi = self
            .hyper_idx
            .as_ref()
            .ok_or_else(|| Error::Unsupported("strategy has no role embeddings".into()))?;
        Ok(self.store.get(hi.role_table).gather_rows(&[role_id]))
    }

    pub fn backbone_checksum(&self) -> [u8; 32] {
        self.store.group_checksum(ParamGroup::Backbone)
    }

    /// Trainable scalars currently in the model store (contrastive head not
    /// included; it lives in its own store).
    pub fn trainable_scalars(&self) -> usize {
        self.store.trainable_scalars(None)
    }

    /// Greedy or temperature generation; returns the continuation text.
    pub fn generate(
        &self,
        prompt: &str,
        role_id: usize,
        max_new_tokens: usize,
        decoding: &Decoding,
    ) -> Result<String> {
        self.check_role(role_id)?;
        if max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be >= 1"));
        }
        let tokenizer = ByteTokenizer::new(self.bb_cfg.context_len);
        let seq = tokenizer.tokenize(prompt);
        if seq.truncated {
            return Err(Error::validation(format!(
                "prompt length exceeds context_len {}",
                self.bb_cfg.context_len
            )));
        }
        let mut ids = seq.ids;
        let mut new_tokens = Vec::new();
        let mut rng = match decoding {
            Decoding::Greedy => None,
            Decoding::Sample { seed, .. } => Some(rng_for(*seed, "decode")),
        };
        for _ in 0..max_new_tokens {
            if ids.len() >= self.bb_cfg.context_len {
                break;
            }
            let (logits, _) = self.forward_infer(&ids, role_id)?;
            let last = logits.rows() - 1;
            let next = match decoding {
                Decoding::Greedy => crate::backbone::argmax_row(&logits, last),
                Decoding::Sample { temperature, .. } => {
                    let rng = rng.as_mut().expect("sampling rng");
                    sample_row(&logits, last, *temperature, rng)
                }
            };
            if next == EOS {
                break;
            }
            ids.push(next);
            new_tokens.push(next);
        }
        Ok(tokenizer.detokenize(&new_tokens))
    }

    /// Flattened role-specific matrices, one row per (role, site).
    /// A-side for strategies that generate A; B-side for MrsA_RspB;
    /// per-role A under IndependentLoRA.
    pub fn export_role_matrices(&self) -> Result<Vec<(usize, usize, Vec<f64>)>> {
        let mut rows = Vec::new();
        for role in 0..self.num_roles {
            for site in 0..self.sites.len() {
                let flat = match &self.adapter_idx {
                    AdapterIdx::Hycora { .. } | AdapterIdx::RspARspB | AdapterIdx::FixedA { .. } => {
                        self.site_matrices(role, site)?.0
                    }
                    AdapterIdx::MrsARspB { .. } => self.site_matrices(role, site)?.1,
                    AdapterIdx::IndependentLora { a, .. } => self.store.get(a[role][site]).clone(),
                    AdapterIdx::SharedLora { .. } => {
                        return Err(Error::Unsupported(
                            "SharedLoRA has no role-specific matrices to export".into(),
                        ))
                    }
                };
                rows.push((role, site, flat.data().to_vec()));
            }
        }
        Ok(rows)
    }

    /// CSV form: header `role_id,site_id,v0,v1,...`.
    pub fn export_role_matrices_csv(&self, mut w: impl Write) -> Result<()> {
        let rows = self.export_role_matrices()?;
        let width = rows.first().map_or(0, |r| r.2.len());
        let header: Vec<String> = (0..width).map(|i| format!("v{i}")).collect();
        writeln!(w, "role_id,site_id,{}", header.join(","))?;
        for (role, site, values) in rows {
            let vals: Vec<String> = values.iter().map(|v| format!("{v:.12e}")).collect();
            writeln!(w, "{role},{site},{}", vals.join(","))?;
        }
        Ok(())
    }

    /// Add one role. Returns the number of trainable scalars added.
    pub fn add_role(&mut self, seed: u64) -> Result<usize> {
        let before = self.trainable_scalars();
        match &mut self.adapter_idx {
            AdapterIdx::Hycora { .. } | AdapterIdx::RspARspB | AdapterIdx::MrsARspB { .. } => {
                let hi = self.hyper_idx.as_ref().expect("hyper strategies have an index");
                let mut rng = rng_for(seed, "add-role");
                let d_c = self.hyper_cfg.as_ref().expect("hyper cfg").d_c;
                let row = Tensor::randn(1, d_c, 1.0, &mut rng);
                let grown = Tensor::concat_rows(&[self.store.get(hi.role_table), &row]);
                *self.store.get_mut(hi.role_table) = grown;
            }
            AdapterIdx::IndependentLora { a, b } => {
                let role = self.num_roles;
                let mut rng = rng_for(seed, "add-role");
                let r = self.adapter_cfg.rank;
                let mut ar = Vec::new();
                let mut br = Vec::new();
                for s in &self.sites {
                    ar.push(self.store.add(
                        format!("adapter.role{role}.site{}.a", s.site_id),
                        Tensor::kaiming_uniform(r, s.d, &mut rng),
                        true,
                        ParamGroup::PerRoleAdapter,
                    ));
                    br.push(self.store.add(
                        format!("adapter.role{role}.site{}.b", s.site_id),
                        Tensor::zeros(s.m, r),
                        true,
                        ParamGroup::PerRoleAdapter,
                    ));
                }
                a.push(ar);
                b.push(br);
            }
            AdapterIdx::SharedLora { .. } => {}
            AdapterIdx::FixedA { .. } => {
                return Err(Error::Unsupported(
                    "fixed-A oracle model cannot grow roles".into(),
                ))
            }
        }
        self.num_roles += 1;
        Ok(self.trainable_scalars() - before)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// out = W0·x + (α/r)·B·(A·x), with x a 1×d row vector and r = A.rows().
pub fn site_forward_raw(w0: &Tensor, a: &Tensor, b: &Tensor, alpha: f64, x: &Tensor) -> Tensor {
    let base = x.matmul(w0, MatMul::NT);
    let ax = x.matmul(a, MatMul::NT);
    let bax = ax.matmul(b, MatMul::NT);
    base.add(&bax.scale(alpha / a.rows() as f64))
}

/// Closed-form trainable-parameter count for a strategy. The contrastive
/// head is counted for hyper-strategies when `m_proj > 0`.
pub fn count_trainable(
    strategy: AdapterStrategy,
    bb_cfg: &BackboneConfig,
    hyper_cfg: &HyperNetConfig,
    adapter_cfg: &AdapterConfig,
    m_proj: usize,
    num_roles: usize,
) -> ParamBreakdown {
    let num_sites = bb_cfg.n_layers * if bb_cfg.qkv_fused { 1 } else { 3 };
    let m = if bb_cfg.qkv_fused {
        3 * bb_cfg.d_model
    } else {
        bb_cfg.d_model
    };
    let d = bb_cfg.d_model;
    let r = adapter_cfg.rank;
    let mut cfg = hyper_cfg.clone();
    cfg.r = r;
    cfg.d = d;

    let trunk = trunk_param_count(&cfg, num_roles, num_sites);
    let head_a = head_param_count(&cfg, r * d);
    let head_b = head_param_count(&cfg, m * r);

    let (hypernet, shared_b, shared_a, per_role) = match strategy {
        AdapterStrategy::Hycora => (trunk + head_a, num_sites * m * r, 0, 0),
        AdapterStrategy::RspARspB => (trunk + head_a + head_b, 0, 0, 0),
        AdapterStrategy::MrsARspB => (trunk + head_b, 0, num_sites * r * d, 0),
        AdapterStrategy::SharedLora => (0, num_sites * m * r, num_sites * r * d, 0),
        AdapterStrategy::IndependentLora => (0, 0, 0, num_roles * num_sites * (r * d + m * r)),
    };
    let contrastive_head = if strategy.uses_hypernet() && m_proj > 0 {
        m_proj * (cfg.d_c + bb_cfg.d_model) + 2 * m_proj
    } else {
        0
    };
    ParamBreakdown {
        hypernet,
        shared_b,
        shared_a,
        per_role_adapters: per_role,
        contrastive_head,
        total_trainable: hypernet + shared_b + shared_a + per_role + contrastive_head,
        num_roles,
    }
}

fn sample_row(
    logits: &Tensor,
    row: usize,
    temperature: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> u32 {
    let r = logits.row(row);
    let t = temperature.max(1e-6);
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = r.iter().map(|v| ((v - max) / t).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, e) in exps.iter().enumerate() {
        if x < *e {
            return i as u32;
        }
        x -= e;
    }
    (exps.len() - 1) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BOS};

    fn tiny_bb_cfg() -> BackboneConfig {
        BackboneConfig {
            vocab_size: crate::backbone::VOCAB_SIZE,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: 32,
            qkv_fused: true,
        }
    }

    fn tiny_hyper_cfg() -> HyperNetConfig {
        HyperNetConfig {
            d_c: 4,
            d_l: 2,
            d_h: 8,
            n_blocks: 1,
            k: 3,
            r: 0,
            d: 0,
            residual_skip: true,
        }
    }

    fn tiny_adapter_cfg() -> AdapterConfig {
        AdapterConfig {
            rank: 2,
            alpha: 4.0,
        }
    }

    fn build(strategy: AdapterStrategy, seed: u64) -> HyperModel {
        let bb = Backbone::init(&tiny_bb_cfg(), seed).unwrap();
        attach(strategy, bb, &tiny_hyper_cfg(), tiny_adapter_cfg(), 3, seed).unwrap()
    }

    #[test]
    fn zero_init_matches_backbone_for_every_strategy() {
        let tokens = [BOS, 5, 9, 13];
        for strategy in AdapterStrategy::ALL {
            let bb = Backbone::init(&tiny_bb_cfg(), 7).unwrap();
            let (base, _) = bb.forward_infer(&tokens).unwrap();
            let model = attach(strategy, bb, &tiny_hyper_cfg(), tiny_adapter_cfg(), 3, 7).unwrap();
            for role in 0..3 {
                let (logits, _) = model.forward_infer(&tokens, role).unwrap();
                assert!(
                    base.rel_diff(&logits) < 1e-6,
                    "{} role {role} deviates at init",
                    strategy.name()
                );
            }
        }
    }

    #[test]
    fn shared_lora_ignores_role() {
        let model = build(AdapterStrategy::SharedLora, 3);
        let tokens = [BOS, 1, 2, 3];
        let (l0, _) = model.forward_infer(&tokens, 0).unwrap();
        let (l2, _) = model.forward_infer(&tokens, 2).unwrap();
        assert_eq!(l0, l2);
    }

    #[test]
    fn independent_lora_has_disjoint_pairs() {
        let bb = Backbone::init(&tiny_bb_cfg(), 3).unwrap();
        let model = attach(
            AdapterStrategy::IndependentLora,
            bb,
            &tiny_hyper_cfg(),
            tiny_adapter_cfg(),
            5,
            3,
        )
        .unwrap();
        match &model.adapter_idx {
            AdapterIdx::IndependentLora { a, b } => {
                assert_eq!(a.len(), 5);
                assert_eq!(b.len(), 5);
                let mut all: Vec<usize> =
                    a.iter().flatten().chain(b.iter().flatten()).copied().collect();
                let n = all.len();
                all.sort_unstable();
                all.dedup();
                assert_eq!(all.len(), n, "adapter slots must be disjoint");
            }
            _ => panic!("wrong layout"),
        }
    }

    #[test]
    fn site_forward_hand_example() {
        // m = d = r = 1, α = 1, W0 = [[2]], x = [3], B = [[1]], A = [[1]] → [9]
        let w0 = Tensor::from_vec(1, 1, vec![2.0]);
        let a = Tensor::from_vec(1, 1, vec![1.0]);
        let b = Tensor::from_vec(1, 1, vec![1.0]);
        let x = Tensor::from_vec(1, 1, vec![3.0]);
        let out = site_forward_raw(&w0, &a, &b, 1.0, &x);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn site_forward_zero_b_is_base() {
        let model = build(AdapterStrategy::Hycora, 5);
        let x = Tensor::from_vec(1, 16, (0..16).map(|i| i as f64 * 0.1).collect());
        let out = model.site_forward(&x, 0, 1).unwrap();
        let w0 = model.store.get(model.sites[0].w0);
        let base = x.matmul(w0, MatMul::NT);
        assert!(out.rel_diff(&base) < 1e-12);
    }

    #[test]
    fn alpha_scaling_is_linear() {
        let w0 = Tensor::from_vec(2, 2, vec![1.0, 0.5, -0.5, 2.0]);
        let a = Tensor::from_vec(1, 2, vec![0.3, -0.2]);
        let b = Tensor::from_vec(2, 1, vec![0.7, 0.9]);
        let x = Tensor::from_vec(1, 2, vec![1.5, -2.5]);
        let base = x.matmul(&w0, MatMul::NT);
        let out1 = site_forward_raw(&w0, &a, &b, 1.0, &x);
        let out2 = site_forward_raw(&w0, &a, &b, 2.0, &x);
        let d1 = out1.add(&base.scale(-1.0));
        let d2 = out2.add(&base.scale(-1.0));
        assert!(d2.rel_diff(&d1.scale(2.0)) < 1e-12);
    }

    #[test]
    fn alpha_rescale_with_b_compensation_is_invariant() {
        let mut model = build(AdapterStrategy::Hycora, 11);
        // give B real values
        let b_idx = match &model.adapter_idx {
            AdapterIdx::Hycora { b_sh } => b_sh.clone(),
            _ => unreachable!(),
        };
        let mut rng = rng_for(4, "bfill");
        for &i in &b_idx {
            let shape = model.store.get(i).shape();
            *model.store.get_mut(i) = Tensor::kaiming_uniform(shape.0, shape.1, &mut rng);
        }
        let tokens = [BOS, 3, 8, 12, 20];
        let (base, _) = model.forward_infer(&tokens, 1).unwrap();
        // α → 2α, B → B/2
        model.adapter_cfg.alpha *= 2.0;
        for &i in &b_idx {
            let halved = model.store.get(i).scale(0.5);
            *model.store.get_mut(i) = halved;
        }
        let (rescaled, _) = model.forward_infer(&tokens, 1).unwrap();
        assert!(base.rel_diff(&rescaled) < 1e-6);
    }

    #[test]
    fn count_matches_enumeration_all_strategies() {
        for strategy in AdapterStrategy::ALL {
            let model = build(strategy, 13);
            let breakdown = count_trainable(
                strategy,
                &tiny_bb_cfg(),
                &tiny_hyper_cfg(),
                &tiny_adapter_cfg(),
                0,
                3,
            );
            assert_eq!(
                model.trainable_scalars(),
                breakdown.total_trainable,
                "{}",
                strategy.name()
            );
        }
    }

    #[test]
    fn spec_worked_counts() {
        // per site with m = d = 8, r = 2: r·d + m·r = 32
        let bb_cfg = BackboneConfig {
            vocab_size: crate::backbone::VOCAB_SIZE,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_len: 16,
            qkv_fused: false,
        };
        let hyper = tiny_hyper_cfg();
        let adapter = AdapterConfig { rank: 2, alpha: 4.0 };
        let shared = count_trainable(AdapterStrategy::SharedLora, &bb_cfg, &hyper, &adapter, 0, 5);
        assert_eq!(shared.total_trainable, 6 * 32); // 6 split-qkv sites
        let ind = count_trainable(
            AdapterStrategy::IndependentLora,
            &bb_cfg,
            &hyper,
            &adapter,
            0,
            5,
        );
        assert_eq!(ind.total_trainable, 5 * 6 * 32);
    }

    #[test]
    fn role_growth_deltas() {
        let mut hy = build(AdapterStrategy::Hycora, 17);
        let delta = hy.add_role(99).unwrap();
        assert_eq!(delta, 4); // d_c

        let bb = Backbone::init(&tiny_bb_cfg(), 17).unwrap();
        let mut ind = attach(
            AdapterStrategy::IndependentLora,
            bb,
            &tiny_hyper_cfg(),
            tiny_adapter_cfg(),
            3,
            17,
        )
        .unwrap();
        let delta = ind.add_role(99).unwrap();
        let (m, d, r) = (48, 16, 2);
        assert_eq!(delta, ind.sites.len() * (r * d + m * r));
        // existing role outputs unchanged
        let tokens = [BOS, 2, 4];
        let (before, _) = ind.forward_infer(&tokens, 0).unwrap();
        ind.add_role(100).unwrap();
        let (after, _) = ind.forward_infer(&tokens, 0).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn export_rows_and_unsupported() {
        let model = build(AdapterStrategy::Hycora, 23);
        let rows = model.export_role_matrices().unwrap();
        assert_eq!(rows.len(), 3 * model.sites.len());
        assert_eq!(rows[0].2.len(), 2 * 16); // r × d flattened

        let shared = build(AdapterStrategy::SharedLora, 23);
        assert!(matches!(
            shared.export_role_matrices(),
            Err(Error::Unsupported(_))
        ));

        // MrsA_RspB starts with a zeroed B head → exported rows all zero
        let mrs = build(AdapterStrategy::MrsARspB, 23);
        let rows = mrs.export_role_matrices().unwrap();
        assert!(rows.iter().all(|r| r.2.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn generation_contracts() {
        let model = build(AdapterStrategy::Hycora, 31);
        let out = model.generate("hi", 0, 1, &Decoding::Greedy).unwrap();
        assert!(out.chars().count() <= 1);
        let s1 = model
            .generate("hi", 0, 8, &Decoding::Sample { temperature: 0.8, seed: 5 })
            .unwrap();
        let s2 = model
            .generate("hi", 0, 8, &Decoding::Sample { temperature: 0.8, seed: 5 })
            .unwrap();
        assert_eq!(s1, s2);
        let g1 = model.generate("hi", 0, 8, &Decoding::Greedy).unwrap();
        let g2 = model.generate("hi", 0, 8, &Decoding::Greedy).unwrap();
        assert_eq!(g1, g2);
        assert!(model.generate("hi", 9, 1, &Decoding::Greedy).is_err());
        let long = "x".repeat(64);
        assert!(model.generate(&long, 0, 1, &Decoding::Greedy).is_err());
    }

    #[test]
    fn fixed_a_oracle_matches_shared_lora() {
        let rank = 2;
        let adapter_cfg = AdapterConfig { rank, alpha: 4.0 };
        let bb1 = Backbone::init(&tiny_bb_cfg(), 41).unwrap();
        let bb2 = Backbone::init(&tiny_bb_cfg(), 41).unwrap();
        let num_roles = 3;
        let mut rng = rng_for(8, "table");
        let sites = bb1.sites();
        let table: Vec<Vec<Tensor>> = sites
            .iter()
            .map(|s| {
                (0..num_roles)
                    .map(|_| Tensor::kaiming_uniform(rank, s.d, &mut rng))
                    .collect()
            })
            .collect();
        let mut fixed = attach_fixed_a(bb1, adapter_cfg, table.clone(), num_roles).unwrap();
        let mut shared = attach(
            AdapterStrategy::SharedLora,
            bb2,
            &tiny_hyper_cfg(),
            adapter_cfg,
            num_roles,
            41,
        )
        .unwrap();
        // same nonzero B everywhere
        let mut rng2 = rng_for(9, "bvals");
        let b_val = Tensor::kaiming_uniform(sites[0].m, rank, &mut rng2);
        for site in 0..sites.len() {
            let fi = fixed.store.find(&format!("adapter.site{site}.b_sh")).unwrap();
            *fixed.store.get_mut(fi) = b_val.clone();
            let sb = shared.store.find(&format!("adapter.site{site}.b_sh")).unwrap();
            *shared.store.get_mut(sb) = b_val.clone();
        }
        let tokens = [BOS, 7, 14, 21];
        for role in 0..num_roles {
            // point SharedLoRA's A at this role's lookup entries
            for site in 0..sites.len() {
                let sa = shared
                    .store
                    .find(&format!("adapter.site{site}.a_shared"))
                    .unwrap();
                *shared.store.get_mut(sa) = table[site][role].clone();
            }
            let (lf, _) = fixed.forward_infer(&tokens, role).unwrap();
            let (ls, _) = shared.forward_infer(&tokens, role).unwrap();
            assert!(lf.rel_diff(&ls) < 1e-6, "role {role} mismatch");
        }
    }
}
