//! Hyper-contrastive learning: role/response projections, the supervised
//! contrastive loss over a batch, and the linear λ ramp schedule.
//!
//! For each sample the role embedding and the final-token hidden state are
//! projected into a common space; the loss pulls a role's projection toward
//! projections of that role's responses and away from other roles'.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::rng_for;
use crate::tape::{NodeId, StoreKind, Tape};
use crate::tensor::{MatMul, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Temperature τ.
    pub tau: f64,
    /// Projection dimension.
    pub m_proj: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Epoch where the ramp starts.
    pub ep_start: f64,
    /// Epoch where the ramp reaches lambda_max.
    pub ep_end: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            m_proj: 32,
            lambda_min: 0.0,
            lambda_max: 0.1,
            ep_start: 2.0,
            ep_end: 6.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be > 0"));
        }
        if self.m_proj == 0 {
            return Err(Error::config("m_proj must be >= 1"));
        }
        if self.lambda_min < 0.0 || self.lambda_max < self.lambda_min {
            return Err(Error::config("need lambda_max >= lambda_min >= 0"));
        }
        if self.ep_end <= self.ep_start {
            return Err(Error::config("need ep_end > ep_start"));
        }
        Ok(())
    }
}

/// The trainable projection head. W_r maps role embeddings (d_c), W_t maps
/// final-token hidden states (d_model); both into m_proj dimensions.
#[derive(Debug, Clone)]
pub struct ContrastiveHead {
    pub store: ParamStore,
    pub w_r: usize,
    pub b_r: usize,
    pub w_t: usize,
    pub b_t: usize,
    pub m_proj: usize,
}

impl ContrastiveHead {
    pub fn init(m_proj: usize, d_c: usize, d_model: usize, seed: u64) -> Result<ContrastiveHead> {
        if m_proj == 0 || d_c == 0 || d_model == 0 {
            return Err(Error::config("contrastive head dimensions must be >= 1"));
        }
        let mut rng = rng_for(seed, "contrastive-head");
        let mut store = ParamStore::new(StoreKind::Head);
        let g = ParamGroup::ContrastiveHead;
        let w_r = store.add(
            "head.w_r",
            Tensor::kaiming_uniform(m_proj, d_c, &mut rng),
            true,
            g,
        );
        let b_r = store.add("head.b_r", Tensor::zeros(1, m_proj), true, g);
        let w_t = store.add(
            "head.w_t",
            Tensor::kaiming_uniform(m_proj, d_model, &mut rng),
            true,
            g,
        );
        let b_t = store.add("head.b_t", Tensor::zeros(1, m_proj), true, g);
        Ok(ContrastiveHead {
            store,
            w_r,
            b_r,
            w_t,
            b_t,
            m_proj,
        })
    }

    /// z_r = W_r·e_c + b_r for each row of `e_c`.
    pub fn project_role(&self, e_c: &Tensor) -> Result<Tensor> {
        let w = self.store.get(self.w_r);
        if e_c.cols() != w.cols() {
            return Err(Error::config(format!(
                "role embedding dim {} != head input dim {}",
                e_c.cols(),
                w.cols()
            )));
        }
        Ok(e_c.matmul(w, MatMul::NT).add_row(self.store.get(self.b_r)))
    }

    /// z_t = W_t·e_t + b_t for each row of `e_t`.
    pub fn project_response(&self, e_t: &Tensor) -> Result<Tensor> {
        let w = self.store.get(self.w_t);
        if e_t.cols() != w.cols() {
            return Err(Error::config(format!(
                "response state dim {} != head input dim {}",
                e_t.cols(),
                w.cols()
            )));
        }
        Ok(e_t.matmul(w, MatMul::NT).add_row(self.store.get(self.b_t)))
    }

    pub fn trainable_scalars(&self) -> usize {
        self.store.trainable_scalars(None)
    }
}

/// Positive-pair weights for the loss: w[i][p] = −1/|P(i)| when role(p) =
/// role(i) (P(i) includes i itself), else 0.
fn positive_weights(role_ids: &[usize]) -> Tensor {
    let n = role_ids.len();
    let mut w = Tensor::zeros(n, n);
    for i in 0..n {
        let count = role_ids.iter().filter(|r| **r == role_ids[i]).count();
        for p in 0..n {
            if role_ids[p] == role_ids[i] {
                w.set(i, p, -1.0 / count as f64);
            }
        }
    }
    w
}

/// Record the contrastive loss on a tape from projected z_r, z_t nodes
/// (n × m_proj each). Cosine similarities are taken between normalized
/// rows; each anchor's row of logits is log-softmax-stabilized.
pub fn contrastive_loss_on_tape(
    tape: &mut Tape,
    z_r: NodeId,
    z_t: NodeId,
    role_ids: &[usize],
    tau: f64,
) -> NodeId {
    let zr_n = tape.normalize_rows(z_r);
    let zt_n = tape.normalize_rows(z_t);
    let sim = tape.matmul(zr_n, zt_n, MatMul::NT);
    let logits = tape.scale(sim, 1.0 / tau);
    let logsm = tape.log_softmax_rows(logits);
    tape.weighted_sum(logsm, positive_weights(role_ids))
}

/// Stabilized contrastive loss over concrete projection batches.
pub fn contrastive_loss(
    z_r: &Tensor,
    z_t: &Tensor,
    role_ids: &[usize],
    tau: f64,
) -> Result<f64> {
    if z_r.rows() != z_t.rows() || z_r.rows() != role_ids.len() {
        return Err(Error::config("batch sizes disagree"));
    }
    if z_r.rows() == 0 {
        return Err(Error::config("empty batch"));
    }
    if tau <= 0.0 {
        return Err(Error::config("tau must be > 0"));
    }
    let mut tape = Tape::new();
    let zr = tape.leaf(z_r.clone());
    let zt = tape.leaf(z_t.clone());
    let loss = contrastive_loss_on_tape(&mut tape, zr, zt, role_ids, tau);
    Ok(tape.value(loss).item())
}

/// Direct transcription of the loss definition, with no numerical
/// stabilization. Test oracle for the implementation above.
pub fn contrastive_loss_naive(z_r: &Tensor, z_t: &Tensor, role_ids: &[usize], tau: f64) -> f64 {
    let n = role_ids.len();
    let cos = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut total = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| role_ids[p] == role_ids[i]).collect();
        let denom: f64 = (0..n)
            .map(|j| (cos(z_r.row(i), z_t.row(j)) / tau).exp())
            .sum();
        let mut inner = 0.0;
        for &p in &positives {
            inner += ((cos(z_r.row(i), z_t.row(p)) / tau).exp() / denom).ln();
        }
        total -= inner / positives.len() as f64;
    }
    total
}

/// λ at an epoch: linear ramp from λ_min to λ_max between ep_start and
/// ep_end, clamped at both ends.
pub fn lambda_at(epoch: f64, cfg: &ContrastiveConfig) -> f64 {
    let t = ((epoch - cfg.ep_start) / (cfg.ep_end - cfg.ep_start)).clamp(0.0, 1.0);
    cfg.lambda_min + (cfg.lambda_max - cfg.lambda_min) * t
}
