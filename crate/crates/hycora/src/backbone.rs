//! Frozen decoder-only causal transformer with a byte-level tokenizer.
//!
//! The backbone is randomly initialized, optionally pre-fit on the corpus as
//! a plain language model, then frozen; adapters attach to the attention
//! projection weights (the fused query-key-value matrix by default). The
//! forward pass is recorded on a [`Tape`], with an adapter hook injecting
//! the low-rank delta at each site.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::rng_for;
use crate::tape::{NodeId, StoreKind, Tape};
use crate::tensor::{MatMul, Tensor};

pub const BOS: u32 = 256;
pub const PAD: u32 = 257;
pub const EOS: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

const LN_EPS: f64 = 1e-5;

fn default_qkv_fused() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    /// One fused query-key-value projection per layer (three separate
    /// projections, and three adapter sites per layer, when false).
    #[serde(default = "default_qkv_fused")]
    pub qkv_fused: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context_len: 256,
            qkv_fused: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < 8 {
            return Err(Error::config("context_len must be >= 8"));
        }
        if self.vocab_size < 258 {
            return Err(Error::config("vocab_size must be >= 258 (256 bytes + BOS + PAD)"));
        }
        if self.n_layers == 0 {
            return Err(Error::config("n_layers must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Set when the input exceeded context_len and was truncated.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ByteTokenizer {
    pub context_len: usize,
}

impl ByteTokenizer {
    pub fn new(context_len: usize) -> Self {
        ByteTokenizer { context_len }
    }

    /// BOS followed by the raw bytes; truncates to context_len with a flag.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(BOS);
        ids.extend(text.bytes().map(|b| b as u32));
        let truncated = ids.len() > self.context_len;
        if truncated {
            ids.truncate(self.context_len);
        }
        TokenSequence { ids, truncated }
    }

    /// Bytes back to text; special tokens are skipped, invalid UTF-8 is
    /// replaced (generated sequences are arbitrary bytes).
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Per-token hidden states of one sequence.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    /// T × d_model, one row per position.
    pub states: Tensor,
    /// Index of the last non-pad position.
    pub final_index: usize,
}

impl HiddenStates {
    pub fn final_token_state(&self) -> &[f64] {
        self.states.row(self.final_index)
    }
}

/// Last non-pad index of a (possibly right-padded) sequence.
pub fn last_content_index(tokens: &[u32]) -> usize {
    let mut i = tokens.len();
    while i > 0 && tokens[i - 1] == PAD {
        i -= 1;
    }
    i.saturating_sub(1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QkvIdx {
    Fused { w: usize, b: usize },
    Split { w: [usize; 3], b: [usize; 3] },
}

#[derive(Debug, Clone)]
pub struct LayerIdx {
    pub ln1: (usize, usize),
    pub qkv: QkvIdx,
    pub attn_out: (usize, usize),
    pub ln2: (usize, usize),
    pub mlp_w1: usize,
    pub mlp_b1: usize,
    pub mlp_w2: usize,
    pub mlp_b2: usize,
}

#[derive(Debug, Clone)]
pub struct BackboneLayout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerIdx>,
    pub final_ln: (usize, usize),
    pub head_w: usize,
}

/// One adapted weight matrix: which layer, which projection, and its shape.
#[derive(Debug, Clone)]
pub struct SiteSpec {
    pub site_id: usize,
    pub layer: usize,
    /// 0 = fused qkv; 0/1/2 = q/k/v under split projections.
    pub proj: usize,
    /// Output rows of W0 at this site.
    pub m: usize,
    /// Input columns of W0 at this site.
    pub d: usize,
    /// Store index of the frozen W0.
    pub w0: usize,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub store: ParamStore,
    pub layout: BackboneLayout,
}

impl Backbone {
    /// Random init; all tensors are added frozen. A pre-fit pass may
    /// temporarily mark them trainable before freezing again.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<Backbone> {
        cfg.validate()?;
        let mut rng = rng_for(seed, "backbone");
        let mut store = ParamStore::new(StoreKind::Model);
        let d = cfg.d_model;
        let g = ParamGroup::Backbone;

        let tok_emb = store.add(
            "backbone.tok_emb",
            Tensor::randn(cfg.vocab_size, d, 0.1, &mut rng),
            false,
            g,
        );
        let pos_emb = store.add(
            "backbone.pos_emb",
            Tensor::randn(cfg.context_len, d, 0.1, &mut rng),
            false,
            g,
        );

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let ln1 = (
                store.add(format!("backbone.layer{l}.ln1.g"), ones(d), false, g),
                store.add(format!("backbone.layer{l}.ln1.b"), Tensor::zeros(1, d), false, g),
            );
            let qkv = if cfg.qkv_fused {
                QkvIdx::Fused {
                    w: store.add(
                        format!("backbone.layer{l}.qkv.w"),
                        Tensor::kaiming_uniform(3 * d, d, &mut rng),
                        false,
                        g,
                    ),
                    b: store.add(
                        format!("backbone.layer{l}.qkv.b"),
                        Tensor::zeros(1, 3 * d),
                        false,
                        g,
                    ),
                }
            } else {
                let names = ["q", "k", "v"];
                let mut w = [0; 3];
                let mut b = [0; 3];
                for (i, name) in names.iter().enumerate() {
                    w[i] = store.add(
                        format!("backbone.layer{l}.{name}.w"),
                        Tensor::kaiming_uniform(d, d, &mut rng),
                        false,
                        g,
                    );
                    b[i] = store.add(
                        format!("backbone.layer{l}.{name}.b"),
                        Tensor::zeros(1, d),
                        false,
                        g,
                    );
                }
                QkvIdx::Split { w, b }
            };
            let attn_out = (
                store.add(
                    format!("backbone.layer{l}.attn_out.w"),
                    Tensor::kaiming_uniform(d, d, &mut rng),
                    false,
                    g,
                ),
                store.add(
                    format!("backbone.layer{l}.attn_out.b"),
                    Tensor::zeros(1, d),
                    false,
                    g,
                ),
            );
            let ln2 = (
                store.add(format!("backbone.layer{l}.ln2.g"), ones(d), false, g),
                store.add(format!("backbone.layer{l}.ln2.b"), Tensor::zeros(1, d), false, g),
            );
            let mlp_w1 = store.add(
                format!("backbone.layer{l}.mlp.w1"),
                Tensor::kaiming_uniform(4 * d, d, &mut rng),
                false,
                g,
            );
            let mlp_b1 = store.add(
                format!("backbone.layer{l}.mlp.b1"),
                Tensor::zeros(1, 4 * d),
                false,
                g,
            );
            let mlp_w2 = store.add(
                format!("backbone.layer{l}.mlp.w2"),
                Tensor::kaiming_uniform(d, 4 * d, &mut rng),
                false,
                g,
            );
            let mlp_b2 = store.add(
                format!("backbone.layer{l}.mlp.b2"),
                Tensor::zeros(1, d),
                false,
                g,
            );
            layers.push(LayerIdx {
                ln1,
                qkv,
                attn_out,
                ln2,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
            });
        }
        let final_ln = (
            store.add("backbone.final_ln.g", ones(d), false, g),
            store.add("backbone.final_ln.b", Tensor::zeros(1, d), false, g),
        );
        let head_w = store.add(
            "backbone.head.w",
            Tensor::kaiming_uniform(cfg.vocab_size, d, &mut rng),
            false,
            g,
        );

        Ok(Backbone {
            cfg: cfg.clone(),
            store,
            layout: BackboneLayout {
                tok_emb,
                pos_emb,
                layers,
                final_ln,
                head_w,
            },
        })
    }

    /// Adapter sites in layer order: the fused qkv matrix of each layer, or
    /// the three separate projections when qkv is split.
    pub fn sites(&self) -> Vec<SiteSpec> {
        let d = self.cfg.d_model;
        let mut sites = Vec::new();
        for (l, layer) in self.layout.layers.iter().enumerate() {
            match &layer.qkv {
                QkvIdx::Fused { w, .. } => sites.push(SiteSpec {
                    site_id: sites.len(),
                    layer: l,
                    proj: 0,
                    m: 3 * d,
                    d,
                    w0: *w,
                }),
                QkvIdx::Split { w, .. } => {
                    for (p, wi) in w.iter().enumerate() {
                        sites.push(SiteSpec {
                            site_id: sites.len(),
                            layer: l,
                            proj: p,
                            m: d,
                            d,
                            w0: *wi,
                        });
                    }
                }
            }
        }
        sites
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for i in 0..self.store.len() {
            if self.store.entry(i).group == ParamGroup::Backbone {
                self.store.set_trainable(i, trainable);
            }
        }
    }

    pub fn checksum(&self) -> [u8; 32] {
        self.store.group_checksum(ParamGroup::Backbone)
    }

    /// Forward pass without adapters.
    pub fn forward_infer(&self, tokens: &[u32]) -> Result<(Tensor, HiddenStates)> {
        let mut tape = Tape::new();
        let out = forward_on_tape(
            &mut tape,
            &self.cfg,
            &self.store,
            &self.layout,
            tokens,
            &mut |_, _, _| None,
        )?;
        Ok((
            tape.value(out.logits).clone(),
            HiddenStates {
                states: tape.value(out.hidden).clone(),
                final_index: last_content_index(tokens),
            },
        ))
    }
}

fn ones(d: usize) -> Tensor {
    Tensor::from_vec(1, d, vec![1.0; d])
}

/// Nodes of one recorded forward pass.
pub struct ForwardNodes {
    /// T × vocab.
    pub logits: NodeId,
    /// T × d_model after the final layer norm.
    pub hidden: NodeId,
}

/// Adapter hook: given (tape, site_id, normed activations T×d), return the
/// T×m delta to add to that projection's output, or None for no adapter.
pub type AdapterHook<'a> = dyn FnMut(&mut Tape, usize, NodeId) -> Option<NodeId> + 'a;

/// Record the full transformer forward pass for one token sequence.
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    store: &ParamStore,
    layout: &BackboneLayout,
    tokens: &[u32],
    adapter: &mut AdapterHook,
) -> Result<ForwardNodes> {
    if tokens.is_empty() {
        return Err(Error::validation("empty token sequence"));
    }
    if tokens.len() > cfg.context_len {
        return Err(Error::validation(format!(
            "sequence length {} exceeds context_len {}",
            tokens.len(),
            cfg.context_len
        )));
    }
    let t_len = tokens.len();
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    for &id in &ids {
        if id >= cfg.vocab_size {
            return Err(Error::lookup(format!("token id {id} out of vocabulary")));
        }
    }

    let tok_emb = store.tape_node(tape, layout.tok_emb);
    let pos_emb = store.tape_node(tape, layout.pos_emb);
    let tok = tape.gather_rows(tok_emb, &ids);
    let positions: Vec<usize> = (0..t_len).collect();
    let pos = tape.gather_rows(pos_emb, &positions);
    let mut x = tape.add(tok, pos);

    let mut site_id = 0;
    for layer in &layout.layers {
        let ln1_g = store.tape_node(tape, layer.ln1.0);
        let ln1_b = store.tape_node(tape, layer.ln1.1);
        let h = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS);

        // projection(s) with adapter deltas
        let qkv = match &layer.qkv {
            QkvIdx::Fused { w, b } => {
                let wn = store.tape_node(tape, *w);
                let bn = store.tape_node(tape, *b);
                let base = tape.matmul(h, wn, MatMul::NT);
                let base = tape.add_row(base, bn);
                let out = match adapter(tape, site_id, h) {
                    Some(delta) => tape.add(base, delta),
                    None => base,
                };
                site_id += 1;
                out
            }
            QkvIdx::Split { w, b } => {
                let mut parts = Vec::with_capacity(3);
                for i in 0..3 {
                    let wn = store.tape_node(tape, w[i]);
                    let bn = store.tape_node(tape, b[i]);
                    let base = tape.matmul(h, wn, MatMul::NT);
                    let base = tape.add_row(base, bn);
                    let out = match adapter(tape, site_id, h) {
                        Some(delta) => tape.add(base, delta),
                        None => base,
                    };
                    site_id += 1;
                    parts.push(out);
                }
                tape.concat_cols(&parts)
            }
        };

        // multi-head causal attention
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let q = tape.slice_cols(qkv, head * dh, (head + 1) * dh);
            let k = tape.slice_cols(qkv, d + head * dh, d + (head + 1) * dh);
            let v = tape.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh);
            let scores = tape.matmul(q, k, MatMul::NT);
            let scores = tape.scale(scores, scale);
            let probs = tape.causal_softmax(scores);
            heads.push(tape.matmul(probs, v, MatMul::NN));
        }
        let ctx = tape.concat_cols(&heads);
        let out_w = store.tape_node(tape, layer.attn_out.0);
        let out_b = store.tape_node(tape, layer.attn_out.1);
        let attn = tape.matmul(ctx, out_w, MatMul::NT);
        let attn = tape.add_row(attn, out_b);
        x = tape.add(x, attn);

        let ln2_g = store.tape_node(tape, layer.ln2.0);
        let ln2_b = store.tape_node(tape, layer.ln2.1);
        let h2 = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS);
        let w1 = store.tape_node(tape, layer.mlp_w1);
        let b1 = store.tape_node(tape, layer.mlp_b1);
        let w2 = store.tape_node(tape, layer.mlp_w2);
        let b2 = store.tape_node(tape, layer.mlp_b2);
        let m = tape.matmul(h2, w1, MatMul::NT);
        let m = tape.add_row(m, b1);
        let m = tape.relu(m);
        let m = tape.matmul(m, w2, MatMul::NT);
        let m = tape.add_row(m, b2);
        x = tape.add(x, m);
    }

    let fg = store.tape_node(tape, layout.final_ln.0);
    let fb = store.tape_node(tape, layout.final_ln.1);
    let hidden = tape.layer_norm(x, fg, fb, LN_EPS);
    let head_w = store.tape_node(tape, layout.head_w);
    let logits = tape.matmul(hidden, head_w, MatMul::NT);

    Ok(ForwardNodes { logits, hidden })
}

/// Deterministic argmax over one logits row (ties break to the lowest id).
pub fn argmax_row(logits: &Tensor, row: usize) -> u32 {
    let r = logits.row(row);
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in r.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: 32,
            qkv_fused: true,
        }
    }

    #[test]
    fn tokenize_empty_is_bos() {
        let tk = ByteTokenizer::new(32);
        let t = tk.tokenize("");
        assert_eq!(t.ids, vec![BOS]);
        assert!(!t.truncated);
    }

    #[test]
    fn tokenize_bytes_identity() {
        let tk = ByteTokenizer::new(32);
        let t = tk.tokenize("ab");
        assert_eq!(t.ids, vec![BOS, 97, 98]);
    }

    #[test]
    fn tokenize_truncates_with_flag() {
        let tk = ByteTokenizer::new(8);
        let t = tk.tokenize("abcdefghij");
        assert!(t.truncated);
        assert_eq!(t.ids.len(), 8);
    }

    proptest! {
        #[test]
        fn tokenize_round_trips(s in "\\PC{0,100}") {
            let tk = ByteTokenizer::new(4096);
            let t = tk.tokenize(&s);
            prop_assert!(!t.truncated);
            prop_assert_eq!(tk.detokenize(&t.ids), s);
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let bb = Backbone::init(&tiny_cfg(), 5).unwrap();
        let tokens = [BOS, 10, 20, 30];
        let (logits, hidden) = bb.forward_infer(&tokens).unwrap();
        assert_eq!(logits.shape(), (4, VOCAB_SIZE));
        assert_eq!(hidden.states.shape(), (4, 16));
        assert_eq!(hidden.final_index, 3);
        let (logits2, _) = bb.forward_infer(&tokens).unwrap();
        assert_eq!(logits, logits2);
    }

    #[test]
    fn causality_perturbation_probe() {
        let bb = Backbone::init(&tiny_cfg(), 5).unwrap();
        let tokens = [BOS, 10, 20, 30, 40, 50];
        let (base, _) = bb.forward_infer(&tokens).unwrap();
        for t in 1..tokens.len() {
            let mut perturbed = tokens;
            perturbed[t] = 99;
            let (pl, _) = bb.forward_infer(&perturbed).unwrap();
            for pos in 0..t {
                for c in 0..VOCAB_SIZE {
                    assert!(
                        (base.at(pos, c) - pl.at(pos, c)).abs() < 1e-12,
                        "position {pos} changed after perturbing {t}"
                    );
                }
            }
            // the perturbed position itself must change
            let changed = (0..VOCAB_SIZE).any(|c| (base.at(t, c) - pl.at(t, c)).abs() > 1e-9);
            assert!(changed);
        }
    }

    #[test]
    fn final_token_state_skips_padding() {
        let bb = Backbone::init(&tiny_cfg(), 5).unwrap();
        let tokens = [BOS, 10, 20, PAD, PAD];
        let (_, hidden) = bb.forward_infer(&tokens).unwrap();
        assert_eq!(hidden.final_index, 2);
        let (_, unpadded) = bb.forward_infer(&[BOS, 10, 20]).unwrap();
        let a = hidden.final_token_state();
        let b = unpadded.final_token_state();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "pad rows leaked into content state");
        }
    }

    #[test]
    fn sequences_over_context_rejected() {
        let bb = Backbone::init(&tiny_cfg(), 5).unwrap();
        let long: Vec<u32> = (0..40).map(|i| (i % 200) as u32).collect();
        assert!(bb.forward_infer(&long).is_err());
    }

    #[test]
    fn split_qkv_enumerates_three_sites_per_layer() {
        let mut cfg = tiny_cfg();
        cfg.qkv_fused = false;
        cfg.n_layers = 2;
        let bb = Backbone::init(&cfg, 5).unwrap();
        let sites = bb.sites();
        assert_eq!(sites.len(), 6);
        assert!(sites.iter().all(|s| s.m == 16 && s.d == 16));
        let fused = Backbone::init(&tiny_cfg(), 5).unwrap();
        assert_eq!(fused.sites().len(), 1);
        assert_eq!(fused.sites()[0].m, 48);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.d_model = 15;
        assert!(Backbone::init(&cfg, 1).is_err());
        let mut cfg = tiny_cfg();
        cfg.context_len = 4;
        assert!(Backbone::init(&cfg, 1).is_err());
        let mut cfg = tiny_cfg();
        cfg.vocab_size = 100;
        assert!(Backbone::init(&cfg, 1).is_err());
    }

    #[test]
    fn checksum_stable_and_sensitive() {
        let bb = Backbone::init(&tiny_cfg(), 5).unwrap();
        let c1 = bb.checksum();
        let c2 = bb.checksum();
        assert_eq!(c1, c2);
        let mut bb2 = Backbone::init(&tiny_cfg(), 5).unwrap();
        bb2.store.get_mut(0).data_mut()[0] += 1.0;
        assert_ne!(bb2.checksum(), c1);
    }
}
