//! Decoder-only transformer shared by the next-token model and the
//! second-to-last-token refiner.
//!
//! GPT-2 layout: learned absolute positions, pre-norm blocks, tanh-GELU MLP
//! with 4x expansion, final layer norm, output head tied to the token
//! embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub emb_dim: usize,
    pub block_size: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { n_layer: 4, n_head: 4, emb_dim: 128, block_size: 64, vocab_size: 0, dropout: 0.0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ModelConfig(m));
        if self.n_layer == 0 || self.n_head == 0 || self.emb_dim == 0 || self.block_size == 0 || self.vocab_size == 0 {
            return bad(format!("all sizes must be >= 1: {self:?}"));
        }
        if !self.emb_dim.is_multiple_of(self.n_head) {
            return bad(format!("emb_dim {} not divisible by n_head {}", self.emb_dim, self.n_head));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.emb_dim / self.n_head
    }
}

/// Exact number of learned scalars. The output head shares the token
/// embedding and is not counted again.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.emb_dim as u64;
    let per_layer = 12 * d * d + 13 * d;
    cfg.vocab_size as u64 * d + cfg.block_size as u64 * d + cfg.n_layer as u64 * per_layer + 2 * d
}

pub(crate) const PER_LAYER: usize = 12;

pub(crate) mod slot {
    pub const WTE: usize = 0;
    pub const WPE: usize = 1;
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const ATTN_W: usize = 2;
    pub const ATTN_B: usize = 3;
    pub const ATTN_PROJ_W: usize = 4;
    pub const ATTN_PROJ_B: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const FC_W: usize = 8;
    pub const FC_B: usize = 9;
    pub const MLP_PROJ_W: usize = 10;
    pub const MLP_PROJ_B: usize = 11;
}

pub(crate) fn layer_index(layer: usize, s: usize) -> usize {
    2 + layer * PER_LAYER + s
}

pub(crate) fn final_ln(cfg: &ModelConfig) -> (usize, usize) {
    let base = 2 + cfg.n_layer * PER_LAYER;
    (base, base + 1)
}

/// Names and shapes of every parameter tensor in declared order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, t) = (cfg.vocab_size, cfg.emb_dim, cfg.block_size);
    let mut out = vec![("wte".to_string(), vec![v, d]), ("wpe".to_string(), vec![t, d])];
    for l in 0..cfg.n_layer {
        let p = |n: &str| format!("h.{l}.{n}");
        out.extend([
            (p("ln_1.weight"), vec![d]),
            (p("ln_1.bias"), vec![d]),
            (p("attn.c_attn.weight"), vec![d, 3 * d]),
            (p("attn.c_attn.bias"), vec![3 * d]),
            (p("attn.c_proj.weight"), vec![d, d]),
            (p("attn.c_proj.bias"), vec![d]),
            (p("ln_2.weight"), vec![d]),
            (p("ln_2.bias"), vec![d]),
            (p("mlp.c_fc.weight"), vec![d, 4 * d]),
            (p("mlp.c_fc.bias"), vec![4 * d]),
            (p("mlp.c_proj.weight"), vec![4 * d, d]),
            (p("mlp.c_proj.bias"), vec![d]),
        ]);
    }
    out.push(("ln_f.weight".to_string(), vec![d]));
    out.push(("ln_f.bias".to_string(), vec![d]));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams<F = f32> {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> TransformerParams<F> {
    /// GPT-2 initialization: N(0, 0.02) weights, residual projections scaled
    /// by `1/sqrt(2 n_layer)`, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layer as f64).sqrt();
        let layout = param_layout(&config);
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let t = if name.ends_with("ln_1.weight") || name.ends_with("ln_2.weight") || name == "ln_f.weight" {
                Tensor::full(shape, F::one())
            } else if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let s = if name.ends_with("c_proj.weight") { resid_std } else { std };
                let dist = Normal::new(0.0, s).expect("valid std");
                let numel = shape.iter().product();
                let data = (0..numel).map(|_| F::from_f64(dist.sample(&mut rng))).collect();
                Tensor::new(shape, data)?
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(TransformerParams { config, names, tensors })
    }

    pub fn num_scalars(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    /// Whether AdamW weight decay applies (matrices and embeddings only).
    pub fn decays(&self, i: usize) -> bool {
        self.tensors[i].shape().len() >= 2
    }

    pub fn cast<G: Scalar>(&self) -> TransformerParams<G> {
        TransformerParams { config: self.config, names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    /// Registers every parameter as a gradient-receiving leaf of `g`.
    pub fn bind(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }
}

/// Logits `[batch, T, vocab_size]`.
#[derive(Clone, Debug)]
pub struct ModelOutput<F = f32> {
    pub logits: Tensor<F>,
}

impl<F: Scalar> ModelOutput<F> {
    /// Logit row for sequence `b`, position `t`.
    pub fn row(&self, b: usize, t: usize) -> &[F] {
        let s = self.logits.shape();
        let v = s[2];
        let start = (b * s[1] + t) * v;
        &self.logits.data()[start..start + v]
    }
}

/// Options for a graph forward pass.
pub struct ForwardOpts<'r> {
    pub causal: bool,
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        ForwardOpts { causal: true, dropout_rng: None }
    }
}

/// Records the forward pass for `ids` (`batch` rows of equal length) on `g`
/// and returns the logits node `[batch * T, V]`.
pub fn forward_graph<F: Scalar>(g: &mut Graph<F>, cfg: &ModelConfig, p: &[Var], ids: &[u32], batch: usize, mut opts: ForwardOpts<'_>) -> Result<Var> {
    if batch == 0 || !ids.len().is_multiple_of(batch) {
        return Err(Error::invalid("forward", format!("{} ids do not split into {batch} rows", ids.len())));
    }
    let t = ids.len() / batch;
    if t == 0 || t > cfg.block_size {
        return Err(Error::invalid("forward", format!("sequence length {t} outside 1..={}", cfg.block_size)));
    }
    let (d, h) = (cfg.emb_dim, cfg.n_head);
    let n = batch * t;
    let p_drop = if opts.dropout_rng.is_some() { cfg.dropout } else { 0.0 };

    let tok = g.embedding_lookup(p[slot::WTE], ids)?;
    let positions: Vec<u32> = (0..t as u32).collect();
    let pos = g.embedding_lookup(p[slot::WPE], &positions)?;
    let tok = g.reshape(tok, &[batch, t, d])?;
    let x = g.add(tok, pos)?;
    let mut x = g.reshape(x, &[n, d])?;
    if let Some(rng) = opts.dropout_rng.as_deref_mut() {
        x = g.dropout(x, p_drop, rng)?;
    }

    for l in 0..cfg.n_layer {
        let w = |s| p[layer_index(l, s)];
        let hn = g.layer_norm(x, w(slot::LN1_G), w(slot::LN1_B))?;
        let qkv = g.linear(hn, w(slot::ATTN_W), w(slot::ATTN_B))?;
        let y = g.self_attention(qkv, batch, h, opts.causal)?;
        let mut y = g.linear(y, w(slot::ATTN_PROJ_W), w(slot::ATTN_PROJ_B))?;
        if let Some(rng) = opts.dropout_rng.as_deref_mut() {
            y = g.dropout(y, p_drop, rng)?;
        }
        x = g.add(x, y)?;

        let hn = g.layer_norm(x, w(slot::LN2_G), w(slot::LN2_B))?;
        let f = g.linear(hn, w(slot::FC_W), w(slot::FC_B))?;
        let f = g.gelu(f)?;
        let mut f = g.linear(f, w(slot::MLP_PROJ_W), w(slot::MLP_PROJ_B))?;
        if let Some(rng) = opts.dropout_rng.as_deref_mut() {
            f = g.dropout(f, p_drop, rng)?;
        }
        x = g.add(x, f)?;
    }
    let (lg, lb) = final_ln(cfg);
    let x = g.layer_norm(x, p[lg], p[lb])?;
    g.matmul_t(x, p[slot::WTE])
}

/// Logits for `ids` laid out as `batch` rows.
pub fn forward<F: Scalar>(params: &TransformerParams<F>, ids: &[u32], batch: usize, causal: bool) -> Result<ModelOutput<F>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| g.constant(t.clone())).collect();
    let out = forward_graph(&mut g, &params.config, &vars, ids, batch, ForwardOpts { causal, dropout_rng: None })?;
    let t = ids.len() / batch;
    let logits = g.value(out).clone().reshape(vec![batch, t, params.config.vocab_size])?;
    Ok(ModelOutput { logits })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { n_layer: 2, n_head: 2, emb_dim: 8, block_size: 4, vocab_size: 8, dropout: 0.0 }
    }

    #[test]
    fn init_is_deterministic_and_counts_match() {
        let a = TransformerParams::<f32>::init(tiny(), 7).unwrap();
        let b = TransformerParams::<f32>::init(tiny(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_scalars(), count_params(&tiny()));
        let c = TransformerParams::<f32>::init(tiny(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_zero_layer_count() {
        let cfg = ModelConfig { n_layer: 0, ..tiny() };
        assert_eq!(count_params(&cfg), (8 * 8 + 4 * 8 + 2 * 8) as u64);
    }

    #[test]
    fn per_layer_term_quadruples_with_width() {
        let at = |d: usize| {
            let c = ModelConfig { emb_dim: d, vocab_size: 1, block_size: 1, n_layer: 1, ..tiny() };
            count_params(&c) as f64
        };
        let ratio = at(2048) / at(1024);
        assert!((ratio - 4.0).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn weight_matrix_mean_near_zero() {
        let cfg = ModelConfig { emb_dim: 64, n_head: 4, vocab_size: 300, block_size: 8, ..tiny() };
        let p = TransformerParams::<f64>::init(cfg, 3).unwrap();
        let w = &p.tensors[slot::WTE];
        let n = w.numel() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        // standard error of the mean for N(0, 0.02)
        assert!(mean.abs() < 3.0 * 0.02 / n.sqrt(), "{mean}");
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ModelConfig { emb_dim: 9, ..tiny() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..tiny() }.validate().is_err());
        assert!(ModelConfig { vocab_size: 0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = TransformerParams::<f32>::init(tiny(), 1).unwrap();
        let out = forward(&p, &[1, 2, 3, 4], 1, true).unwrap();
        for t in 0..4 {
            let row = out.row(0, t);
            let max = row.iter().cloned().fold(f32::MIN, f32::max);
            let z: f32 = row.iter().map(|x| (x - max).exp()).sum();
            let s: f32 = row.iter().map(|x| (x - max).exp() / z).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn prefix_property() {
        let p = TransformerParams::<f32>::init(tiny(), 2).unwrap();
        let base = forward(&p, &[1, 2, 3, 4], 1, true).unwrap();
        let changed = forward(&p, &[1, 2, 7, 0], 1, true).unwrap();
        assert_eq!(base.row(0, 0), changed.row(0, 0));
        assert_eq!(base.row(0, 1), changed.row(0, 1));
        assert_ne!(base.row(0, 2), changed.row(0, 2));
    }

    #[test]
    fn non_causal_mode_sees_the_future() {
        let p = TransformerParams::<f32>::init(tiny(), 2).unwrap();
        let base = forward(&p, &[1, 2, 3, 4], 1, false).unwrap();
        let changed = forward(&p, &[1, 2, 3, 5], 1, false).unwrap();
        assert_ne!(base.row(0, 0), changed.row(0, 0));
    }

    #[test]
    fn identical_rows_identical_logits() {
        let p = TransformerParams::<f32>::init(tiny(), 4).unwrap();
        let out = forward(&p, &[3, 1, 4, 1, 3, 1, 4, 1], 2, true).unwrap();
        for t in 0..4 {
            assert_eq!(out.row(0, t), out.row(1, t));
        }
    }

    #[test]
    fn out_of_range_token_reports_position() {
        let p = TransformerParams::<f32>::init(tiny(), 4).unwrap();
        match forward(&p, &[1, 2, 8, 0], 1, true) {
            Err(Error::TokenOutOfRange { position: 2, id: 8, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_long_sequence_rejected() {
        let p = TransformerParams::<f32>::init(tiny(), 4).unwrap();
        assert!(forward(&p, &[1; 5], 1, true).is_err());
    }
}
