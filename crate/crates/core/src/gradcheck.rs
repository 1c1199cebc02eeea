//! Finite-difference checks for the autograd engine.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compares reverse-mode gradients of `sum(r * build(inputs))` (with a
/// fixed random weighting `r`) against central finite differences on up to
/// `coords` randomly chosen input coordinates.
pub fn gradcheck<B>(inputs: &[Tensor<f64>], coords: usize, seed: u64, build: B) -> GradReport
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.shape(out).to_vec()
    };
    let weights = random_tensor(&mut rng, &out_shape);

    let objective = |inputs: &[Tensor<f64>], with_grad: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).item();
        let grads = with_grad.then(|| {
            let gr = g.backward(loss).unwrap();
            vars.iter().map(|&v| gr.get(v).unwrap().clone()).collect::<Vec<_>>()
        });
        (value, grads)
    };

    let (_, analytic) = objective(inputs, true);
    let analytic = analytic.unwrap();
    let flat: Vec<(usize, usize)> = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
    let picks: Vec<usize> = if flat.len() <= coords { (0..flat.len()).collect() } else { sample(&mut rng, flat.len(), coords).into_vec() };

    let mut max_rel_err: f64 = 0.0;
    for &p in &picks {
        let (i, j) = flat[p];
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= FD_STEP;
        let numeric = (objective(&plus, false).0 - objective(&minus, false).0) / (2.0 * FD_STEP);
        let a = analytic[i].data()[j];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
    }
    GradReport { checked: picks.len(), max_rel_err }
}

/// Gradient check of every autograd primitive, plus a two-layer MLP and a
/// tiny transformer, each on at least 50 coordinates.
pub fn check_all_primitives() -> Vec<(&'static str, GradReport)> {
    use crate::model::{forward_graph, ForwardOpts, ModelConfig, TransformerParams};

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut r = |s: &[usize]| random_tensor(&mut rng, s);
    let n = 60;
    let mut out = Vec::new();

    out.push(("matmul", gradcheck(&[r(&[6, 5]), r(&[5, 7])], n, 1, |g, v| g.matmul(v[0], v[1]).unwrap())));
    out.push(("matmul_t", gradcheck(&[r(&[6, 5]), r(&[7, 5])], n, 2, |g, v| g.matmul_t(v[0], v[1]).unwrap())));
    out.push(("bmm", gradcheck(&[r(&[2, 4, 5]), r(&[2, 5, 3])], n, 3, |g, v| g.bmm(v[0], v[1], false).unwrap())));
    out.push(("bmm_t", gradcheck(&[r(&[2, 4, 5]), r(&[2, 3, 5])], n, 4, |g, v| g.bmm(v[0], v[1], true).unwrap())));
    out.push(("add", gradcheck(&[r(&[6, 10]), r(&[10])], n, 5, |g, v| g.add(v[0], v[1]).unwrap())));
    out.push(("mul", gradcheck(&[r(&[6, 10]), r(&[6, 10])], n, 6, |g, v| g.mul(v[0], v[1]).unwrap())));
    out.push(("scale", gradcheck(&[r(&[8, 8])], n, 7, |g, v| g.scale(v[0], -1.7).unwrap())));
    out.push((
        "gelu",
        gradcheck(&[r(&[8, 8])], n, 8, |g, v| {
            let x = g.scale(v[0], 3.0).unwrap();
            g.gelu(x).unwrap()
        }),
    ));
    out.push(("softmax_last_dim", gradcheck(&[r(&[6, 12])], n, 9, |g, v| g.softmax_last_dim(v[0]).unwrap())));
    out.push(("causal_softmax", gradcheck(&[r(&[3, 5, 5])], n, 10, |g, v| g.causal_softmax(v[0]).unwrap())));
    out.push(("layer_norm", gradcheck(&[r(&[6, 10]), r(&[10]), r(&[10])], n, 11, |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap())));
    out.push(("embedding_lookup", gradcheck(&[r(&[9, 8])], n, 12, |g, v| g.embedding_lookup(v[0], &[3, 1, 4, 1, 5, 8, 2, 6]).unwrap())));
    out.push((
        "cross_entropy_masked",
        gradcheck(&[r(&[12, 7])], n, 13, |g, v| {
            let targets = [0, 1, 2, 3, 4, 5, 6, 0, 1, 2, 3, 4];
            let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
            g.cross_entropy_masked(v[0], &targets, &mask).unwrap()
        }),
    ));
    out.push(("reshape", gradcheck(&[r(&[6, 10])], n, 14, |g, v| g.reshape(v[0], &[3, 20]).unwrap())));
    out.push(("slice_last", gradcheck(&[r(&[6, 15])], n, 15, |g, v| g.slice_last(v[0], 4, 9).unwrap())));
    out.push(("split_heads", gradcheck(&[r(&[2, 5, 6])], n, 16, |g, v| g.split_heads(v[0], 3).unwrap())));
    out.push(("merge_heads", gradcheck(&[r(&[6, 5, 2])], n, 17, |g, v| g.merge_heads(v[0], 3).unwrap())));
    out.push((
        "dropout",
        gradcheck(&[r(&[8, 8])], n, 18, |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            g.dropout(v[0], 0.3, &mut rng).unwrap()
        }),
    ));
    out.push(("sum", gradcheck(&[r(&[8, 8])], n, 19, |g, v| g.sum(v[0]).unwrap())));
    out.push(("linear", gradcheck(&[r(&[6, 5]), r(&[5, 7]), r(&[7])], n, 20, |g, v| g.linear(v[0], v[1], v[2]).unwrap())));
    out.push(("self_attention_causal", gradcheck(&[r(&[2 * 5, 3 * 6])], n, 21, |g, v| g.self_attention(v[0], 2, 2, true).unwrap())));
    out.push(("self_attention_full", gradcheck(&[r(&[2 * 5, 3 * 6])], n, 22, |g, v| g.self_attention(v[0], 2, 2, false).unwrap())));

    out.push((
        "mlp_2_layer",
        gradcheck(&[r(&[5, 4]), r(&[4, 8]), r(&[8]), r(&[8, 3]), r(&[3])], n, 23, |g, v| {
            let h = g.linear(v[0], v[1], v[2]).unwrap();
            let h = g.gelu(h).unwrap();
            let o = g.linear(h, v[3], v[4]).unwrap();
            g.cross_entropy_masked(o, &[0, 1, 2, 1, 0], &[true; 5]).unwrap()
        }),
    ));

    let cfg = ModelConfig { n_layer: 1, n_head: 2, emb_dim: 8, block_size: 4, vocab_size: 6, dropout: 0.0 };
    let params = TransformerParams::<f64>::init(cfg, 9).unwrap();
    // larger weights than the 0.02 init so every path carries signal
    let tensors: Vec<Tensor<f64>> = params
        .tensors
        .iter()
        .map(|t| {
            let mut t = t.clone();
            for x in t.data_mut() {
                *x += 0.3 * r(&[1]).data()[0];
            }
            t
        })
        .collect();
    out.push((
        "transformer",
        gradcheck(&tensors, 200, 24, |g, v| {
            let ids = [1, 5, 0, 3, 2, 2, 4, 1];
            let logits = forward_graph(g, &cfg, v, &ids, 2, ForwardOpts::default()).unwrap();
            g.cross_entropy_masked(logits, &[5, 0, 3, 2, 2, 4, 1, 0], &[true; 8]).unwrap()
        }),
    ));
    out
}
