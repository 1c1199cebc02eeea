#![allow(dead_code)]

use agr_lab::model::{forward, ModelConfig, TransformerParams};
use agr_lab::oracle::MarkovSource;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random parameters with weights far from the small init, so logits are
/// well separated and argmaxes are stable under rounding.
pub fn spread_params(cfg: ModelConfig, seed: u64, scale: f32) -> TransformerParams<f32> {
    let mut p = TransformerParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for t in p.tensors.iter_mut() {
        for x in t.data_mut() {
            *x += scale * rng.random_range(-1.0f32..1.0);
        }
    }
    p
}

/// Last-position logits from the training forward pass.
pub fn graph_last_logits(params: &TransformerParams<f32>, ctx: &[u32]) -> Vec<f64> {
    let out = forward(params, ctx, 1, true).unwrap();
    out.row(0, ctx.len() - 1).iter().map(|&x| x as f64).collect()
}

pub fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

/// `p(y_j | y_<j)` straight from sequence probabilities: sums the joint
/// over every continuation instead of reading the transition table.
pub fn conditional_by_enumeration(source: &MarkovSource, prefix: &[u32]) -> Vec<f64> {
    let mut mass = Vec::with_capacity(source.vocab);
    for x in 0..source.vocab as u32 {
        let mut seq = prefix.to_vec();
        seq.push(x);
        mass.push(source.prob(&seq).unwrap());
    }
    let z: f64 = mass.iter().sum();
    mass.iter().map(|m| m / z).collect()
}

/// Generate-then-refine written directly from its definition: among the
/// `k` most probable next tokens, maximize `p(y) * (1 + w * [refiner
/// recovers y_{t-1}])`, where the refiner is the exact posterior of the
/// second-to-last token given every other token. Probabilities come from
/// summing sequence probabilities.
pub fn brute_force_refine(source: &MarkovSource, ctx: &[u32], k: usize, w: f64) -> u32 {
    let t = ctx.len();
    let q = conditional_by_enumeration(source, ctx);
    let mut order: Vec<usize> = (0..source.vocab).collect();
    order.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap().then(a.cmp(&b)));
    let mut best = (f64::NEG_INFINITY, 0u32);
    for &y in order.iter().take(k) {
        let mut post = Vec::new();
        for x in 0..source.vocab as u32 {
            let mut seq = ctx[..t - 1].to_vec();
            seq.push(x);
            seq.push(y as u32);
            post.push(source.prob(&seq).unwrap());
        }
        let verdict = post.iter().sum::<f64>() > 0.0 && first_argmax(&post) as u32 == ctx[t - 1];
        let score = q[y] * if verdict { 1.0 + w } else { 1.0 };
        if score > best.0 || (score == best.0 && (y as u32) < best.1) {
            best = (score, y as u32);
        }
    }
    best.1
}

/// `P(T >= t)` for Student's t by integrating the unnormalized density
/// with composite Simpson, over `x = tan(theta)` to make the range finite.
pub fn t_upper_tail_by_integration(t: f64, df: f64) -> f64 {
    let density = |x: f64| (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let integrate = |a: f64, b: f64| {
        let n = 200_000;
        let h = (b - a) / n as f64;
        let f = |th: f64| {
            let c = th.cos();
            density(th.tan()) / (c * c)
        };
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let half_pi = std::f64::consts::FRAC_PI_2 - 1e-9;
    integrate(t.atan(), half_pi) / integrate(-half_pi, half_pi)
}
