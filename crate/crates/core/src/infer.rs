//! Tape-free forward passes for evaluation.
//!
//! Evaluation only ever needs the logits at the final position, and the
//! refiner windows for the `k` candidates of one context differ only in
//! that final token. [`prefill`] runs a batch of equal-length prefixes once
//! and keeps every layer's keys and values; [`extend`] then scores one extra
//! position per candidate against those cached prefixes.

use crate::agr::LogitModel;
use crate::autograd::{gelu, softmax_row, LN_EPS};
use crate::error::{Error, Result};
use crate::model::{final_ln, layer_index, slot, ModelConfig, TransformerParams};
use crate::tensor::{Scalar, Tensor};

/// Keys and values of every layer for a batch of prefixes.
#[derive(Clone, Debug)]
pub struct PrefixCache {
    pub batch: usize,
    pub len: usize,
    // per layer, [batch * len, d]
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

fn layer_norm(x: &[f32], g: &[f32], b: &[f32]) -> Vec<f32> {
    let d = g.len();
    let mut out = x.to_vec();
    for row in out.chunks_mut(d) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rstd = 1.0 / (var + LN_EPS as f32).sqrt();
        for ((v, &gj), &bj) in row.iter_mut().zip(g).zip(b) {
            *v = (*v - mean) * rstd * gj + bj;
        }
    }
    out
}

// x [rows, k] @ w [k, n] + b
fn affine(x: &[f32], w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / k;
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    f32::gemm(rows, k, n, 1.0, (x, k as isize, 1), (w.data(), n as isize, 1), 1.0, (&mut out, n as isize, 1));
    out
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<()> {
    match ids.iter().position(|&i| i as usize >= vocab) {
        Some(position) => Err(Error::TokenOutOfRange { position, id: ids[position], vocab_size: vocab }),
        None => Ok(()),
    }
}

fn embed(params: &TransformerParams<f32>, ids: &[u32], position: impl Fn(usize) -> usize) -> Vec<f32> {
    let d = params.config.emb_dim;
    let wte = params.tensors[slot::WTE].data();
    let wpe = params.tensors[slot::WPE].data();
    let mut x = Vec::with_capacity(ids.len() * d);
    for (r, &id) in ids.iter().enumerate() {
        let p = position(r);
        let tok = &wte[id as usize * d..][..d];
        let pos = &wpe[p * d..][..d];
        x.extend(tok.iter().zip(pos).map(|(a, b)| a + b));
    }
    x
}

// MLP half of a block, applied in place to the residual stream.
fn mlp(params: &TransformerParams<f32>, l: usize, x: &mut [f32]) {
    let t = |s| &params.tensors[layer_index(l, s)];
    let h = layer_norm(x, t(slot::LN2_G).data(), t(slot::LN2_B).data());
    let mut f = affine(&h, t(slot::FC_W), t(slot::FC_B));
    for v in f.iter_mut() {
        *v = gelu(*v).0;
    }
    let f = affine(&f, t(slot::MLP_PROJ_W), t(slot::MLP_PROJ_B));
    for (xi, fi) in x.iter_mut().zip(f) {
        *xi += fi;
    }
}

fn head(params: &TransformerParams<f32>, x: &[f32]) -> Vec<f32> {
    let cfg = &params.config;
    let (g, b) = final_ln(cfg);
    let h = layer_norm(x, params.tensors[g].data(), params.tensors[b].data());
    let (v, d) = (cfg.vocab_size, cfg.emb_dim);
    let rows = h.len() / d;
    let mut out = vec![0.0; rows * v];
    let wte = params.tensors[slot::WTE].data();
    f32::gemm(rows, d, v, 1.0, (&h, d as isize, 1), (wte, 1, d as isize), 0.0, (&mut out, v as isize, 1));
    out
}

/// Runs `prefixes` (all of the same length) through the model, returning
/// the cache and the logits at each prefix's final position, `[batch, V]`.
pub fn prefill(params: &TransformerParams<f32>, prefixes: &[&[u32]]) -> Result<(PrefixCache, Vec<f32>)> {
    let cfg: &ModelConfig = &params.config;
    let batch = prefixes.len();
    let len = prefixes.first().map_or(0, |p| p.len());
    if batch == 0 || len == 0 || prefixes.iter().any(|p| p.len() != len) {
        return Err(Error::invalid("prefill", "prefixes must be non-empty and of equal length"));
    }
    if len > cfg.block_size {
        return Err(Error::invalid("prefill", format!("prefix length {len} exceeds block size {}", cfg.block_size)));
    }
    let ids: Vec<u32> = prefixes.concat();
    check_ids(&ids, cfg.vocab_size)?;
    let (d, heads) = (cfg.emb_dim, cfg.n_head);
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();

    let mut x = embed(params, &ids, |r| r % len);
    let mut keys = Vec::with_capacity(cfg.n_layer);
    let mut values = Vec::with_capacity(cfg.n_layer);
    let mut probs = vec![0.0f32; len * len];
    for l in 0..cfg.n_layer {
        let t = |s| &params.tensors[layer_index(l, s)];
        let h = layer_norm(&x, t(slot::LN1_G).data(), t(slot::LN1_B).data());
        let qkv = affine(&h, t(slot::ATTN_W), t(slot::ATTN_B));
        let mut att = vec![0.0f32; batch * len * d];
        let ld = 3 * d as isize;
        for b in 0..batch {
            for hh in 0..heads {
                let base = b * len * 3 * d + hh * hd;
                f32::gemm(len, hd, len, scale, (&qkv[base..], ld, 1), (&qkv[base + d..], 1, ld), 0.0, (&mut probs, len as isize, 1));
                for (r, row) in probs.chunks_mut(len).enumerate() {
                    softmax_row(row, r + 1);
                }
                let o = &mut att[b * len * d + hh * hd..];
                f32::gemm(len, len, hd, 1.0, (&probs, len as isize, 1), (&qkv[base + 2 * d..], ld, 1), 0.0, (o, d as isize, 1));
            }
        }
        let mut k = Vec::with_capacity(batch * len * d);
        let mut v = Vec::with_capacity(batch * len * d);
        for row in qkv.chunks(3 * d) {
            k.extend_from_slice(&row[d..2 * d]);
            v.extend_from_slice(&row[2 * d..]);
        }
        keys.push(k);
        values.push(v);
        let y = affine(&att, t(slot::ATTN_PROJ_W), t(slot::ATTN_PROJ_B));
        for (xi, yi) in x.iter_mut().zip(y) {
            *xi += yi;
        }
        mlp(params, l, &mut x);
    }
    let last: Vec<f32> = (0..batch).flat_map(|b| x[((b + 1) * len - 1) * d..][..d].iter().copied()).collect();
    let logits = head(params, &last);
    Ok((PrefixCache { batch, len, keys, values }, logits))
}

/// Logits for one extra position after each cached prefix. `finals[b]`
/// lists the tokens to try after prefix `b`; the result has one `[V]` row
/// per (prefix, token) pair in that order.
pub fn extend(params: &TransformerParams<f32>, cache: &PrefixCache, finals: &[&[u32]]) -> Result<Vec<f32>> {
    let cfg = &params.config;
    if finals.len() != cache.batch {
        return Err(Error::invalid("extend", format!("{} token lists for {} prefixes", finals.len(), cache.batch)));
    }
    if cache.len + 1 > cfg.block_size {
        return Err(Error::invalid("extend", format!("position {} exceeds block size {}", cache.len, cfg.block_size)));
    }
    let ids: Vec<u32> = finals.concat();
    check_ids(&ids, cfg.vocab_size)?;
    let owner: Vec<usize> = finals.iter().enumerate().flat_map(|(b, f)| std::iter::repeat_n(b, f.len())).collect();
    let rows = ids.len();
    let (d, heads, p) = (cfg.emb_dim, cfg.n_head, cache.len);
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();

    let mut x = embed(params, &ids, |_| p);
    let mut scores = vec![0.0f32; p + 1];
    for l in 0..cfg.n_layer {
        let t = |s| &params.tensors[layer_index(l, s)];
        let h = layer_norm(&x, t(slot::LN1_G).data(), t(slot::LN1_B).data());
        let qkv = affine(&h, t(slot::ATTN_W), t(slot::ATTN_B));
        let (kc, vc) = (&cache.keys[l], &cache.values[l]);
        let mut att = vec![0.0f32; rows * d];
        for (r, &b) in owner.iter().enumerate() {
            let row = &qkv[r * 3 * d..][..3 * d];
            let (q, k_self, v_self) = (&row[..d], &row[d..2 * d], &row[2 * d..]);
            for hh in 0..heads {
                let qh = &q[hh * hd..][..hd];
                for (i, s) in scores[..p].iter_mut().enumerate() {
                    let kr = &kc[(b * p + i) * d + hh * hd..][..hd];
                    *s = qh.iter().zip(kr).map(|(a, c)| a * c).sum::<f32>() * scale;
                }
                scores[p] = qh.iter().zip(&k_self[hh * hd..][..hd]).map(|(a, c)| a * c).sum::<f32>() * scale;
                softmax_row(&mut scores, p + 1);
                let out = &mut att[r * d + hh * hd..][..hd];
                for (i, &w) in scores[..p].iter().enumerate() {
                    let vr = &vc[(b * p + i) * d + hh * hd..][..hd];
                    for (o, &vv) in out.iter_mut().zip(vr) {
                        *o += w * vv;
                    }
                }
                for (o, &vv) in out.iter_mut().zip(&v_self[hh * hd..][..hd]) {
                    *o += scores[p] * vv;
                }
            }
        }
        let y = affine(&att, t(slot::ATTN_PROJ_W), t(slot::ATTN_PROJ_B));
        for (xi, yi) in x.iter_mut().zip(y) {
            *xi += yi;
        }
        mlp(params, l, &mut x);
    }
    Ok(head(params, &x))
}

/// Logits at the final position of each context (all the same length).
pub fn last_logits(params: &TransformerParams<f32>, contexts: &[&[u32]]) -> Result<Vec<f32>> {
    prefill(params, contexts).map(|(_, logits)| logits)
}

// Bounds the activation memory of one prefill call.
const CHUNK: usize = 64;

impl LogitModel for TransformerParams<f32> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn block_size(&self) -> usize {
        self.config.block_size
    }

    fn final_logits(&self, contexts: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(contexts.len());
        for chunk in contexts.chunks(CHUNK) {
            let logits = last_logits(self, chunk)?;
            out.extend(logits.chunks(v).map(|r| r.iter().map(|&x| x as f64).collect()));
        }
        Ok(out)
    }

    fn final_logits_after(&self, prefixes: &[&[u32]], finals: &[&[u32]]) -> Result<Vec<Vec<Vec<f64>>>> {
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(prefixes.len());
        for (pre, fin) in prefixes.chunks(CHUNK).zip(finals.chunks(CHUNK)) {
            let (cache, _) = prefill(self, pre)?;
            let logits = extend(self, &cache, fin)?;
            let mut rows = logits.chunks(v).map(|r| r.iter().map(|&x| x as f64).collect::<Vec<f64>>());
            for f in fin {
                out.push(rows.by_ref().take(f.len()).collect());
            }
        }
        Ok(out)
    }
}
