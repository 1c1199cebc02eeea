//! Generate-then-refine decoding.
//!
//! The next-token model proposes its top `k` candidates. For each candidate
//! the refiner sees the context with the candidate appended, laid out with
//! the block-swap permutation so that the last window position asks for the
//! second-to-last token. A candidate whose window makes the refiner recover
//! the true previous token gets its probability multiplied by `1 + w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::permute::block_swap_permute;

/// A model that returns next-token logits at the final position of a
/// context. Implemented by trained transformers and by exact oracles.
pub trait LogitModel: Sync {
    fn vocab_size(&self) -> usize;

    /// Longest context the model accepts.
    fn block_size(&self) -> usize;

    /// Final-position logits for each context.
    fn final_logits(&self, contexts: &[&[u32]]) -> Result<Vec<Vec<f64>>>;

    /// For every prefix `b` and every token `c` in `finals[b]`, the
    /// final-position logits of `prefix ++ [c]`.
    fn final_logits_after(&self, prefixes: &[&[u32]], finals: &[&[u32]]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut windows = Vec::new();
        for (p, f) in prefixes.iter().zip(finals) {
            for &c in f.iter() {
                let mut w = p.to_vec();
                w.push(c);
                windows.push(w);
            }
        }
        let refs: Vec<&[u32]> = windows.iter().map(|w| w.as_slice()).collect();
        let mut flat = self.final_logits(&refs)?.into_iter();
        Ok(finals.iter().map(|f| flat.by_ref().take(f.len()).collect()).collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TiePolicy {
    #[default]
    LowestId,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub k: usize,
    pub w: f64,
    pub l: usize,
    pub tie: TiePolicy,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { k: 15, w: 0.05, l: 4, tie: TiePolicy::LowestId }
    }
}

impl RefineConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.k == 0 || self.k > vocab_size {
            return Err(Error::Config(format!("k = {} must be in 1..={vocab_size}", self.k)));
        }
        if !self.w.is_finite() || self.w < 0.0 {
            return Err(Error::Config(format!("w = {} must be a finite value >= 0", self.w)));
        }
        if self.l < 2 {
            return Err(Error::Config(format!("l = {} must be >= 2", self.l)));
        }
        Ok(())
    }
}

/// Where candidate scores are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreSpace {
    /// `logit + verdict * ln(1 + w)`; the softmax normalizer is shared by
    /// all candidates and cancels.
    Logit,
    /// `p_n * (1 + w * verdict)`.
    Probability,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub id: u32,
    pub logit: f64,
    /// Softmax probability under the next-token model.
    pub p_n: f64,
    /// Refiner's argmax for the second-to-last token with this candidate
    /// appended.
    pub refiner_argmax: u32,
    /// Whether that argmax equals the true previous token.
    pub verdict: bool,
}

impl Candidate {
    pub fn score(&self, w: f64, space: ScoreSpace) -> f64 {
        let v = if self.verdict { 1.0 } else { 0.0 };
        match space {
            ScoreSpace::Logit => self.logit + v * w.ln_1p(),
            ScoreSpace::Probability => self.p_n * (1.0 + w * v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineTrace {
    /// Context length `t`.
    pub t: usize,
    /// Last context token `y_{t-1}`, the refiner's target.
    pub prev: u32,
    /// True when the context was too short to refine.
    pub fallback: bool,
    /// Argmax of the next-token model.
    pub plain: u32,
    /// Top-k candidates, best logit first. Empty on fallback.
    pub candidates: Vec<Candidate>,
    pub chosen: u32,
    /// Optional extra refiner query with a given final token (used to
    /// measure refiner accuracy with the true next token).
    pub probe: Option<(u32, bool)>,
}

impl RefineTrace {
    /// Re-derives the choice from the stored candidates.
    pub fn choose(&self, w: f64, space: ScoreSpace) -> u32 {
        if self.fallback {
            return self.plain;
        }
        select(&self.candidates, w, space)
    }

    /// The trace this context would have produced with only the first `k`
    /// candidates and boost `w`.
    pub fn restricted(&self, k: usize, w: f64) -> RefineTrace {
        let mut out = self.clone();
        if !out.fallback {
            out.candidates.truncate(k.max(1));
            out.chosen = select(&out.candidates, w, ScoreSpace::Logit);
        }
        out
    }

    pub fn verdict_count(&self) -> usize {
        self.candidates.iter().filter(|c| c.verdict).count()
    }
}

fn select(cands: &[Candidate], w: f64, space: ScoreSpace) -> u32 {
    let mut best = &cands[0];
    let mut best_score = best.score(w, space);
    for c in &cands[1..] {
        let s = c.score(w, space);
        if s > best_score || (s == best_score && c.id < best.id) {
            best = c;
            best_score = s;
        }
    }
    best.id
}

/// The `k` ids with the largest logits, largest first; equal logits are
/// ordered by lower id.
pub fn top_k_candidates(logits: &[f64], k: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..logits.len() as u32).collect();
    let k = k.min(ids.len());
    let cmp = |a: &u32, b: &u32| logits[*b as usize].total_cmp(&logits[*a as usize]).then(a.cmp(b));
    if k < ids.len() {
        ids.select_nth_unstable_by(k, cmp);
        ids.truncate(k);
    }
    ids.sort_by(cmp);
    ids
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Refiner window for `candidate` after `context`, and the token the refiner
/// should recover at its last position. `None` when `t < l`.
///
/// With `T'` the largest multiple of `l` not above `min(t, block_size)`,
/// the window is the first `T'` tokens of the permuted
/// `(y_{t-T'}, .., y_{t-1}, candidate)`. It ends in the candidate and does
/// not contain `y_{t-1}`.
pub fn build_refiner_input(context: &[u32], candidate: u32, l: usize, block_size: usize) -> Option<(Vec<u32>, u32)> {
    let t = context.len();
    if l < 2 || t < l || block_size < l {
        return None;
    }
    let tp = t.min(block_size) / l * l;
    let mut o = context[t - tp..].to_vec();
    o.push(candidate);
    let mut permuted = block_swap_permute(&o, l).ok()?;
    permuted.truncate(tp);
    Some((permuted, context[t - 1]))
}

/// Generate-then-refine for one context.
pub fn agr_predict<N: LogitModel + ?Sized, S: LogitModel + ?Sized>(f_n: &N, f_s: &S, context: &[u32], cfg: &RefineConfig) -> Result<(u32, RefineTrace)> {
    let trace = agr_batch(f_n, f_s, &[context], None, cfg)?.pop().expect("one trace");
    Ok((trace.chosen, trace))
}

/// Generate-then-refine for many contexts at once. With `probes`, the
/// refiner is additionally queried with `probes[i]` as the final token of
/// context `i` and its verdict is stored in the trace.
pub fn agr_batch<N: LogitModel + ?Sized, S: LogitModel + ?Sized>(
    f_n: &N,
    f_s: &S,
    contexts: &[&[u32]],
    probes: Option<&[u32]>,
    cfg: &RefineConfig,
) -> Result<Vec<RefineTrace>> {
    cfg.validate(f_n.vocab_size())?;
    if probes.is_some_and(|p| p.len() != contexts.len()) {
        return Err(Error::invalid("agr_batch", "one probe per context required"));
    }
    if contexts.iter().any(|c| c.is_empty()) {
        return Err(Error::invalid("agr_batch", "empty context"));
    }
    let trimmed: Vec<&[u32]> = contexts.iter().map(|c| &c[c.len().saturating_sub(f_n.block_size())..]).collect();
    let n_logits = group_by_len(&trimmed, |grp| f_n.final_logits(grp))?;

    let mut traces = Vec::with_capacity(contexts.len());
    let mut prefixes: Vec<Vec<u32>> = Vec::new();
    let mut finals: Vec<Vec<u32>> = Vec::new();
    let mut refined = Vec::new();
    for (i, (ctx, logits)) in contexts.iter().zip(&n_logits).enumerate() {
        let t = ctx.len();
        let plain = argmax(logits);
        let mut trace = RefineTrace { t, prev: ctx[t - 1], fallback: true, plain, candidates: Vec::new(), chosen: plain, probe: None };
        if t >= 2 && t >= cfg.l && f_s.block_size() >= cfg.l {
            let ids = top_k_candidates(logits, cfg.k);
            let p = softmax(logits);
            let (window, answer) = build_refiner_input(ctx, ids[0], cfg.l, f_s.block_size()).expect("t >= l");
            let mut fin = ids.clone();
            if let Some(pr) = probes {
                fin.push(pr[i]);
            }
            prefixes.push(window[..window.len() - 1].to_vec());
            finals.push(fin);
            trace.fallback = false;
            trace.candidates =
                ids.iter().map(|&id| Candidate { id, logit: logits[id as usize], p_n: p[id as usize], refiner_argmax: 0, verdict: false }).collect();
            refined.push((i, answer));
        }
        traces.push(trace);
    }

    if !refined.is_empty() {
        let pre: Vec<&[u32]> = prefixes.iter().map(|p| p.as_slice()).collect();
        let fin: Vec<&[u32]> = finals.iter().map(|f| f.as_slice()).collect();
        let s_logits = group_pairs_by_len(&pre, &fin, |p, f| f_s.final_logits_after(p, f))?;
        for ((&(i, answer), rows), fin) in refined.iter().zip(s_logits).zip(&finals) {
            let trace = &mut traces[i];
            for (j, row) in rows.iter().enumerate() {
                let guess = argmax(row);
                if j < trace.candidates.len() {
                    trace.candidates[j].refiner_argmax = guess;
                    trace.candidates[j].verdict = guess == answer;
                } else {
                    trace.probe = Some((fin[j], guess == answer));
                }
            }
            trace.chosen = select(&trace.candidates, cfg.w, ScoreSpace::Logit);
        }
    }
    Ok(traces)
}

// Calls `f` once per distinct context length and scatters the results back.
fn group_by_len<T>(items: &[&[u32]], f: impl Fn(&[&[u32]]) -> Result<Vec<T>>) -> Result<Vec<T>> {
    let mut lens: Vec<usize> = items.iter().map(|c| c.len()).collect();
    lens.sort_unstable();
    lens.dedup();
    let mut out: Vec<Option<T>> = items.iter().map(|_| None).collect();
    for len in lens {
        let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].len() == len).collect();
        let grp: Vec<&[u32]> = idx.iter().map(|&i| items[i]).collect();
        for (i, r) in idx.into_iter().zip(f(&grp)?) {
            out[i] = Some(r);
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every item grouped")).collect())
}

fn group_pairs_by_len<T>(prefixes: &[&[u32]], finals: &[&[u32]], f: impl Fn(&[&[u32]], &[&[u32]]) -> Result<Vec<T>>) -> Result<Vec<T>> {
    let mut lens: Vec<usize> = prefixes.iter().map(|c| c.len()).collect();
    lens.sort_unstable();
    lens.dedup();
    let mut out: Vec<Option<T>> = prefixes.iter().map(|_| None).collect();
    for len in lens {
        let idx: Vec<usize> = (0..prefixes.len()).filter(|&i| prefixes[i].len() == len).collect();
        let p: Vec<&[u32]> = idx.iter().map(|&i| prefixes[i]).collect();
        let fi: Vec<&[u32]> = idx.iter().map(|&i| finals[i]).collect();
        for (i, r) in idx.into_iter().zip(f(&p, &fi)?) {
            out[i] = Some(r);
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every item grouped")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: u32, p: f64, verdict: bool) -> Candidate {
        Candidate { id, logit: p.ln(), p_n: p, refiner_argmax: 0, verdict }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_candidates(&[3.0, 1.0, 2.0], 2), vec![0, 2]);
        assert_eq!(top_k_candidates(&[0.5; 5], 3), vec![0, 1, 2]);
        let mut all = top_k_candidates(&[0.1, -2.0, 7.0, 0.1], 4);
        assert_eq!(all, vec![2, 0, 3, 1]);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn boost_arithmetic() {
        let cands = [cand(0, 0.40, false), cand(1, 0.35, true), cand(2, 0.25, false)];
        for space in [ScoreSpace::Logit, ScoreSpace::Probability] {
            assert_eq!(select(&cands, 0.2, space), 1);
            assert_eq!(select(&cands, 0.05, space), 0);
            assert_eq!(select(&cands, 0.0, space), 0);
        }
    }

    #[test]
    fn refiner_window_example() {
        let ctx: Vec<u32> = (0..8).collect();
        let (w, answer) = build_refiner_input(&ctx, 99, 4, 64).unwrap();
        assert_eq!(w, vec![0, 1, 2, 4, 3, 5, 6, 99]);
        assert_eq!(answer, 7);
        assert!(!w.contains(&7));
        assert!(build_refiner_input(&ctx[..3], 99, 4, 64).is_none());
    }

    #[test]
    fn refiner_window_uses_recent_tokens() {
        let ctx: Vec<u32> = (0..11).collect();
        // T' = 8: o = (3..=10, c)
        let (w, answer) = build_refiner_input(&ctx, 50, 4, 64).unwrap();
        assert_eq!(w, vec![3, 4, 5, 7, 6, 8, 9, 50]);
        assert_eq!(answer, 10);
        let (w, _) = build_refiner_input(&ctx, 50, 4, 4).unwrap();
        assert_eq!(w, vec![7, 8, 9, 50]);
        for t in 4..40 {
            let ctx: Vec<u32> = (0..t).collect();
            let (w, _) = build_refiner_input(&ctx, 0, 4, 16).unwrap();
            assert_eq!(w.len() % 4, 0);
            assert_eq!(*w.last().unwrap(), 0);
        }
    }

    #[test]
    fn config_bounds() {
        assert!(RefineConfig::default().validate(15).is_ok());
        assert!(RefineConfig::default().validate(14).is_err());
        assert!(RefineConfig { w: -0.1, ..Default::default() }.validate(20).is_err());
        assert!(RefineConfig { k: 0, ..Default::default() }.validate(20).is_err());
    }
}
