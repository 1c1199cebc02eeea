//! Exact synthetic languages.
//!
//! A [`MarkovSource`] of order `m` has a joint distribution over its first
//! `m` tokens and a dense transition table for everything after. Small
//! vocabularies and lengths make every conditional exactly computable, which
//! gives ground truth for the locality inequality and a reference for
//! generate-then-refine that involves no training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::agr::{top_k_candidates, LogitModel};
use crate::error::{Error, Result};
use crate::permute::block_swap_permute;

const SUM_TOL: f64 = 1e-12;

/// Default cap on the number of dense states an enumeration may touch.
pub const DEFAULT_BUDGET: u128 = 1 << 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovSource {
    pub vocab: usize,
    pub order: usize,
    /// Joint distribution of the first `order` tokens, indexed with the
    /// first token most significant. Length `vocab^order`.
    pub initial: Vec<f64>,
    /// `table[s * vocab + x] = p(x | state s)`, where `s` encodes the last
    /// `order` tokens like `initial`.
    pub table: Vec<f64>,
}

fn check_dist(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::invalid("MarkovSource", format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::invalid("MarkovSource", format!("{what} sums to {s}")));
    }
    Ok(())
}

fn pow(v: usize, e: usize) -> Option<usize> {
    v.checked_pow(u32::try_from(e).ok()?)
}

fn normalize(mut p: Vec<f64>) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

fn dirichlet(rng: &mut ChaCha8Rng, n: usize, gamma: &Gamma<f64>) -> Vec<f64> {
    loop {
        let p: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        if p.iter().sum::<f64>() > 0.0 {
            return normalize(p);
        }
    }
}

impl MarkovSource {
    pub fn new(vocab: usize, order: usize, initial: Vec<f64>, table: Vec<f64>) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::invalid("MarkovSource", "empty vocabulary"));
        }
        let states = pow(vocab, order).ok_or_else(|| Error::invalid("MarkovSource", "state space overflows"))?;
        if initial.len() != states || table.len() != states * vocab {
            return Err(Error::invalid("MarkovSource", format!("expected {states} initial entries and {} table entries", states * vocab)));
        }
        check_dist(&initial, "initial distribution")?;
        for (s, row) in table.chunks(vocab).enumerate() {
            check_dist(row, &format!("transition row {s}"))?;
        }
        Ok(MarkovSource { vocab, order, initial, table })
    }

    /// Random transition rows drawn from a symmetric Dirichlet with the
    /// given concentration; uniform initial distribution. Smaller
    /// concentrations give peakier rows.
    pub fn random(vocab: usize, order: usize, concentration: f64, seed: u64) -> Result<Self> {
        let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::invalid("MarkovSource::random", e.to_string()))?;
        let states = pow(vocab, order).ok_or_else(|| Error::invalid("MarkovSource", "state space overflows"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Vec::with_capacity(states * vocab);
        for _ in 0..states {
            table.extend(dirichlet(&mut rng, vocab, &gamma));
        }
        Self::new(vocab, order, vec![1.0 / states as f64; states], table)
    }

    pub fn uniform(vocab: usize, order: usize) -> Result<Self> {
        let states = pow(vocab, order).ok_or_else(|| Error::invalid("MarkovSource", "state space overflows"))?;
        Self::new(vocab, order, vec![1.0 / states as f64; states], vec![1.0 / vocab as f64; states * vocab])
    }

    /// Independent draws from `probs`.
    pub fn iid(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs.len(), 0, vec![1.0], probs)
    }

    /// `y_t = y_{t-lag}`, with the first `lag` tokens uniform and
    /// independent.
    pub fn copy(vocab: usize, lag: usize) -> Result<Self> {
        let states = pow(vocab, lag).ok_or_else(|| Error::invalid("MarkovSource", "state space overflows"))?;
        let oldest = pow(vocab, lag.saturating_sub(1)).unwrap_or(1);
        let mut table = vec![0.0; states * vocab];
        for s in 0..states {
            table[s * vocab + s / oldest] = 1.0;
        }
        Self::new(vocab, lag, vec![1.0 / states as f64; states], table)
    }

    /// Order-1 deterministic cycle `0 -> 1 -> .. -> V-1 -> 0`.
    pub fn cycle(vocab: usize) -> Result<Self> {
        let mut table = vec![0.0; vocab * vocab];
        for s in 0..vocab {
            table[s * vocab + (s + 1) % vocab] = 1.0;
        }
        Self::new(vocab, 1, vec![1.0 / vocab as f64; vocab], table)
    }

    fn check(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().position(|&y| y as usize >= self.vocab) {
            Some(position) => Err(Error::TokenOutOfRange { position, id: tokens[position], vocab_size: self.vocab }),
            None => Ok(()),
        }
    }

    fn state(&self, last: &[u32]) -> usize {
        last.iter().fold(0, |s, &y| s * self.vocab + y as usize)
    }

    // p(y_j | y_<j) for j < order, from the initial joint.
    fn initial_next(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let v = self.vocab;
        let block = pow(v, self.order - prefix.len()).expect("fits");
        let sub = block / v;
        let start = self.state(prefix) * block;
        let mass: Vec<f64> = (0..v).map(|x| self.initial[start + x * sub..][..sub].iter().sum()).collect();
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(Error::ImpossibleEvent);
        }
        Ok(mass.into_iter().map(|m| m / total).collect())
    }

    /// `p(y_t | y_0 .. y_{t-1})`.
    pub fn next_dist(&self, context: &[u32]) -> Result<Vec<f64>> {
        self.check(context)?;
        if context.len() < self.order {
            return self.initial_next(context);
        }
        let s = self.state(&context[context.len() - self.order..]);
        Ok(self.table[s * self.vocab..][..self.vocab].to_vec())
    }

    /// Probability of the sequence as a prefix of the language.
    pub fn prob(&self, seq: &[u32]) -> Result<f64> {
        self.check(seq)?;
        let mut p = 1.0;
        for j in 0..seq.len() {
            let d = match self.next_dist(&seq[..j]) {
                Ok(d) => d,
                Err(Error::ImpossibleEvent) => return Ok(0.0),
                Err(e) => return Err(e),
            };
            p *= d[seq[j] as usize];
            if p == 0.0 {
                break;
            }
        }
        Ok(p)
    }

    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<u32> {
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len {
            let d = self.next_dist(&seq).expect("sampled prefixes have positive probability");
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = d.iter().rposition(|&p| p > 0.0).unwrap_or(0);
            for (x, &p) in d.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = x;
                    break;
                }
            }
            seq.push(pick as u32);
        }
        seq
    }

    /// Dense joint over all sequences of length `len`, first token most
    /// significant.
    pub fn joint(&self, len: usize, budget: u128) -> Result<Vec<f64>> {
        let need = (self.vocab as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
        if need > budget {
            return Err(Error::EnumerationBudget { need, budget });
        }
        let v = self.vocab;
        let mut level = vec![1.0];
        let mut tokens = Vec::with_capacity(len);
        for j in 0..len {
            let mut next = vec![0.0; level.len() * v];
            for (i, &p) in level.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                decode(i, j, v, &mut tokens);
                let d = self.next_dist(&tokens)?;
                for (x, q) in d.iter().enumerate() {
                    next[i * v + x] = p * q;
                }
            }
            level = next;
        }
        Ok(level)
    }
}

/// Writes the `len` tokens encoded by `index` into `out`.
pub fn decode(mut index: usize, len: usize, vocab: usize, out: &mut Vec<u32>) {
    out.clear();
    out.resize(len, 0);
    for slot in out.iter_mut().rev() {
        *slot = (index % vocab) as u32;
        index /= vocab;
    }
}

/// `p(y_t | y_0 .. y_{t-1})`.
pub fn exact_next_dist(source: &MarkovSource, context: &[u32]) -> Result<Vec<f64>> {
    source.next_dist(context)
}

/// `p(y_{t-1} | y_0 .. y_{t-2}, y_t)` by Bayes' rule over every value of
/// the missing token.
pub fn exact_second_to_last_dist(source: &MarkovSource, prefix: &[u32], last: u32) -> Result<Vec<f64>> {
    source.check(&[last])?;
    let prior = source.next_dist(prefix)?;
    let mut ctx = prefix.to_vec();
    ctx.push(0);
    let mut mass = vec![0.0; source.vocab];
    for (x, &px) in prior.iter().enumerate() {
        if px > 0.0 {
            *ctx.last_mut().unwrap() = x as u32;
            mass[x] = px * source.next_dist(&ctx)?[last as usize];
        }
    }
    if mass.iter().sum::<f64>() <= 0.0 {
        return Err(Error::ImpossibleEvent);
    }
    Ok(normalize(mass))
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Clone, Copy, Debug)]
pub struct LocalityOptions {
    pub budget: u128,
    /// Keep the per-context gaps.
    pub pointwise: bool,
}

impl Default for LocalityOptions {
    fn default() -> Self {
        LocalityOptions { budget: DEFAULT_BUDGET, pointwise: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointGap {
    /// `y_0 .. y_{t-1}, y_{t+1}`.
    pub context: Vec<u32>,
    pub weight: f64,
    pub uni: f64,
    pub bi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityReport {
    pub t: usize,
    pub metric: String,
    /// Expected distance between the full-context conditional and
    /// `p(y_t | y_0 .. y_{t-1})`.
    pub uni: f64,
    /// Expected distance between the full-context conditional and
    /// `p(y_t | y_1 .. y_{t-1}, y_{t+1})`.
    pub bi: f64,
    /// `uni - bi`; positive when the local two-sided view is closer.
    pub gap: f64,
    pub uni_max: f64,
    pub bi_max: f64,
    pub min_pointwise_gap: f64,
    pub pointwise: Vec<PointGap>,
}

/// Compares the one-sided and the local two-sided predictor of `y_t`
/// against the predictor that sees every other token of `y_0 .. y_{t+1}`,
/// under total variation. Averages weight each context by its probability.
pub fn locality_gap(source: &MarkovSource, t: usize, opts: &LocalityOptions) -> Result<LocalityReport> {
    if t == 0 {
        return Err(Error::invalid("locality_gap", "t must be at least 1"));
    }
    let v = source.vocab;
    let joint = source.joint(t + 2, opts.budget)?;
    let v2 = v * v;
    let n_prefix = joint.len() / v2;
    let n_mid = n_prefix / v;

    // marginalize y_0
    let mut without_first = vec![0.0; n_mid * v2];
    for (pi, block) in joint.chunks(v2).enumerate() {
        let dst = &mut without_first[(pi % n_mid) * v2..][..v2];
        for (d, &j) in dst.iter_mut().zip(block) {
            *d += j;
        }
    }

    let mut report = LocalityReport {
        t,
        metric: "total-variation".into(),
        uni: 0.0,
        bi: 0.0,
        gap: 0.0,
        uni_max: 0.0,
        bi_max: 0.0,
        min_pointwise_gap: f64::INFINITY,
        pointwise: Vec::new(),
    };
    let mut tokens = Vec::new();
    let column = |block: &[f64], yn: usize| -> Vec<f64> { (0..v).map(|yt| block[yt * v + yn]).collect() };
    for (pi, block) in joint.chunks(v2).enumerate() {
        let prefix_mass: f64 = block.iter().sum();
        if prefix_mass == 0.0 {
            continue;
        }
        let uni: Vec<f64> = (0..v).map(|yt| block[yt * v..][..v].iter().sum::<f64>() / prefix_mass).collect();
        let mid = &without_first[(pi % n_mid) * v2..][..v2];
        for yn in 0..v {
            let full = column(block, yn);
            let weight: f64 = full.iter().sum();
            if weight == 0.0 {
                continue;
            }
            let full = normalize(full);
            let bi = normalize(column(mid, yn));
            let (du, db) = (total_variation(&full, &uni), total_variation(&full, &bi));
            report.uni += weight * du;
            report.bi += weight * db;
            report.uni_max = report.uni_max.max(du);
            report.bi_max = report.bi_max.max(db);
            report.min_pointwise_gap = report.min_pointwise_gap.min(du - db);
            if opts.pointwise {
                decode(pi, t, v, &mut tokens);
                let mut context = tokens.clone();
                context.push(yn as u32);
                report.pointwise.push(PointGap { context, weight, uni: du, bi: db });
            }
        }
    }
    report.gap = report.uni - report.bi;
    Ok(report)
}

/// Next-token model backed by a source's exact conditionals. Logits are
/// log probabilities.
#[derive(Clone, Copy, Debug)]
pub struct NextOracle<'a> {
    pub source: &'a MarkovSource,
    pub block_size: usize,
}

/// Second-to-last model backed by a source. It reads windows in the
/// layout built for the refiner: the permuted context with the candidate
/// in the last slot.
#[derive(Clone, Copy, Debug)]
pub struct SecondToLastOracle<'a> {
    pub source: &'a MarkovSource,
    pub l: usize,
    pub block_size: usize,
}

fn log_probs(p: &[f64]) -> Vec<f64> {
    p.iter().map(|x| x.ln()).collect()
}

impl LogitModel for NextOracle<'_> {
    fn vocab_size(&self) -> usize {
        self.source.vocab
    }

    fn block_size(&self) -> usize {
        self.block_size
    }

    fn final_logits(&self, contexts: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        contexts.iter().map(|c| self.source.next_dist(c).map(|p| log_probs(&p))).collect()
    }
}

impl SecondToLastOracle<'_> {
    /// Recovers `(y_0 .. y_{t-2}, y_t)` from a refiner window.
    pub fn unpermute(&self, window: &[u32]) -> Result<(Vec<u32>, u32)> {
        let n = window.len();
        if n < 2 || !n.is_multiple_of(self.l) {
            return Err(Error::invalid("SecondToLastOracle", format!("window length {n} is not a positive multiple of l = {}", self.l)));
        }
        let mut padded = window.to_vec();
        padded.push(0);
        let o = block_swap_permute(&padded, self.l)?;
        Ok((o[..n - 1].to_vec(), o[n]))
    }
}

impl LogitModel for SecondToLastOracle<'_> {
    fn vocab_size(&self) -> usize {
        self.source.vocab
    }

    fn block_size(&self) -> usize {
        self.block_size
    }

    fn final_logits(&self, windows: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        windows
            .iter()
            .map(|w| {
                let (prefix, last) = self.unpermute(w)?;
                match exact_second_to_last_dist(self.source, &prefix, last) {
                    Ok(p) => Ok(log_probs(&p)),
                    // an impossible candidate carries no information
                    Err(Error::ImpossibleEvent) => Ok(vec![0.0; self.source.vocab]),
                    Err(e) => Err(e),
                }
            })
            .collect()
    }
}

/// Reference generate-then-refine on exact conditionals. Scores every token
/// of the vocabulary directly from the full context, with no windows,
/// logits or batching. Needs `t >= 2`.
pub fn brute_force_agr(source: &MarkovSource, context: &[u32], k: usize, w: f64) -> Result<u32> {
    let t = context.len();
    if t < 2 {
        return Err(Error::invalid("brute_force_agr", "context needs at least two tokens"));
    }
    let q = source.next_dist(context)?;
    let mut best: Option<(f64, u32)> = None;
    for y in 0..source.vocab {
        // rank: tokens strictly ahead under (probability desc, id asc)
        let ahead = (0..source.vocab).filter(|&z| q[z] > q[y] || (q[z] == q[y] && z < y)).count();
        if ahead >= k {
            continue;
        }
        let verdict = match exact_second_to_last_dist(source, &context[..t - 1], y as u32) {
            Ok(d) => crate::agr::argmax(&d) == context[t - 1],
            Err(Error::ImpossibleEvent) => false,
            Err(e) => return Err(e),
        };
        let score = q[y] * if verdict { 1.0 + w } else { 1.0 };
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, y as u32));
        }
    }
    Ok(best.expect("k >= 1").1)
}

/// How the sweep's refiner decides its verdicts before noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefinerKind {
    /// Verdict is true exactly for the candidate that is the true next
    /// token.
    Ideal,
    /// Verdict from the exact second-to-last conditional, which does not
    /// see the true next token.
    Bayes,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub w: f64,
    pub eps: f64,
    pub plain: f64,
    pub agr: f64,
}

fn choose(cands: &[u32], p: &[f64], verdicts: u32, w: f64) -> u32 {
    let mut best = (f64::NEG_INFINITY, u32::MAX);
    for (j, &c) in cands.iter().enumerate() {
        let boost = if verdicts >> j & 1 == 1 { 1.0 + w } else { 1.0 };
        let s = p[c as usize] * boost;
        if s > best.0 || (s == best.0 && c < best.1) {
            best = (s, c);
        }
    }
    best.1
}

/// Exact expected accuracy of the plain argmax and of generate-then-refine
/// at context length `t`, for every `(w, eps)` pair. Each verdict is
/// flipped independently with probability `eps`.
pub fn oracle_agr_sweep(source: &MarkovSource, t: usize, k: usize, ws: &[f64], epsilons: &[f64], refiner: RefinerKind, budget: u128) -> Result<Vec<SweepRow>> {
    let v = source.vocab;
    if t < 2 || k == 0 || k > v || k > 20 {
        return Err(Error::invalid("oracle_agr_sweep", format!("need t >= 2 and 1 <= k <= min(V, 20), got t = {t}, k = {k}")));
    }
    if epsilons.iter().any(|e| !(0.0..=1.0).contains(e)) || ws.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::invalid("oracle_agr_sweep", "eps must lie in [0, 1] and w must be >= 0"));
    }
    let work = ((v as u128).pow(t as u32) * (v as u128)) << k;
    if work > budget {
        return Err(Error::EnumerationBudget { need: work, budget });
    }
    let prefixes = source.joint(t, budget)?;
    let mut plain = 0.0;
    let mut agr = vec![0.0; ws.len() * epsilons.len()];
    let mut ctx = Vec::new();
    for (pi, &mass) in prefixes.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        decode(pi, t, v, &mut ctx);
        let q = source.next_dist(&ctx)?;
        let cands = top_k_candidates(&q, k);
        plain += mass * q[cands[0] as usize];
        let bayes = match refiner {
            RefinerKind::Ideal => 0,
            RefinerKind::Bayes => {
                let mut bits = 0u32;
                for (j, &c) in cands.iter().enumerate() {
                    let hit = match exact_second_to_last_dist(source, &ctx[..t - 1], c) {
                        Ok(d) => crate::agr::argmax(&d) == ctx[t - 1],
                        Err(Error::ImpossibleEvent) => false,
                        Err(e) => return Err(e),
                    };
                    bits |= (hit as u32) << j;
                }
                bits
            }
        };
        for (y, &qy) in q.iter().enumerate() {
            if qy == 0.0 {
                continue;
            }
            let base = match refiner {
                RefinerKind::Ideal => cands.iter().position(|&c| c as usize == y).map_or(0, |j| 1 << j),
                RefinerKind::Bayes => bayes,
            };
            for mask in 0u32..1 << k {
                let flips = mask.count_ones() as i32;
                let verdicts = base ^ mask;
                for (wi, &w) in ws.iter().enumerate() {
                    if choose(&cands, &q, verdicts, w) as usize != y {
                        continue;
                    }
                    for (ei, &eps) in epsilons.iter().enumerate() {
                        let pm = eps.powi(flips) * (1.0 - eps).powi(k as i32 - flips);
                        agr[wi * epsilons.len() + ei] += mass * qy * pm;
                    }
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(agr.len());
    for (wi, &w) in ws.iter().enumerate() {
        for (ei, &eps) in epsilons.iter().enumerate() {
            rows.push(SweepRow { k, w, eps, plain, agr: agr[wi * epsilons.len() + ei] });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_are_valid() {
        for s in [
            MarkovSource::random(4, 2, 0.5, 1).unwrap(),
            MarkovSource::uniform(3, 1).unwrap(),
            MarkovSource::copy(3, 3).unwrap(),
            MarkovSource::cycle(5).unwrap(),
            MarkovSource::iid(vec![0.2, 0.8]).unwrap(),
        ] {
            let j = s.joint(4, DEFAULT_BUDGET).unwrap();
            assert!((j.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(MarkovSource::new(2, 0, vec![1.0], vec![0.5, 0.6]).is_err());
        assert!(MarkovSource::new(2, 0, vec![1.0], vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn identity_chain_is_a_point_mass() {
        let s = MarkovSource::new(3, 1, vec![1.0 / 3.0; 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(exact_next_dist(&s, &[0, 2]).unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn cycle_second_to_last() {
        let s = MarkovSource::cycle(3).unwrap();
        assert_eq!(exact_second_to_last_dist(&s, &[0], 2).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(exact_second_to_last_dist(&s, &[0], 0), Err(Error::ImpossibleEvent)));
    }

    #[test]
    fn short_contexts_use_initial_marginals() {
        let initial = vec![0.1, 0.2, 0.3, 0.4];
        let s = MarkovSource::new(2, 2, initial, vec![0.5; 8]).unwrap();
        let d = s.next_dist(&[]).unwrap();
        assert!((d[0] - 0.3).abs() < 1e-15 && (d[1] - 0.7).abs() < 1e-15);
        let d = s.next_dist(&[1]).unwrap();
        assert!((d[0] - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn copy_source_repeats_with_lag() {
        let s = MarkovSource::copy(3, 2).unwrap();
        assert_eq!(s.next_dist(&[2, 0]).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(s.next_dist(&[1, 2, 0, 1]).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn iid_locality_is_flat() {
        let s = MarkovSource::iid(vec![0.5, 0.3, 0.2]).unwrap();
        let r = locality_gap(&s, 3, &LocalityOptions::default()).unwrap();
        assert!(r.uni.abs() < 1e-12 && r.bi.abs() < 1e-12);
    }

    #[test]
    fn unpermute_inverts_window_layout() {
        let s = MarkovSource::uniform(9, 1).unwrap();
        let o = SecondToLastOracle { source: &s, l: 4, block_size: 64 };
        let ctx: Vec<u32> = (0..8).collect();
        let (w, _) = crate::agr::build_refiner_input(&ctx, 8, 4, 64).unwrap();
        let (prefix, last) = o.unpermute(&w).unwrap();
        assert_eq!(prefix, vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(last, 8);
    }

    #[test]
    fn budget_is_enforced() {
        let s = MarkovSource::uniform(8, 1).unwrap();
        let opts = LocalityOptions { budget: 1000, pointwise: false };
        assert!(matches!(locality_gap(&s, 5, &opts), Err(Error::EnumerationBudget { .. })));
    }

    #[test]
    fn sweep_with_zero_weight_is_plain() {
        let s = MarkovSource::random(4, 1, 1.0, 3).unwrap();
        for kind in [RefinerKind::Ideal, RefinerKind::Bayes] {
            let rows = oracle_agr_sweep(&s, 3, 3, &[0.0], &[0.0, 0.3], kind, DEFAULT_BUDGET).unwrap();
            for r in rows {
                assert!((r.agr - r.plain).abs() < 1e-12, "{r:?}");
            }
        }
    }
}
