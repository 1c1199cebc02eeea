//! Counters for the cases where refinement cannot help.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agr::RefineTrace;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub samples: usize,
    pub multi_verdict: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticCounters {
    pub total: usize,
    /// Contexts too short to refine.
    pub fallback: usize,
    /// Refined samples whose true next token is not among the candidates.
    pub miss: usize,
    /// `rank_hist[r]`: refined samples whose true token is candidate `r`;
    /// the last slot counts misses.
    pub rank_hist: Vec<usize>,
    /// More than one candidate passed the refiner check.
    pub multi_verdict: usize,
    /// Multi-verdict counts keyed by the second-to-last token.
    pub by_prev_token: BTreeMap<u32, TokenCount>,
    /// Refinement changed the prediction.
    pub flips: usize,
    /// A flip that turned a wrong prediction into the right one.
    pub helped: usize,
    /// A flip that turned a right prediction into a wrong one.
    pub hurt: usize,
    pub plain_correct: usize,
    pub agr_correct: usize,
}

impl DiagnosticCounters {
    pub fn refined(&self) -> usize {
        self.total - self.fallback
    }

    /// Fraction of refined samples whose true token is outside the top
    /// `k`. Only defined for `k` up to the candidate count.
    pub fn miss_rate(&self, k: usize) -> Option<f64> {
        let n = self.refined();
        if n == 0 || k == 0 || k >= self.rank_hist.len() {
            return None;
        }
        Some(self.rank_hist[k..].iter().sum::<usize>() as f64 / n as f64)
    }

    pub fn multi_verdict_rate(&self) -> f64 {
        self.multi_verdict as f64 / self.refined().max(1) as f64
    }

    /// `(key, value)` rows for CSV output.
    pub fn rows(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("total".to_string(), self.total.to_string()),
            ("fallback".into(), self.fallback.to_string()),
            ("miss".into(), self.miss.to_string()),
            ("multi_verdict".into(), self.multi_verdict.to_string()),
            ("flips".into(), self.flips.to_string()),
            ("helped".into(), self.helped.to_string()),
            ("hurt".into(), self.hurt.to_string()),
            ("plain_correct".into(), self.plain_correct.to_string()),
            ("agr_correct".into(), self.agr_correct.to_string()),
        ];
        for k in 1..self.rank_hist.len() {
            if let Some(r) = self.miss_rate(k) {
                out.push((format!("miss_rate@{k}"), format!("{r:.6}")));
            }
        }
        out
    }
}

/// Tallies traces against their true next tokens.
pub fn collect_diagnostics(traces: &[RefineTrace], truths: &[u32]) -> Result<DiagnosticCounters> {
    if traces.len() != truths.len() {
        return Err(Error::invalid("collect_diagnostics", format!("{} traces but {} truths", traces.len(), truths.len())));
    }
    let k = traces.iter().map(|t| t.candidates.len()).max().unwrap_or(0);
    let mut d = DiagnosticCounters { rank_hist: vec![0; k + 1], ..Default::default() };
    for (tr, &y) in traces.iter().zip(truths) {
        d.total += 1;
        d.plain_correct += (tr.plain == y) as usize;
        d.agr_correct += (tr.chosen == y) as usize;
        if tr.chosen != tr.plain {
            d.flips += 1;
            d.helped += (tr.chosen == y) as usize;
            d.hurt += (tr.plain == y) as usize;
        }
        if tr.fallback {
            d.fallback += 1;
            continue;
        }
        match tr.candidates.iter().position(|c| c.id == y) {
            Some(r) => d.rank_hist[r] += 1,
            None => {
                d.miss += 1;
                d.rank_hist[k] += 1;
            }
        }
        let multi = tr.verdict_count() > 1;
        d.multi_verdict += multi as usize;
        let e = d.by_prev_token.entry(tr.prev).or_default();
        e.samples += 1;
        e.multi_verdict += multi as usize;
    }
    Ok(d)
}
