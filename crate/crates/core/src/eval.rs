//! Teacher-forced accuracy of the next-token model, the refiner and
//! generate-then-refine, over repeated sampled runs.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agr::{agr_batch, LogitModel, RefineConfig, RefineTrace};
use crate::dataset::{Split, TokenDataset};
use crate::diagnostics::{collect_diagnostics, DiagnosticCounters};
use crate::error::{Error, Result};
use crate::stats::{mean, one_sample_t_test, sample_std, TTest};

// Contexts handed to one refine call.
const BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples: usize,
    pub runs: usize,
    pub seed: u64,
    pub refine: RefineConfig,
    /// Extra `(k, w)` cells evaluated on the same samples.
    pub grid: Vec<(usize, f64)>,
    pub dataset_label: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { samples: 5000, runs: 10, seed: 2024, refine: RefineConfig::default(), grid: Vec::new(), dataset_label: "corpus".into() }
    }
}

impl EvalConfig {
    /// `(k, w)` cells: the grid if given, else the single refine setting.
    pub fn cells(&self) -> Vec<(usize, f64)> {
        if self.grid.is_empty() {
            vec![(self.refine.k, self.refine.w)]
        } else {
            self.grid.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub n: f64,
    pub s: f64,
    pub agr: f64,
}

/// Samples and their traces from one run on one split.
#[derive(Clone, Debug)]
pub struct RunTraces {
    pub positions: Vec<usize>,
    pub truths: Vec<u32>,
    pub traces: Vec<RefineTrace>,
}

impl RunTraces {
    pub fn accuracies(&self, k: usize, w: f64) -> Accuracies {
        let n = self.truths.len() as f64;
        let mut acc = Accuracies::default();
        for (tr, &y) in self.traces.iter().zip(&self.truths) {
            acc.n += (tr.plain == y) as u8 as f64;
            acc.s += tr.probe.is_some_and(|(_, ok)| ok) as u8 as f64;
            acc.agr += (tr.restricted(k, w).chosen == y) as u8 as f64;
        }
        Accuracies { n: acc.n / n, s: acc.s / n, agr: acc.agr / n }
    }

    pub fn restricted(&self, k: usize, w: f64) -> Vec<RefineTrace> {
        self.traces.iter().map(|t| t.restricted(k, w)).collect()
    }
}

/// Uniform positions in `[context, len)`, with replacement.
pub fn sample_positions(len: usize, context: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if len <= context {
        return Err(Error::SplitTooSmall { len, need: context + 1 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rng.random_range(context..len)).collect())
}

/// Scores `n_samples` random positions of `tokens`, each with the longest
/// context either model accepts.
pub fn evaluate_run<N: LogitModel + ?Sized, S: LogitModel + ?Sized>(
    f_n: &N,
    f_s: &S,
    tokens: &[u32],
    n_samples: usize,
    cfg: &RefineConfig,
    seed: u64,
) -> Result<RunTraces> {
    let ctx_len = f_n.block_size().max(f_s.block_size());
    let positions = sample_positions(tokens.len(), ctx_len, n_samples, seed)?;
    let truths: Vec<u32> = positions.iter().map(|&p| tokens[p]).collect();
    let chunks: Vec<Vec<RefineTrace>> = positions
        .par_chunks(BATCH)
        .zip(truths.par_chunks(BATCH))
        .map(|(pos, ys)| {
            let contexts: Vec<&[u32]> = pos.iter().map(|&p| &tokens[p - ctx_len..p]).collect();
            agr_batch(f_n, f_s, &contexts, Some(ys), cfg)
        })
        .collect::<Result<_>>()?;
    Ok(RunTraces { positions, truths, traces: chunks.concat() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub train: Accuracies,
    pub val: Accuracies,
    /// Validation `Acc_AGR - Acc_n`.
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        MeanStd { mean: mean(xs), std: sample_std(xs) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub k: usize,
    pub w: f64,
    pub l: usize,
    pub samples: usize,
    pub runs: Vec<RunResult>,
    pub train: [MeanStd; 3],
    pub val: [MeanStd; 3],
    pub delta: MeanStd,
    pub t_test: Option<TTest>,
    /// Why the t-test was not computed.
    pub t_test_note: Option<String>,
    /// Validation diagnostics pooled over runs.
    pub diagnostics: DiagnosticCounters,
    /// Internal consistency failures; empty on a healthy run.
    pub violations: Vec<String>,
}

fn summarize(runs: &[RunResult], pick: impl Fn(&RunResult) -> Accuracies) -> [MeanStd; 3] {
    let col = |f: &dyn Fn(Accuracies) -> f64| MeanStd::of(&runs.iter().map(|r| f(pick(r))).collect::<Vec<_>>());
    [col(&|a| a.n), col(&|a| a.s), col(&|a| a.agr)]
}

/// Runs the full protocol: `cfg.runs` runs of `cfg.samples` samples on
/// both splits, one report per `(k, w)` cell. All cells share samples and
/// refiner queries.
pub fn evaluate<N: LogitModel + ?Sized, S: LogitModel + ?Sized>(f_n: &N, f_s: &S, data: &TokenDataset, cfg: &EvalConfig) -> Result<Vec<EvalReport>> {
    if cfg.runs == 0 || cfg.samples == 0 {
        return Err(Error::Config("runs and samples must be positive".into()));
    }
    if f_n.vocab_size() != data.vocab_size() || f_s.vocab_size() != data.vocab_size() {
        return Err(Error::Config(format!("model vocabularies ({}, {}) do not match the dataset ({})", f_n.vocab_size(), f_s.vocab_size(), data.vocab_size())));
    }
    let cells = cfg.cells();
    let k_max = cells.iter().map(|c| c.0).max().expect("at least one cell");
    let refine = RefineConfig { k: k_max, ..cfg.refine };
    for &(k, w) in &cells {
        RefineConfig { k, w, ..cfg.refine }.validate(data.vocab_size())?;
    }

    let mut per_run = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let seed = cfg.seed.wrapping_add(run as u64);
        let tr = evaluate_run(f_n, f_s, data.split(Split::Train), cfg.samples, &refine, seed ^ 0x7261_696e)?;
        let va = evaluate_run(f_n, f_s, data.split(Split::Val), cfg.samples, &refine, seed ^ 0x7661_6c00)?;
        log::info!("eval run {run}: {} + {} samples", tr.truths.len(), va.truths.len());
        per_run.push((seed, tr, va));
    }

    let mut reports = Vec::with_capacity(cells.len());
    for &(k, w) in &cells {
        let runs: Vec<RunResult> = per_run
            .iter()
            .enumerate()
            .map(|(run, (seed, tr, va))| {
                let (train, val) = (tr.accuracies(k, w), va.accuracies(k, w));
                RunResult { run, seed: *seed, train, val, delta: val.agr - val.n }
            })
            .collect();
        let deltas: Vec<f64> = runs.iter().map(|r| r.delta).collect();
        let (t_test, t_test_note) = match one_sample_t_test(&deltas) {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let mut traces = Vec::new();
        let mut truths = Vec::new();
        for (_, _, va) in &per_run {
            traces.extend(va.restricted(k, w));
            truths.extend_from_slice(&va.truths);
        }
        let diagnostics = collect_diagnostics(&traces, &truths)?;
        let mut report = EvalReport {
            dataset: cfg.dataset_label.clone(),
            k,
            w,
            l: cfg.refine.l,
            samples: cfg.samples,
            train: summarize(&runs, |r| r.train),
            val: summarize(&runs, |r| r.val),
            delta: MeanStd::of(&deltas),
            runs,
            t_test,
            t_test_note,
            diagnostics,
            violations: Vec::new(),
        };
        report.violations = check_invariants(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// Consistency checks a report must satisfy.
pub fn check_invariants(r: &EvalReport) -> Vec<String> {
    let mut out = Vec::new();
    for run in &r.runs {
        for (split, a) in [("train", run.train), ("val", run.val)] {
            for (name, x) in [("n", a.n), ("s", a.s), ("agr", a.agr)] {
                if !(0.0..=1.0).contains(&x) {
                    out.push(format!("run {} {split} Acc_{name} = {x} outside [0, 1]", run.run));
                }
            }
            if r.w == 0.0 && a.agr != a.n {
                out.push(format!("run {} {split}: w = 0 but Acc_AGR {} != Acc_n {}", run.run, a.agr, a.n));
            }
        }
        if run.delta != run.val.agr - run.val.n {
            out.push(format!("run {}: delta is not Acc_AGR - Acc_n", run.run));
        }
    }
    let d = &r.diagnostics;
    if d.helped as i64 - d.hurt as i64 != d.agr_correct as i64 - d.plain_correct as i64 {
        out.push("helped - hurt differs from the AGR minus plain correct count".into());
    }
    if d.helped + d.hurt > d.flips {
        out.push("helped + hurt exceeds flips".into());
    }
    out
}

fn pct(m: MeanStd) -> String {
    format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.std)
}

/// Human-readable table, accuracies in percent.
pub fn report_table(reports: &[EvalReport]) -> String {
    let header = ["Dataset", "k", "w", "Acc_n^tr", "Acc_s^tr", "Acc_AGR^tr", "Acc_n^va", "Acc_s^va", "Acc_AGR^va", "Δ_AGR-n"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.dataset.clone(), r.k.to_string(), r.w.to_string()];
            row.extend(r.train.iter().chain(&r.val).map(|m| pct(*m)));
            row.push(pct(r.delta));
            row
        })
        .collect();
    let widths: Vec<usize> =
        (0..header.len()).map(|c| rows.iter().map(|r| r[c].chars().count()).chain([header[c].chars().count()]).max().unwrap_or(0)).collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}", w = *w)).collect();
        out.push_str(padded.join(" | ").trim_end());
        out.push('\n');
    };
    line(header.to_vec(), &mut out);
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for row in &rows {
        line(row.iter().map(|s| s.as_str()).collect(), &mut out);
    }
    for r in reports {
        match (&r.t_test, &r.t_test_note) {
            (Some(t), _) => {
                let _ = writeln!(out, "k={} w={}: t = {:.4}, df = {}, one-sided p = {:.4}", r.k, r.w, t.t, t.df, t.p);
            }
            (None, Some(note)) => {
                let _ = writeln!(out, "k={} w={}: t-test not computed ({note})", r.k, r.w);
            }
            _ => {}
        }
    }
    out
}

pub const SUMMARY_CSV_HEADER: &str = "dataset,k,w,l,runs,samples,\
acc_n_tr_mean,acc_n_tr_std,acc_s_tr_mean,acc_s_tr_std,acc_agr_tr_mean,acc_agr_tr_std,\
acc_n_va_mean,acc_n_va_std,acc_s_va_mean,acc_s_va_std,acc_agr_va_mean,acc_agr_va_std,\
delta_mean,delta_std,t,df,p";

/// One summary row per report.
pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{SUMMARY_CSV_HEADER}\n");
    for r in reports {
        let _ = write!(out, "{},{},{},{},{},{}", r.dataset, r.k, r.w, r.l, r.runs.len(), r.samples);
        for m in r.train.iter().chain(&r.val).chain([&r.delta]) {
            let _ = write!(out, ",{},{}", m.mean, m.std);
        }
        match &r.t_test {
            Some(t) => {
                let _ = writeln!(out, ",{},{},{}", t.t, t.df, t.p);
            }
            None => out.push_str(",,,\n"),
        }
    }
    out
}

pub const RUNS_CSV_HEADER: &str = "k,w,run,seed,split,acc_n,acc_s,acc_agr,delta";

/// One row per run and split.
pub fn runs_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{RUNS_CSV_HEADER}\n");
    for r in reports {
        for run in &r.runs {
            for (split, a) in [("train", run.train), ("val", run.val)] {
                let delta = if split == "val" { run.delta.to_string() } else { String::new() };
                let _ = writeln!(out, "{},{},{},{},{split},{},{},{},{delta}", r.k, r.w, run.run, run.seed, a.n, a.s, a.agr);
            }
        }
    }
    out
}

/// `key,value` diagnostic rows for each report.
pub fn diagnostics_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("k,w,key,value\n");
    for r in reports {
        for (key, value) in r.diagnostics.rows() {
            let _ = writeln!(out, "{},{},{key},{value}", r.k, r.w);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_stay_in_range_and_repeat_with_seed() {
        let a = sample_positions(100, 64, 500, 3).unwrap();
        assert!(a.iter().all(|&p| (64..100).contains(&p)));
        assert_eq!(a, sample_positions(100, 64, 500, 3).unwrap());
        assert!(matches!(sample_positions(64, 64, 1, 0), Err(Error::SplitTooSmall { .. })));
    }

    #[test]
    fn table_has_one_row_per_report() {
        let r = EvalReport {
            dataset: "x".into(),
            k: 15,
            w: 0.05,
            l: 4,
            samples: 10,
            runs: Vec::new(),
            train: Default::default(),
            val: Default::default(),
            delta: Default::default(),
            t_test: None,
            t_test_note: None,
            diagnostics: Default::default(),
            violations: Vec::new(),
        };
        assert_eq!(report_table(std::slice::from_ref(&r)).lines().count(), 3);
        assert_eq!(summary_csv(&[r.clone(), r]).lines().count(), 3);
    }
}
