//! The end-to-end steps behind the command-line tool. Each step reads its
//! inputs from the run directory, writes its own files there and records
//! them in a manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agr::{agr_batch, ScoreSpace};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, OracleOp, SourceKind};
use crate::corpus::BUNDLED;
use crate::dataset::TokenDataset;
use crate::diagnostics::collect_diagnostics;
use crate::error::{Error, Result};
use crate::eval::{diagnostics_csv, evaluate, evaluate_run, report_table, runs_csv, summary_csv};
use crate::manifest::RunManifest;
use crate::model::{count_params, ModelConfig, TransformerParams};
use crate::oracle::{exact_next_dist, exact_second_to_last_dist, locality_gap, oracle_agr_sweep, LocalityOptions, MarkovSource};
use crate::permute::{block_swap_permute, loss_mask, Objective};
use crate::stats::one_sample_t_test;
use crate::train::{log_csv, train as train_model};

pub const NEXT_CKPT: &str = "next.ckpt";
pub const REFINER_CKPT: &str = "refiner.ckpt";

/// What a step reports back to the caller.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub exit_code: i32,
    pub summary: String,
    pub manifest: Option<PathBuf>,
}

fn out_dir(cfg: &Config) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.run.out)?;
    Ok(cfg.run.out.clone())
}

fn write(path: &Path, text: &str, manifest: &mut RunManifest, role: &str) -> Result<()> {
    fs::write(path, text)?;
    manifest.output(role, path);
    Ok(())
}

pub fn checkpoint_name(objective: Objective) -> &'static str {
    match objective {
        Objective::NextToken => NEXT_CKPT,
        Objective::SecondToLast => REFINER_CKPT,
    }
}

/// Tokenizes the configured inputs (or the bundled corpus) into
/// `dataset.bin` plus a `dataset.json` sidecar.
pub fn prepare(cfg: &Config, overrides: &[String]) -> Result<Outcome> {
    let dir = out_dir(cfg)?;
    let mut manifest = RunManifest::start("prepare", cfg, overrides);
    let text = if cfg.data.inputs.is_empty() {
        BUNDLED.to_string()
    } else {
        let mut text = String::new();
        for p in &cfg.data.inputs {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
            text.push_str(&fs::read_to_string(p)?);
            manifest.input("text", p);
        }
        text
    };
    let data = TokenDataset::from_text(&text, cfg.data.scheme)?;
    let path = cfg.dataset_path();
    data.save(&path)?;
    manifest.output("dataset", &path);
    let meta = data.meta(cfg.data.inputs.clone());
    write(&path.with_extension("json"), &serde_json::to_string_pretty(&meta)?, &mut manifest, "dataset-meta")?;
    let summary =
        format!("{} tokens, vocabulary {}, {} train / {} val -> {}", meta.n_tokens, meta.vocab_size, meta.train_tokens, meta.val_tokens, path.display());
    Ok(Outcome { exit_code: 0, summary, manifest: Some(manifest.finish(&dir, 0)?) })
}

/// Trains the requested models, writing a checkpoint and a loss log each.
pub fn train(cfg: &Config, objectives: &[Objective], overrides: &[String]) -> Result<Outcome> {
    let dir = out_dir(cfg)?;
    let mut manifest = RunManifest::start("train", cfg, overrides);
    let data_path = cfg.dataset_path();
    let data = TokenDataset::load(&data_path)?;
    manifest.input("dataset", &data_path);
    let mut summary = String::new();
    for &objective in objectives {
        let tc = cfg.train_config(objective, data.vocab_size());
        manifest.seed(objective.tag(), tc.seed);
        let ckpt = dir.join(checkpoint_name(objective));
        log::info!("training {} model: {} parameters, {} iterations", objective.tag(), count_params(&tc.model), tc.max_iters);
        let out = train_model(&tc, &data, Some(&ckpt))?;
        manifest.output(objective.tag(), &ckpt);
        let log_path = dir.join(format!("train_{}.csv", objective.tag()));
        write(&log_path, &log_csv(&out.log), &mut manifest, &format!("{}-log", objective.tag()))?;
        for split in [crate::dataset::Split::Train, crate::dataset::Split::Val] {
            if let Some(r) = out.last(split) {
                let _ = writeln!(summary, "{:<15} {:<5} loss {:.4}  masked accuracy {:.2}%", objective.tag(), split.name(), r.loss, 100.0 * r.masked_accuracy);
            }
        }
    }
    Ok(Outcome { exit_code: 0, summary, manifest: Some(manifest.finish(&dir, 0)?) })
}

fn load_models(cfg: &Config, dir: &Path, data: &TokenDataset, manifest: &mut RunManifest) -> Result<(Checkpoint, Checkpoint)> {
    let mut load = |objective: Objective| -> Result<Checkpoint> {
        let path = dir.join(checkpoint_name(objective));
        let ck = Checkpoint::load(&path)?;
        manifest.input(objective.tag(), &path);
        if ck.objective != objective {
            return Err(Error::Config(format!("{} holds a {} model", path.display(), ck.objective.tag())));
        }
        if ck.config().vocab_size != data.vocab_size() {
            return Err(Error::Config(format!("{} has vocabulary {}, dataset has {}", path.display(), ck.config().vocab_size, data.vocab_size())));
        }
        if objective == Objective::SecondToLast && ck.l != cfg.run.l {
            return Err(Error::Config(format!("refiner was trained with l = {}, config has l = {}", ck.l, cfg.run.l)));
        }
        Ok(ck)
    };
    Ok((load(Objective::NextToken)?, load(Objective::SecondToLast)?))
}

/// Repeated sampled evaluation on both splits; table, CSVs and JSON.
/// Exit code 1 when a report fails its consistency checks.
pub fn eval(cfg: &Config, overrides: &[String]) -> Result<Outcome> {
    let dir = out_dir(cfg)?;
    let mut manifest = RunManifest::start("eval", cfg, overrides);
    let data_path = cfg.dataset_path();
    let data = TokenDataset::load(&data_path)?;
    manifest.input("dataset", &data_path);
    let (f_n, f_s) = load_models(cfg, &dir, &data, &mut manifest)?;
    let ec = cfg.eval_config();
    manifest.seed("eval", ec.seed);
    let reports = evaluate(&f_n.params, &f_s.params, &data, &ec)?;
    let table = report_table(&reports);
    write(&dir.join("eval_table.txt"), &table, &mut manifest, "table")?;
    write(&dir.join("eval_summary.csv"), &summary_csv(&reports), &mut manifest, "summary")?;
    write(&dir.join("eval_runs.csv"), &runs_csv(&reports), &mut manifest, "runs")?;
    write(&dir.join("eval_diagnostics.csv"), &diagnostics_csv(&reports), &mut manifest, "diagnostics")?;
    write(&dir.join("eval_report.json"), &serde_json::to_string_pretty(&reports)?, &mut manifest, "report")?;
    let violations: Vec<&String> = reports.iter().flat_map(|r| &r.violations).collect();
    let mut summary = table;
    for v in &violations {
        let _ = writeln!(summary, "invariant violated: {v}");
    }
    let code = if violations.is_empty() { 0 } else { 1 };
    Ok(Outcome { exit_code: code, summary, manifest: Some(manifest.finish(&dir, code)?) })
}

/// One sampled run of generate-then-refine on one split, with optional
/// per-sample traces.
pub fn agr(cfg: &Config, overrides: &[String]) -> Result<Outcome> {
    let dir = out_dir(cfg)?;
    let mut manifest = RunManifest::start("agr", cfg, overrides);
    let data_path = cfg.dataset_path();
    let data = TokenDataset::load(&data_path)?;
    manifest.input("dataset", &data_path);
    let (f_n, f_s) = load_models(cfg, &dir, &data, &mut manifest)?;
    let rc = cfg.refine_config();
    let seed = cfg.eval_seed();
    manifest.seed("agr", seed);
    let split = cfg.eval.agr_split;
    let run = evaluate_run(&f_n.params, &f_s.params, data.split(split), cfg.eval.samples, &rc, seed)?;
    let acc = run.accuracies(rc.k, rc.w);
    let diag = collect_diagnostics(&run.traces, &run.truths)?;

    let mut csv = String::from("key,value\n");
    let _ = writeln!(csv, "split,{}", split.name());
    let _ = writeln!(csv, "k,{}\nw,{}\nl,{}\nsamples,{}\nseed,{seed}", rc.k, rc.w, rc.l, run.truths.len());
    let _ = writeln!(csv, "acc_n,{}\nacc_s,{}\nacc_agr,{}\ndelta,{}", acc.n, acc.s, acc.agr, acc.agr - acc.n);
    for (k, v) in diag.rows() {
        let _ = writeln!(csv, "diag.{k},{v}");
    }
    write(&dir.join("agr.csv"), &csv, &mut manifest, "summary")?;

    if cfg.refine.traces {
        let mut tr = String::from("position,truth,prev,plain,chosen,fallback,candidates,p_n,verdicts,scores\n");
        for ((pos, y), t) in run.positions.iter().zip(&run.truths).zip(&run.traces) {
            let join = |f: &dyn Fn(&crate::agr::Candidate) -> String| t.candidates.iter().map(f).collect::<Vec<_>>().join(" ");
            let _ = writeln!(
                tr,
                "{pos},{y},{},{},{},{},{},{},{},{}",
                t.prev,
                t.plain,
                t.chosen,
                t.fallback,
                join(&|c| c.id.to_string()),
                join(&|c| format!("{:.6}", c.p_n)),
                join(&|c| (c.verdict as u8).to_string()),
                join(&|c| format!("{:.6}", c.score(rc.w, ScoreSpace::Probability))),
            );
        }
        write(&dir.join("agr_traces.csv"), &tr, &mut manifest, "traces")?;
    }
    let summary = format!(
        "{} split, {} samples, k={} w={}: Acc_n {:.2}%  Acc_s {:.2}%  Acc_AGR {:.2}%  (flips {}, helped {}, hurt {})",
        split.name(),
        run.truths.len(),
        rc.k,
        rc.w,
        100.0 * acc.n,
        100.0 * acc.s,
        100.0 * acc.agr,
        diag.flips,
        diag.helped,
        diag.hurt
    );
    Ok(Outcome { exit_code: 0, summary, manifest: Some(manifest.finish(&dir, 0)?) })
}

fn oracle_sources(cfg: &Config, manifest: &mut RunManifest) -> Result<Vec<(String, MarkovSource)>> {
    let o = &cfg.oracle;
    if let Some(path) = &o.table {
        if !path.exists() {
            return Err(Error::MissingFile(path.clone()));
        }
        manifest.input("source", path);
        let s: MarkovSource = serde_json::from_str(&fs::read_to_string(path)?)?;
        let s = MarkovSource::new(s.vocab, s.order, s.initial, s.table)?;
        return Ok(vec![(path.display().to_string(), s)]);
    }
    (0..o.sources.max(1))
        .map(|i| {
            let seed = o.seed.wrapping_add(i as u64);
            let s = match o.source {
                SourceKind::Random => MarkovSource::random(o.vocab, o.order, o.concentration, seed)?,
                SourceKind::Uniform => MarkovSource::uniform(o.vocab, o.order)?,
                SourceKind::Copy => MarkovSource::copy(o.vocab, o.order)?,
                SourceKind::Cycle => MarkovSource::cycle(o.vocab)?,
            };
            Ok((format!("{:?}-{seed}", o.source).to_lowercase(), s))
        })
        .collect()
}

/// Exact computations on synthetic sources, written as CSV.
pub fn oracle(cfg: &Config, overrides: &[String]) -> Result<Outcome> {
    let dir = out_dir(cfg)?;
    let mut manifest = RunManifest::start("oracle", cfg, overrides);
    let o = &cfg.oracle;
    manifest.seed("oracle", o.seed);
    let sources = oracle_sources(cfg, &mut manifest)?;
    let budget = o.budget as u128;
    let mut csv = String::new();
    let mut summary = String::new();
    let name = match o.op {
        OracleOp::Locality => {
            csv.push_str("source,t,metric,uni,bi,gap,uni_max,bi_max,min_pointwise_gap\n");
            let mut points = String::from("source,context,weight,uni,bi,gap\n");
            let opts = LocalityOptions { budget, pointwise: o.pointwise };
            for (name, s) in &sources {
                let r = locality_gap(s, o.t, &opts)?;
                let _ = writeln!(csv, "{name},{},{},{},{},{},{},{},{}", r.t, r.metric, r.uni, r.bi, r.gap, r.uni_max, r.bi_max, r.min_pointwise_gap);
                let _ = writeln!(summary, "{name}: uni {:.6}  bi {:.6}  gap {:+.6}", r.uni, r.bi, r.gap);
                for p in &r.pointwise {
                    let ctx: Vec<String> = p.context.iter().map(|x| x.to_string()).collect();
                    let _ = writeln!(points, "{name},{},{},{},{},{}", ctx.join(" "), p.weight, p.uni, p.bi, p.uni - p.bi);
                }
            }
            if o.pointwise {
                write(&dir.join("oracle_locality_points.csv"), &points, &mut manifest, "pointwise")?;
            }
            "locality"
        }
        OracleOp::Sweep => {
            csv.push_str("source,t,k,w,eps,refiner,plain,agr,diff\n");
            for (name, s) in &sources {
                for r in oracle_agr_sweep(s, o.t, o.k, &o.ws, &o.epsilons, o.refiner, budget)? {
                    let _ = writeln!(csv, "{name},{},{},{},{},{:?},{},{},{}", o.t, r.k, r.w, r.eps, o.refiner, r.plain, r.agr, r.agr - r.plain);
                    if r.agr < r.plain {
                        let _ = writeln!(summary, "{name}: w={} eps={} AGR {:.6} below plain {:.6}", r.w, r.eps, r.agr, r.plain);
                    }
                }
            }
            "sweep"
        }
        OracleOp::Next | OracleOp::SecondToLast => {
            csv.push_str("source,token,p\n");
            for (name, s) in &sources {
                let d = if o.op == OracleOp::Next {
                    exact_next_dist(s, &o.context)?
                } else {
                    let (last, prefix) = o.context.split_last().ok_or_else(|| Error::Config("oracle.context must not be empty".into()))?;
                    let (_, prefix) = prefix.split_last().ok_or_else(|| Error::Config("oracle.context needs two tokens".into()))?;
                    exact_second_to_last_dist(s, prefix, *last)?
                };
                for (x, p) in d.iter().enumerate() {
                    let _ = writeln!(csv, "{name},{x},{p}");
                }
                let _ = writeln!(summary, "{name}: {d:?}");
            }
            if o.op == OracleOp::Next {
                "next"
            } else {
                "second_to_last"
            }
        }
    };
    write(&dir.join(format!("oracle_{name}.csv")), &csv, &mut manifest, name)?;
    Ok(Outcome { exit_code: 0, summary, manifest: Some(manifest.finish(&dir, 0)?) })
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// Fast internal consistency checks on gradients, permutation, refinement,
/// oracles, statistics and model plumbing.
pub fn selftest_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |name, pass, detail: String| out.push(Check { name, pass, detail });

    let grads = crate::gradcheck::check_all_primitives();
    let worst = grads.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let few = grads.iter().filter(|(_, r)| r.checked < 50).count();
    push("gradients", worst < crate::gradcheck::MAX_REL_ERR && few == 0, format!("{} primitives, worst relative error {worst:.2e}", grads.len()));

    let window: Vec<u32> = (0..13).collect();
    let p = block_swap_permute(&window, 4).unwrap_or_default();
    let golden = [0, 1, 2, 4, 3, 5, 6, 8, 7, 9, 10, 12, 11];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let involution = (0..200).all(|_| {
        let l = [2, 3, 4, 8][rng.random_range(0..4)];
        let n = rng.random_range(l + 1..40);
        let w: Vec<u32> = (0..n).map(|_| rng.random_range(0..50)).collect();
        let once = block_swap_permute(&w, l).unwrap();
        block_swap_permute(&once, l).unwrap() == w
    });
    push("permutation", p == golden && involution, format!("{p:?}"));

    let ratios: Vec<f64> = [2, 4].iter().map(|&l| loss_mask(64, l).iter().filter(|&&m| m).count() as f64 / 64.0).collect();
    push("masking ratio", ratios == [0.5, 0.25], format!("{ratios:?}"));

    let cfg = ModelConfig { n_layer: 1, n_head: 2, emb_dim: 16, block_size: 8, vocab_size: 7, dropout: 0.0 };
    let neutral = (|| -> Result<(usize, usize, usize)> {
        let f_n = TransformerParams::<f32>::init(cfg, 1)?;
        let f_s = TransformerParams::<f32>::init(cfg, 2)?;
        let contexts: Vec<Vec<u32>> = (0..100).map(|_| (0..rng.random_range(1..12)).map(|_| rng.random_range(0..7)).collect()).collect();
        let refs: Vec<&[u32]> = contexts.iter().map(|c| c.as_slice()).collect();
        let rc = crate::agr::RefineConfig { k: 4, w: 0.0, l: 2, ..Default::default() };
        let traces = agr_batch(&f_n, &f_s, &refs, None, &rc)?;
        let same = traces.iter().filter(|t| t.chosen == t.plain).count();
        let spaces = traces.iter().filter(|t| t.choose(0.3, ScoreSpace::Logit) == t.choose(0.3, ScoreSpace::Probability)).count();
        Ok((same, spaces, traces.len()))
    })();
    match neutral {
        Ok((same, spaces, n)) => push("refine neutrality", same == n && spaces == n, format!("{same}/{n} unchanged at w = 0, {spaces}/{n} space agreement")),
        Err(e) => push("refine neutrality", false, e.to_string()),
    }

    let oracle = (|| -> Result<(usize, usize)> {
        let s = MarkovSource::random(3, 1, 1.0, 11)?;
        let f_n = crate::oracle::NextOracle { source: &s, block_size: 64 };
        let f_s = crate::oracle::SecondToLastOracle { source: &s, l: 2, block_size: 64 };
        let rc = crate::agr::RefineConfig { k: 2, w: 0.3, l: 2, ..Default::default() };
        let (mut agree, mut total) = (0, 0);
        let mut ctx = Vec::new();
        for t in 2..=4 {
            for i in 0..3usize.pow(t as u32) {
                crate::oracle::decode(i, t, 3, &mut ctx);
                let (y, _) = crate::agr::agr_predict(&f_n, &f_s, &ctx, &rc)?;
                agree += (y == crate::oracle::brute_force_agr(&s, &ctx, rc.k, rc.w)?) as usize;
                total += 1;
            }
        }
        Ok((agree, total))
    })();
    match oracle {
        Ok((a, n)) => push("oracle equivalence", a == n, format!("{a}/{n} contexts")),
        Err(e) => push("oracle equivalence", false, e.to_string()),
    }

    let locality = (|| -> Result<(f64, f64)> {
        let markov = locality_gap(&MarkovSource::random(4, 1, 1.0, 5)?, 4, &LocalityOptions::default())?;
        let copy = locality_gap(&MarkovSource::copy(3, 4)?, 4, &LocalityOptions::default())?;
        Ok((markov.gap, copy.gap))
    })();
    match locality {
        Ok((m, c)) => push("locality", m >= 0.0 && c < 0.0, format!("order-1 gap {m:+.4}, copy gap {c:+.4}")),
        Err(e) => push("locality", false, e.to_string()),
    }

    match one_sample_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0]) {
        Ok(t) => push("t-test", (t.t - 4.2426).abs() < 1e-3 && (t.p - 0.0066).abs() < 1e-3, format!("t = {:.4}, p = {:.4}", t.t, t.p)),
        Err(e) => push("t-test", false, e.to_string()),
    }

    let big = ModelConfig { n_layer: 30, n_head: 16, emb_dim: 1424, block_size: 208, vocab_size: 50257, dropout: 0.0 };
    let n = count_params(&big) as f64;
    push("parameter count", (n / 800e6 - 1.0).abs() < 0.02, format!("{:.1}M", n / 1e6));

    let lr = crate::schedule::lr_schedule(100, 100, 2000, 1e-3);
    let floor = crate::schedule::lr_schedule(2000, 100, 2000, 1e-3);
    push("lr schedule", lr == 1e-3 && floor == 1e-4, format!("peak {lr:e}, floor {floor:e}"));

    let round_trip = (|| -> Result<bool> {
        let ck = Checkpoint { params: TransformerParams::init(cfg, 3)?, optimizer: None, objective: Objective::SecondToLast, l: 4, seed: 3, iteration: 0 };
        Ok(Checkpoint::from_bytes(&ck.to_bytes(), Path::new("selftest"))? == ck)
    })();
    push("checkpoint", matches!(round_trip, Ok(true)), format!("{round_trip:?}"));
    out
}

pub fn selftest() -> Outcome {
    let checks = selftest_checks();
    let mut summary = String::new();
    for c in &checks {
        let _ = writeln!(summary, "{} {:<20} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    let _ = writeln!(summary, "{} of {} checks passed", checks.len() - failed, checks.len());
    Outcome { exit_code: (failed > 0) as i32, summary, manifest: None }
}
