//! Training loop shared by the next-token model and the refiner.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{FinitePolicy, Graph};
use crate::checkpoint::Checkpoint;
use crate::dataset::{Split, TokenDataset};
use crate::error::{Error, Result};
use crate::model::{forward_graph, ForwardOpts, ModelConfig, TransformerParams};
use crate::optim::{clip_grad_norm, AdamWConfig, AdamWState, ParamRef};
use crate::permute::{make_batch, Objective, PermutationConfig, PermutedBatch};
use crate::schedule::lr_schedule_with;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NanPolicy {
    /// Abort, saving the last good state.
    #[default]
    Abort,
    /// Skip the offending step and keep going.
    Warn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_iters: usize,
    pub max_iters: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    /// Batches per split at each evaluation.
    pub eval_batches: usize,
    pub seed: u64,
    pub objective: Objective,
    /// Permutation block length; the window length is the model's block size.
    pub l: usize,
    pub grad_clip: f64,
    pub warmup_from_floor: bool,
    pub nan_policy: NanPolicy,
    pub adamw: AdamWConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-3,
            warmup_iters: 100,
            max_iters: 2000,
            batch_size: 64,
            eval_interval: 250,
            eval_batches: 8,
            seed: 1337,
            objective: Objective::NextToken,
            l: 4,
            grad_clip: 1.0,
            warmup_from_floor: false,
            nan_policy: NanPolicy::Abort,
            adamw: AdamWConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn permutation(&self) -> Result<PermutationConfig> {
        PermutationConfig::new(self.l, self.model.block_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.permutation()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.max_iters > 0 && self.warmup_iters >= self.max_iters {
            return bad(format!("warmup_iters {} must be < max_iters {}", self.warmup_iters, self.max_iters));
        }
        if self.lr_max.is_nan() || self.lr_max <= 0.0 {
            return bad(format!("lr_max must be > 0, got {}", self.lr_max));
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.eval_batches == 0 {
            return bad("batch_size, eval_interval and eval_batches must be >= 1".into());
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad(format!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        Ok(())
    }

    pub fn lr(&self, iter: usize) -> f64 {
        lr_schedule_with(iter, self.warmup_iters, self.max_iters, self.lr_max, self.warmup_from_floor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub split: Split,
    pub loss: f64,
    pub masked_accuracy: f64,
    pub lr: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,split,loss,masked_accuracy,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6e}", r.iter, r.split.name(), r.loss, r.masked_accuracy, r.lr);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Evaluation rows, every `eval_interval` iterations and once at the end.
    pub log: Vec<LogRow>,
    /// Mini-batch loss of every optimizer step.
    pub train_losses: Vec<f64>,
    /// Loss rows the autograd graph actually scored during training.
    pub loss_rows_scored: usize,
    /// Masked positions across all training batches.
    pub masked_positions: usize,
    pub skipped_steps: usize,
}

impl TrainOutcome {
    pub fn last(&self, split: Split) -> Option<&LogRow> {
        self.log.iter().rev().find(|r| r.split == split)
    }
}

fn random_offsets<R: Rng>(rng: &mut R, split_len: usize, t: usize, n: usize) -> Result<Vec<usize>> {
    if split_len < t + 1 {
        return Err(Error::SplitTooSmall { len: split_len, need: t + 1 });
    }
    let hi = split_len - t - 1;
    Ok((0..n).map(|_| rng.random_range(0..=hi)).collect())
}

/// Mean masked loss and masked accuracy of `params` on one batch.
pub fn score_batch(params: &TransformerParams<f32>, batch: &PermutedBatch) -> Result<(f64, usize, usize)> {
    let mut g = Graph::new();
    let vars: Vec<_> = params.tensors.iter().map(|t| g.constant(t.clone())).collect();
    let logits = forward_graph(&mut g, &params.config, &vars, &batch.inputs, batch.batch, ForwardOpts::default())?;
    let loss = g.cross_entropy_masked(logits, &batch.targets, &batch.loss_mask)?;
    let v = params.config.vocab_size;
    let ld = g.value(logits).data();
    let mut correct = 0;
    let mut total = 0;
    for (r, _) in batch.loss_mask.iter().enumerate().filter(|(_, &m)| m) {
        if argmax(&ld[r * v..(r + 1) * v]) == batch.targets[r] as usize {
            correct += 1;
        }
        total += 1;
    }
    Ok((g.value(loss).item() as f64, correct, total))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Masked loss and accuracy over `eval_batches` fixed batches of `split`.
pub fn evaluate_split(params: &TransformerParams<f32>, data: &TokenDataset, split: Split, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let perm = cfg.permutation()?;
    // same offsets at every evaluation so curves are comparable
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1 ^ split as u64);
    let mut loss = 0.0;
    let (mut correct, mut total) = (0, 0);
    for _ in 0..cfg.eval_batches {
        let offsets = random_offsets(&mut rng, data.split(split).len(), perm.t, cfg.batch_size)?;
        let batch = make_batch(data.split(split), &offsets, perm, cfg.objective)?;
        let (l, c, n) = score_batch(params, &batch)?;
        loss += l;
        correct += c;
        total += n;
    }
    Ok((loss / cfg.eval_batches as f64, correct as f64 / total as f64))
}

/// Trains a fresh model. The final state goes to `checkpoint_path` when
/// given; on divergence the last good state is written there instead.
pub fn train(cfg: &TrainConfig, data: &TokenDataset, checkpoint_path: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.model.vocab_size != data.vocab_size() {
        return Err(Error::Config(format!("model vocab_size {} differs from dataset vocab_size {}", cfg.model.vocab_size, data.vocab_size())));
    }
    let perm = cfg.permutation()?;
    for split in [Split::Train, Split::Val] {
        if data.split(split).len() < perm.t + 1 {
            return Err(Error::SplitTooSmall { len: data.split(split).len(), need: perm.t + 1 });
        }
    }

    let mut params = TransformerParams::<f32>::init(cfg.model, cfg.seed)?;
    let shapes: Vec<&[usize]> = params.tensors.iter().map(|t| t.shape()).collect();
    let mut opt = AdamWState::new(cfg.adamw, &shapes);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let graph_policy = match cfg.nan_policy {
        NanPolicy::Abort => FinitePolicy::Error,
        NanPolicy::Warn => FinitePolicy::Warn,
    };

    let mut log = Vec::new();
    let mut train_losses = Vec::with_capacity(cfg.max_iters);
    let mut loss_rows_scored = 0;
    let mut masked_positions = 0;
    let mut skipped_steps = 0;
    let snapshot = |params: &TransformerParams<f32>, opt: &AdamWState<f32>, iter: usize| Checkpoint {
        params: params.clone(),
        optimizer: Some(opt.clone()),
        objective: cfg.objective,
        l: cfg.l,
        seed: cfg.seed,
        iteration: iter as u64,
    };

    for iter in 0..=cfg.max_iters {
        let lr = cfg.lr(iter);
        if iter % cfg.eval_interval == 0 || iter == cfg.max_iters {
            for split in [Split::Train, Split::Val] {
                let (loss, acc) = evaluate_split(&params, data, split, cfg)?;
                log::info!("iter {iter:>5} {:<5} loss {loss:.4} masked acc {acc:.4} lr {lr:.2e}", split.name());
                log.push(LogRow { iter, split, loss, masked_accuracy: acc, lr });
            }
        }
        if iter == cfg.max_iters {
            break;
        }

        let offsets = random_offsets(&mut batch_rng, data.train().len(), perm.t, cfg.batch_size)?;
        let batch = make_batch(data.train(), &offsets, perm, cfg.objective)?;
        masked_positions += batch.masked_count();

        let step = (|| -> Result<f64> {
            let mut g = Graph::with_policy(graph_policy);
            let vars = params.bind(&mut g);
            let opts = ForwardOpts { causal: true, dropout_rng: (cfg.model.dropout > 0.0).then_some(&mut dropout_rng) };
            let logits = forward_graph(&mut g, &cfg.model, &vars, &batch.inputs, batch.batch, opts)?;
            let loss_var = g.cross_entropy_masked(logits, &batch.targets, &batch.loss_mask)?;
            loss_rows_scored += g.loss_rows_evaluated();
            let loss = g.value(loss_var).item() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite("loss".into()));
            }
            let mut grads = g.backward(loss_var)?;
            let mut gs: Vec<Tensor<f32>> =
                vars.iter().zip(&params.tensors).map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))).collect();
            clip_grad_norm(&mut gs, cfg.grad_clip);
            let decays: Vec<bool> = (0..params.tensors.len()).map(|i| params.decays(i)).collect();
            let mut refs: Vec<ParamRef<'_, f32>> =
                params.names.iter().zip(params.tensors.iter_mut()).zip(decays).map(|((name, value), decay)| ParamRef { name, value, decay }).collect();
            let grad_refs: Vec<&Tensor<f32>> = gs.iter().collect();
            opt.step(&mut refs, &grad_refs, lr)?;
            Ok(loss)
        })();

        match step {
            Ok(loss) => train_losses.push(loss),
            Err(e @ (Error::NonFinite(_) | Error::NonFiniteGradient(_))) => match cfg.nan_policy {
                NanPolicy::Warn => {
                    log::warn!("iter {iter}: {e}; step skipped");
                    train_losses.push(f64::NAN);
                    skipped_steps += 1;
                }
                NanPolicy::Abort => {
                    if let Some(path) = checkpoint_path {
                        snapshot(&params, &opt, iter).save(path)?;
                    }
                    return Err(Error::Diverged { iter, loss: f64::NAN, last_good: iter });
                }
            },
            Err(e) => return Err(e),
        }
    }

    let checkpoint = snapshot(&params, &opt, cfg.max_iters);
    if let Some(path) = checkpoint_path {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome { checkpoint, log, train_losses, loss_rows_scored, masked_positions, skipped_steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Scheme;

    fn tiny_cfg(objective: Objective) -> TrainConfig {
        TrainConfig {
            lr_max: 1e-2,
            warmup_iters: 5,
            max_iters: 20,
            batch_size: 4,
            eval_interval: 10,
            eval_batches: 1,
            objective,
            model: ModelConfig { n_layer: 1, n_head: 2, emb_dim: 16, block_size: 8, vocab_size: 3, dropout: 0.0 },
            ..Default::default()
        }
    }

    fn abc() -> TokenDataset {
        TokenDataset::from_text(&"abc".repeat(100), Scheme::Char).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg(Objective::NextToken);
        assert!(c.validate().is_ok());
        c.warmup_iters = 20;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg(Objective::NextToken);
        c.l = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_iterations_log_uniform_loss() {
        let mut c = tiny_cfg(Objective::NextToken);
        c.max_iters = 0;
        c.warmup_iters = 0;
        c.eval_batches = 8;
        c.model.vocab_size = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let text: String = (0..2000).map(|_| (b'a' + rng.random_range(0..20u8)) as char).collect();
        let out = train(&c, &TokenDataset::from_text(&text, Scheme::Char).unwrap(), None).unwrap();
        let val = out.last(Split::Val).unwrap();
        let uniform = 20f64.ln();
        assert!((val.loss - uniform).abs() < 0.05 * uniform, "{}", val.loss);
        assert!(out.train_losses.is_empty());
    }

    #[test]
    fn only_masked_positions_are_scored() {
        let out = train(&tiny_cfg(Objective::SecondToLast), &abc(), None).unwrap();
        assert_eq!(out.loss_rows_scored, out.masked_positions);
        assert_eq!(out.masked_positions, 20 * 4 * 2);
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let mut c = tiny_cfg(Objective::NextToken);
        c.model.vocab_size = 5;
        assert!(matches!(train(&c, &abc(), None), Err(Error::Config(_))));
    }

    #[test]
    fn csv_header() {
        let rows = vec![LogRow { iter: 0, split: Split::Val, loss: 1.0, masked_accuracy: 0.5, lr: 1e-3 }];
        let csv = log_csv(&rows);
        assert!(csv.starts_with("iter,split,loss,masked_accuracy,lr\n0,val,1.000000,0.500000,"));
    }
}
