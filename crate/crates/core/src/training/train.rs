use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::loss::{combined_loss, distill_loss, lm_loss, lm_loss_value};
use super::optim::{clip_global_norm, cosine_lr, AdamW};
use super::task::{SyntheticTask, TaskInstance};
use crate::error::{Error, Result};
use crate::model::{is_hybrid_only, parse_bool, Arch, Model};
use crate::numerics::{Binder, Graph, Mode, Tensor};

/// λ values of the bundled distillation sweep.
pub const LAMBDA_GRID: [f64; 6] = [0.0, 0.001, 0.01, 0.5, 1.0, 2.0];

/// Instance indices at or above this are reserved for evaluation.
const EVAL_OFFSET: u64 = 1 << 62;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Stage 1: only the layers the hybrid adds are trained.
    Pretrain,
    /// Stage 2: everything is trained, language-modelling loss only.
    Instruct,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Instruct => "instruct",
        })
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "instruct" => Ok(Stage::Instruct),
            _ => Err(format!("unknown stage {s:?} (expected pretrain or instruct)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lambda: f64,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub warmup: usize,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Teacher logits kept per position by the distillation loss.
    pub distill_k: usize,
    /// Extra frozen path prefixes on top of the stage rule.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            lambda: 0.0,
            lr: 1e-3,
            min_lr_ratio: 0.1,
            warmup: 10,
            steps: 100,
            batch: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            grad_clip: 1.0,
            distill_k: 100,
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: None, msg });
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if self.stage == Stage::Instruct && self.lambda != 0.0 {
            return bad(format!(
                "the instruct stage trains on the language-modelling loss only; lambda = {} is not allowed",
                self.lambda
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("lr must be positive and min_lr_ratio in [0, 1]".into());
        }
        if self.batch == 0 || self.distill_k == 0 {
            return bad("batch and distill_k must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.weight_decay < 0.0
            || self.grad_clip < 0.0
        {
            return bad("optimizer settings out of range".into());
        }
        Ok(())
    }

    /// Applies one `key = value` setting; `Ok(false)` for keys this config
    /// does not own.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let f = |v: &str| v.parse::<f64>().map_err(|e| format!("{key}: {e}"));
        let n = |v: &str| v.parse::<usize>().map_err(|e| format!("{key}: {e}"));
        match key {
            "stage" => self.stage = value.parse()?,
            "lambda" => self.lambda = f(value)?,
            "lr" => self.lr = f(value)?,
            "min_lr_ratio" => self.min_lr_ratio = f(value)?,
            "warmup" => self.warmup = n(value)?,
            "steps" => self.steps = n(value)?,
            "batch" => self.batch = n(value)?,
            "seed" => self.seed = value.parse().map_err(|e| format!("{key}: {e}"))?,
            "beta1" => self.beta1 = f(value)?,
            "beta2" => self.beta2 = f(value)?,
            "weight_decay" => self.weight_decay = f(value)?,
            "grad_clip" => self.grad_clip = f(value)?,
            "distill_k" => self.distill_k = n(value)?,
            "freeze" => {
                self.freeze = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Whether `path` receives gradient updates. Stage 1 of a hybrid trains
    /// the added layers only; a baseline (the teacher) and stage 2 train
    /// everything. `freeze` prefixes are frozen in every case.
    pub fn trainable(&self, arch: Arch, path: &str) -> bool {
        if self.freeze.iter().any(|p| path.starts_with(p.as_str())) {
            return false;
        }
        match (self.stage, arch) {
            (Stage::Pretrain, Arch::Hybrid) => is_hybrid_only(path),
            _ => true,
        }
    }
}

/// Shared boolean parser for config documents.
pub fn parse_flag(v: &str) -> std::result::Result<bool, String> {
    parse_bool(v)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub lm_loss: f64,
    pub distill_loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    /// `sigmoid(α_raw)` per layer after the update (hybrid only).
    pub alpha: Vec<f64>,
}

pub fn write_log(records: &[LogRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Index of the `b`-th training instance of `step` for a given run seed.
fn train_index(seed: u64, step: usize, batch: usize, b: usize) -> u64 {
    (seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ ((step * batch + b) as u64)) % EVAL_OFFSET
}

struct StepOut {
    lm: f64,
    distill: Option<f64>,
    loss: f64,
    grads: BTreeMap<String, Tensor>,
}

fn instance_gradients(
    model: &Model,
    cfg: &TrainConfig,
    inst: &TaskInstance,
    teacher: Option<&Model>,
    step: usize,
) -> Result<StepOut> {
    let prompt = inst.prompt();
    let targets = inst.targets();
    let teacher_logits = match teacher {
        Some(t) if cfg.lambda > 0.0 => Some(t.logits(&prompt)?),
        _ => None,
    };
    let arch = model.config.arch;
    let trainable = |p: &str| cfg.trainable(arch, p);
    let mut g = Graph::new(Mode::Train);
    let mut binder = Binder::with_trainable(&trainable);
    let vars = model.bind(&mut g, &mut binder);
    let video = g.constant(prompt.video.clone());
    let diverged = |e: Error| match e {
        Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
        e => e,
    };
    let out = model.forward_graph(&mut g, &vars, video, &prompt.text).map_err(diverged)?;
    let lm = lm_loss(&mut g, out.logits, &targets).map_err(diverged)?;
    let distill = match teacher_logits {
        Some(t) => {
            let tv = g.constant(t);
            let k = cfg.distill_k.min(model.config.vocab_size);
            Some(distill_loss(&mut g, tv, out.logits, k)?)
        }
        None => None,
    };
    let loss = combined_loss(&mut g, lm, distill, cfg.lambda)?;
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Diverged { step, loss: loss_value });
    }
    let mut grads = g.backward(loss).map_err(diverged)?;
    Ok(StepOut {
        lm: g.value(lm).item(),
        distill: distill.map(|d| g.value(d).item()),
        loss: loss_value,
        grads: binder.gradients(&mut grads),
    })
}

/// Runs `cfg.steps` optimizer steps on instances of `task`. `teacher`
/// supplies distillation targets when `cfg.lambda > 0`.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    task: &SyntheticTask,
    teacher: Option<&Model>,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    task.validate()?;
    if task.d != model.config.d || task.min_vocab() > model.config.vocab_size {
        return Err(Error::config(format!(
            "task (d = {}, {} ids) does not fit the model (d = {}, vocab {})",
            task.d,
            task.min_vocab(),
            model.config.d,
            model.config.vocab_size
        )));
    }
    if cfg.lambda > 0.0 && teacher.is_none() {
        return Err(Error::config("lambda > 0 needs a teacher model"));
    }
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let (mut loss, mut lm, mut distill) = (0.0, 0.0, 0.0);
        for b in 0..cfg.batch {
            let inst = task.instance(train_index(cfg.seed, step, cfg.batch, b))?;
            let out = instance_gradients(model, cfg, &inst, teacher, step)?;
            loss += out.loss;
            lm += out.lm;
            distill += out.distill.unwrap_or(0.0);
            for (p, gr) in out.grads {
                match sum.get_mut(&p) {
                    Some(acc) => {
                        for (a, x) in acc.data_mut().iter_mut().zip(gr.data()) {
                            *a += x;
                        }
                    }
                    None => {
                        sum.insert(p, gr);
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        for t in sum.values_mut() {
            for x in t.data_mut() {
                *x *= inv;
            }
        }
        let grad_norm = clip_global_norm(&mut sum, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step, loss: loss * inv });
        }
        let lr = cosine_lr(step, cfg.steps, cfg.warmup, cfg.lr, cfg.min_lr_ratio);
        opt.update(lr, &sum, model);
        log.push(LogRecord {
            step,
            stage: cfg.stage,
            loss: loss * inv,
            lm_loss: lm * inv,
            distill_loss: (cfg.lambda > 0.0).then_some(distill * inv),
            lr,
            grad_norm,
            alpha: model.alphas(),
        });
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Exact-match rate of greedily decoded answers.
    pub accuracy: f64,
    /// Teacher-forced answer loss.
    pub mean_loss: f64,
    pub correct: usize,
    pub instances: usize,
}

/// Greedy exact-match accuracy and mean answer loss on `instances` held-out
/// instances (disjoint from every training stream).
pub fn evaluate(model: &Model, task: &SyntheticTask, instances: usize) -> Result<EvalReport> {
    if instances == 0 {
        return Err(Error::contract("evaluation needs at least one instance"));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for i in 0..instances {
        let inst = task.instance(EVAL_OFFSET + i as u64)?;
        let answer = model.generate(&inst.query(), task.answer_len())?;
        if answer == inst.answer() {
            correct += 1;
        }
        loss += lm_loss_value(&model.logits(&inst.prompt())?, &inst.targets())?;
    }
    Ok(EvalReport {
        accuracy: correct as f64 / instances as f64,
        mean_loss: loss / instances as f64,
        correct,
        instances,
    })
}

/// One-sided binomial tail `P[X ≥ k]` for `X ~ Bin(n, p)`.
pub fn binomial_upper_tail(k: usize, n: usize, p: f64) -> f64 {
    use statrs::distribution::{Binomial, DiscreteCDF};
    if k == 0 {
        return 1.0;
    }
    Binomial::new(p, n as u64).map_or(f64::NAN, |b| b.sf(k as u64 - 1))
}
