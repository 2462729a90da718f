use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::task::SyntheticTask;
use super::train::{binomial_upper_tail, evaluate, train, EvalReport, LogRecord, Stage, TrainConfig, LAMBDA_GRID};
use crate::error::{Error, Result};
use crate::model::{block_name, key_values, Arch, HybridStackConfig, Model};
use crate::ssm::SsmVariant;

/// A complete teacher-then-hybrid run: model shape, task, stage-1 training
/// and evaluation, all driven by one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Shape shared by the teacher and the hybrid. `arch` selects what a
    /// single `train` run builds; sweeps override `ca_from_sa` and `block`.
    pub model: HybridStackConfig,
    /// `d` and `seed` are taken from the model and the run seed.
    pub task: SyntheticTask,
    /// Stage-1 (or instruct) optimizer settings; `seed` is the run seed.
    pub train: TrainConfig,
    /// Optimizer steps of the baseline teacher, which uses `train` otherwise.
    pub teacher_steps: usize,
    pub eval_instances: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = HybridStackConfig { d: 32, vocab_size: 16, n_state: Some(16), ..Default::default() };
        Self {
            task: SyntheticTask { d: model.d, needle_count: 1, ..Default::default() },
            model,
            train: TrainConfig { lr: 3e-3, warmup: 20, steps: 600, ..Default::default() },
            teacher_steps: 400,
            eval_instances: 100,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting, trying run keys, then task, model
    /// and training keys.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let num = |v: &str| v.parse::<usize>().map_err(|e| format!("{key}: {e}"));
        match key {
            "seed" => self.seed = value.parse().map_err(|e| format!("{key}: {e}"))?,
            "teacher_steps" => self.teacher_steps = num(value)?,
            "eval_instances" => self.eval_instances = num(value)?,
            _ => {
                if !(self.task.set(key, value)? || self.model.set(key, value)? || self.train.set(key, value)?) {
                    return Err(format!("unknown key {key:?}"));
                }
            }
        }
        self.sync();
        Ok(())
    }

    fn sync(&mut self) {
        self.task.d = self.model.d;
        self.task.seed = self.seed;
        self.train.seed = self.seed;
    }

    /// Applies a `key = value` document on top of `self`; errors name the line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, k, v) in key_values(text)? {
            self.set(&k, &v).map_err(|msg| Error::Config { line: Some(line), msg })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.task.min_vocab() > self.model.vocab_size {
            return Err(Error::config(format!(
                "vocab {} cannot hold the task's {} ids",
                self.model.vocab_size,
                self.task.min_vocab()
            )));
        }
        if self.eval_instances == 0 {
            return Err(Error::config("eval_instances must be positive"));
        }
        Ok(())
    }

    /// Every setting as a `key = value` document that `parse` reads back.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut out = format!(
            "seed = {}\nteacher_steps = {}\neval_instances = {}\n",
            self.seed, self.teacher_steps, self.eval_instances
        );
        out += &format!(
            "task = {}\nM = {}\nN = {}\nclasses = {}\nneedles = {}\n",
            self.task.kind, self.task.m, self.task.n, self.task.n_classes, self.task.needle_count
        );
        out += &self.model.to_text();
        out += &format!(
            "stage = {}\nlambda = {}\nlr = {}\nmin_lr_ratio = {}\nwarmup = {}\nsteps = {}\nbatch = {}\nbeta1 = {}\nbeta2 = {}\nweight_decay = {}\ngrad_clip = {}\ndistill_k = {}\nfreeze = {}\n",
            t.stage, t.lambda, t.lr, t.min_lr_ratio, t.warmup, t.steps, t.batch, t.beta1, t.beta2, t.weight_decay, t.grad_clip, t.distill_k, t.freeze.join(",")
        );
        out
    }

    pub fn teacher_config(&self) -> HybridStackConfig {
        HybridStackConfig { arch: Arch::Baseline, ..self.model.clone() }
    }

    /// Trains the baseline teacher from the run seed on the language-modelling
    /// loss.
    pub fn train_teacher(&self) -> Result<(Model, Vec<LogRecord>)> {
        self.validate()?;
        let mut teacher = Model::new(self.teacher_config(), self.seed)?;
        let cfg = TrainConfig {
            stage: Stage::Pretrain,
            lambda: 0.0,
            steps: self.teacher_steps,
            freeze: Vec::new(),
            ..self.train.clone()
        };
        let log = train(&mut teacher, &cfg, &self.task, None)?;
        Ok((teacher, log))
    }

    /// Chance accuracy of a uniform guess over the answer classes.
    pub fn chance(&self) -> f64 {
        (1.0 / self.task.n_classes as f64).powi(self.task.answer_len() as i32)
    }

    /// Builds the hybrid for `v` from `teacher`, evaluates it, trains it and
    /// evaluates again. Every variant draws its new layers from the same seed.
    pub fn run_variant(&self, teacher: &Model, v: &Variant) -> Result<VariantOutcome> {
        let config =
            HybridStackConfig { arch: Arch::Hybrid, ca_from_sa: v.ca_from_sa, block: v.block, ..self.model.clone() };
        let mut model = Model::hybrid_from_baseline(teacher, config, self.seed.wrapping_add(1))?;
        let initial = evaluate(&model, &self.task, self.eval_instances)?;
        let cfg = TrainConfig { lambda: v.lambda, ..self.train.clone() };
        let log = train(&mut model, &cfg, &self.task, (v.lambda > 0.0).then_some(teacher))?;
        let fin = evaluate(&model, &self.task, self.eval_instances)?;
        let summary = VariantSummary {
            label: v.label.clone(),
            ca_from_sa: v.ca_from_sa,
            block: block_name(v.block).into(),
            lambda: v.lambda,
            initial_loss: initial.mean_loss,
            initial_accuracy: initial.accuracy,
            final_loss: fin.mean_loss,
            final_accuracy: fin.accuracy,
            correct: fin.correct,
            instances: fin.instances,
            p_value: binomial_upper_tail(fin.correct, fin.instances, self.chance()),
        };
        Ok(VariantOutcome { summary, initial, fin, log, model })
    }

    /// Trains one teacher, then every variant of `axis` from it.
    pub fn sweep(&self, axis: Axis) -> Result<SweepReport> {
        let (teacher, _) = self.train_teacher()?;
        let teacher_eval = evaluate(&teacher, &self.task, self.eval_instances)?;
        let rows = axis
            .variants()
            .iter()
            .map(|v| self.run_variant(&teacher, v).map(|o| o.summary))
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepReport { axis, chance: self.chance(), teacher: teacher_eval, rows })
    }
}

/// One hybrid configuration of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub ca_from_sa: bool,
    pub block: Option<SsmVariant>,
    pub lambda: f64,
}

impl Variant {
    /// The four ablation rows: A (random cross-attention, no SSM), B (cross
    /// from self, no SSM), C (plus Mamba) and D (plus Mamba-2).
    pub fn ablation(label: char) -> Option<Variant> {
        let (ca, block) = match label {
            'A' => (false, None),
            'B' => (true, None),
            'C' => (true, Some(SsmVariant::Mamba1)),
            'D' => (true, Some(SsmVariant::Mamba2)),
            _ => return None,
        };
        Some(Variant { label: label.to_string(), ca_from_sa: ca, block, lambda: 0.0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Lambda,
    CaFromSa,
    BlockVariant,
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lambda" => Ok(Axis::Lambda),
            "ca_from_sa" => Ok(Axis::CaFromSa),
            "block_variant" | "block" => Ok(Axis::BlockVariant),
            _ => Err(format!("unknown sweep axis {s:?} (expected lambda, ca_from_sa or block_variant)")),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Lambda => "lambda",
            Axis::CaFromSa => "ca_from_sa",
            Axis::BlockVariant => "block_variant",
        })
    }
}

impl Axis {
    /// `lambda`: row D over the distillation grid. `ca_from_sa`: both
    /// initializations under every block, the four ablation rows labelled.
    /// `block_variant`: rows B, C and D.
    pub fn variants(self) -> Vec<Variant> {
        match self {
            Axis::Lambda => LAMBDA_GRID
                .iter()
                .map(|&lambda| Variant {
                    label: format!("D λ={lambda}"),
                    lambda,
                    ..Variant::ablation('D').expect("row D")
                })
                .collect(),
            Axis::CaFromSa => {
                let mut out = Vec::new();
                for ca in [false, true] {
                    for block in [None, Some(SsmVariant::Mamba1), Some(SsmVariant::Mamba2)] {
                        let label = ['A', 'B', 'C', 'D']
                            .into_iter()
                            .find(|&l| Variant::ablation(l).is_some_and(|v| v.ca_from_sa == ca && v.block == block))
                            .map_or_else(|| "-".to_string(), |l| l.to_string());
                        out.push(Variant { label, ca_from_sa: ca, block, lambda: 0.0 });
                    }
                }
                out
            }
            Axis::BlockVariant => ['B', 'C', 'D'].into_iter().filter_map(Variant::ablation).collect(),
        }
    }
}

/// Held-out metrics of one variant before and after stage-1 training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub label: String,
    pub ca_from_sa: bool,
    pub block: String,
    pub lambda: f64,
    /// Mean held-out answer loss right after construction from the teacher.
    pub initial_loss: f64,
    pub initial_accuracy: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub correct: usize,
    pub instances: usize,
    /// One-sided binomial p-value of `correct` against chance.
    pub p_value: f64,
}

pub struct VariantOutcome {
    pub summary: VariantSummary,
    pub initial: EvalReport,
    pub fin: EvalReport,
    pub log: Vec<LogRecord>,
    pub model: Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: Axis,
    pub chance: f64,
    pub teacher: EvalReport,
    pub rows: Vec<VariantSummary>,
}

impl SweepReport {
    /// Fixed-width comparison table, one row per variant.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>5} {:>7} {:>7} {:>9} {:>8} {:>9} {:>8} {:>10}\n",
            "model", "ca", "block", "lambda", "init_loss", "init_acc", "loss", "acc", "p"
        );
        for r in &self.rows {
            out += &format!(
                "{:<10} {:>5} {:>7} {:>7} {:>9.4} {:>8.2} {:>9.4} {:>8.2} {:>10.2e}\n",
                r.label,
                r.ca_from_sa as u8,
                r.block,
                r.lambda,
                r.initial_loss,
                r.initial_accuracy,
                r.final_loss,
                r.final_accuracy,
                r.p_value
            );
        }
        out += &format!("teacher accuracy {:.2}, chance {:.2}\n", self.teacher.accuracy, self.chance);
        out
    }
}
