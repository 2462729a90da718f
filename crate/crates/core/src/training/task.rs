use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Prompt;
use crate::numerics::{rng, Tensor};

/// Seed of the shared codebook. Codes are a property of the task family, not
/// of an instance, so a model can learn them.
const CODEBOOK_SEED: u64 = 0x5eed_c0de;

/// Background rows are resampled until every slot-code projection is below
/// this; needles project at `1/√2`, so the reader can never be fooled.
const BACKGROUND_LIMIT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    /// Report the class of one of `needle_count` needles.
    NeedleRetrieval,
    /// Report the classes of all `needle_count` needles in slot order.
    Copy,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::NeedleRetrieval => "needle",
            TaskKind::Copy => "copy",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "needle" | "needle_retrieval" => Ok(TaskKind::NeedleRetrieval),
            "copy" => Ok(TaskKind::Copy),
            _ => Err(format!("unknown task {s:?} (expected needle or copy)")),
        }
    }
}

/// A family of synthetic long-context instances.
///
/// Video rows are random unit vectors (kept away from the slot codes) except at `needle_count` positions,
/// which hold `(class_code[c] + slot_code[j]) / √2`. Codes are orthonormal.
/// Text ids: classes are `0..n_classes`, then a filler id, then one query id
/// per slot (needle) or a single copy id (copy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Video tokens per instance.
    pub m: usize,
    /// Query tokens per instance (fillers followed by the query id).
    pub n: usize,
    pub n_classes: usize,
    pub needle_count: usize,
    pub d: usize,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self { kind: TaskKind::NeedleRetrieval, m: 256, n: 2, n_classes: 5, needle_count: 2, d: 64, seed: 0 }
    }
}

/// One generated instance. `text` is the full sequence, query then answer.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    pub video: Tensor,
    pub text: Vec<usize>,
    pub n_query: usize,
    /// Needle position per slot.
    pub needle_positions: Vec<usize>,
}

impl TaskInstance {
    pub fn answer(&self) -> &[usize] {
        &self.text[self.n_query..]
    }

    /// Model input: the query and every answer token except the last.
    pub fn prompt(&self) -> Prompt {
        Prompt { video: self.video.clone(), text: self.text[..self.text.len() - 1].to_vec() }
    }

    /// Only the positions that predict answer tokens are supervised.
    pub fn targets(&self) -> Vec<Option<usize>> {
        (0..self.text.len() - 1).map(|t| (t + 1 >= self.n_query).then(|| self.text[t + 1])).collect()
    }

    /// The prompt for greedy decoding: the query alone.
    pub fn query(&self) -> Prompt {
        Prompt { video: self.video.clone(), text: self.text[..self.n_query].to_vec() }
    }
}

/// Orthonormal class and slot codes in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub classes: Vec<Vec<f64>>,
    pub slots: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    for x in v {
        *x /= n;
    }
}

impl Codebook {
    pub fn new(d: usize, n_classes: usize, n_slots: usize) -> Result<Self> {
        if n_classes + n_slots > d {
            return Err(Error::contract(format!(
                "{n_classes} classes and {n_slots} slots need d ≥ {}",
                n_classes + n_slots
            )));
        }
        let mut r = rng(CODEBOOK_SEED ^ d as u64);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < n_classes + n_slots {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            for b in &basis {
                let p = dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
            if dot(&v, &v) > 1e-6 {
                normalize(&mut v);
                basis.push(v);
            }
        }
        let slots = basis.split_off(n_classes);
        Ok(Self { classes: basis, slots })
    }
}

impl SyntheticTask {
    /// Applies one `key = value` setting; `Ok(false)` for keys the task does
    /// not own. `d` follows the model and is not a task key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let num = |v: &str| v.parse::<usize>().map_err(|e| format!("{key}: {e}"));
        match key {
            "task" => self.kind = value.parse()?,
            "M" => self.m = num(value)?,
            "N" => self.n = num(value)?,
            "classes" => self.n_classes = num(value)?,
            "needles" => self.needle_count = num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn filler_id(&self) -> usize {
        self.n_classes
    }

    pub fn query_id(&self, slot: usize) -> usize {
        self.n_classes + 1 + slot
    }

    pub fn copy_id(&self) -> usize {
        self.n_classes + 1
    }

    /// Smallest vocabulary that holds every id the task emits.
    pub fn min_vocab(&self) -> usize {
        match self.kind {
            TaskKind::NeedleRetrieval => self.n_classes + 1 + self.needle_count,
            TaskKind::Copy => self.n_classes + 2,
        }
    }

    pub fn answer_len(&self) -> usize {
        match self.kind {
            TaskKind::NeedleRetrieval => 1,
            TaskKind::Copy => self.needle_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.needle_count == 0 || self.m < self.needle_count {
            return Err(Error::contract(format!(
                "need 1 ≤ needle_count ≤ M, got {} and M = {}",
                self.needle_count, self.m
            )));
        }
        if self.n == 0 || self.n_classes < 2 {
            return Err(Error::contract("a task needs at least one query token and two classes"));
        }
        if self.n_classes + self.needle_count > self.d {
            return Err(Error::contract(format!(
                "d = {} cannot hold {} orthogonal codes",
                self.d,
                self.n_classes + self.needle_count
            )));
        }
        Ok(())
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(self.d, self.n_classes, self.needle_count)
    }

    /// Instance `index` of this family; fully determined by `(seed, index)`.
    pub fn instance(&self, index: u64) -> Result<TaskInstance> {
        self.validate()?;
        let codes = self.codebook()?;
        let mut r = rng(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index);
        let mut video = Vec::with_capacity(self.m * self.d);
        for _ in 0..self.m {
            loop {
                let mut v: Vec<f64> = (0..self.d).map(|_| StandardNormal.sample(&mut r)).collect();
                normalize(&mut v);
                if codes.slots.iter().all(|s| dot(&v, s).abs() < BACKGROUND_LIMIT) {
                    video.extend(v);
                    break;
                }
            }
        }
        let positions = rand::seq::index::sample(&mut r, self.m, self.needle_count).into_vec();
        let classes: Vec<usize> = (0..self.needle_count).map(|_| r.random_range(0..self.n_classes)).collect();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for (slot, (&p, &c)) in positions.iter().zip(&classes).enumerate() {
            let row = &mut video[p * self.d..(p + 1) * self.d];
            for ((x, a), b) in row.iter_mut().zip(&codes.classes[c]).zip(&codes.slots[slot]) {
                *x = s * (a + b);
            }
        }
        let mut text = vec![self.filler_id(); self.n - 1];
        match self.kind {
            TaskKind::NeedleRetrieval => {
                let slot = r.random_range(0..self.needle_count);
                text.push(self.query_id(slot));
                text.push(classes[slot]);
            }
            TaskKind::Copy => {
                text.push(self.copy_id());
                text.extend(&classes);
            }
        }
        Ok(TaskInstance {
            video: Tensor::new(vec![self.m, self.d], video)?,
            text,
            n_query: self.n,
            needle_positions: positions,
        })
    }
}

/// Reads the answer straight off the video rows: for each requested slot the
/// row with the largest slot-code projection, then its nearest class code.
pub fn brute_force_reader(task: &SyntheticTask, inst: &TaskInstance) -> Result<Vec<usize>> {
    let codes = task.codebook()?;
    let query = inst.text[inst.n_query - 1];
    let slots: Vec<usize> = match task.kind {
        TaskKind::NeedleRetrieval => vec![query - task.query_id(0)],
        TaskKind::Copy => (0..task.needle_count).collect(),
    };
    let argmax =
        |scores: Vec<f64>| scores.iter().enumerate().fold(0, |best, (i, &s)| if s > scores[best] { i } else { best });
    Ok(slots
        .into_iter()
        .map(|slot| {
            let row = argmax((0..task.m).map(|i| dot(inst.video.row(i), &codes.slots[slot])).collect());
            argmax(codes.classes.iter().map(|c| dot(inst.video.row(row), c)).collect())
        })
        .collect())
}

/// `generate_task`: instance 0 of the family.
pub fn generate_task(task: &SyntheticTask) -> Result<TaskInstance> {
    task.instance(0)
}
