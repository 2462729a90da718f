use std::io::{Read, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cost::{analytic_cost, counted_cost, memory_estimate};
use super::fit::{fit_scaling_exponent, ScalingFit};
use crate::error::{Error, Result};
use crate::model::{Arch, Model, Prompt};
use crate::numerics::{Binder, Graph, Mode, Tensor};
use crate::training::lm_loss;

pub const SCHEMA: &str = "hybridseq-bench/1";
pub const MIN_REPEATS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Timed runs per grid point, after one untimed warm-up.
    pub repeats: usize,
    /// Points whose estimated activations exceed this many bytes are not timed.
    pub memory_budget_bytes: u64,
    /// Time a full training step (forward, loss, backward) instead of a pre-fill.
    pub train_step: bool,
    /// Skip wall-clock entirely and report costs only.
    pub timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { repeats: 5, memory_budget_bytes: 2 << 30, train_step: false, timing: true }
    }
}

/// One grid point. Field names are the CSV columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub layers: usize,
    pub flops_analytic: u64,
    pub flops_counted: u64,
    pub mem_estimate: u64,
    pub wall_ms_median: Option<f64>,
    pub repeats: usize,
    /// Why a point was not timed; empty otherwise.
    pub note: String,
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[k]
    } else {
        0.5 * (xs[k - 1] + xs[k])
    }
}

fn time_once(model: &Model, prompt: &Prompt, train_step: bool) -> Result<f64> {
    let t0 = Instant::now();
    if train_step {
        let mut g = Graph::new(Mode::Train);
        let vars = model.bind(&mut g, &mut Binder::new());
        let video = g.constant(prompt.video.clone());
        let out = model.forward_graph(&mut g, &vars, video, &prompt.text)?;
        let targets: Vec<Option<usize>> = prompt.text[1..].iter().map(|&t| Some(t)).chain([None]).collect();
        let loss = lm_loss(&mut g, out.logits, &targets)?;
        g.backward(loss)?;
    } else {
        model.logits(prompt)?;
    }
    Ok(t0.elapsed().as_secs_f64() * 1e3)
}

/// Costs and wall-clock of one pre-fill per grid point, run sequentially.
pub fn bench(model: &Model, grid: &[(usize, usize)], cfg: &BenchConfig) -> Result<Vec<CostReport>> {
    if cfg.repeats < MIN_REPEATS {
        return Err(Error::contract(format!("bench needs at least {MIN_REPEATS} repeats, got {}", cfg.repeats)));
    }
    let c = &model.config;
    let mut rows = Vec::with_capacity(grid.len());
    for &(m, n) in grid {
        let analytic = analytic_cost(c, m, n)?;
        let counted = counted_cost(model, m, n)?;
        let mem = memory_estimate(c, m, n)?.total;
        let mut row = CostReport {
            arch: arch_name(c.arch).into(),
            m,
            n,
            d: c.d,
            layers: c.n_layers,
            flops_analytic: analytic.flops,
            flops_counted: counted.flops,
            mem_estimate: mem,
            wall_ms_median: None,
            repeats: 0,
            note: String::new(),
        };
        let bytes = mem.saturating_mul(8);
        if !cfg.timing {
            row.note = "timing disabled".into();
        } else if bytes > cfg.memory_budget_bytes {
            row.note = format!("skipped: estimated {bytes} bytes exceeds budget {}", cfg.memory_budget_bytes);
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ ((m as u64) << 20) ^ n as u64);
            let video = Tensor::new(vec![m, c.d], (0..m * c.d).map(|_| StandardNormal.sample(&mut rng)).collect())?;
            let text = (0..n).map(|i| i % c.vocab_size).collect();
            let prompt = Prompt::new(video, text)?;
            time_once(model, &prompt, cfg.train_step)?;
            let mut samples =
                (0..cfg.repeats).map(|_| time_once(model, &prompt, cfg.train_step)).collect::<Result<Vec<_>>>()?;
            row.wall_ms_median = Some(median(&mut samples));
            row.repeats = cfg.repeats;
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn arch_name(a: Arch) -> &'static str {
    match a {
        Arch::Hybrid => "hybrid",
        Arch::Baseline => "baseline",
    }
}

/// CSV with a leading `# schema` comment line.
pub fn write_csv(rows: &[CostReport], mut out: impl Write) -> Result<()> {
    writeln!(out, "# schema: {SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(mut input: impl Read) -> Result<Vec<CostReport>> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let first = text.lines().next().unwrap_or_default();
    match first.strip_prefix("# schema:").map(str::trim) {
        Some(SCHEMA) => {}
        Some(other) => return Err(Error::Format(format!("unsupported bench schema {other:?} (expected {SCHEMA})"))),
        None => return Err(Error::Format("bench CSV lacks a schema line".into())),
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(|e| Error::Format(e.to_string()))).collect()
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    schema: String,
    rows: Vec<CostReport>,
}

pub fn write_json(rows: &[CostReport], out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(out, &JsonReport { schema: SCHEMA.into(), rows: rows.to_vec() })
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn read_json(input: impl Read) -> Result<Vec<CostReport>> {
    let r: JsonReport = serde_json::from_reader(input).map_err(|e| Error::Format(e.to_string()))?;
    if r.schema != SCHEMA {
        return Err(Error::Format(format!("unsupported bench schema {:?} (expected {SCHEMA})", r.schema)));
    }
    Ok(r.rows)
}

/// Fitted exponents of one architecture's rows at a fixed `N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub arch: String,
    pub n: usize,
    pub flops: ScalingFit,
    pub memory: ScalingFit,
    /// Only when every point was timed.
    pub wall: Option<ScalingFit>,
}

/// Groups rows by architecture and `N` and fits each cost against `M`.
pub fn analyze(rows: &[CostReport]) -> Result<Vec<Analysis>> {
    let mut groups: std::collections::BTreeMap<(String, usize), Vec<&CostReport>> = Default::default();
    for r in rows {
        groups.entry((r.arch.clone(), r.n)).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((arch, n), mut g) in groups {
        g.sort_by_key(|r| r.m);
        let pts = |f: &dyn Fn(&CostReport) -> f64| g.iter().map(|r| (r.m as f64, f(r))).collect::<Vec<_>>();
        let flops = fit_scaling_exponent(&pts(&|r| r.flops_counted as f64))?;
        let memory = fit_scaling_exponent(&pts(&|r| r.mem_estimate as f64))?;
        let timed: Vec<(f64, f64)> = g.iter().filter_map(|r| r.wall_ms_median.map(|w| (r.m as f64, w))).collect();
        let wall = if timed.len() == g.len() { fit_scaling_exponent(&timed).ok() } else { None };
        out.push(Analysis { arch, n, flops, memory, wall });
    }
    Ok(out)
}
