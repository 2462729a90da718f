use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::SsmVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    Hybrid,
    Baseline,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Hybrid => "hybrid",
            Arch::Baseline => "baseline",
        })
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hybrid" => Ok(Arch::Hybrid),
            "baseline" | "transformer" | "transformer_baseline" => Ok(Arch::Baseline),
            _ => Err(format!("unknown architecture {s:?} (expected hybrid or baseline)")),
        }
    }
}

/// Parses `none`, `mamba` or `mamba2`.
pub fn parse_block(s: &str) -> std::result::Result<Option<SsmVariant>, String> {
    match s {
        "none" => Ok(None),
        "mamba" | "mamba1" => Ok(Some(SsmVariant::Mamba1)),
        "mamba2" => Ok(Some(SsmVariant::Mamba2)),
        _ => Err(format!("unknown block {s:?} (expected none, mamba or mamba2)")),
    }
}

pub fn block_name(block: Option<SsmVariant>) -> &'static str {
    match block {
        None => "none",
        Some(SsmVariant::Mamba1) => "mamba",
        Some(SsmVariant::Mamba2) => "mamba2",
    }
}

/// Shape of a decoder stack; the ablation axes are `block`, `ca_from_sa`
/// and `arch`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridStackConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Video-token update; `None` leaves video tokens untouched.
    pub block: Option<SsmVariant>,
    pub ca_from_sa: bool,
    pub arch: Arch,
    /// Mamba-2 head count.
    pub ssm_heads: usize,
    /// State size; `None` takes the variant default.
    pub n_state: Option<usize>,
}

impl Default for HybridStackConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 256,
            block: Some(SsmVariant::Mamba2),
            ca_from_sa: true,
            arch: Arch::Hybrid,
            ssm_heads: 4,
            n_state: None,
        }
    }
}

const KEYS: &[&str] = &["d", "layers", "heads", "vocab", "block", "ca_from_sa", "arch", "ssm_heads", "n_state"];

pub(crate) fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

/// Splits a `key = value` document into `(line, key, value)` triples,
/// skipping blanks and `#` comments.
pub fn key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config { line: Some(i + 1), msg: format!("expected `key = value`, got {line:?}") })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl HybridStackConfig {
    pub fn state_size(&self) -> usize {
        match self.block {
            Some(v) => self.n_state.unwrap_or(v.default_state_size()),
            None => 0,
        }
    }

    /// Applies one `key = value` setting. Unknown keys are rejected so typos
    /// surface instead of silently taking defaults.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let num = |v: &str| v.parse::<usize>().map_err(|e| format!("{key}: {e}"));
        match key {
            "d" => self.d = num(value)?,
            "layers" => self.n_layers = num(value)?,
            "heads" => self.n_heads = num(value)?,
            "vocab" => self.vocab_size = num(value)?,
            "block" => self.block = parse_block(value)?,
            "ca_from_sa" => self.ca_from_sa = parse_bool(value)?,
            "arch" => self.arch = value.parse()?,
            "ssm_heads" => self.ssm_heads = num(value)?,
            "n_state" => self.n_state = if value == "default" { None } else { Some(num(value)?) },
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a model config document. Keys outside the model's set are an
    /// error here; callers that share a document with other settings use
    /// [`HybridStackConfig::set`] directly.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, k, v) in key_values(text)? {
            match cfg.set(&k, &v) {
                Ok(true) => {}
                Ok(false) => return Err(Error::Config { line: Some(line), msg: format!("unknown key {k:?}") }),
                Err(msg) => return Err(Error::Config { line: Some(line), msg }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let n_state = self.n_state.map_or("default".to_string(), |n| n.to_string());
        let values = [
            self.d.to_string(),
            self.n_layers.to_string(),
            self.n_heads.to_string(),
            self.vocab_size.to_string(),
            block_name(self.block).to_string(),
            (self.ca_from_sa as u8).to_string(),
            self.arch.to_string(),
            self.ssm_heads.to_string(),
            n_state,
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: None, msg });
        if self.d == 0 || self.n_layers == 0 || self.vocab_size == 0 {
            return bad("d, layers and vocab must be positive".into());
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad(format!("d = {} is not divisible by heads = {}", self.d, self.n_heads));
        }
        if self.block == Some(SsmVariant::Mamba2) && (self.ssm_heads == 0 || (2 * self.d) % self.ssm_heads != 0) {
            return bad(format!("ssm_heads = {} does not divide the inner width {}", self.ssm_heads, 2 * self.d));
        }
        if self.n_state == Some(0) {
            return bad("n_state must be positive".into());
        }
        Ok(())
    }
}
