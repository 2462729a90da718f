use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Least-squares line through `(ln M, ln cost)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Standard error of the slope; zero for an exact fit.
    pub slope_stderr: f64,
    pub points: usize,
}

/// Smallest ratio between the largest and smallest `M` of a fit.
pub const MIN_SPAN: f64 = 16.0;
pub const MIN_POINTS: usize = 4;

pub fn fit_scaling_exponent(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < MIN_POINTS {
        return Err(Error::contract(format!("a scaling fit needs at least {MIN_POINTS} points, got {}", points.len())));
    }
    if let Some(&(m, c)) = points.iter().find(|&&(m, c)| !(m > 0.0 && c > 0.0 && m.is_finite() && c.is_finite())) {
        return Err(Error::contract(format!("scaling fit needs positive finite M and cost, got ({m}, {c})")));
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::contract("scaling fit needs strictly increasing M"));
    }
    let span = points[points.len() - 1].0 / points[0].0;
    if span < MIN_SPAN {
        return Err(Error::contract(format!("M spans only {span:.2}x, need at least {MIN_SPAN}x")));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let slope_stderr = (sse.max(0.0) / (n - 2.0) / sxx).sqrt();
    Ok(ScalingFit { slope, intercept, r2, slope_stderr, points: points.len() })
}
