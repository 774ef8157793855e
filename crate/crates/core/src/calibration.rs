//! Uncertainty-to-rejection calibration and the skip thresholds derived from it.
//!
//! Calibration fits `beta ≈ a·u + b` by least squares over verified rounds,
//! estimates `Δ = P(y_d < x_d)`, and turns both into two thresholds:
//!
//! * risk-averse `-b/a`, where the predicted rejection probability is zero;
//! * risk-prone `(Δ - b)/a`, the largest `u` whose predicted rejection
//!   probability stays below `Δ`.
//!
//! The expected rejection risk of skipping between the two is the integral
//! of the (non-negative part of the) fitted line against the empirical
//! uncertainty density, bounded above by Cauchy–Schwarz.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A piecewise-constant density over `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyHistogram {
    bin_edges: Vec<f64>,
    masses: Vec<f64>,
}

impl UncertaintyHistogram {
    pub fn new(bin_edges: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        let h = Self { bin_edges, masses };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let (edges, masses) = (&self.bin_edges, &self.masses);
        if edges.len() < 2 || masses.len() + 1 != edges.len() {
            return Err(Error::InvalidHistogram(format!(
                "{} edges for {} bins",
                edges.len(),
                masses.len()
            )));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidHistogram("edges must be finite and strictly ascending".into()));
        }
        if edges[0] > 0.0 || edges[edges.len() - 1] < 1.0 {
            return Err(Error::InvalidHistogram("edges must cover [0, 1]".into()));
        }
        if masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::InvalidHistogram("masses must be finite and non-negative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidHistogram(format!("masses sum to {total}")));
        }
        Ok(())
    }

    /// `K + 1` bins of width `1/K` centred on the attainable values `k/K`.
    pub fn lattice_edges(samples: usize) -> Vec<f64> {
        let k = samples as f64;
        (0..=samples + 1).map(|i| (i as f64 - 0.5) / k).collect()
    }

    pub fn uniform_edges(bins: usize) -> Vec<f64> {
        (0..=bins).map(|i| i as f64 / bins as f64).collect()
    }

    /// Empirical histogram; the last bin is closed on the right.
    pub fn from_samples(bin_edges: Vec<f64>, samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySamples("uncertainty histogram"));
        }
        let bins = bin_edges.len().saturating_sub(1);
        let mut counts = vec![0usize; bins];
        let last = *bin_edges.last().unwrap_or(&0.0);
        for &u in samples {
            let idx = if u == last {
                Some(bins - 1)
            } else {
                bin_edges.windows(2).position(|w| w[0] <= u && u < w[1])
            };
            match idx {
                Some(i) => counts[i] += 1,
                None => {
                    return Err(Error::InvalidHistogram(format!("sample {u} outside the bin edges")))
                }
            }
        }
        let n = samples.len() as f64;
        Self::new(bin_edges, counts.into_iter().map(|c| c as f64 / n).collect())
    }

    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// `(left, right, density)` per bin.
    pub fn bins(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.bin_edges
            .windows(2)
            .zip(&self.masses)
            .map(|(w, m)| (w[0], w[1], m / (w[1] - w[0])))
    }
}

/// Ordinary least squares `beta = a·u + b`.
pub fn fit_linear(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.len() < 2 {
        return Err(Error::DegenerateFit(format!("{} points", pairs.len())));
    }
    let n = pairs.len() as f64;
    let mu = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(u, beta) in pairs {
        sxx += (u - mu) * (u - mu);
        sxy += (u - mu) * (beta - mb);
    }
    if !(sxx > 0.0) {
        return Err(Error::DegenerateFit("all uncertainty values are identical".into()));
    }
    let a = sxy / sxx;
    Ok((a, mb - a * mu))
}

/// Fraction of `(x_d, y_d)` samples with `y_d < x_d`.
pub fn estimate_delta(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples("delta estimation"));
    }
    let below = samples.iter().filter(|(x_d, y_d)| y_d < x_d).count();
    Ok(below as f64 / samples.len() as f64)
}

/// `(risk_averse, risk_prone) = (-b/a, (Δ - b)/a)`.
pub fn thresholds(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(a > 0.0) {
        return Err(Error::NonIncreasingFit(a));
    }
    Ok((-b / a, (delta - b) / a))
}

/// `∫ max(a·u + b, 0) du` over `[lo, hi]`, `a > 0`.
fn clamped_line_integral(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    let start = lo.max(-b / a);
    if hi <= start {
        return 0.0;
    }
    0.5 * a * (hi * hi - start * start) + b * (hi - start)
}

fn overlaps(hist: &UncertaintyHistogram, lo: f64, hi: f64) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
    hist.bins().filter_map(move |(l, r, density)| {
        let (l, r) = (l.max(lo), r.min(hi));
        (r > l).then_some((l, r, density))
    })
}

/// Expected rejection risk `R = ∫ max(a·u + b, 0) f(u) du` over `[u_lo, u_hi]`.
///
/// With `f` piecewise constant, this is the sum over bins of
/// `(a·u_mid + b)·mass` for whole bins, pro-rated on partial ones.
pub fn expected_risk(a: f64, b: f64, hist: &UncertaintyHistogram, u_lo: f64, u_hi: f64) -> Result<f64> {
    hist.validate()?;
    if !(a > 0.0) {
        return Err(Error::NonIncreasingFit(a));
    }
    Ok(overlaps(hist, u_lo, u_hi)
        .map(|(l, r, density)| density * clamped_line_integral(a, b, l, r))
        .sum())
}

/// `sqrt(∫ (a·u + b)² du) · sqrt(∫ f(u)² du)` over `[u_lo, u_hi]`.
pub fn risk_upper_bound(a: f64, b: f64, hist: &UncertaintyHistogram, u_lo: f64, u_hi: f64) -> Result<f64> {
    hist.validate()?;
    if !(a > 0.0) {
        return Err(Error::NonIncreasingFit(a));
    }
    if u_hi <= u_lo {
        return Ok(0.0);
    }
    let line = ((a * u_hi + b).powi(3) - (a * u_lo + b).powi(3)) / (3.0 * a);
    let density: f64 = overlaps(hist, u_lo, u_hi).map(|(l, r, f)| f * f * (r - l)).sum();
    Ok(line.max(0.0).sqrt() * density.sqrt())
}

/// One verified round as seen by calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub u: f64,
    pub beta: f64,
    pub x_d: f64,
    pub y_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationModel {
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub u_th_averse: f64,
    pub u_th_prone: f64,
    pub bin_edges: Vec<f64>,
    pub masses: Vec<f64>,
    pub expected_risk: f64,
    pub risk_upper_bound: f64,
    #[serde(default)]
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl CalibrationModel {
    pub fn new(a: f64, b: f64, delta: f64, density: UncertaintyHistogram) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::InvalidConfig(format!("delta {delta} outside [0, 1]")));
        }
        let (u_th_averse, u_th_prone) = thresholds(a, b, delta)?;
        let expected_risk = expected_risk(a, b, &density, u_th_averse, u_th_prone)?;
        let risk_upper_bound = risk_upper_bound(a, b, &density, u_th_averse, u_th_prone)?;
        Ok(Self {
            a,
            b,
            delta,
            u_th_averse,
            u_th_prone,
            bin_edges: density.bin_edges,
            masses: density.masses,
            expected_risk,
            risk_upper_bound,
            samples: 0,
            config_hash: None,
        })
    }

    /// Fits the line, estimates `Δ`, and bins `u` over `bin_edges`.
    pub fn fit(samples: &[CalibrationSample], bin_edges: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySamples("calibration"));
        }
        let pairs: Vec<(f64, f64)> = samples.iter().map(|s| (s.u, s.beta)).collect();
        let (a, b) = fit_linear(&pairs)?;
        let probs: Vec<(f64, f64)> = samples.iter().map(|s| (s.x_d, s.y_d)).collect();
        let delta = estimate_delta(&probs)?;
        let us: Vec<f64> = samples.iter().map(|s| s.u).collect();
        let density = UncertaintyHistogram::from_samples(bin_edges, &us)?;
        let mut model = Self::new(a, b, delta, density)?;
        model.samples = samples.len();
        Ok(model)
    }

    pub fn density(&self) -> Result<UncertaintyHistogram> {
        UncertaintyHistogram::new(self.bin_edges.clone(), self.masses.clone())
    }

    /// Checks a deserialized model for internal consistency.
    pub fn validate(&self) -> Result<()> {
        self.density()?;
        let (averse, prone) = thresholds(self.a, self.b, self.delta)?;
        let tol = 1e-9 * (1.0 + averse.abs().max(prone.abs()));
        if (averse - self.u_th_averse).abs() > tol || (prone - self.u_th_prone).abs() > tol {
            return Err(Error::InvalidConfig(
                "calibration thresholds do not match (a, b, delta)".into(),
            ));
        }
        if self.u_th_averse > self.u_th_prone {
            return Err(Error::InvalidConfig("risk-averse threshold above risk-prone".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
