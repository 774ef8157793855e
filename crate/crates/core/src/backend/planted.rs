//! Draft/target pairs with a prescribed linear law between the perturbation
//! uncertainty of a draft token and its rejection probability.
//!
//! Each round the SLM puts a lead margin `m` on one of `n` support tokens and
//! nothing on the rest. For every support token the mean mismatch rate
//! `ū = E_θ[1 - p_θ(v)]` is known in closed form up to a 1-D quadrature, and
//! the measured `u` is `Binomial(K, ū) / K`. The target then removes a
//! fraction `β_v = clamp(A·ū_v + B, 0, 1)` of each support token's mass and
//! parks it on a sink token.
//!
//! `(A, B)` are solved so that the population least-squares line of `β` on
//! the measured `u` is exactly the requested `(a, b)`, which absorbs both the
//! binomial noise in `u` and the clamp at zero. The margin range sets how
//! often `β > 0`, and is bisected to hit a requested `Δ`.

use crate::error::{Error, Result};
use crate::stream::RandomStream;
use crate::uncertainty::PerturbationConfig;

pub(crate) const SUPPORT_SIZES: [usize; 7] = [2, 3, 4, 6, 8, 12, 16];
pub(crate) const FLOOR_LOGIT: f64 = -60.0;
const DEFAULT_MARGIN_MAX: f64 = 9.0;
const MARGIN_BRACKET: (f64, f64) = (2.0, 10.5);
const MARGIN_GRID: usize = 200;
const QUADRATURE_INTERVALS: usize = 512;
/// Relative headroom given to unrejected tokens so float round-off can never
/// turn `y_v = x_v` into a spurious rejection.
const TIE_HEADROOM: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PlantedDesign {
    pub slope: f64,
    pub intercept: f64,
    pub margin_max: f64,
    pub delta: f64,
    theta_min: f64,
    theta_max: f64,
}

/// One weighted `(ū, x)` cell of the design population.
struct Cell {
    weight: f64,
    ubar: f64,
}

impl PlantedDesign {
    pub fn solve(a: f64, b: f64, delta: Option<f64>, margin_max: Option<f64>, pert: &PerturbationConfig) -> Result<Self> {
        pert.validate()?;
        if !(a > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidConfig(format!("planted line needs a > 0, got a={a}, b={b}")));
        }
        let k = pert.samples as f64;
        let solve_at = |m: f64| -> Result<(f64, f64, f64)> {
            let cells = population(m, pert);
            let (s, i) = newton(&cells, a, b, k)?;
            Ok((s, i, positive_mass(&cells, s, i)))
        };
        let margin_max = match (delta, margin_max) {
            (_, Some(m)) => m,
            (None, None) => DEFAULT_MARGIN_MAX,
            (Some(target), None) => {
                let (mut lo, mut hi) = MARGIN_BRACKET;
                let max = solve_at(lo)?.2;
                let min = solve_at(hi)?.2;
                if !(target <= max && target >= min) {
                    return Err(Error::CalibrationInfeasible { target, max });
                }
                // Δ falls as the margins widen
                while hi - lo > 1e-3 {
                    let mid = 0.5 * (lo + hi);
                    if solve_at(mid)?.2 > target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        };
        if !(margin_max > 0.0 && margin_max.is_finite()) {
            return Err(Error::InvalidConfig(format!("margin_max {margin_max} must be positive")));
        }
        let (slope, intercept, delta) = solve_at(margin_max)?;
        log::debug!("planted design: A={slope:.4} B={intercept:.4} margin_max={margin_max:.4} delta={delta:.4}");
        Ok(Self { slope, intercept, margin_max, delta, theta_min: pert.theta_min, theta_max: pert.theta_max })
    }

    pub fn beta(&self, ubar: f64) -> f64 {
        (self.slope * ubar + self.intercept).clamp(0.0, 1.0)
    }

    /// Draws one round: SLM logits and the matching target distribution.
    pub fn draw(&self, vocab_size: usize, eos: usize, rng: &mut RandomStream) -> (Vec<f64>, Vec<f64>) {
        let n = SUPPORT_SIZES[rng.below(SUPPORT_SIZES.len())];
        let margin = rng.uniform() * self.margin_max;
        // n support tokens followed by the sink, all distinct and never EOS
        let mut picked: Vec<usize> = Vec::with_capacity(n + 1);
        while picked.len() < n + 1 {
            let v = rng.below(vocab_size);
            if v != eos && !picked.contains(&v) {
                picked.push(v);
            }
        }
        let (support, sink) = (&picked[..n], picked[n]);

        let mut z = vec![FLOOR_LOGIT; vocab_size];
        z[support[0]] = margin;
        for &v in &support[1..] {
            z[v] = 0.0;
        }
        let x = crate::math::softmax(&z).expect("finite logits").into_inner();

        let (ubar_lead, ubar_other) = mean_mismatch(n, margin, self.theta_min, self.theta_max);
        let mut beta = vec![0.0; vocab_size];
        beta[support[0]] = self.beta(ubar_lead);
        for &v in &support[1..] {
            beta[v] = self.beta(ubar_other);
        }
        let removed: f64 = x.iter().zip(&beta).map(|(p, b)| p * b).sum();
        if removed <= 0.0 {
            return (z, x);
        }
        let kept: f64 = x.iter().zip(&beta).enumerate().filter(|(v, (_, b))| **b == 0.0 && *v != sink).map(|(_, (p, _))| p).sum();
        let headroom = TIE_HEADROOM.min(0.5 * removed / kept.max(f64::MIN_POSITIVE));
        let mut y: Vec<f64> = x
            .iter()
            .zip(&beta)
            .map(|(p, b)| if *b > 0.0 { p * (1.0 - b) } else { p * (1.0 + headroom) })
            .collect();
        y[sink] = x[sink] + removed - headroom * kept;
        (z, y)
    }
}

/// `(ū_lead, ū_other)` for `n` support tokens with lead margin `m`, averaging
/// over `θ ~ U[θ_min, θ_max]` by Simpson's rule. Floor tokens are ignored;
/// their tempered mass never exceeds `|V|·e^-30`.
pub(crate) fn mean_mismatch(n: usize, m: f64, theta_min: f64, theta_max: f64) -> (f64, f64) {
    let steps = QUADRATURE_INTERVALS;
    let h = (theta_max - theta_min) / steps as f64;
    let others = (n - 1) as f64;
    let (mut lead, mut other) = (0.0, 0.0);
    for i in 0..=steps {
        let theta = theta_min + h * i as f64;
        let w = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let e = (-m / theta).exp();
        let p_lead = 1.0 / (1.0 + others * e);
        lead += w * p_lead;
        other += w * e * p_lead;
    }
    let norm = 3.0 * steps as f64;
    (1.0 - lead / norm, 1.0 - other / norm)
}

fn population(margin_max: f64, pert: &PerturbationConfig) -> Vec<Cell> {
    let per = 1.0 / (SUPPORT_SIZES.len() * MARGIN_GRID) as f64;
    let mut cells = Vec::with_capacity(2 * SUPPORT_SIZES.len() * MARGIN_GRID);
    for &n in &SUPPORT_SIZES {
        for i in 0..MARGIN_GRID {
            let m = (i as f64 + 0.5) / MARGIN_GRID as f64 * margin_max;
            let (ul, uo) = mean_mismatch(n, m, pert.theta_min, pert.theta_max);
            let x_lead = 1.0 / (1.0 + (n - 1) as f64 * (-m).exp());
            cells.push(Cell { weight: per * x_lead, ubar: ul });
            cells.push(Cell { weight: per * (1.0 - x_lead), ubar: uo });
        }
    }
    cells
}

/// Population OLS of `β` on the measured `u` for plant `(s, i)`.
fn ols(cells: &[Cell], s: f64, i: f64, k: f64) -> (f64, f64) {
    let (mut eu, mut eu2, mut eb, mut eub) = (0.0, 0.0, 0.0, 0.0);
    for c in cells {
        let beta = (s * c.ubar + i).clamp(0.0, 1.0);
        eu += c.weight * c.ubar;
        eu2 += c.weight * (c.ubar * c.ubar + c.ubar * (1.0 - c.ubar) / k);
        eb += c.weight * beta;
        eub += c.weight * c.ubar * beta;
    }
    let slope = (eub - eu * eb) / (eu2 - eu * eu);
    (slope, eb - slope * eu)
}

fn positive_mass(cells: &[Cell], s: f64, i: f64) -> f64 {
    cells.iter().filter(|c| s * c.ubar + i > 0.0).map(|c| c.weight).sum()
}

/// Damped Newton with a finite-difference Jacobian.
fn newton(cells: &[Cell], a: f64, b: f64, k: f64) -> Result<(f64, f64)> {
    let residual = |s: f64, i: f64| {
        let (fa, fb) = ols(cells, s, i, k);
        (fa - a, fb - b)
    };
    let norm = |r: (f64, f64)| r.0.hypot(r.1);
    let (mut s, mut i) = (a, b);
    let mut r = residual(s, i);
    for _ in 0..100 {
        if norm(r) < 1e-12 {
            return Ok((s, i));
        }
        let h = 1e-7;
        let rs = residual(s + h, i);
        let ri = residual(s, i + h);
        let j = [[(rs.0 - r.0) / h, (ri.0 - r.0) / h], [(rs.1 - r.1) / h, (ri.1 - r.1) / h]];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-14 {
            break;
        }
        let ds = (j[1][1] * r.0 - j[0][1] * r.1) / det;
        let di = (-j[1][0] * r.0 + j[0][0] * r.1) / det;
        let mut step = 1.0;
        loop {
            let (ns, ni) = (s - step * ds, i - step * di);
            let nr = residual(ns, ni);
            if norm(nr) < norm(r) || step < 1e-6 {
                s = ns;
                i = ni;
                r = nr;
                break;
            }
            step *= 0.5;
        }
    }
    if norm(r) < 1e-9 {
        Ok((s, i))
    } else {
        Err(Error::InvalidConfig(format!(
            "planted line a={a}, b={b} is not attainable (residual {:.2e})",
            norm(r)
        )))
    }
}
