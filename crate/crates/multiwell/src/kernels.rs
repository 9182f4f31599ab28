//! Bounded kick distributions and their transforms.
//!
//! A kick is a bounded random energy decrement applied at a wall collision.
//! Four families are supported; all have support inside [-M, M] for a known
//! bound M:
//!
//! - `uniform(a, b)` — flat on [a, b] (degenerate a = b allowed for
//!   deterministic test kicks);
//! - `truncated-normal(mu, sigma, lo, hi)` — a normal restricted to [lo, hi];
//! - `scaled-beta(alpha, beta, lo, hi)` — a beta law mapped onto [lo, hi];
//! - `two-point-test(x1, p1, x2)` — an atom pair, for closed-form transform
//!   tests only; it cannot be sampled or gridded.
//!
//! The central object downstream is the log-moment transform of a kick pair,
//!
//! ```text
//!     cumulant(beta) = ln E exp(-beta (xi + eta))
//! ```
//!
//! evaluated in closed form for uniform and two-point marginals and by
//! adaptive quadrature otherwise. Independence of the two marginals turns
//! the pair transform into a sum of marginal transforms, which is also how
//! large `|beta|` stays overflow-free: each marginal integral is shifted by
//! its own support endpoint before exponentiation.

use crate::error::{Error, Result};
use crate::quad;
use crate::stream::Stream;
use statrs::distribution::{Beta, Continuous, ContinuousCDF, Normal};

const DERIV_REL_TOL: f64 = 1e-12;

/// Minimum number of density grid points.
pub const MIN_GRID_POINTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Uniform {
        a: f64,
        b: f64,
    },
    TruncatedNormal {
        mu: f64,
        sigma: f64,
        lo: f64,
        hi: f64,
    },
    ScaledBeta {
        alpha: f64,
        beta: f64,
        lo: f64,
        hi: f64,
    },
    TwoPoint {
        x1: f64,
        p1: f64,
        x2: f64,
    },
}

/// One kick distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    family: Family,
}

impl PerturbationSpec {
    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() || a > b {
            return Err(Error::Config(format!("uniform bounds invalid: [{a}, {b}]")));
        }
        Ok(Self {
            family: Family::Uniform { a, b },
        })
    }

    pub fn truncated_normal(mu: f64, sigma: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(sigma > 0.0) || !(lo < hi) || !mu.is_finite() || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!(
                "truncated-normal parameters invalid: mu={mu} sigma={sigma} on [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            family: Family::TruncatedNormal { mu, sigma, lo, hi },
        })
    }

    pub fn scaled_beta(alpha: f64, beta: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > 0.0) || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!(
                "scaled-beta parameters invalid: alpha={alpha} beta={beta} on [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            family: Family::ScaledBeta {
                alpha,
                beta,
                lo,
                hi,
            },
        })
    }

    pub fn two_point(x1: f64, p1: f64, x2: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p1) || !x1.is_finite() || !x2.is_finite() {
            return Err(Error::Config(format!(
                "two-point-test parameters invalid: x1={x1} p1={p1} x2={x2}"
            )));
        }
        Ok(Self {
            family: Family::TwoPoint { x1, p1, x2 },
        })
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    /// Support interval (smallest closed interval of full mass).
    pub fn support(&self) -> (f64, f64) {
        match self.family {
            Family::Uniform { a, b } => (a, b),
            Family::TruncatedNormal { lo, hi, .. } => (lo, hi),
            Family::ScaledBeta { lo, hi, .. } => (lo, hi),
            Family::TwoPoint { x1, x2, .. } => (x1.min(x2), x1.max(x2)),
        }
    }

    /// Kick bound M: all mass lies in [-M, M].
    pub fn bound(&self) -> f64 {
        let (lo, hi) = self.support();
        lo.abs().max(hi.abs())
    }

    pub fn mean(&self) -> f64 {
        match self.family {
            Family::Uniform { a, b } => 0.5 * (a + b),
            Family::TruncatedNormal { mu, sigma, lo, hi } => {
                let (al, be) = ((lo - mu) / sigma, (hi - mu) / sigma);
                let z = std_cdf(be) - std_cdf(al);
                mu + sigma * (std_pdf(al) - std_pdf(be)) / z
            }
            Family::ScaledBeta {
                alpha,
                beta,
                lo,
                hi,
            } => lo + (hi - lo) * alpha / (alpha + beta),
            Family::TwoPoint { x1, p1, x2 } => p1 * x1 + (1.0 - p1) * x2,
        }
    }

    pub fn variance(&self) -> f64 {
        match self.family {
            Family::Uniform { a, b } => (b - a) * (b - a) / 12.0,
            Family::TruncatedNormal { mu, sigma, lo, hi } => {
                let (al, be) = ((lo - mu) / sigma, (hi - mu) / sigma);
                let z = std_cdf(be) - std_cdf(al);
                let d = (std_pdf(al) - std_pdf(be)) / z;
                sigma * sigma * (1.0 + (al * std_pdf(al) - be * std_pdf(be)) / z - d * d)
            }
            Family::ScaledBeta {
                alpha,
                beta,
                lo,
                hi,
            } => {
                let s = alpha + beta;
                (hi - lo) * (hi - lo) * alpha * beta / (s * s * (s + 1.0))
            }
            Family::TwoPoint { x1, p1, x2 } => {
                let d = x1 - x2;
                p1 * (1.0 - p1) * d * d
            }
        }
    }

    pub fn has_density(&self) -> bool {
        match self.family {
            Family::Uniform { a, b } => a < b,
            Family::TwoPoint { .. } => false,
            _ => true,
        }
    }

    /// Density at `x` (zero outside the support).
    pub fn density(&self, x: f64) -> Result<f64> {
        match self.family {
            Family::Uniform { a, b } if a < b => {
                Ok(if (a..=b).contains(&x) { 1.0 / (b - a) } else { 0.0 })
            }
            Family::Uniform { .. } => Err(Error::DensityUnsupported("degenerate uniform".into())),
            Family::TruncatedNormal { mu, sigma, lo, hi } => {
                if !(lo..=hi).contains(&x) {
                    return Ok(0.0);
                }
                let z = std_cdf((hi - mu) / sigma) - std_cdf((lo - mu) / sigma);
                Ok(std_pdf((x - mu) / sigma) / (sigma * z))
            }
            Family::ScaledBeta {
                alpha,
                beta,
                lo,
                hi,
            } => {
                if !(lo..=hi).contains(&x) {
                    return Ok(0.0);
                }
                let w = hi - lo;
                let b = Beta::new(alpha, beta).expect("validated");
                Ok(b.pdf(((x - lo) / w).clamp(0.0, 1.0)) / w)
            }
            Family::TwoPoint { .. } => {
                Err(Error::DensityUnsupported("two-point-test is atomic".into()))
            }
        }
    }

    /// Cumulative distribution function (defined for every family).
    pub fn cdf(&self, x: f64) -> f64 {
        match self.family {
            Family::Uniform { a, b } => {
                if a == b {
                    return if x >= a { 1.0 } else { 0.0 };
                }
                ((x - a) / (b - a)).clamp(0.0, 1.0)
            }
            Family::TruncatedNormal { mu, sigma, lo, hi } => {
                if x <= lo {
                    return 0.0;
                }
                if x >= hi {
                    return 1.0;
                }
                let (cl, ch) = (std_cdf((lo - mu) / sigma), std_cdf((hi - mu) / sigma));
                ((std_cdf((x - mu) / sigma) - cl) / (ch - cl)).clamp(0.0, 1.0)
            }
            Family::ScaledBeta {
                alpha,
                beta,
                lo,
                hi,
            } => {
                if x <= lo {
                    return 0.0;
                }
                if x >= hi {
                    return 1.0;
                }
                let b = Beta::new(alpha, beta).expect("validated");
                b.cdf((x - lo) / (hi - lo))
            }
            Family::TwoPoint { x1, p1, x2 } => {
                let mut c = 0.0;
                if x >= x1 {
                    c += p1;
                }
                if x >= x2 {
                    c += 1.0 - p1;
                }
                c
            }
        }
    }

    /// Draw one value. Consumes exactly one stream draw for every family,
    /// so replica alignment never depends on the drawn values.
    pub fn sample(&self, stream: &mut Stream) -> Result<f64> {
        let u = stream.uniform01();
        match self.family {
            Family::Uniform { a, b } => Ok(a + u * (b - a)),
            Family::TruncatedNormal { mu, sigma, lo, hi } => {
                let (cl, ch) = (std_cdf((lo - mu) / sigma), std_cdf((hi - mu) / sigma));
                let n = Normal::new(0.0, 1.0).expect("unit normal");
                let x = mu + sigma * n.inverse_cdf(cl + u * (ch - cl));
                Ok(x.clamp(lo, hi))
            }
            Family::ScaledBeta {
                alpha,
                beta,
                lo,
                hi,
            } => {
                let b = Beta::new(alpha, beta).expect("validated");
                Ok(lo + (hi - lo) * b.inverse_cdf(u))
            }
            Family::TwoPoint { .. } => Err(Error::SamplingUnsupported(
                "two-point-test is for transform tests only".into(),
            )),
        }
    }

    /// ln E exp(-beta X). Exactly 0 at beta = 0.
    pub fn log_mgf_neg(&self, beta: f64) -> Result<f64> {
        if beta == 0.0 {
            return Ok(0.0);
        }
        match self.family {
            Family::Uniform { a, b } => {
                if a == b {
                    return Ok(-beta * a);
                }
                let c = beta * (b - a);
                Ok(-beta * a + log_expm1_ratio(c))
            }
            Family::TwoPoint { x1, p1, x2 } => {
                let (l1, l2) = (p1.ln() - beta * x1, (1.0 - p1).ln() - beta * x2);
                Ok(log_sum_exp(l1, l2))
            }
            _ => Ok(self.weighted_moments(beta)?.0),
        }
    }

    /// (K, K', K'') of K(beta) = ln E exp(-beta X).
    pub fn log_mgf_neg_derivs(&self, beta: f64) -> Result<(f64, f64, f64)> {
        match self.family {
            Family::Uniform { a, b } => {
                if a == b {
                    return Ok((-beta * a, -a, 0.0));
                }
                let w = b - a;
                let c = beta * w;
                let k = if beta == 0.0 {
                    0.0
                } else {
                    -beta * a + log_expm1_ratio(c)
                };
                Ok((k, -a + w * dlog_expm1_ratio(c), w * w * d2log_expm1_ratio(c)))
            }
            Family::TwoPoint { x1, p1, x2 } => {
                if p1 == 0.0 {
                    return Ok((-beta * x2, -x2, 0.0));
                }
                if p1 == 1.0 {
                    return Ok((-beta * x1, -x1, 0.0));
                }
                let (l1, l2) = (p1.ln() - beta * x1, (1.0 - p1).ln() - beta * x2);
                let k = log_sum_exp(l1, l2);
                let w1 = (l1 - k).exp();
                let w2 = (l2 - k).exp();
                let k1 = -(w1 * x1 + w2 * x2);
                let d = x1 - x2;
                Ok((k, k1, w1 * w2 * d * d))
            }
            _ => {
                let (k, z0, m1, m2) = {
                    let (k, z0, m1, m2) = self.weighted_moments(beta)?;
                    (k, z0, m1, m2)
                };
                let r1 = m1 / z0;
                Ok((k, -r1, (m2 / z0 - r1 * r1).max(0.0)))
            }
        }
    }

    /// ln E[exp(-beta X) ; X < 0], or -inf when the kick has no mass below
    /// zero. Used to modify climb transforms at a well floor, where only
    /// energy-raising (negative) kicks act.
    pub fn log_mgf_neg_restricted_negative(&self, beta: f64) -> Result<f64> {
        let (lo, hi) = self.support();
        match self.family {
            Family::TwoPoint { x1, p1, x2 } => {
                let mut terms: Vec<f64> = Vec::new();
                if x1 < 0.0 && p1 > 0.0 {
                    terms.push(p1.ln() - beta * x1);
                }
                if x2 < 0.0 && p1 < 1.0 {
                    terms.push((1.0 - p1).ln() - beta * x2);
                }
                Ok(match terms.len() {
                    0 => f64::NEG_INFINITY,
                    1 => terms[0],
                    _ => log_sum_exp(terms[0], terms[1]),
                })
            }
            Family::Uniform { a, b } if a == b => {
                Ok(if a < 0.0 { -beta * a } else { f64::NEG_INFINITY })
            }
            _ => {
                let top = hi.min(0.0);
                if top <= lo {
                    return Ok(f64::NEG_INFINITY);
                }
                let shift = if beta >= 0.0 { lo } else { top };
                let v = quad::integrate(
                    |x| self.density(x).expect("continuous") * (-beta * (x - shift)).exp(),
                    lo,
                    top,
                    DERIV_REL_TOL,
                )?;
                Ok(-beta * shift + v.ln())
            }
        }
    }

    /// Shifted weighted moments by adaptive quadrature:
    /// (K, Z0, E[x w], E[x^2 w]) with w = exp(-beta (x - shift)) and the
    /// shift chosen so the exponent is nonpositive on the support.
    fn weighted_moments(&self, beta: f64) -> Result<(f64, f64, f64, f64)> {
        let (lo, hi) = self.support();
        let shift = if beta >= 0.0 { lo } else { hi };
        let dens = |x: f64| self.density(x).expect("continuous family");
        let z0 = quad::integrate(
            |x| dens(x) * (-beta * (x - shift)).exp(),
            lo,
            hi,
            DERIV_REL_TOL,
        )?;
        let m1 = quad::integrate(
            |x| x * dens(x) * (-beta * (x - shift)).exp(),
            lo,
            hi,
            DERIV_REL_TOL,
        )?;
        let m2 = quad::integrate(
            |x| x * x * dens(x) * (-beta * (x - shift)).exp(),
            lo,
            hi,
            DERIV_REL_TOL,
        )?;
        Ok((-beta * shift + z0.ln(), z0, m1, m2))
    }

    /// Cell-mean density samples on a uniform grid over [-M, M].
    ///
    /// Values are average densities over the cell around each node (half
    /// cells at the ends), so the trapezoid rule over the grid reproduces
    /// the total mass exactly rather than to O(h) near support edges.
    pub fn density_grid(&self, n_points: usize) -> Result<DensityGrid> {
        if !self.has_density() {
            return Err(Error::DensityUnsupported(
                "density grid needs a continuous family".into(),
            ));
        }
        if n_points < MIN_GRID_POINTS {
            return Err(Error::Config(format!(
                "density grid needs at least {MIN_GRID_POINTS} points, got {n_points}"
            )));
        }
        let m = self.bound();
        let h = 2.0 * m / (n_points - 1) as f64;
        let mut xs = Vec::with_capacity(n_points);
        let mut values = Vec::with_capacity(n_points);
        for j in 0..n_points {
            let x = -m + h * j as f64;
            let (cell_lo, cell_hi) = ((x - 0.5 * h).max(-m), (x + 0.5 * h).min(m));
            let mass = self.cdf(cell_hi) - self.cdf(cell_lo);
            xs.push(x);
            values.push((mass / (cell_hi - cell_lo)).max(0.0));
        }
        Ok(DensityGrid {
            xs,
            values,
            spacing: h,
        })
    }
}

/// Density sampled as cell means on a uniform grid.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
    pub spacing: f64,
}

impl DensityGrid {
    /// Trapezoid-rule integral over the grid.
    pub fn trapezoid_mass(&self) -> f64 {
        let n = self.values.len();
        let inner: f64 = self.values[1..n - 1].iter().sum();
        self.spacing * (0.5 * self.values[0] + inner + 0.5 * self.values[n - 1])
    }
}

/// The two kicks of one well: `xi` acts at the left wall, `eta` at the
/// right wall. Admissible pairs dissipate on average.
#[derive(Debug, Clone, PartialEq)]
pub struct KickPair {
    pub xi: PerturbationSpec,
    pub eta: PerturbationSpec,
}

impl KickPair {
    pub fn new(xi: PerturbationSpec, eta: PerturbationSpec) -> Result<Self> {
        if !(xi.mean() + eta.mean() > 0.0) {
            return Err(Error::Config(format!(
                "kick pair must dissipate on average: mean(xi) + mean(eta) = {}",
                xi.mean() + eta.mean()
            )));
        }
        Ok(KickPair { xi, eta })
    }

    /// Pair bound: all of |xi|, |eta| lie within [0, bound].
    pub fn bound(&self) -> f64 {
        self.xi.bound().max(self.eta.bound())
    }

    /// Mean energy lost per collision pair, E[xi] + E[eta].
    pub fn mean_sum(&self) -> f64 {
        self.xi.mean() + self.eta.mean()
    }

    pub fn variance_sum(&self) -> f64 {
        self.xi.variance() + self.eta.variance()
    }

    /// Support of xi + eta.
    pub fn support_sum(&self) -> (f64, f64) {
        let (xl, xh) = self.xi.support();
        let (el, eh) = self.eta.support();
        (xl + el, xh + eh)
    }

    /// cumulant(beta) = ln E exp(-beta (xi + eta)); splits into marginal
    /// transforms by independence. Exactly 0 at beta = 0.
    pub fn cumulant(&self, beta: f64) -> Result<f64> {
        Ok(self.xi.log_mgf_neg(beta)? + self.eta.log_mgf_neg(beta)?)
    }

    /// (cumulant', cumulant'') at `beta`.
    pub fn cumulant_derivs(&self, beta: f64) -> Result<(f64, f64)> {
        let (_, d1a, d2a) = self.xi.log_mgf_neg_derivs(beta)?;
        let (_, d1b, d2b) = self.eta.log_mgf_neg_derivs(beta)?;
        Ok((d1a + d1b, d2a + d2b))
    }

    /// ln E[exp(-beta (xi + eta)) ; xi < 0, eta < 0]; -inf when either kick
    /// never takes negative values.
    pub fn cumulant_restricted_negative(&self, beta: f64) -> Result<f64> {
        Ok(self.xi.log_mgf_neg_restricted_negative(beta)?
            + self.eta.log_mgf_neg_restricted_negative(beta)?)
    }
}

fn std_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_cdf(z: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").cdf(z)
}

/// ln((1 - e^{-c}) / c) for c != 0, the uniform marginal transform with the
/// support shift already applied. Reflection keeps the computed branch on
/// c > 0 where nothing overflows.
fn log_expm1_ratio(c: f64) -> f64 {
    if c < 0.0 {
        return -c + log_expm1_ratio(-c);
    }
    (-(-c).exp_m1()).ln() - c.ln()
}

/// d/dc ln((1 - e^{-c}) / c) = 1/(e^c - 1) - 1/c.
fn dlog_expm1_ratio(c: f64) -> f64 {
    if c.abs() < 0.05 {
        // Bernoulli-number series; truncation < 1e-12 at |c| = 0.05.
        return -0.5 + c / 12.0 - c * c * c / 720.0 + c.powi(5) / 30240.0;
    }
    let e = c.exp_m1();
    if e.is_infinite() {
        -1.0 / c
    } else {
        1.0 / e - 1.0 / c
    }
}

/// d^2/dc^2 ln((1 - e^{-c}) / c) = 1/c^2 - 1/(4 sinh^2(c/2)).
fn d2log_expm1_ratio(c: f64) -> f64 {
    let c2 = c * c;
    if c.abs() < 0.05 {
        return 1.0 / 12.0 - c2 / 240.0 + c2 * c2 / 6048.0;
    }
    if c.abs() > 600.0 {
        return 1.0 / c2;
    }
    let s = 2.0 * (0.5 * c).sinh();
    1.0 / c2 - 1.0 / (s * s)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m.is_infinite() && m < 0.0 {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}
