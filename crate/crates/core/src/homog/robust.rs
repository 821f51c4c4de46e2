//! Hypothesize-and-verify homography estimation.
//!
//! Each iteration draws a minimal 4-pair sample, fits it with the DLT and
//! scores every pair by its symmetric transfer error. Two scores are
//! available: MSAC (truncated squared error) and a sigma-marginalised loss
//! in the style of MAGSAC++, where the inlier noise scale is integrated
//! over `[0, sigma_max]` instead of being fixed. The best model is re-fitted
//! once on its inliers.
//!
//! Iteration `k` draws from stream `k` of a ChaCha generator keyed by the
//! seed, so hypotheses can be evaluated in parallel batches while the result
//! stays identical to the sequential loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::{gamma_li, gamma_ui};

use super::{estimate_dlt, HomogError, Homography};
use crate::correspond::CorrespondencePair;

/// Residual dimension: the symmetric transfer error stacks two 2-D residuals.
const RESIDUAL_DOF: f64 = 4.0;
const BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    Msac,
    #[default]
    SigmaMarginalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustParams {
    pub max_iterations: usize,
    /// Inlier threshold on the root symmetric transfer error, px.
    pub inlier_threshold: f64,
    pub scoring: Scoring,
    pub sigma_max: f64,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RobustParams {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            inlier_threshold: 3.0,
            scoring: Scoring::SigmaMarginalized,
            sigma_max: 10.0,
            confidence: 0.999,
            seed: 42,
        }
    }
}

impl RobustParams {
    pub fn validate(&self) -> Result<(), HomogError> {
        if self.max_iterations < 1 {
            return Err(HomogError::Params("max_iterations must be at least 1".into()));
        }
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(HomogError::Params("inlier_threshold must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(HomogError::Params("confidence must lie in (0, 1)".into()));
        }
        if self.scoring == Scoring::SigmaMarginalized && !(self.sigma_max > 0.0 && self.sigma_max.is_finite()) {
            return Err(HomogError::Params("sigma_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub homography: Homography,
    pub inlier_mask: Vec<bool>,
    pub score: f64,
    pub iterations_run: usize,
    /// Mean root symmetric transfer error over inliers, px.
    pub mean_inlier_error: f64,
}

impl EstimateResult {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|b| **b).count()
    }
}

/// Sigma-marginalised loss of a residual `r` (px).
///
/// The residual of an inlier with noise scale `sigma` follows a chi
/// distribution with four degrees of freedom, truncated at `k * sigma`
/// (`k` is its 0.99 quantile). Averaging that density over
/// `sigma ~ U(0, sigma_max)` gives the weight
///
/// `w(r) = C 2^((n-1)/2) / sigma_max * (G(a, r^2 / 2 sigma_max^2) - G(a, k^2 / 2))`
///
/// with `a = (n - 1) / 2` and `G` the upper incomplete gamma function. The
/// loss is `rho(r) = integral_0^r s w(s) ds`, which evaluates to
///
/// `C 2^((n-1)/2) / sigma_max * (sigma_max^2 g(a + 1, X) + r^2 / 2 (G(a, X) - G(a, k^2 / 2)))`
///
/// with `X = r^2 / 2 sigma_max^2` and `g` the lower incomplete gamma
/// function. Beyond `k * sigma_max` the loss is constant.
#[derive(Debug, Clone, Copy)]
pub struct MagsacLoss {
    sigma_max: f64,
    k: f64,
    scale: f64,
    upper_gamma_k: f64,
    outlier_loss: f64,
}

impl MagsacLoss {
    pub fn new(sigma_max: f64) -> Self {
        let n = RESIDUAL_DOF;
        let a = (n - 1.0) / 2.0;
        let k = ChiSquared::new(n).expect("valid dof").inverse_cdf(0.99).sqrt();
        let c = 1.0 / (2f64.powf(n / 2.0) * statrs::function::gamma::gamma(n / 2.0));
        let scale = c * 2f64.powf((n - 1.0) / 2.0) / sigma_max;
        let upper_gamma_k = gamma_ui(a, k * k / 2.0);
        let outlier_loss = scale * sigma_max * sigma_max * gamma_li(a + 1.0, k * k / 2.0);
        Self {
            sigma_max,
            k,
            scale,
            upper_gamma_k,
            outlier_loss,
        }
    }

    pub fn loss(&self, r: f64) -> f64 {
        if !r.is_finite() || r >= self.k * self.sigma_max {
            return self.outlier_loss;
        }
        let a = (RESIDUAL_DOF - 1.0) / 2.0;
        let x = r * r / (2.0 * self.sigma_max * self.sigma_max);
        let lower = if x > 0.0 { gamma_li(a + 1.0, x) } else { 0.0 };
        let upper = if x > 0.0 { gamma_ui(a, x) } else { statrs::function::gamma::gamma(a) };
        self.scale * (self.sigma_max * self.sigma_max * lower + r * r / 2.0 * (upper - self.upper_gamma_k))
    }

    /// IRLS weight `rho'(r) / r`.
    pub fn weight(&self, r: f64) -> f64 {
        if !r.is_finite() || r >= self.k * self.sigma_max {
            return 0.0;
        }
        let a = (RESIDUAL_DOF - 1.0) / 2.0;
        let x = r * r / (2.0 * self.sigma_max * self.sigma_max);
        let upper = if x > 0.0 { gamma_ui(a, x) } else { statrs::function::gamma::gamma(a) };
        self.scale * (upper - self.upper_gamma_k)
    }

    pub fn outlier_loss(&self) -> f64 {
        self.outlier_loss
    }

    pub fn cutoff(&self) -> f64 {
        self.k * self.sigma_max
    }
}

/// Convenience wrapper around [`MagsacLoss::loss`].
pub fn magsac_loss(r: f64, sigma_max: f64) -> f64 {
    MagsacLoss::new(sigma_max).loss(r)
}

struct Scorer {
    scoring: Scoring,
    threshold_sq: f64,
    magsac: Option<MagsacLoss>,
}

impl Scorer {
    fn new(params: &RobustParams) -> Self {
        let magsac = (params.scoring == Scoring::SigmaMarginalized).then(|| MagsacLoss::new(params.sigma_max));
        Self {
            scoring: params.scoring,
            threshold_sq: params.inlier_threshold * params.inlier_threshold,
            magsac,
        }
    }

    fn point_score(&self, err_sq: f64) -> f64 {
        match self.scoring {
            Scoring::Msac => err_sq.min(self.threshold_sq),
            Scoring::SigmaMarginalized => self.magsac.as_ref().expect("configured").loss(err_sq.sqrt()),
        }
    }

    fn evaluate(&self, h: &Homography, pairs: &[CorrespondencePair]) -> Evaluation {
        let errors: Vec<f64> = pairs.iter().map(|p| h.symmetric_transfer_error(p)).collect();
        let score = errors.iter().map(|e| self.point_score(*e)).sum();
        let mask: Vec<bool> = errors.iter().map(|e| *e <= self.threshold_sq).collect();
        Evaluation { errors, score, mask }
    }
}

struct Evaluation {
    errors: Vec<f64>,
    score: f64,
    mask: Vec<bool>,
}

impl Evaluation {
    fn inliers(&self) -> usize {
        self.mask.iter().filter(|b| **b).count()
    }

    fn mean_inlier_error(&self) -> f64 {
        let (sum, n) = self
            .errors
            .iter()
            .zip(&self.mask)
            .filter(|(_, m)| **m)
            .fold((0.0, 0usize), |(s, n), (e, _)| (s + e.sqrt(), n + 1));
        if n == 0 {
            f64::INFINITY
        } else {
            sum / n as f64
        }
    }
}

enum Hypothesis {
    Degenerate,
    Model(Homography, Evaluation),
}

fn hypothesis(k: usize, seed: u64, pairs: &[CorrespondencePair], scorer: &Scorer) -> Hypothesis {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let idx = rand::seq::index::sample(&mut rng, pairs.len(), 4);
    let sample: Vec<CorrespondencePair> = idx.iter().map(|i| pairs[i].clone()).collect();
    match estimate_dlt(&sample) {
        Ok(h) => {
            let eval = scorer.evaluate(&h, pairs);
            Hypothesis::Model(h, eval)
        }
        Err(_) => Hypothesis::Degenerate,
    }
}

/// Iterations needed to draw an all-inlier minimal sample with the given
/// confidence.
fn required_iterations(inlier_ratio: f64, confidence: f64) -> f64 {
    let p_good = inlier_ratio.powi(4);
    if p_good >= 1.0 {
        return 0.0;
    }
    if p_good <= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - confidence).ln() / (1.0 - p_good).ln()
}

pub fn estimate_robust(pairs: &[CorrespondencePair], params: &RobustParams) -> Result<EstimateResult, HomogError> {
    params.validate()?;
    let n = pairs.len();
    if n < 4 {
        return Err(HomogError::TooFewPairs { needed: 4, got: n });
    }
    let scorer = Scorer::new(params);

    if n == 4 {
        let h = estimate_dlt(pairs)?;
        let eval = scorer.evaluate(&h, pairs);
        return Ok(EstimateResult {
            mean_inlier_error: eval.mean_inlier_error(),
            homography: h,
            inlier_mask: eval.mask,
            score: eval.score,
            iterations_run: 1,
        });
    }

    let mut best: Option<(Homography, Evaluation)> = None;
    let mut degenerate = 0usize;
    let mut iterations = 0usize;
    let mut needed = params.max_iterations as f64;

    'outer: while iterations < params.max_iterations {
        let end = (iterations + BATCH).min(params.max_iterations);
        let batch: Vec<Hypothesis> = (iterations..end).into_par_iter().map(|k| hypothesis(k, params.seed, pairs, &scorer)).collect();
        for hyp in batch {
            iterations += 1;
            match hyp {
                Hypothesis::Degenerate => degenerate += 1,
                Hypothesis::Model(h, eval) => {
                    let better = match &best {
                        None => true,
                        Some((_, b)) => eval.score < b.score || (eval.score == b.score && eval.inliers() > b.inliers()),
                    };
                    if better {
                        let ratio = eval.inliers() as f64 / n as f64;
                        needed = required_iterations(ratio, params.confidence).min(params.max_iterations as f64);
                        best = Some((h, eval));
                    }
                }
            }
            if best.as_ref().is_some_and(|(_, b)| b.inliers() >= 4) && iterations as f64 >= needed {
                break 'outer;
            }
        }
    }

    let (h, eval) = match best {
        Some(b) if b.1.inliers() >= 4 => b,
        other => {
            return Err(HomogError::NoConsensus {
                iterations,
                best_inliers: other.map(|b| b.1.inliers()).unwrap_or(0),
                degenerate_samples: degenerate,
            })
        }
    };

    // Local optimisation: one DLT re-fit over the consensus set.
    let inlier_pairs: Vec<CorrespondencePair> = pairs.iter().zip(&eval.mask).filter(|(_, m)| **m).map(|(p, _)| p.clone()).collect();
    let (h, eval) = match estimate_dlt(&inlier_pairs) {
        Ok(refit) => {
            let refit_eval = scorer.evaluate(&refit, pairs);
            if refit_eval.inliers() >= 4 && refit_eval.score <= eval.score {
                (refit, refit_eval)
            } else {
                (h, eval)
            }
        }
        Err(_) => (h, eval),
    };

    Ok(EstimateResult {
        mean_inlier_error: eval.mean_inlier_error(),
        homography: h,
        inlier_mask: eval.mask,
        score: eval.score,
        iterations_run: iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: rho(r) = int_0^r s w(s) ds with
    /// w(s) = 1/sigma_max int_{s/k}^{sigma_max} chi_4(s | sigma) d sigma,
    /// both integrals by composite Simpson.
    fn loss_by_quadrature(r: f64, sigma_max: f64, k: f64) -> f64 {
        let chi4 = |s: f64, sigma: f64| {
            // chi pdf with 4 dof scaled by sigma: s^3 / (2 sigma^4) exp(-s^2 / 2 sigma^2)
            s.powi(3) / (2.0 * sigma.powi(4)) * (-(s * s) / (2.0 * sigma * sigma)).exp()
        };
        let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize| {
            let h = (b - a) / n as f64;
            let mut acc = f(a) + f(b);
            for i in 1..n {
                let x = a + i as f64 * h;
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
            }
            acc * h / 3.0
        };
        let weight = |s: f64| {
            if s <= 0.0 {
                // only ever multiplied by s = 0
                return 0.0;
            }
            let lo = s / k;
            if lo >= sigma_max {
                return 0.0;
            }
            // chi4(s|sigma) integrated over sigma, in t = ln(sigma).
            simpson(&|t: f64| chi4(s, t.exp()) * t.exp(), lo.ln(), sigma_max.ln(), 2000) / sigma_max
        };
        simpson(&|s: f64| s * weight(s), 0.0, r, 400)
    }

    #[test]
    fn magsac_loss_matches_quadrature() {
        let sigma_max = 10.0;
        let loss = MagsacLoss::new(sigma_max);
        for r in [0.5, 1.0, 3.0, 8.0, 20.0, 35.0] {
            let oracle = loss_by_quadrature(r, sigma_max, loss.k);
            let got = loss.loss(r);
            assert!((got - oracle).abs() < 1e-6 * (1.0 + oracle.abs()), "r={r}: {got} vs {oracle}");
        }
    }

    #[test]
    fn magsac_loss_is_monotone_and_saturates() {
        let loss = MagsacLoss::new(10.0);
        assert_eq!(loss.loss(0.0), 0.0);
        let mut prev = 0.0;
        for i in 1..400 {
            let r = i as f64 * 0.1;
            let l = loss.loss(r);
            assert!(l >= prev);
            prev = l;
        }
        assert!((loss.loss(loss.cutoff() - 1e-9) - loss.outlier_loss()).abs() < 1e-9);
        assert_eq!(loss.loss(1e6), loss.outlier_loss());
        assert_eq!(loss.loss(f64::INFINITY), loss.outlier_loss());
        assert!(loss.weight(0.0) > loss.weight(5.0));
        assert_eq!(loss.weight(1e6), 0.0);
    }

    #[test]
    fn required_iterations_behaviour() {
        assert_eq!(required_iterations(1.0, 0.999), 0.0);
        assert!(required_iterations(0.0, 0.999).is_infinite());
        let k = required_iterations(0.5, 0.99);
        assert!((k - (0.01f64.ln() / (1.0 - 0.0625f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn params_validation() {
        let mut p = RobustParams::default();
        assert!(p.validate().is_ok());
        p.confidence = 1.0;
        assert!(p.validate().is_err());
        let p = RobustParams {
            max_iterations: 0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = RobustParams {
            inlier_threshold: -1.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
