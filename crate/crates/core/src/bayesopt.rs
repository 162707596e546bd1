//! Gaussian-process Bayesian optimization over encoded scenario parameters.
//!
//! Each target (a specification, or a property being falsified) gets its own
//! surrogate. Targets are standardized before fitting, so the hyperparameter
//! grid is expressed in units of the observed spread.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgdaError};
use crate::metrics::{dtw_distance, DtwFeature};
use crate::simenv::{AdoSide, EnvCondition, Maneuver, ParamRanges, Trajectory};
use crate::stp::Landed;

pub const ENCODED_DIM: usize = 6;

/// Maps conditions to `[0, 1]^6`: continuous fields min-max normalized,
/// categories to the centres of three equal bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub ranges: ParamRanges,
}

fn unit(v: f64, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        ((v - r[0]) / (r[1] - r[0])).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

fn scale(u: f64, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * u.clamp(0.0, 1.0)
}

fn bin_centre(i: usize) -> f64 {
    (2 * i + 1) as f64 / 6.0
}

fn bin(u: f64) -> usize {
    ((u.clamp(0.0, 1.0) * 3.0) as usize).min(2)
}

impl Encoding {
    pub fn new(ranges: ParamRanges) -> Self {
        Self { ranges }
    }

    pub fn encode(&self, e: &EnvCondition) -> [f64; ENCODED_DIM] {
        let r = &self.ranges;
        [
            unit(e.ego_init_distance, r.ego_init_distance),
            bin_centre(e.ado_side as usize),
            bin_centre(e.ado_maneuver as usize),
            unit(e.ado_init_distance, r.ado_init_distance),
            unit(e.ado_min_speed, r.ado_speed),
            unit(e.ado_max_speed, r.ado_speed),
        ]
    }

    /// Inverse of [`encode`](Self::encode). Out-of-order speeds are swapped.
    pub fn decode(&self, x: &[f64]) -> EnvCondition {
        let r = &self.ranges;
        let a = scale(x[4], r.ado_speed);
        let b = scale(x[5], r.ado_speed);
        EnvCondition {
            ego_init_distance: scale(x[0], r.ego_init_distance),
            ado_side: AdoSide::ALL[bin(x[1])],
            ado_maneuver: Maneuver::ALL[bin(x[2])],
            ado_init_distance: scale(x[3], r.ado_init_distance),
            ado_min_speed: a.min(b),
            ado_max_speed: a.max(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length_scale: f64,
    pub signal_sd: f64,
    pub noise_sd: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        Self { length_scale: 0.3, signal_sd: 1.0, noise_sd: 0.01 }
    }
}

impl GpHyper {
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_sd * self.signal_sd * (-0.5 * d2 / (self.length_scale * self.length_scale)).exp()
    }
}

/// Gaussian process with a squared-exponential kernel and a cached Cholesky
/// factor of the noisy kernel matrix.
#[derive(Debug, Clone)]
pub struct GpSurrogate {
    dim: usize,
    hyper: GpHyper,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    /// Lower Cholesky factor and `K^-1 y`, both for standardized targets.
    factor: Option<(DMatrix<f64>, DVector<f64>)>,
    jitter: f64,
}

impl GpSurrogate {
    pub fn new(dim: usize, hyper: GpHyper) -> Self {
        Self { dim, hyper, xs: Vec::new(), ys: Vec::new(), y_mean: 0.0, y_scale: 1.0, factor: None, jitter: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn hyper(&self) -> GpHyper {
        self.hyper
    }

    pub fn observations(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.xs.iter().map(Vec::as_slice).zip(self.ys.iter().copied())
    }

    /// Mean and standard deviation used to standardize targets.
    pub fn standardization(&self) -> (f64, f64) {
        (self.y_mean, self.y_scale)
    }

    /// Diagonal jitter that was needed on top of the noise variance.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn add(&mut self, x: &[f64], y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(SgdaError::input(format!("point has {} dims, surrogate has {}", x.len(), self.dim)));
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(SgdaError::input("surrogate observations must be finite"));
        }
        self.xs.push(x.to_vec());
        self.ys.push(y);
        self.refactor()
    }

    pub fn set_hyper(&mut self, hyper: GpHyper) -> Result<()> {
        self.hyper = hyper;
        self.refactor()
    }

    fn standardize(&mut self) {
        let n = self.ys.len() as f64;
        self.y_mean = self.ys.iter().sum::<f64>() / n;
        let var = self.ys.iter().map(|y| (y - self.y_mean).powi(2)).sum::<f64>() / n;
        self.y_scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }

    /// Noisy kernel matrix of the observations, without jitter.
    pub fn kernel_matrix(&self) -> DMatrix<f64> {
        let n = self.xs.len();
        let noise = self.hyper.noise_sd * self.hyper.noise_sd;
        DMatrix::from_fn(n, n, |i, j| self.hyper.kernel(&self.xs[i], &self.xs[j]) + if i == j { noise } else { 0.0 })
    }

    fn refactor(&mut self) -> Result<()> {
        if self.xs.is_empty() {
            self.factor = None;
            return Ok(());
        }
        self.standardize();
        let k = self.kernel_matrix();
        let z = DVector::from_iterator(self.ys.len(), self.ys.iter().map(|y| (y - self.y_mean) / self.y_scale));
        let base = self.hyper.signal_sd * self.hyper.signal_sd * 1e-12;
        let mut jitter = 0.0;
        for _ in 0..12 {
            let mut kj = k.clone();
            for i in 0..kj.nrows() {
                kj[(i, i)] += jitter;
            }
            if let Some(chol) = kj.cholesky() {
                let alpha = chol.solve(&z);
                self.factor = Some((chol.l(), alpha));
                self.jitter = jitter;
                return Ok(());
            }
            jitter = if jitter == 0.0 { base } else { jitter * 10.0 };
        }
        Err(SgdaError::Numerical("kernel matrix is not positive definite even with jitter".into()))
    }

    /// Posterior mean and variance of the latent function at `x`, in the
    /// units of the observed targets. The prior alone before any data.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let prior_var = self.hyper.signal_sd * self.hyper.signal_sd;
        let Some((l, alpha)) = &self.factor else {
            return (0.0, prior_var);
        };
        let kx = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| self.hyper.kernel(xi, x)));
        let mean = kx.dot(alpha);
        let v = l.solve_lower_triangular(&kx).expect("Cholesky factor has a non-zero diagonal");
        let var = (prior_var - v.dot(&v)).max(0.0);
        (self.y_mean + self.y_scale * mean, var * self.y_scale * self.y_scale)
    }

    /// Log marginal likelihood of the standardized targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let Some((l, alpha)) = &self.factor else {
            return 0.0;
        };
        let z = DVector::from_iterator(self.ys.len(), self.ys.iter().map(|y| (y - self.y_mean) / self.y_scale));
        let n = self.ys.len() as f64;
        let log_det: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * z.dot(alpha) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Picks the `(length_scale, signal_sd)` pair with the highest marginal
    /// likelihood. The noise stays fixed.
    pub fn refit(&mut self, length_scales: &[f64], signal_sds: &[f64]) -> Result<()> {
        let noise_sd = self.hyper.noise_sd;
        let mut best: Option<(f64, GpHyper)> = None;
        for &length_scale in length_scales {
            for &signal_sd in signal_sds {
                let hyper = GpHyper { length_scale, signal_sd, noise_sd };
                if self.set_hyper(hyper).is_err() {
                    continue;
                }
                let lml = self.log_marginal_likelihood();
                if best.is_none_or(|(b, _)| lml > b) {
                    best = Some((lml, hyper));
                }
            }
        }
        match best {
            Some((_, hyper)) => self.set_hyper(hyper),
            None => Err(SgdaError::Numerical("no hyperparameter candidate could be factorized".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoConfig {
    /// Observations before the acquisition takes over from uniform draws.
    pub n_min: usize,
    pub kappa: f64,
    pub quasi_random_candidates: usize,
    pub local_candidates: usize,
    /// Standard deviation of the local perturbations around the incumbent.
    pub local_sd: f64,
    pub refit_every: usize,
    pub length_scales: Vec<f64>,
    pub signal_sds: Vec<f64>,
    pub noise_sd: f64,
    /// Exploration coefficient of the diversity bonus.
    pub bonus_coefficient: f64,
    /// Distance credited when the target's store is empty, and the cap on it otherwise.
    pub bonus_cap: f64,
    pub dtw_features: Vec<DtwFeature>,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            n_min: 5,
            kappa: 2.0,
            quasi_random_candidates: 512,
            local_candidates: 64,
            local_sd: 0.05,
            refit_every: 10,
            length_scales: log_grid(0.1, 2.0, 8),
            signal_sds: vec![0.5, 1.0, 2.0],
            noise_sd: 0.01,
            bonus_coefficient: 0.1,
            bonus_cap: 10.0,
            dtw_features: DtwFeature::DEFAULT.to_vec(),
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.quasi_random_candidates + self.local_candidates == 0 {
            return Err(SgdaError::config("the acquisition needs at least one candidate"));
        }
        if self.length_scales.is_empty() || self.signal_sds.is_empty() {
            return Err(SgdaError::config("hyperparameter grids must be non-empty"));
        }
        if self.length_scales.iter().chain(&self.signal_sds).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(SgdaError::config("hyperparameter grids must hold positive values"));
        }
        if self.noise_sd.is_nan() || self.noise_sd <= 0.0 || self.kappa < 0.0 || self.local_sd < 0.0 || self.bonus_cap < 0.0 {
            return Err(SgdaError::config("noise must be positive; kappa, local_sd and bonus_cap non-negative"));
        }
        if self.dtw_features.is_empty() {
            return Err(SgdaError::config("at least one DTW feature is required"));
        }
        Ok(())
    }

    fn hyper(&self) -> GpHyper {
        GpHyper { length_scale: self.length_scales[self.length_scales.len() / 2], signal_sd: 1.0, noise_sd: self.noise_sd }
    }
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// The `i`-th point of the Halton sequence in `dim` dimensions.
pub fn halton(i: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "Halton sequence supports up to {} dimensions", PRIMES.len());
    PRIMES[..dim].iter().map(|&p| radical_inverse(i + 1, u64::from(p))).collect()
}

/// GP-UCB maximizer over `[0, 1]^d`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub gp: GpSurrogate,
    config: BoConfig,
}

impl Optimizer {
    pub fn new(dim: usize, config: BoConfig) -> Self {
        Self { gp: GpSurrogate::new(dim, config.hyper()), config }
    }

    pub fn dim(&self) -> usize {
        self.gp.dim
    }

    /// Candidate set: a randomly shifted Halton block plus Gaussian
    /// perturbations of the best observation so far.
    pub fn candidates<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        let d = self.dim();
        let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let mut out: Vec<Vec<f64>> = (0..self.config.quasi_random_candidates as u64)
            .map(|i| halton(i, d).iter().zip(&shift).map(|(h, s)| (h + s).fract()).collect())
            .collect();
        if let Some((best, _)) = self.gp.observations().max_by(|a, b| a.1.total_cmp(&b.1)) {
            let noise = Normal::new(0.0, self.config.local_sd).expect("finite sd");
            for _ in 0..self.config.local_candidates {
                out.push(best.iter().map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0)).collect());
            }
        }
        out
    }

    pub fn acquisition(&self, x: &[f64]) -> f64 {
        let (mean, var) = self.gp.posterior(x);
        mean + self.config.kappa * var.sqrt()
    }

    /// Uniform while the surrogate has fewer than `n_min` points, then the
    /// candidate maximizing the upper confidence bound (first one on ties).
    pub fn propose<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        if self.gp.len() < self.config.n_min {
            return (0..self.dim()).map(|_| rng.random::<f64>()).collect();
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for c in self.candidates(rng) {
            let a = self.acquisition(&c);
            if best.as_ref().is_none_or(|(b, _)| a > *b) {
                best = Some((a, c));
            }
        }
        best.expect("candidate set is non-empty").1
    }

    pub fn observe(&mut self, x: &[f64], y: f64) -> Result<()> {
        self.gp.add(x, y)?;
        if self.config.refit_every > 0 && self.gp.len().is_multiple_of(self.config.refit_every) {
            self.gp.refit(&self.config.length_scales, &self.config.signal_sds)?;
        }
        Ok(())
    }
}

/// Lazily created optimizers, one per target, over encoded conditions.
#[derive(Debug, Clone)]
pub struct Sampler {
    encoding: Encoding,
    config: BoConfig,
    targets: Vec<Option<Optimizer>>,
}

impl Sampler {
    pub fn new(num_targets: usize, ranges: ParamRanges, config: BoConfig) -> Result<Self> {
        config.validate()?;
        ranges.validate()?;
        Ok(Self { encoding: Encoding::new(ranges), config, targets: vec![None; num_targets] })
    }

    pub fn encoding(&self) -> &Encoding {
        &self.encoding
    }

    pub fn config(&self) -> &BoConfig {
        &self.config
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    fn optimizer(&mut self, target: usize) -> &mut Optimizer {
        let config = &self.config;
        self.targets[target].get_or_insert_with(|| Optimizer::new(ENCODED_DIM, config.clone()))
    }

    pub fn surrogate(&self, target: usize) -> Option<&GpSurrogate> {
        self.targets.get(target)?.as_ref().map(|o| &o.gp)
    }

    pub fn observations(&self, target: usize) -> usize {
        self.surrogate(target).map_or(0, GpSurrogate::len)
    }

    pub fn propose<R: Rng + ?Sized>(&mut self, target: usize, rng: &mut R) -> Result<EnvCondition> {
        if target >= self.targets.len() {
            return Err(SgdaError::input(format!("unknown sampler target {target}")));
        }
        let x = self.optimizer(target).propose(rng);
        Ok(self.encoding.decode(&x))
    }

    pub fn observe(&mut self, target: usize, e: &EnvCondition, value: f64) -> Result<()> {
        if target >= self.targets.len() {
            return Err(SgdaError::input(format!("unknown sampler target {target}")));
        }
        if !value.is_finite() {
            return Err(SgdaError::input(format!("non-finite target value {value}")));
        }
        let x = self.encoding.encode(e);
        self.optimizer(target).observe(&x, value)
    }

    /// Every observation as `target, x0..x5, value`.
    pub fn write_log<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["target".to_string()];
        header.extend((0..ENCODED_DIM).map(|i| format!("x{i}")));
        header.push("value".into());
        w.write_record(&header)?;
        for (t, opt) in self.targets.iter().enumerate() {
            let Some(opt) = opt else { continue };
            for (x, y) in opt.gp.observations() {
                let mut record = vec![t.to_string()];
                record.extend(x.iter().map(f64::to_string));
                record.push(y.to_string());
                w.write_record(&record)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Exploration bonus for a trajectory that satisfies its target: the
/// coefficient times the DTW distance to the nearest trajectory already
/// stored for that target, capped. An empty store earns the cap.
pub fn diversity_bonus(traj: &Trajectory, store: &[Landed], config: &BoConfig) -> Result<f64> {
    let mut nearest = config.bonus_cap;
    for landed in store {
        nearest = nearest.min(dtw_distance(traj, &landed.trajectory, &config.dtw_features)?);
    }
    Ok(config.bonus_coefficient * nearest)
}

/// Robustness plus the diversity bonus when the target is satisfied.
pub fn target_value(
    robustness: f64,
    satisfied: bool,
    traj: &Trajectory,
    store: &[Landed],
    config: &BoConfig,
) -> Result<f64> {
    if satisfied {
        Ok(robustness + diversity_bonus(traj, store, config)?)
    } else {
        Ok(robustness)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn halton_first_points() {
        assert_eq!(halton(0, 2), vec![0.5, 1.0 / 3.0]);
        assert_eq!(halton(1, 2), vec![0.25, 2.0 / 3.0]);
        assert_eq!(halton(2, 1), vec![0.75]);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(0.1, 2.0, 8);
        assert_eq!(g.len(), 8);
        assert!((g[0] - 0.1).abs() < 1e-15 && (g[7] - 2.0).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn categorical_bins_decode_to_their_category() {
        let enc = Encoding::new(ParamRanges::default());
        for (i, side) in AdoSide::ALL.iter().enumerate() {
            for (j, m) in Maneuver::ALL.iter().enumerate() {
                let x = [0.5, bin_centre(i), bin_centre(j), 0.5, 0.2, 0.7];
                let e = enc.decode(&x);
                assert_eq!((e.ado_side, e.ado_maneuver), (*side, *m));
                let back = enc.encode(&e);
                assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
        assert_eq!(bin(0.0), 0);
        assert_eq!(bin(1.0), 2);
        assert_eq!(bin(0.34), 1);
    }

    #[test]
    fn interpolates_with_tiny_noise() {
        let mut gp = GpSurrogate::new(2, GpHyper { length_scale: 0.5, signal_sd: 1.0, noise_sd: 1e-6 });
        let pts = [([0.1, 0.2], 1.0), ([0.8, 0.4], -2.0), ([0.5, 0.9], 0.5)];
        for (x, y) in pts {
            gp.add(&x, y).unwrap();
        }
        for (x, y) in pts {
            assert!((gp.posterior(&x).0 - y).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicate_points_average() {
        let mut gp = GpSurrogate::new(1, GpHyper { length_scale: 0.3, signal_sd: 1.0, noise_sd: 0.1 });
        gp.add(&[0.5], 1.0).unwrap();
        gp.add(&[0.5], 3.0).unwrap();
        let m = gp.posterior(&[0.5]).0;
        assert!(m > 1.0 && m < 3.0);
    }

    #[test]
    fn variance_reverts_to_prior_far_from_data() {
        let mut gp = GpSurrogate::new(1, GpHyper { length_scale: 0.05, signal_sd: 1.0, noise_sd: 0.01 });
        gp.add(&[0.0], 1.0).unwrap();
        gp.add(&[0.1], -1.0).unwrap();
        let (_, far) = gp.posterior(&[1.0]);
        let (mean_scale, y_scale) = gp.standardization();
        assert_eq!(mean_scale, 0.0);
        assert!((far - y_scale * y_scale).abs() < 1e-9);
        let (_, near) = gp.posterior(&[0.0]);
        assert!(near < 1e-3);
    }

    #[test]
    fn rejects_non_finite_targets() {
        let mut s = Sampler::new(2, ParamRanges::default(), BoConfig::default()).unwrap();
        let e = s.encoding().decode(&[0.5; 6]);
        assert!(s.observe(0, &e, f64::NAN).is_err());
        assert!(s.observe(5, &e, 1.0).is_err());
        assert_eq!(s.observations(0), 0);
    }

    #[test]
    fn cold_start_draws_uniformly_then_acquisition_takes_over() {
        let mut opt = Optimizer::new(2, BoConfig::default());
        let mut rng = seed::rng(1, "t", 0);
        for i in 0..5 {
            let x = opt.propose(&mut rng);
            opt.observe(&x, i as f64).unwrap();
        }
        let mut a = seed::rng(9, "t", 0);
        let mut b = seed::rng(9, "t", 0);
        let x = opt.propose(&mut a);
        assert_eq!(x, opt.propose(&mut b));
        let best = opt.candidates(&mut seed::rng(9, "t", 0)).iter().map(|c| opt.acquisition(c)).fold(f64::MIN, f64::max);
        assert_eq!(opt.acquisition(&x), best);
    }

    #[test]
    fn refit_happens_every_ten_observations() {
        let mut opt = Optimizer::new(1, BoConfig::default());
        let before = opt.gp.hyper();
        for i in 0..10 {
            let x = i as f64 / 10.0;
            opt.observe(&[x], (6.0 * x).sin()).unwrap();
        }
        assert_ne!(opt.gp.hyper(), before);
    }
}
