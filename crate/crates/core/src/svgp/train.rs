//! ELBO, hyperparameter gradients and the stochastic training loop.
//!
//! Each minibatch step first moves the whitened variational posterior along
//! its natural gradient (step `rho`; with `rho = 1` on the full data this is
//! the exact optimum for the current hyperparameters), then takes one Adam
//! step on the log hyperparameters using analytic ELBO gradients. Inducing
//! locations stay at their initial subsample.

use std::collections::HashSet;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{inducing_cholesky, InputNormalizer, Kernel, SvgpError, SvgpModel};
use crate::geometry::Vec3;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const DEFAULT_BATCH_CAP: usize = 512;
const MINIBATCH_NATURAL_STEP: f64 = 0.1;
const ELBO_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub inducing: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Minibatch size; `None` uses `min(N, 512)`.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Natural-gradient step for the variational posterior; `None` uses 1.0
    /// when a batch covers the whole data set and 0.1 otherwise.
    pub natural_step: Option<f64>,
    pub learn_hyperparameters: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            inducing: 500,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: None,
            seed: 0,
            natural_step: None,
            learn_hyperparameters: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SvgpError> {
        let bad = |m: &str| Err(SvgpError::InvalidConfig(m.to_string()));
        if self.inducing == 0 {
            return bad("inducing must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive");
        }
        if let Some(rho) = self.natural_step {
            if !(rho > 0.0 && rho <= 1.0) {
                return bad("natural_step must lie in (0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Full-data ELBO after each epoch.
    pub elbo_trace: Vec<f64>,
    pub epochs: usize,
    pub final_kernel: Kernel,
    pub final_noise_variance: f64,
}

/// ELBO derivatives with respect to the log hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboGradient {
    pub log_signal_variance: f64,
    pub log_lengthscale: f64,
    pub log_noise_variance: f64,
}

impl ElboGradient {
    fn as_array(&self) -> [f64; 3] {
        [
            self.log_signal_variance,
            self.log_lengthscale,
            self.log_noise_variance,
        ]
    }
}

/// Variational posterior in whitened coordinates.
struct Posterior<'a> {
    mean: &'a DVector<f64>,
    cov: &'a DMatrix<f64>,
}

/// Expected log likelihood of a batch (times `scale`) and, if requested, its
/// gradient with respect to the log hyperparameters.
#[allow(clippy::too_many_arguments)]
fn data_terms(
    kernel: &Kernel,
    noise: f64,
    inducing: &[Vec3],
    chol: &DMatrix<f64>,
    xs: &[Vec3],
    ys: &[f64],
    q: &Posterior<'_>,
    scale: f64,
    want_grad: bool,
) -> (f64, Option<ElboGradient>) {
    let sf2 = kernel.signal_variance;
    let ell2 = kernel.lengthscale * kernel.lengthscale;
    let kxz = kernel.cross(xs, inducing);
    let a = chol
        .solve_lower_triangular(&kxz.transpose())
        .expect("positive Cholesky diagonal")
        .transpose();
    let resid = DVector::from_column_slice(ys) - &a * q.mean;
    let a_s = &a * q.cov;
    let b = xs.len();
    let mut value = 0.0;
    let mut noise_grad = 0.0;
    for i in 0..b {
        let quad = a_s.row(i).dot(&a.row(i));
        let aa = a.row(i).norm_squared();
        let sq = resid[i] * resid[i] + quad + sf2 - aa;
        value += -0.5 * (LN_2PI + noise.ln()) - sq / (2.0 * noise);
        noise_grad += -0.5 + sq / (2.0 * noise);
    }
    value *= scale;
    if !want_grad {
        return (value, None);
    }

    let g_a = (&resid * q.mean.transpose() - &a_s + &a) * (scale / noise);
    let x = chol
        .tr_solve_lower_triangular(&g_a.transpose())
        .expect("positive Cholesky diagonal");
    let g_kxz = x.transpose();
    let g_l = -(&x * &a);
    let mut p = chol.tr_mul(&g_l.lower_triangle()).lower_triangle();
    for i in 0..p.nrows() {
        p[(i, i)] *= 0.5;
    }
    let y = chol
        .tr_solve_lower_triangular(&p)
        .expect("positive Cholesky diagonal");
    let g_kzz = chol
        .tr_solve_lower_triangular(&y.transpose())
        .expect("positive Cholesky diagonal")
        .transpose();

    let m = inducing.len();
    let mut g_sf = -scale * b as f64 * sf2 / (2.0 * noise);
    let mut g_ell = 0.0;
    for i in 0..b {
        for j in 0..m {
            let k = kxz[(i, j)];
            let d2 = (xs[i] - inducing[j]).norm_squared();
            g_sf += g_kxz[(i, j)] * k;
            g_ell += g_kxz[(i, j)] * k * d2 / ell2;
        }
    }
    for i in 0..m {
        for j in 0..m {
            let mut k = kernel.eval(&inducing[i], &inducing[j]);
            let d2 = (inducing[i] - inducing[j]).norm_squared();
            g_ell += g_kzz[(i, j)] * k * d2 / ell2;
            if i == j {
                k += super::INDUCING_JITTER * sf2;
            }
            g_sf += g_kzz[(i, j)] * k;
        }
    }
    (
        value,
        Some(ElboGradient {
            log_signal_variance: g_sf,
            log_lengthscale: g_ell,
            log_noise_variance: scale * noise_grad,
        }),
    )
}

/// `KL(N(m, S) || N(0, I))`.
fn kl_divergence(mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let m = mean.len() as f64;
    let log_det = match Cholesky::new(cov.clone()) {
        Some(c) => 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => return f64::INFINITY,
    };
    0.5 * (cov.trace() + mean.norm_squared() - m - log_det)
}

fn full_elbo(
    kernel: &Kernel,
    noise: f64,
    inducing: &[Vec3],
    chol: &DMatrix<f64>,
    xs: &[Vec3],
    ys: &[f64],
    q: &Posterior<'_>,
) -> f64 {
    let mut total = 0.0;
    for (cx, cy) in xs.chunks(ELBO_CHUNK).zip(ys.chunks(ELBO_CHUNK)) {
        total += data_terms(kernel, noise, inducing, chol, cx, cy, q, 1.0, false).0;
    }
    total - kl_divergence(q.mean, q.cov)
}

impl SvgpModel {
    fn normalized_data(&self, inputs: &[Vec3], targets: &[f64]) -> (Vec<Vec3>, Vec<f64>) {
        (
            inputs.iter().map(|p| self.normalizer.apply(p)).collect(),
            targets.iter().map(|t| t - self.mean_offset).collect(),
        )
    }

    fn variational_cov(&self) -> DMatrix<f64> {
        &self.variational_cov_factor * self.variational_cov_factor.transpose()
    }

    /// Full-data ELBO of the model on `(inputs, targets)`.
    pub fn elbo(&self, inputs: &[Vec3], targets: &[f64]) -> f64 {
        let (xs, ys) = self.normalized_data(inputs, targets);
        let cov = self.variational_cov();
        let q = Posterior {
            mean: &self.variational_mean,
            cov: &cov,
        };
        full_elbo(
            &self.kernel,
            self.noise_variance,
            &self.inducing,
            &self.cache.chol,
            &xs,
            &ys,
            &q,
        )
    }

    /// Analytic ELBO gradient with respect to the log hyperparameters, holding
    /// the variational parameters fixed.
    pub fn elbo_gradient(&self, inputs: &[Vec3], targets: &[f64]) -> ElboGradient {
        let (xs, ys) = self.normalized_data(inputs, targets);
        let cov = self.variational_cov();
        let q = Posterior {
            mean: &self.variational_mean,
            cov: &cov,
        };
        data_terms(
            &self.kernel,
            self.noise_variance,
            &self.inducing,
            &self.cache.chol,
            &xs,
            &ys,
            &q,
            1.0,
            true,
        )
        .1
        .expect("gradient requested")
    }

    /// Copy of the model with replaced log hyperparameters
    /// `[ln signal variance, ln lengthscale, ln noise variance]`.
    pub fn with_log_hyperparameters(&self, log_params: [f64; 3]) -> Result<Self, SvgpError> {
        Self::from_normalized(
            self.inducing.clone(),
            Kernel {
                signal_variance: log_params[0].exp(),
                lengthscale: log_params[1].exp(),
            },
            log_params[2].exp(),
            self.variational_mean.clone(),
            self.variational_cov_factor.clone(),
            self.normalizer,
            self.mean_offset,
            self.density_scale,
        )
    }

    pub fn log_hyperparameters(&self) -> [f64; 3] {
        [
            self.kernel.signal_variance.ln(),
            self.kernel.lengthscale.ln(),
            self.noise_variance.ln(),
        ]
    }
}

struct Adam {
    m: [f64; 3],
    v: [f64; 3],
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(lr: f64) -> Self {
        Self {
            m: [0.0; 3],
            v: [0.0; 3],
            t: 0,
            lr,
        }
    }

    /// Ascent step on `params`.
    fn step(&mut self, params: &mut [f64; 3], grad: [f64; 3]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        for i in 0..3 {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            let mh = self.m[i] / (1.0 - B1.powi(self.t));
            let vh = self.v[i] / (1.0 - B2.powi(self.t));
            params[i] += self.lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

fn select_inducing(xs: &[Vec3], count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    if count < xs.len() {
        order.shuffle(rng);
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count.min(xs.len()));
    for i in order {
        let key = [xs[i].x.to_bits(), xs[i].y.to_bits(), xs[i].z.to_bits()];
        if seen.insert(key) {
            out.push(xs[i]);
            if out.len() == count {
                break;
            }
        }
    }
    out
}

/// Trains an SVGP on `(inputs, targets)`.
pub fn train(
    inputs: &[Vec3],
    targets: &[f64],
    config: &TrainConfig,
) -> Result<(SvgpModel, TrainingReport), SvgpError> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(SvgpError::EmptyTrainingSet);
    }
    if inputs.len() != targets.len() {
        return Err(SvgpError::LengthMismatch {
            inputs: inputs.len(),
            targets: targets.len(),
        });
    }
    if let Some(i) = inputs
        .iter()
        .zip(targets)
        .position(|(p, t)| !t.is_finite() || !p.iter().all(|v| v.is_finite()))
    {
        return Err(SvgpError::NonFiniteData(i));
    }
    let n = inputs.len();
    let normalizer = InputNormalizer::fit(inputs);
    let xs: Vec<Vec3> = inputs.iter().map(|p| normalizer.apply(p)).collect();
    let mean_offset = targets.iter().sum::<f64>() / n as f64;
    let ys: Vec<f64> = targets.iter().map(|t| t - mean_offset).collect();
    let target_var = ys.iter().map(|y| y * y).sum::<f64>() / n as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let inducing = select_inducing(&xs, config.inducing, &mut rng);
    let m = inducing.len();

    let (lo, hi) = super::bounding_box(&xs);
    let diag = (hi - lo).norm();
    let sf2 = target_var.max(1e-6);
    let mut log_params = [
        sf2.ln(),
        (0.2 * if diag > 1e-12 { diag } else { 1.0 }).ln(),
        (1e-2 * sf2).ln(),
    ];
    let batch = config.batch_size.unwrap_or(DEFAULT_BATCH_CAP).min(n);
    let rho = config.natural_step.unwrap_or(if batch >= n {
        1.0
    } else {
        MINIBATCH_NATURAL_STEP
    });
    let scale = n as f64 / batch as f64;

    // natural parameters of q(v): precision and precision-times-mean
    let mut precision = DMatrix::<f64>::identity(m, m);
    let mut shift = DVector::<f64>::zeros(m);
    let mut mean = DVector::<f64>::zeros(m);
    let mut cov = DMatrix::<f64>::identity(m, m);
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut elbo_trace = Vec::with_capacity(config.epochs);

    let hyper = |p: &[f64; 3]| {
        (
            Kernel {
                signal_variance: p[0].exp(),
                lengthscale: p[1].exp(),
            },
            p[2].exp(),
        )
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let bx: Vec<Vec3> = idx.iter().map(|&i| xs[i]).collect();
            let by: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
            let (kernel, noise) = hyper(&log_params);
            let chol = inducing_cholesky(&kernel, &inducing).ok_or(SvgpError::SingularInducing)?;
            let kxz = kernel.cross(&bx, &inducing);
            let at = chol
                .solve_lower_triangular(&kxz.transpose())
                .ok_or(SvgpError::SingularInducing)?;
            let w = scale / noise;
            let target_precision = DMatrix::identity(m, m) + (&at * at.transpose()) * w;
            let target_shift = (&at * DVector::from_column_slice(&by)) * w;
            precision = &precision * (1.0 - rho) + target_precision * rho;
            shift = &shift * (1.0 - rho) + target_shift * rho;
            let sym = (&precision + precision.transpose()) * 0.5;
            let chol_p = Cholesky::new(sym).ok_or(SvgpError::DivergedTraining { epoch })?;
            mean = chol_p.solve(&shift);
            cov = chol_p.inverse();

            if config.learn_hyperparameters {
                let q = Posterior {
                    mean: &mean,
                    cov: &cov,
                };
                let (_, grad) =
                    data_terms(&kernel, noise, &inducing, &chol, &bx, &by, &q, scale, true);
                let grad = grad.expect("gradient requested").as_array();
                if !grad.iter().all(|g| g.is_finite()) {
                    return Err(SvgpError::DivergedTraining { epoch });
                }
                adam.step(&mut log_params, grad);
                // keep the noise from collapsing below round-off
                log_params[2] = log_params[2].max((1e-10 * sf2).ln());
            }
        }
        let (kernel, noise) = hyper(&log_params);
        let chol =
            inducing_cholesky(&kernel, &inducing).ok_or(SvgpError::DivergedTraining { epoch })?;
        let q = Posterior {
            mean: &mean,
            cov: &cov,
        };
        let elbo = full_elbo(&kernel, noise, &inducing, &chol, &xs, &ys, &q);
        if !elbo.is_finite() {
            return Err(SvgpError::DivergedTraining { epoch });
        }
        elbo_trace.push(elbo);
    }

    let (kernel, noise) = hyper(&log_params);
    let sym = (&cov + cov.transpose()) * 0.5;
    let factor = Cholesky::new(sym.clone())
        .or_else(|| Cholesky::new(sym + DMatrix::identity(m, m) * 1e-12))
        .ok_or(SvgpError::DivergedTraining {
            epoch: config.epochs,
        })?
        .l();
    let model = SvgpModel::from_normalized(
        inducing,
        kernel,
        noise,
        mean,
        factor,
        normalizer,
        mean_offset,
        1.0,
    )?;
    let report = TrainingReport {
        elbo_trace,
        epochs: config.epochs,
        final_kernel: kernel,
        final_noise_variance: noise,
    };
    Ok((model, report))
}
