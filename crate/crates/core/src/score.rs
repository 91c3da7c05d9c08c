//! Time-conditioned score network trained by denoising score matching in
//! noise-prediction form, plus closed-form Gaussian scores used as oracles.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::nn::{orthogonal, Activation, Adam, Mlp};
use crate::rng::{normal_vec, seeded};
use crate::sample::{check_collection, Sample};
use crate::sde::DiffusionSchedule;

pub const TIME_FEATURES: usize = 16;
pub const DEFAULT_T_MIN: f64 = 1e-3;

/// Anything that can evaluate `grad_y log q_t(y)`.
pub trait ScoreFn {
    fn dim(&self) -> usize;
    fn score(&self, y: &Sample, t: f64) -> Result<Sample>;
}

/// Sinusoidal features of `t`: 8 frequencies spaced geometrically over
/// `[1, 1000]`, sines first then cosines.
pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let half = TIME_FEATURES / 2;
    let mut out = [0.0; TIME_FEATURES];
    for k in 0..half {
        let freq = 1000f64.powf(k as f64 / (half - 1) as f64);
        out[k] = (freq * t).sin();
        out[half + k] = (freq * t).cos();
    }
    out
}

/// Gaussian fit of the clean data, used as an analytic skip path.
///
/// For data `N(mu, C)` the exact noise predictor at time `t` is
/// `sigma U (alpha^2 L + sigma^2)^-1 U^T (y - alpha mu)` with `C = U L U^T`.
/// The network then only has to learn the non-Gaussian residual.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Column-major `D x D` eigenvector matrix.
    pub eigenvectors: Vec<f64>,
}

impl GaussianPrior {
    pub fn fit(data: &[Sample], ridge: f64) -> Result<Self> {
        let first = data.first().ok_or(Error::EmptyData("prior fit"))?;
        let d = first.dim();
        check_collection(data, d)?;
        let n = data.len() as f64;
        let mut mean = vec![0.0; d];
        for s in data {
            for (m, v) in mean.iter_mut().zip(s.values()) {
                *m += v / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for s in data {
            let c = DVector::from_iterator(d, s.values().iter().zip(&mean).map(|(v, m)| v - m));
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (data.len().max(2) - 1) as f64;
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
        let eig = SymmetricEigen::new(cov);
        Ok(Self {
            mean,
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
            eigenvectors: eig.eigenvectors.as_slice().to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn noise_prediction(&self, y: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
        let d = self.dim();
        let u = &self.eigenvectors;
        let centered: Vec<f64> = y.iter().zip(&self.mean).map(|(v, m)| v - alpha * m).collect();
        let mut z = vec![0.0; d];
        for (j, zj) in z.iter_mut().enumerate() {
            let col = &u[j * d..(j + 1) * d];
            let proj: f64 = col.iter().zip(&centered).map(|(a, b)| a * b).sum();
            *zj = sigma * proj / (alpha * alpha * self.eigenvalues[j] + sigma * sigma);
        }
        let mut out = vec![0.0; d];
        for (j, zj) in z.iter().enumerate() {
            let col = &u[j * d..(j + 1) * d];
            for (o, a) in out.iter_mut().zip(col) {
                *o += a * zj;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    mlp: Mlp,
    prior: Option<GaussianPrior>,
    schedule: DiffusionSchedule,
    t_min: f64,
}

impl ScoreNetwork {
    /// Fresh network: orthogonal hidden layers, zero biases, zero output layer.
    pub fn new(dim: usize, hidden: &[usize], schedule: DiffusionSchedule, seed: u64) -> Self {
        let mut dims = vec![dim + TIME_FEATURES];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        let mut acts = vec![Activation::Silu; hidden.len()];
        acts.push(Activation::Identity);
        let mut mlp = Mlp::zeros(&dims, &acts);
        let mut rng = seeded(seed);
        for k in 0..hidden.len() {
            let w = orthogonal(&mut rng, dims[k + 1], dims[k], 1.0);
            mlp.set_layer_weights(k, &w);
        }
        Self { mlp, prior: None, schedule, t_min: DEFAULT_T_MIN }
    }

    pub fn from_parts(mlp: Mlp, prior: Option<GaussianPrior>, schedule: DiffusionSchedule, t_min: f64) -> Result<Self> {
        let d = mlp.output_dim();
        check_dim(d + TIME_FEATURES, mlp.input_dim())?;
        if let Some(p) = &prior {
            check_dim(d, p.dim())?;
        }
        Ok(Self { mlp, prior, schedule, t_min })
    }

    pub fn with_prior(mut self, prior: GaussianPrior) -> Result<Self> {
        check_dim(self.dim(), prior.dim())?;
        self.prior = Some(prior);
        Ok(self)
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn prior(&self) -> Option<&GaussianPrior> {
        self.prior.as_ref()
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    fn check_t(&self, t: f64) -> Result<f64> {
        let t = self.schedule.check_time(t)?;
        if t < self.t_min {
            return Err(Error::Domain { t, horizon: self.schedule.horizon() });
        }
        Ok(t)
    }

    fn input(y: &[f64], t: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(y.len() + TIME_FEATURES);
        x.extend_from_slice(y);
        x.extend_from_slice(&time_features(t));
        x
    }

    /// Predicted noise `eps_hat(y, t)`.
    pub fn predict_noise(&self, y: &Sample, t: f64) -> Result<Sample> {
        check_dim(self.dim(), y.dim())?;
        let t = self.check_t(t)?;
        let mut out = self.mlp.eval(&Self::input(y.values(), t));
        if let Some(p) = &self.prior {
            let (a, s) = self.schedule.kernel_coeffs(t)?;
            for (o, v) in out.iter_mut().zip(p.noise_prediction(y.values(), a, s)) {
                *o += v;
            }
        }
        y.with_values(out)
    }
}

impl ScoreFn for ScoreNetwork {
    fn dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// `-eps_hat(y, t) / sigma_t`.
    fn score(&self, y: &Sample, t: f64) -> Result<Sample> {
        let eps = self.predict_noise(y, t)?;
        let (_, s) = self.schedule.kernel_coeffs(self.check_t(t)?)?;
        let v = eps.values().iter().map(|e| -e / s).collect();
        y.with_values(v)
    }
}

/// Exact score of the perturbed marginal of `N(mean, var0 I)` data.
pub fn gaussian_oracle_score(
    y: &Sample,
    t: f64,
    mean: &Sample,
    var0: f64,
    schedule: &DiffusionSchedule,
) -> Result<Sample> {
    check_dim(mean.dim(), y.dim())?;
    if !(var0 >= 0.0) {
        return Err(Error::Config(format!("variance must be non-negative, got {var0}")));
    }
    let t = schedule.check_time(t)?;
    if t < DEFAULT_T_MIN {
        return Err(Error::Domain { t, horizon: schedule.horizon() });
    }
    let (a, s) = schedule.kernel_coeffs(t)?;
    let denom = a * a * var0 + s * s;
    let v = y.values().iter().zip(mean.values()).map(|(yv, m)| -(yv - a * m) / denom).collect();
    y.with_values(v)
}

/// Analytic score of isotropic Gaussian clean data, usable wherever a trained
/// network is.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    pub mean: Sample,
    pub var0: f64,
    pub schedule: DiffusionSchedule,
}

impl ScoreFn for GaussianScore {
    fn dim(&self) -> usize {
        self.mean.dim()
    }

    fn score(&self, y: &Sample, t: f64) -> Result<Sample> {
        gaussian_oracle_score(y, t, &self.mean, self.var0, &self.schedule)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub t_min: f64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    /// Add the Gaussian skip path fitted to the training data.
    pub gaussian_skip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            learning_rate: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            t_min: DEFAULT_T_MIN,
            seed: 0,
            hidden_dims: vec![128, 128],
            gaussian_skip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.t_min > 0.0 && self.t_min < horizon) {
            return Err(Error::Config(format!("t_min must lie in (0, {horizon}), got {}", self.t_min)));
        }
        Ok(())
    }
}

/// One training example: clean point, time and the noise that perturbs it.
#[derive(Debug, Clone)]
pub struct DsmExample {
    pub x0: Vec<f64>,
    pub t: f64,
    pub noise: Vec<f64>,
}

/// Batch-mean noise-prediction loss and its gradient with respect to the MLP
/// parameters. Examples are reduced in order, so the result is deterministic.
pub fn dsm_loss_and_grad(net: &ScoreNetwork, batch: &[DsmExample]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; net.mlp.params().len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len().max(1) as f64;
    for ex in batch {
        check_dim(net.dim(), ex.x0.len())?;
        check_dim(net.dim(), ex.noise.len())?;
        let (a, s) = net.schedule.kernel_coeffs(ex.t)?;
        let yt: Vec<f64> = ex.x0.iter().zip(&ex.noise).map(|(x, e)| a * x + s * e).collect();
        let trace = net.mlp.forward(&ScoreNetwork::input(&yt, ex.t));
        let mut pred = trace.output().to_vec();
        if let Some(p) = &net.prior {
            for (o, v) in pred.iter_mut().zip(p.noise_prediction(&yt, a, s)) {
                *o += v;
            }
        }
        let resid: Vec<f64> = pred.iter().zip(&ex.noise).map(|(p, e)| p - e).collect();
        loss += scale * resid.iter().map(|r| r * r).sum::<f64>();
        let g_out: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
        let mut taps: Vec<Option<&[f64]>> = vec![None; net.mlp.layers().len()];
        *taps.last_mut().expect("network has layers") = Some(&g_out);
        net.mlp.backward(&trace, &taps, Some(&mut grad));
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: ScoreNetwork,
    pub losses: Vec<f64>,
}

/// Denoising score matching on clean-domain data.
pub fn train_dsm(clean: &[Sample], schedule: &DiffusionSchedule, config: &TrainConfig) -> Result<TrainOutcome> {
    train_dsm_with(clean, schedule, config, |_, _| {})
}

/// As [`train_dsm`], calling `on_step(step, &network)` after every update.
pub fn train_dsm_with<F>(
    clean: &[Sample],
    schedule: &DiffusionSchedule,
    config: &TrainConfig,
    mut on_step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &ScoreNetwork),
{
    let first = clean.first().ok_or(Error::EmptyData("clean training set"))?;
    let d = first.dim();
    check_collection(clean, d)?;
    config.validate(schedule.horizon())?;

    let mut net = ScoreNetwork::new(d, &config.hidden_dims, *schedule, config.seed);
    net.t_min = config.t_min;
    if config.gaussian_skip {
        net.prior = Some(GaussianPrior::fit(clean, 1e-4)?);
    }
    let mut opt = Adam::new(net.mlp.params().len(), config.learning_rate, config.adam_beta1, config.adam_beta2);
    // offset keeps the data stream apart from the init stream
    let mut rng = seeded(config.seed.wrapping_add(0x5eed));
    let mut losses = Vec::with_capacity(config.steps);
    let span = schedule.horizon() - config.t_min;
    for step in 0..config.steps {
        let batch: Vec<DsmExample> = (0..config.batch_size)
            .map(|_| {
                let i = rng.random_range(0..clean.len());
                let t = config.t_min + span * rng.random::<f64>();
                let noise = normal_vec(&mut rng, d);
                DsmExample { x0: clean[i].values().to_vec(), t, noise }
            })
            .collect();
        let (loss, grad) = dsm_loss_and_grad(&net, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step, what: format!("score matching loss {loss}") });
        }
        opt.step(net.mlp.params_mut(), &grad);
        if net.mlp.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { step, what: "score network parameters".into() });
        }
        losses.push(loss);
        on_step(step, &net);
    }
    Ok(TrainOutcome { network: net, losses })
}
