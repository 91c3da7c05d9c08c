//! Energy-guided reverse sampling from a partially noised source image.

use crate::energy::{draw_reference, evaluate, EnergyConfig};
use crate::error::{check_dim, Error, Result};
use crate::features::{FeatureEncoder, PromptPair};
use crate::rng::{seeded, NoiseSource};
use crate::sample::Sample;
use crate::score::ScoreFn;
use crate::sde::{DiffusionSchedule, TIME_CLAMP_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stepper {
    /// `y <- (y + beta h (s - grad)) / sqrt(1 - beta h) + sqrt(beta h) eta`.
    #[default]
    Vp,
    /// Plain Euler-Maruyama on the reverse SDE.
    EulerMaruyama,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Start time as a fraction of the horizon.
    pub ts_fraction: f64,
    pub steps: usize,
    pub seed: u64,
    pub energy: EnergyConfig,
    pub stepper: Stepper,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { ts_fraction: 0.4, steps: 100, seed: 0, energy: EnergyConfig::default(), stepper: Stepper::Vp }
    }
}

impl SamplerConfig {
    pub fn start_time(&self, schedule: &DiffusionSchedule) -> f64 {
        self.ts_fraction * schedule.horizon()
    }

    pub fn step_size(&self, schedule: &DiffusionSchedule) -> f64 {
        self.start_time(schedule) / self.steps as f64
    }

    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if !(self.ts_fraction > 0.0 && self.ts_fraction <= 1.0) {
            return Err(Error::Config(format!("start fraction {} outside (0, 1]", self.ts_fraction)));
        }
        if self.steps == 0 {
            return Err(Error::Config("at least one step is required".into()));
        }
        // beta is increasing, so its largest value on [0, Ts] is at Ts
        let h = self.step_size(schedule);
        let bh = schedule.beta(self.start_time(schedule))? * h;
        if bh >= 1.0 {
            return Err(Error::Config(format!(
                "beta(Ts) * h = {bh:.4} must stay below 1; use more steps or a smaller start time"
            )));
        }
        Ok(())
    }
}

/// Everything a reverse step needs besides the state.
pub struct Components<'a> {
    pub schedule: &'a DiffusionSchedule,
    pub score: &'a dyn ScoreFn,
    /// Encoder and prompts; may be absent when guidance is off.
    pub guidance: Option<(&'a FeatureEncoder, &'a PromptPair)>,
}

/// One row of the sampling trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    /// Execution order, starting at 1.
    pub step: usize,
    pub n: f64,
    pub energy: f64,
    pub grad_norm: f64,
}

/// `y_Ts ~ q(y | x0)` at `ts`.
pub fn initialize(x0: &Sample, schedule: &DiffusionSchedule, ts: f64, noise: &mut dyn NoiseSource) -> Result<Sample> {
    if !(ts > 0.0) {
        return Err(Error::Domain { t: ts, horizon: schedule.horizon() });
    }
    let eps = x0.with_values(noise.standard_normal(x0.dim()))?;
    schedule.perturb(x0, ts, &eps)
}

struct Guided {
    score: Sample,
    energy: f64,
    grad: Sample,
}

fn guided_terms(
    y: &Sample,
    x0: &Sample,
    n: f64,
    parts: &Components<'_>,
    energy: &EnergyConfig,
    noise: &mut dyn NoiseSource,
) -> Result<Guided> {
    let score = parts.score.score(y, n)?;
    if !energy.is_guided() {
        let grad = y.with_values(vec![0.0; y.dim()])?;
        return Ok(Guided { score, energy: 0.0, grad });
    }
    let (encoder, prompts) = parts
        .guidance
        .ok_or_else(|| Error::Config("guidance enabled without encoder and prompts".into()))?;
    let x_ref = draw_reference(x0, n, parts.schedule, energy, noise)?;
    let ev = evaluate(y, &x_ref, encoder, prompts, energy)?;
    Ok(Guided { score, energy: ev.value, grad: ev.gradient })
}

fn check_step(schedule: &DiffusionSchedule, n: f64, h: f64) -> Result<f64> {
    let n = schedule.check_time(n)?;
    if n - h < -TIME_CLAMP_EPS {
        return Err(Error::Domain { t: n - h, horizon: schedule.horizon() });
    }
    let beta = schedule.beta(n)?;
    if beta * h >= 1.0 {
        return Err(Error::Config(format!("beta(n) * h = {} must stay below 1", beta * h)));
    }
    Ok(beta)
}

/// Reverse step from `n` to `n - h` with the VP rule. Returns the new state
/// and the trace values (energy, gradient norm) at `y_n`.
#[allow(clippy::too_many_arguments)]
pub fn vp_step(
    y: &Sample,
    x0: &Sample,
    n: f64,
    h: f64,
    parts: &Components<'_>,
    energy: &EnergyConfig,
    noise: &mut dyn NoiseSource,
    last: bool,
) -> Result<(Sample, f64, f64)> {
    let beta = check_step(parts.schedule, n, h)?;
    let g = guided_terms(y, x0, n, parts, energy, noise)?;
    let eta = if last { vec![0.0; y.dim()] } else { noise.standard_normal(y.dim()) };
    let bh = beta * h;
    let inv = 1.0 / (1.0 - bh).sqrt();
    let amp = bh.sqrt();
    let out = y
        .values()
        .iter()
        .zip(g.score.values())
        .zip(g.grad.values())
        .zip(&eta)
        .map(|(((yv, s), d), e)| inv * (yv + bh * (s - d)) + amp * e)
        .collect();
    Ok((y.with_values(out)?, g.energy, g.grad.norm()))
}

/// Reverse step from `n` to `n - h` with Euler-Maruyama,
/// `y - [f - g^2 (s - grad)] h + g sqrt(h) eta`.
#[allow(clippy::too_many_arguments)]
pub fn em_step(
    y: &Sample,
    x0: &Sample,
    n: f64,
    h: f64,
    parts: &Components<'_>,
    energy: &EnergyConfig,
    noise: &mut dyn NoiseSource,
    last: bool,
) -> Result<(Sample, f64, f64)> {
    let beta = check_step(parts.schedule, n, h)?;
    let g = guided_terms(y, x0, n, parts, energy, noise)?;
    let eta = if last { vec![0.0; y.dim()] } else { noise.standard_normal(y.dim()) };
    let diff = beta.sqrt();
    let out = y
        .values()
        .iter()
        .zip(g.score.values())
        .zip(g.grad.values())
        .zip(&eta)
        .map(|(((yv, s), d), e)| {
            let drift = -0.5 * beta * yv - beta * (s - d);
            yv - drift * h + diff * h.sqrt() * e
        })
        .collect();
    Ok((y.with_values(out)?, g.energy, g.grad.norm()))
}

/// Full reverse run from `x0` with a fresh seeded stream.
pub fn sample(x0: &Sample, parts: &Components<'_>, config: &SamplerConfig) -> Result<(Sample, Vec<TraceRow>)> {
    let mut rng = seeded(config.seed);
    sample_with_noise(x0, parts, config, &mut rng)
}

/// As [`sample`], drawing every random vector from `noise`: first the
/// initialization noise, then per step the reference noise (guided runs with a
/// perturbed reference only) followed by `eta` (all but the last step).
pub fn sample_with_noise(
    x0: &Sample,
    parts: &Components<'_>,
    config: &SamplerConfig,
    noise: &mut dyn NoiseSource,
) -> Result<(Sample, Vec<TraceRow>)> {
    check_dim(parts.score.dim(), x0.dim())?;
    config.validate(parts.schedule)?;
    if config.energy.is_guided() {
        let (encoder, _) = parts
            .guidance
            .ok_or_else(|| Error::Config("guidance enabled without encoder and prompts".into()))?;
        config.energy.validate(encoder)?;
        check_dim(encoder.input_dim(), x0.dim())?;
    }
    let ts = config.start_time(parts.schedule);
    let h = config.step_size(parts.schedule);
    let mut y = initialize(x0, parts.schedule, ts, noise)?;
    y.ensure_finite(0, "initial state")?;
    let mut trace = Vec::with_capacity(config.steps);
    for (k, i) in (1..=config.steps).rev().enumerate() {
        let n = i as f64 * h;
        let last = i == 1;
        let (next, energy, grad_norm) = match config.stepper {
            Stepper::Vp => vp_step(&y, x0, n, h, parts, &config.energy, noise, last)?,
            Stepper::EulerMaruyama => em_step(&y, x0, n, h, parts, &config.energy, noise, last)?,
        };
        next.ensure_finite(k + 1, "sampler state")?;
        trace.push(TraceRow { step: k + 1, n, energy, grad_norm });
        y = next;
    }
    Ok((y, trace))
}

/// Plain reverse sampler without any guidance code path, used to check that
/// disabling guidance changes nothing.
pub fn reference_unguided_sample(
    x0: &Sample,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreFn,
    ts_fraction: f64,
    steps: usize,
    stepper: Stepper,
    seed: u64,
) -> Result<Sample> {
    let mut rng = seeded(seed);
    let ts = ts_fraction * schedule.horizon();
    let h = ts / steps as f64;
    let mut y = initialize(x0, schedule, ts, &mut rng)?;
    for i in (1..=steps).rev() {
        let n = i as f64 * h;
        let beta = schedule.beta(n)?;
        let s = score.score(&y, n)?;
        let eta = if i > 1 { rng.standard_normal(y.dim()) } else { vec![0.0; y.dim()] };
        let vals: Vec<f64> = match stepper {
            Stepper::Vp => {
                let bh = beta * h;
                y.values()
                    .iter()
                    .zip(s.values())
                    .zip(&eta)
                    .map(|((yv, sv), e)| 1.0 / (1.0 - bh).sqrt() * (yv + bh * sv) + bh.sqrt() * e)
                    .collect()
            }
            Stepper::EulerMaruyama => y
                .values()
                .iter()
                .zip(s.values())
                .zip(&eta)
                .map(|((yv, sv), e)| yv - (-0.5 * beta * yv - beta * sv) * h + beta.sqrt() * h.sqrt() * e)
                .collect(),
        };
        y = y.with_values(vals)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::EncoderConfig;
    use crate::rng::{normal_vec, ZeroNoise};
    use crate::score::GaussianScore;

    fn unit_score(d: usize) -> GaussianScore {
        GaussianScore { mean: Sample::vector(vec![0.0; d]), var0: 1.0, schedule: DiffusionSchedule::default() }
    }

    /// Score returning exactly zero.
    struct ZeroScore(usize);

    impl ScoreFn for ZeroScore {
        fn dim(&self) -> usize {
            self.0
        }
        fn score(&self, y: &Sample, _t: f64) -> Result<Sample> {
            y.with_values(vec![0.0; y.dim()])
        }
    }

    /// One noiseless step from y = 1 at n = 0.01, h = 0.01 with score -y.
    fn scalar_case(step: fn(&Sample, &Sample, f64, f64, &Components<'_>, &EnergyConfig, &mut dyn NoiseSource, bool) -> Result<(Sample, f64, f64)>) -> f64 {
        let sch = DiffusionSchedule::default();
        let score = unit_score(1);
        let parts = Components { schedule: &sch, score: &score, guidance: None };
        let y = Sample::vector(vec![1.0]);
        let (out, _, _) = step(&y, &y, 0.01, 0.01, &parts, &EnergyConfig::unguided(), &mut ZeroNoise, true).unwrap();
        out.values()[0]
    }

    #[test]
    fn vp_and_em_scalar_formulae() {
        // the hand example with beta = 0.1, h = 0.01, score = -y
        let (b, h, y) = (0.1f64, 0.01f64, 1.0f64);
        let vp = (1.0 / (1.0 - b * h).sqrt()) * (y + b * h * (-y));
        let em = y - (-0.5 * b * y - b * (-y)) * h;
        assert!((vp - 0.99950).abs() < 1e-5);
        assert!((em - 0.99950).abs() < 1e-12);

        // same formulae through the steppers at n = 0.01
        let sch = DiffusionSchedule::default();
        let bn = sch.beta(0.01).unwrap();
        let want_vp = (1.0 / (1.0 - bn * 0.01).sqrt()) * (1.0 - bn * 0.01);
        let want_em = 1.0 - (-0.5 * bn + bn) * 0.01;
        assert!((scalar_case(vp_step) - want_vp).abs() < 1e-15);
        assert!((scalar_case(em_step) - want_em).abs() < 1e-15);
    }

    #[test]
    fn em_pure_drift_with_zero_score() {
        let sch = DiffusionSchedule::default();
        let score = ZeroScore(3);
        let parts = Components { schedule: &sch, score: &score, guidance: None };
        let y = Sample::vector(vec![0.5, -1.0, 2.0]);
        let (n, h) = (0.3, 0.002);
        let (out, _, _) = em_step(&y, &y, n, h, &parts, &EnergyConfig::unguided(), &mut ZeroNoise, false).unwrap();
        let k = 1.0 + 0.5 * sch.beta(n).unwrap() * h;
        for (a, b) in out.values().iter().zip(y.values()) {
            assert!((a - b * k).abs() < 1e-15);
        }
    }

    #[test]
    fn step_gap_is_second_order() {
        let sch = DiffusionSchedule::default();
        let score = unit_score(4);
        let parts = Components { schedule: &sch, score: &score, guidance: None };
        let mut rng = seeded(1);
        let mut ratios = Vec::new();
        for _ in 0..20 {
            let y = Sample::vector(normal_vec(&mut rng, 4));
            let gap = |h: f64| {
                let a = vp_step(&y, &y, 0.3, h, &parts, &EnergyConfig::unguided(), &mut ZeroNoise, true).unwrap().0;
                let b = em_step(&y, &y, 0.3, h, &parts, &EnergyConfig::unguided(), &mut ZeroNoise, true).unwrap().0;
                (a.mse(&b).unwrap()).sqrt()
            };
            ratios.push(gap(0.004) / gap(0.002));
        }
        for r in ratios {
            assert!(r > 3.0 && r < 5.0, "{r}");
        }
    }

    #[test]
    fn last_step_is_noise_free() {
        let sch = DiffusionSchedule::default();
        let score = unit_score(2);
        let parts = Components { schedule: &sch, score: &score, guidance: None };
        let y = Sample::vector(vec![0.3, 0.4]);
        let a = vp_step(&y, &y, 0.1, 0.01, &parts, &EnergyConfig::unguided(), &mut seeded(1), true).unwrap().0;
        let b = vp_step(&y, &y, 0.1, 0.01, &parts, &EnergyConfig::unguided(), &mut seeded(2), true).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_large_steps() {
        let sch = DiffusionSchedule::default();
        let cfg = SamplerConfig { steps: 1, ..SamplerConfig::default() };
        assert!(matches!(cfg.validate(&sch), Err(Error::Config(_))));
        let score = unit_score(1);
        let parts = Components { schedule: &sch, score: &score, guidance: None };
        let y = Sample::vector(vec![0.0]);
        let r = vp_step(&y, &y, 1.0, 0.06, &parts, &EnergyConfig::unguided(), &mut ZeroNoise, true);
        assert!(matches!(r, Err(Error::Config(_))));
        assert!(SamplerConfig { ts_fraction: 0.0, ..SamplerConfig::default() }.validate(&sch).is_err());
    }

    #[test]
    fn initialize_examples() {
        let sch = DiffusionSchedule::default();
        let z = Sample::vector(vec![0.0; 3]);
        assert_eq!(initialize(&z, &sch, 0.4, &mut ZeroNoise).unwrap(), z);
        let x0 = Sample::vector(vec![1.5]);
        let n = 10_000;
        let mut rng = seeded(4);
        let draws: Vec<f64> = (0..n).map(|_| initialize(&x0, &sch, 0.4, &mut rng).unwrap().values()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (a, s) = sch.kernel_coeffs(0.4).unwrap();
        assert!((mean - a * 1.5).abs() < 3.0 * s / (n as f64).sqrt());
        assert!((var.sqrt() - s).abs() < 3.0 * s / (2.0 * n as f64).sqrt());
        let a1 = initialize(&x0, &sch, 0.4, &mut seeded(9)).unwrap();
        let a2 = initialize(&x0, &sch, 0.4, &mut seeded(9)).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn single_step_run_and_time_bookkeeping() {
        let sch = DiffusionSchedule::default();
        let score = unit_score(2);
        let parts = Components { schedule: &sch, score: &score, guidance: None };
        let x0 = Sample::vector(vec![0.5, -0.5]);
        let cfg = SamplerConfig { steps: 1, ts_fraction: 0.05, energy: EnergyConfig::unguided(), ..SamplerConfig::default() };
        let (_, trace) = sample(&x0, &parts, &cfg).unwrap();
        assert_eq!(trace.len(), 1);
        assert!((trace[0].n - 0.05).abs() < 1e-15);

        let cfg = SamplerConfig { steps: 100, energy: EnergyConfig::unguided(), ..SamplerConfig::default() };
        let (_, trace) = sample(&x0, &parts, &cfg).unwrap();
        let h = cfg.step_size(&sch);
        assert!((trace[0].n - 0.4).abs() < 1e-12);
        assert!((trace.last().unwrap().n - h).abs() < 1e-12);
    }

    /// Counts requested vectors to audit the draw order.
    struct Counting {
        inner: crate::rng::SeededRng,
        calls: usize,
    }

    impl NoiseSource for Counting {
        fn standard_normal(&mut self, n: usize) -> Vec<f64> {
            self.calls += 1;
            self.inner.standard_normal(n)
        }
    }

    fn guided_setup() -> (FeatureEncoder, PromptPair) {
        let enc = FeatureEncoder::new(&EncoderConfig { dims: vec![4, 6, 6, 6, 6, 3], bias_std: 0.5, feature_scale: 2.0, seed: 1 }).unwrap();
        let p = PromptPair::random(&mut seeded(2), 3, 1.0);
        (enc, p)
    }

    #[test]
    fn noise_discipline() {
        let sch = DiffusionSchedule::default();
        let score = unit_score(4);
        let (enc, p) = guided_setup();
        let parts = Components { schedule: &sch, score: &score, guidance: Some((&enc, &p)) };
        let x0 = Sample::vector(vec![0.1, 0.2, -0.3, 0.4]);
        let n_steps = 50;
        for (energy, per_step) in [
            (EnergyConfig::unguided(), 1),
            (EnergyConfig::default(), 2),
            (EnergyConfig { perturb_reference: false, ..EnergyConfig::default() }, 1),
        ] {
            let cfg = SamplerConfig { steps: n_steps, energy: energy.clone(), ..SamplerConfig::default() };
            let mut c = Counting { inner: seeded(0), calls: 0 };
            sample_with_noise(&x0, &parts, &cfg, &mut c).unwrap();
            // init + per step draws, minus the missing eta of the final step
            let refs = if energy.is_guided() && energy.perturb_reference { n_steps } else { 0 };
            assert_eq!(c.calls, 1 + refs + (n_steps - 1), "{per_step}");
        }
    }

    #[test]
    fn unguided_matches_reference_sampler_bitwise() {
        let sch = DiffusionSchedule::default();
        let score = unit_score(4);
        let (enc, p) = guided_setup();
        let parts = Components { schedule: &sch, score: &score, guidance: Some((&enc, &p)) };
        let mut rng = seeded(3);
        for seed in 0..5 {
            let x0 = Sample::vector(normal_vec(&mut rng, 4));
            for stepper in [Stepper::Vp, Stepper::EulerMaruyama] {
                let cfg = SamplerConfig { seed, stepper, energy: EnergyConfig::unguided(), ..SamplerConfig::default() };
                let (a, _) = sample(&x0, &parts, &cfg).unwrap();
                let b = reference_unguided_sample(&x0, &sch, &score, 0.4, 100, stepper, seed).unwrap();
                let bits = |s: &Sample| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a), bits(&b));
            }
        }
    }

    #[test]
    fn seeded_runs_repeat_and_guidance_needs_components() {
        let sch = DiffusionSchedule::default();
        let score = unit_score(4);
        let (enc, p) = guided_setup();
        let parts = Components { schedule: &sch, score: &score, guidance: Some((&enc, &p)) };
        let x0 = Sample::vector(vec![0.1, 0.2, -0.3, 0.4]);
        let cfg = SamplerConfig { seed: 7, ..SamplerConfig::default() };
        let (a, ta) = sample(&x0, &parts, &cfg).unwrap();
        let (b, tb) = sample(&x0, &parts, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(ta.iter().all(|r| r.energy > 0.0 && r.grad_norm > 0.0));
        let bare = Components { schedule: &sch, score: &score, guidance: None };
        assert!(matches!(sample(&x0, &bare, &cfg), Err(Error::Config(_))));
    }
}
