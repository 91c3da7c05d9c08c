//! Dual-consistent energy: a domain term `s1` built from negative-prompt
//! probabilities and a content term `s2` built from layer-wise feature
//! distances, plus the exact gradient of their weighted sum.

use crate::error::{check_dim, Error, Result};
use crate::features::{norm, Domain, FeatureEncoder, PromptPair, Taps};
use crate::rng::NoiseSource;
use crate::sample::Sample;
use crate::sde::DiffusionSchedule;

/// How the two terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnergySign {
    /// `lambda1 s1 + lambda2 s2`; both terms are minimized.
    #[default]
    Plus,
    /// `lambda1 s1 - lambda2 s2`, kept for ablations only.
    Minus,
}

/// Per-layer distance used by `s2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Distance {
    /// Euclidean norm.
    #[default]
    Norm,
    /// Squared Euclidean norm.
    Squared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub layer_weights: Vec<f64>,
    /// Compare against `x_t ~ q(x_t | x0)` instead of `x0` itself.
    pub perturb_reference: bool,
    pub sign: EnergySign,
    pub distance: Distance,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            lambda1: 73.0,
            lambda2: 0.72,
            layer_weights: vec![0.5, 1.0, 1.0, 1.0, 1.0],
            perturb_reference: true,
            sign: EnergySign::Plus,
            distance: Distance::Norm,
        }
    }
}

impl EnergyConfig {
    pub fn unguided() -> Self {
        Self { lambda1: 0.0, lambda2: 0.0, ..Self::default() }
    }

    pub fn with_lambdas(mut self, lambda1: f64, lambda2: f64) -> Self {
        self.lambda1 = lambda1;
        self.lambda2 = lambda2;
        self
    }

    pub fn is_guided(&self) -> bool {
        self.lambda1 + self.lambda2 > 0.0
    }

    pub fn validate(&self, encoder: &FeatureEncoder) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "energy weights must be non-negative, got ({}, {})",
                self.lambda1, self.lambda2
            )));
        }
        if self.layer_weights.len() != encoder.num_layers() {
            return Err(Error::Config(format!(
                "{} layer weights for an encoder with {} layers",
                self.layer_weights.len(),
                encoder.num_layers()
            )));
        }
        Ok(())
    }

    fn s2_weight(&self) -> f64 {
        match self.sign {
            EnergySign::Plus => self.lambda2,
            EnergySign::Minus => -self.lambda2,
        }
    }
}

/// `z(x_ref, p_n) + z(y, p_n)`.
pub fn s1(y: &Sample, x_ref: &Sample, encoder: &FeatureEncoder, prompts: &PromptPair) -> Result<f64> {
    check_dim(y.dim(), x_ref.dim())?;
    Ok(prompts.probability(&encoder.embed(x_ref)?, Domain::Negative)?
        + prompts.probability(&encoder.embed(y)?, Domain::Negative)?)
}

/// `(1/m) sum_k lambda_k d(E^k(y), E^k(x_ref))`.
pub fn s2(y: &Sample, x_ref: &Sample, encoder: &FeatureEncoder, config: &EnergyConfig) -> Result<f64> {
    check_dim(y.dim(), x_ref.dim())?;
    config.validate(encoder)?;
    Ok(s2_from_taps(&encoder.taps(y)?, &encoder.taps(x_ref)?, config))
}

fn layer_distance(a: &[f64], b: &[f64], distance: Distance) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    match distance {
        Distance::Norm => sq.sqrt(),
        Distance::Squared => sq,
    }
}

fn s2_from_taps(ty: &Taps, tx: &Taps, config: &EnergyConfig) -> f64 {
    let m = ty.len() as f64;
    (0..ty.len())
        .map(|k| config.layer_weights[k] * layer_distance(ty.features(k), tx.features(k), config.distance))
        .sum::<f64>()
        / m
}

/// Energy value and gradient with respect to `y` at a fixed reference.
#[derive(Debug, Clone)]
pub struct EnergyEval {
    pub value: f64,
    pub gradient: Sample,
}

/// Value and exact `grad_y` of the configured energy against `x_ref`.
///
/// Terms with zero weight are skipped. Layers where `E^k(y) = E^k(x_ref)`
/// contribute a zero subgradient.
pub fn evaluate(
    y: &Sample,
    x_ref: &Sample,
    encoder: &FeatureEncoder,
    prompts: &PromptPair,
    config: &EnergyConfig,
) -> Result<EnergyEval> {
    check_dim(y.dim(), x_ref.dim())?;
    config.validate(encoder)?;
    let zero = || y.with_values(vec![0.0; y.dim()]);
    if !config.is_guided() {
        return Ok(EnergyEval { value: 0.0, gradient: zero()? });
    }
    let ty = encoder.taps(y)?;
    let tx = encoder.taps(x_ref)?;
    let layers = ty.len();
    let mut tap_grads: Vec<Option<Vec<f64>>> = vec![None; layers];
    let mut value = 0.0;

    if config.lambda1 > 0.0 {
        let ref_prob = prompts.probability(tx.embedding(), Domain::Negative)?;
        let (prob, g) = prompts.negative_probability_grad(ty.embedding())?;
        value += config.lambda1 * (ref_prob + prob);
        tap_grads[layers - 1] = Some(g.into_iter().map(|v| config.lambda1 * v).collect());
    }
    if config.lambda2 > 0.0 {
        let w2 = config.s2_weight();
        value += w2 * s2_from_taps(&ty, &tx, config);
        for (k, slot) in tap_grads.iter_mut().enumerate() {
            let (fy, fx) = (ty.features(k), tx.features(k));
            let diff: Vec<f64> = fy.iter().zip(fx).map(|(a, b)| a - b).collect();
            let coeff = w2 * config.layer_weights[k] / layers as f64;
            let g: Vec<f64> = match config.distance {
                Distance::Norm => {
                    let d = norm(&diff);
                    if d == 0.0 {
                        continue;
                    }
                    diff.iter().map(|v| coeff * v / d).collect()
                }
                Distance::Squared => diff.iter().map(|v| 2.0 * coeff * v).collect(),
            };
            match slot {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                None => *slot = Some(g),
            }
        }
    }
    let grad = encoder.backward(&ty, &tap_grads);
    Ok(EnergyEval { value, gradient: y.with_values(grad)? })
}

pub fn energy_gradient(
    y: &Sample,
    x_ref: &Sample,
    encoder: &FeatureEncoder,
    prompts: &PromptPair,
    config: &EnergyConfig,
) -> Result<Sample> {
    Ok(evaluate(y, x_ref, encoder, prompts, config)?.gradient)
}

/// Draws the reference for time `t` (one Monte Carlo sample), or returns `x0`
/// when the reference is not perturbed.
pub fn draw_reference(
    x0: &Sample,
    t: f64,
    schedule: &DiffusionSchedule,
    config: &EnergyConfig,
    noise: &mut dyn NoiseSource,
) -> Result<Sample> {
    if config.perturb_reference {
        let eps = x0.with_values(noise.standard_normal(x0.dim()))?;
        schedule.perturb(x0, t, &eps)
    } else {
        schedule.check_time(t)?;
        Ok(x0.clone())
    }
}

/// Single-sample estimate of the energy at time `t`. Returns the value and the
/// reference that was drawn so the gradient can reuse it.
#[allow(clippy::too_many_arguments)]
pub fn total_energy(
    y: &Sample,
    x0: &Sample,
    t: f64,
    schedule: &DiffusionSchedule,
    encoder: &FeatureEncoder,
    prompts: &PromptPair,
    config: &EnergyConfig,
    noise: &mut dyn NoiseSource,
) -> Result<(f64, Sample)> {
    let x_ref = draw_reference(x0, t, schedule, config, noise)?;
    let value = energy_value(y, &x_ref, encoder, prompts, config)?;
    Ok((value, x_ref))
}

/// Energy at a given reference, term by term.
pub fn energy_value(
    y: &Sample,
    x_ref: &Sample,
    encoder: &FeatureEncoder,
    prompts: &PromptPair,
    config: &EnergyConfig,
) -> Result<f64> {
    config.validate(encoder)?;
    let mut v = 0.0;
    if config.lambda1 > 0.0 {
        v += config.lambda1 * s1(y, x_ref, encoder, prompts)?;
    }
    if config.lambda2 > 0.0 {
        v += config.s2_weight() * s2(y, x_ref, encoder, config)?;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::EncoderConfig;
    use crate::nn::{Activation, Mlp};
    use crate::rng::{normal_vec, seeded, SeededRng};
    use rand::Rng;

    fn encoder() -> FeatureEncoder {
        let cfg = EncoderConfig { dims: vec![6, 8, 8, 7, 5, 4], bias_std: 0.5, feature_scale: 4.0, seed: 3 };
        FeatureEncoder::new(&cfg).unwrap()
    }

    fn random_sample(rng: &mut SeededRng, d: usize) -> Sample {
        Sample::vector(normal_vec(rng, d).into_iter().map(|v| 0.5 * v).collect())
    }

    fn prompts(rng: &mut SeededRng) -> PromptPair {
        PromptPair::random(rng, 4, 1.0)
    }

    #[test]
    fn s1_bounds_and_symmetric_case() {
        let enc = encoder();
        let mut rng = seeded(1);
        let p = prompts(&mut rng);
        for _ in 0..200 {
            let v = s1(&random_sample(&mut rng, 6), &random_sample(&mut rng, 6), &enc, &p).unwrap();
            assert!((0.0..=2.0).contains(&v));
        }
        // equal prompts put every embedding at equal similarity
        let same = PromptPair { positive: p.positive.clone(), negative: p.positive.clone() };
        let v = s1(&random_sample(&mut rng, 6), &random_sample(&mut rng, 6), &enc, &same).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn s2_examples() {
        let enc = encoder();
        let cfg = EnergyConfig::default();
        let mut rng = seeded(2);
        let a = random_sample(&mut rng, 6);
        let b = random_sample(&mut rng, 6);
        assert_eq!(s2(&a, &a, &enc, &cfg).unwrap(), 0.0);
        assert!((s2(&a, &b, &enc, &cfg).unwrap() - s2(&b, &a, &enc, &cfg).unwrap()).abs() < 1e-15);
        assert!(s2(&a, &b, &enc, &cfg).unwrap() > 0.0);

        // single identity layer scaled by 4, inputs chosen so the features are (1,2) and (1,0)
        let net = Mlp::from_parts(&[2, 2], &[Activation::Tanh], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let id = FeatureEncoder::from_layers(net, 4.0, 0).unwrap();
        let one = EnergyConfig { layer_weights: vec![1.0], ..EnergyConfig::default() };
        let y = Sample::vector(vec![0.25f64.atanh(), 0.5f64.atanh()]);
        let x = Sample::vector(vec![0.25f64.atanh(), 0.0]);
        assert!((s2(&y, &x, &id, &one).unwrap() - 2.0).abs() < 1e-12);

        let bad = EnergyConfig { layer_weights: vec![1.0; 3], ..EnergyConfig::default() };
        assert!(matches!(s2(&a, &b, &enc, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_give_zero() {
        let enc = encoder();
        let mut rng = seeded(3);
        let p = prompts(&mut rng);
        let (y, x) = (random_sample(&mut rng, 6), random_sample(&mut rng, 6));
        let cfg = EnergyConfig::unguided();
        let e = evaluate(&y, &x, &enc, &p, &cfg).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.gradient.values().iter().all(|v| *v == 0.0));
        let only1 = EnergyConfig::default().with_lambdas(73.0, 0.0);
        let v = energy_value(&y, &x, &enc, &p, &only1).unwrap();
        assert_eq!(v, 73.0 * s1(&y, &x, &enc, &p).unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let enc = encoder();
        let mut rng = seeded(4);
        let h = 1e-4;
        for case in 0..50 {
            let p = prompts(&mut rng);
            let distance = if case % 5 == 4 { Distance::Squared } else { Distance::Norm };
            let cfg = EnergyConfig { distance, ..EnergyConfig::default() };
            let y = random_sample(&mut rng, 6);
            let x = random_sample(&mut rng, 6);
            let g = energy_gradient(&y, &x, &enc, &p, &cfg).unwrap();
            let gnorm = g.norm();
            for i in 0..6 {
                let mut a = y.clone();
                a.values_mut()[i] += h;
                let mut b = y.clone();
                b.values_mut()[i] -= h;
                let fd = (energy_value(&a, &x, &enc, &p, &cfg).unwrap() - energy_value(&b, &x, &enc, &p, &cfg).unwrap())
                    / (2.0 * h);
                let err = (fd - g.values()[i]).abs() / gnorm.max(1e-8);
                assert!(err < 1e-4, "case {case} coord {i}: fd {fd} vs {}", g.values()[i]);
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_weights() {
        let enc = encoder();
        let mut rng = seeded(5);
        let p = prompts(&mut rng);
        let (y, x) = (random_sample(&mut rng, 6), random_sample(&mut rng, 6));
        let both = EnergyConfig::default();
        let g = energy_gradient(&y, &x, &enc, &p, &both).unwrap();
        let g1 = energy_gradient(&y, &x, &enc, &p, &both.clone().with_lambdas(1.0, 0.0)).unwrap();
        let g2 = energy_gradient(&y, &x, &enc, &p, &both.clone().with_lambdas(0.0, 1.0)).unwrap();
        for i in 0..6 {
            let want = 73.0 * g1.values()[i] + 0.72 * g2.values()[i];
            assert!((g.values()[i] - want).abs() < 1e-10);
        }
        let v = energy_value(&y, &x, &enc, &p, &both).unwrap();
        let v1 = energy_value(&y, &x, &enc, &p, &both.clone().with_lambdas(1.0, 0.0)).unwrap();
        let v2 = energy_value(&y, &x, &enc, &p, &both.clone().with_lambdas(0.0, 1.0)).unwrap();
        assert!((v - 73.0 * v1 - 0.72 * v2).abs() < 1e-10);
    }

    #[test]
    fn subgradient_at_reference_is_zero() {
        let enc = encoder();
        let mut rng = seeded(6);
        let p = prompts(&mut rng);
        let y = random_sample(&mut rng, 6);
        let cfg = EnergyConfig::default().with_lambdas(0.0, 0.72);
        let g = energy_gradient(&y, &y, &enc, &p, &cfg).unwrap();
        assert!(g.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_step_descends_s2() {
        let enc = encoder();
        let mut rng = seeded(7);
        let p = prompts(&mut rng);
        let cfg = EnergyConfig::default().with_lambdas(0.0, 1.0);
        for _ in 0..100 {
            let (y, x) = (random_sample(&mut rng, 6), random_sample(&mut rng, 6));
            let g = energy_gradient(&y, &x, &enc, &p, &cfg).unwrap();
            let eta = 1e-4 / g.norm().max(1e-12);
            let stepped = y.with_values(y.values().iter().zip(g.values()).map(|(a, b)| a - eta * b).collect()).unwrap();
            assert!(s2(&stepped, &x, &enc, &cfg).unwrap() < s2(&y, &x, &enc, &cfg).unwrap());
        }
    }

    #[test]
    fn total_energy_recomposes_and_respects_reference_switch() {
        let enc = encoder();
        let sch = DiffusionSchedule::default();
        let mut rng = seeded(8);
        let p = prompts(&mut rng);
        let (y, x0) = (random_sample(&mut rng, 6), random_sample(&mut rng, 6));
        let cfg = EnergyConfig::default();
        let mut noise = seeded(100);
        let (v, xt) = total_energy(&y, &x0, 0.3, &sch, &enc, &p, &cfg, &mut noise).unwrap();
        let want = 73.0 * s1(&y, &xt, &enc, &p).unwrap() + 0.72 * s2(&y, &xt, &enc, &cfg).unwrap();
        assert!((v - want).abs() < 1e-12);
        assert_ne!(xt, x0);

        let raw = EnergyConfig { perturb_reference: false, ..EnergyConfig::default() };
        let t = rng.random::<f64>();
        let (a, ra) = total_energy(&y, &x0, t, &sch, &enc, &p, &raw, &mut noise).unwrap();
        let (b, rb) = total_energy(&y, &x0, 0.0, &sch, &enc, &p, &raw, &mut noise).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, x0);
        assert_eq!(rb, x0);
    }

    #[test]
    fn minus_sign_flips_content_term() {
        let enc = encoder();
        let mut rng = seeded(9);
        let p = prompts(&mut rng);
        let (y, x) = (random_sample(&mut rng, 6), random_sample(&mut rng, 6));
        let plus = EnergyConfig::default().with_lambdas(0.0, 1.0);
        let minus = EnergyConfig { sign: EnergySign::Minus, ..plus.clone() };
        let a = evaluate(&y, &x, &enc, &p, &plus).unwrap();
        let b = evaluate(&y, &x, &enc, &p, &minus).unwrap();
        assert_eq!(a.value, -b.value);
        for (u, v) in a.gradient.values().iter().zip(b.gradient.values()) {
            assert_eq!(*u, -v);
        }
    }
}
