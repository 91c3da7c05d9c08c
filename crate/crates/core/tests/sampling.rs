//! Statistical sampler properties with trained components.

use std::sync::OnceLock;

use energy_derain::energy::EnergyConfig;
use energy_derain::features::{train_prompts, FeatureEncoder, PromptConfig, PromptPair};
use energy_derain::pipeline::derain_batch;
use energy_derain::report::median;
use energy_derain::sampler::{Components, SamplerConfig, Stepper};
use energy_derain::score::{train_dsm, ScoreNetwork, TrainConfig};
use energy_derain::toyworld::{standard_encoder, DomainSpec, World};
use energy_derain::{DiffusionSchedule, Sample};

struct Setup {
    schedule: DiffusionSchedule,
    net: ScoreNetwork,
    encoder: FeatureEncoder,
    prompts: PromptPair,
    inputs: Vec<Sample>,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let spec = DomainSpec::default();
        let train = World::generate(&spec, 2000, 31).unwrap();
        let test = World::generate(&spec, 100, 32).unwrap();
        let schedule = DiffusionSchedule::default();
        let net = train_dsm(&train.clean, &schedule, &TrainConfig { seed: 3, ..TrainConfig::default() }).unwrap().network;
        let encoder = standard_encoder(&spec, 1).unwrap();
        let prompts = train_prompts(&encoder, &train.rainy, &train.clean, &PromptConfig::default()).unwrap().prompts;
        Setup { schedule, net, encoder, prompts, inputs: test.rainy }
    })
}

#[test]
fn energy_falls_over_the_trace() {
    let s = setup();
    let parts = Components { schedule: &s.schedule, score: &s.net, guidance: Some((&s.encoder, &s.prompts)) };
    let out = derain_batch(&s.inputs, &parts, &SamplerConfig { seed: 5, ..Default::default() }).unwrap();
    let (mut first, mut last) = (Vec::new(), Vec::new());
    for (_, trace) in &out {
        let q = trace.len() / 4;
        first.extend(trace[..q].iter().map(|r| r.energy));
        last.extend(trace[trace.len() - q..].iter().map(|r| r.energy));
    }
    let (a, b) = (median(&first), median(&last));
    assert!(b < a, "first quartile median {a}, last quartile median {b}");
}

#[test]
fn steppers_agree_without_guidance() {
    let s = setup();
    let parts = Components { schedule: &s.schedule, score: &s.net, guidance: None };
    let inputs = &s.inputs[..20];
    let gap = |steps: usize| {
        let c = SamplerConfig { steps, seed: 8, energy: EnergyConfig::unguided(), ..Default::default() };
        let vp = derain_batch(inputs, &parts, &c).unwrap();
        let em = derain_batch(inputs, &parts, &SamplerConfig { stepper: Stepper::EulerMaruyama, ..c }).unwrap();
        (vp.iter().zip(&em).map(|(a, b)| a.0.mse(&b.0).unwrap()).sum::<f64>() / inputs.len() as f64).sqrt()
    };
    let (g100, g200, g400) = (gap(100), gap(200), gap(400));
    assert!(g100 < 0.01, "{g100}");
    assert!(g200 < g100 && g400 < g200, "{g100} {g200} {g400}");
}
