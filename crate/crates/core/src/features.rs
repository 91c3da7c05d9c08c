//! Frozen multi-layer feature encoder, learnable domain prompts and the
//! cosine-softmax domain probability.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::nn::{orthogonal, Activation, Adam, ForwardTrace, Mlp};
use crate::rng::{normal_vec, seeded};
use crate::sample::{check_collection, Sample};

pub const EMBED_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Layer widths including the input, e.g. `[256, 64, 64, 64, 64, 32]`.
    pub dims: Vec<usize>,
    pub bias_std: f64,
    /// Multiplier applied to every tap output.
    pub feature_scale: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn for_input(dim: usize, seed: u64) -> Self {
        Self { dims: vec![dim, 64, 64, 64, 64, EMBED_DIM], bias_std: 0.5, feature_scale: 32.0, seed }
    }
}

/// Objective used to fit the projection head once on an auxiliary corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for HeadFitConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 64, learning_rate: 1e-2, temperature: 5.0, seed: 0 }
    }
}

/// Stack of `tanh` layers whose post-activation outputs are the feature taps.
///
/// The encoder is immutable once built; every method takes `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder {
    net: Mlp,
    scale: f64,
    seed: u64,
}

impl FeatureEncoder {
    /// Random orthogonal weights and Gaussian biases drawn from `config.seed`.
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        if config.dims.len() < 2 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if !(config.feature_scale > 0.0) || !(config.bias_std >= 0.0) {
            return Err(Error::Config("feature scale must be positive and bias std non-negative".into()));
        }
        let acts = vec![Activation::Tanh; config.dims.len() - 1];
        let mut net = Mlp::zeros(&config.dims, &acts);
        let mut rng = seeded(config.seed);
        for k in 0..acts.len() {
            let (i, o) = (config.dims[k], config.dims[k + 1]);
            net.set_layer_weights(k, &orthogonal(&mut rng, o, i, 1.0));
            let b: Vec<f64> = normal_vec(&mut rng, o).into_iter().map(|z| z * config.bias_std).collect();
            net.set_layer_bias(k, &b);
        }
        let enc = Self { net, scale: config.feature_scale, seed: config.seed };
        enc.check_nonzero_embedding()?;
        Ok(enc)
    }

    /// Encoder with explicit `tanh` layers, for loading and test configurations.
    pub fn from_layers(net: Mlp, feature_scale: f64, seed: u64) -> Result<Self> {
        if net.activations().iter().any(|a| *a != Activation::Tanh) {
            return Err(Error::Config("encoder layers must use tanh".into()));
        }
        Ok(Self { net, scale: feature_scale, seed })
    }

    /// Replaces the last layer by one fitted to separate `rainy` from `clean`
    /// along a fixed random direction of the embedding space.
    ///
    /// Meant to run once on data disjoint from anything used later; the
    /// returned encoder is frozen like any other.
    pub fn with_fitted_head(self, rainy: &[Sample], clean: &[Sample], config: &HeadFitConfig) -> Result<Self> {
        if rainy.is_empty() || clean.is_empty() {
            return Err(Error::EmptyData("head fitting corpus"));
        }
        check_collection(rainy, self.input_dim())?;
        check_collection(clean, self.input_dim())?;
        let last = self.net.layers().len() - 1;
        let spec = self.net.layers()[last];
        // inputs to the head are fixed, compute them once
        let trunk = |v: &Sample| {
            let tr = self.net.forward(v.values());
            if last == 0 {
                tr.input
            } else {
                tr.post[last - 1].clone()
            }
        };
        let inputs: Vec<(Vec<f64>, usize)> = rainy
            .iter()
            .map(|v| (trunk(v), 0))
            .chain(clean.iter().map(|v| (trunk(v), 1)))
            .collect();

        let mut rng = seeded(config.seed);
        let mut u = normal_vec(&mut rng, spec.outputs);
        let un = norm(&u);
        u.iter_mut().for_each(|x| *x /= un);
        let anchors = [u.iter().map(|x| -x).collect::<Vec<_>>(), u];

        let mut params = self.net.params()[spec.param_range()].to_vec();
        let br = spec.bias_range().start - spec.offset..spec.param_range().len();
        params[br].iter_mut().for_each(|b| *b = 0.0);
        let mut head = Mlp::from_parts(&[spec.inputs, spec.outputs], &[Activation::Tanh], params)
            .expect("head layout matches");
        let mut opt = Adam::new(head.params().len(), config.learning_rate, 0.9, 0.999);
        let tau = config.temperature;
        for step in 0..config.steps {
            let mut grad = vec![0.0; head.params().len()];
            let mut loss = 0.0;
            for _ in 0..config.batch_size {
                let (x, label) = &inputs[rng.random_range(0..inputs.len())];
                let tr = head.forward(x);
                let e = tr.output();
                let c = [cosine(e, &anchors[0])?, cosine(e, &anchors[1])?];
                let m = c[0].max(c[1]) * tau;
                let z = [(tau * c[0] - m).exp(), (tau * c[1] - m).exp()];
                let p = [z[0] / (z[0] + z[1]), z[1] / (z[0] + z[1])];
                loss -= p[*label].ln() / config.batch_size as f64;
                let mut ge = vec![0.0; e.len()];
                for j in 0..2 {
                    let dl = (p[j] - if j == *label { 1.0 } else { 0.0 }) * tau / config.batch_size as f64;
                    for (g, d) in ge.iter_mut().zip(cosine_grad(e, &anchors[j])) {
                        *g += dl * d;
                    }
                }
                head.backward(&tr, &[Some(&ge)], Some(&mut grad));
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite { step, what: format!("head fitting loss {loss}") });
            }
            opt.step(head.params_mut(), &grad);
        }
        let mut net = self.net;
        let r = spec.param_range();
        net.params_mut()[r].copy_from_slice(head.params());
        let enc = Self { net, ..self };
        enc.check_nonzero_embedding()?;
        Ok(enc)
    }

    fn check_nonzero_embedding(&self) -> Result<()> {
        let d = self.input_dim();
        for probe in [0.0, -1.0, 1.0] {
            let e = self.net.eval(&vec![probe; d]);
            if norm(&e) == 0.0 {
                return Err(Error::Degenerate(format!("embedding of the constant {probe} image is zero")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Number of feature taps.
    pub fn num_layers(&self) -> usize {
        self.net.layers().len()
    }

    pub fn feature_scale(&self) -> f64 {
        self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    /// Final-layer features.
    pub fn embed(&self, v: &Sample) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), v.dim())?;
        Ok(self.net.eval(v.values()).into_iter().map(|x| self.scale * x).collect())
    }

    /// Features of layer `k`, counted from 1.
    pub fn layer_features(&self, v: &Sample, k: usize) -> Result<Vec<f64>> {
        if k == 0 || k > self.num_layers() {
            return Err(Error::Config(format!("layer index {k} outside 1..={}", self.num_layers())));
        }
        let taps = self.taps(v)?;
        Ok(taps.features(k - 1).to_vec())
    }

    /// Forward pass keeping every tap for later differentiation.
    pub fn taps(&self, v: &Sample) -> Result<Taps> {
        check_dim(self.input_dim(), v.dim())?;
        let trace = self.net.forward(v.values());
        let features = trace.post.iter().map(|p| p.iter().map(|x| self.scale * x).collect()).collect();
        Ok(Taps { trace, features })
    }

    /// Gradient with respect to the input given gradients on the (scaled) taps.
    pub fn backward(&self, taps: &Taps, tap_grads: &[Option<Vec<f64>>]) -> Vec<f64> {
        let scaled: Vec<Option<Vec<f64>>> = tap_grads
            .iter()
            .map(|g| g.as_ref().map(|g| g.iter().map(|x| self.scale * x).collect()))
            .collect();
        let refs: Vec<Option<&[f64]>> = scaled.iter().map(|g| g.as_deref()).collect();
        self.net.backward(&taps.trace, &refs, None)
    }
}

/// Forward state of one encoder pass.
#[derive(Debug, Clone)]
pub struct Taps {
    trace: ForwardTrace,
    features: Vec<Vec<f64>>,
}

impl Taps {
    /// Features of tap `k`, counted from 0.
    pub fn features(&self, k: usize) -> &[f64] {
        &self.features[k]
    }

    pub fn embedding(&self) -> &[f64] {
        self.features.last().expect("encoder has layers")
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

/// `d cos(a, b) / d a`; callers guarantee both are non-zero.
pub(crate) fn cosine_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (na, nb) = (norm(a), norm(b));
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    a.iter().zip(b).map(|(x, y)| y / (na * nb) - c * x / (na * na)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Clean images, `p_p`.
    Positive,
    /// Rainy images, `p_n`.
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl PromptPair {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, std: f64) -> Self {
        let positive = normal_vec(rng, dim).into_iter().map(|z| z * std).collect();
        let negative = normal_vec(rng, dim).into_iter().map(|z| z * std).collect();
        Self { positive, negative }
    }

    pub fn swapped(&self) -> Self {
        Self { positive: self.negative.clone(), negative: self.positive.clone() }
    }

    pub fn dim(&self) -> usize {
        self.positive.len()
    }

    pub fn is_finite(&self) -> bool {
        self.positive.iter().chain(&self.negative).all(|v| v.is_finite())
    }

    /// `softmax` over the cosine similarities of `embedding` to both prompts.
    pub fn probability(&self, embedding: &[f64], which: Domain) -> Result<f64> {
        let cp = cosine(embedding, &self.positive)?;
        let cn = cosine(embedding, &self.negative)?;
        let (mine, other) = match which {
            Domain::Positive => (cp, cn),
            Domain::Negative => (cn, cp),
        };
        Ok(1.0 / (1.0 + (other - mine).exp()))
    }

    /// Negative-prompt probability and its gradient with respect to the embedding.
    pub fn negative_probability_grad(&self, embedding: &[f64]) -> Result<(f64, Vec<f64>)> {
        let zn = self.probability(embedding, Domain::Negative)?;
        let gn = cosine_grad(embedding, &self.negative);
        let gp = cosine_grad(embedding, &self.positive);
        let k = zn * (1.0 - zn);
        Ok((zn, gn.iter().zip(&gp).map(|(a, b)| k * (a - b)).collect()))
    }

    /// Predicts clean iff the positive probability is strictly above one half.
    pub fn is_clean(&self, embedding: &[f64]) -> Result<bool> {
        Ok(self.probability(embedding, Domain::Positive)? > 0.5)
    }
}

pub fn clip_probability(encoder: &FeatureEncoder, v: &Sample, prompts: &PromptPair, which: Domain) -> Result<f64> {
    prompts.probability(&encoder.embed(v)?, which)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub init_std: f64,
    /// Fraction of each domain held out to measure accuracy.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            learning_rate: 5e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            init_std: 0.02,
            holdout: 0.1,
            seed: 0,
        }
    }
}

/// Labelled embedding, `label = 1` for clean.
#[derive(Debug, Clone)]
pub struct Labelled {
    pub embedding: Vec<f64>,
    pub label: u8,
}

/// Mean binary cross-entropy over `batch` and its gradient with respect to
/// `(positive, negative)`.
pub fn bce_loss_and_grad(prompts: &PromptPair, batch: &[Labelled]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let d = prompts.dim();
    let mut gp = vec![0.0; d];
    let mut gn = vec![0.0; d];
    let mut loss = 0.0;
    let w = 1.0 / batch.len().max(1) as f64;
    for item in batch {
        let e = &item.embedding;
        let cp = cosine(e, &prompts.positive)?;
        let cn = cosine(e, &prompts.negative)?;
        let diff = cp - cn;
        let z = f64::from(item.label);
        // log sigmoid(x) = -softplus(-x)
        let log_p = -softplus(-diff);
        let log_q = -softplus(diff);
        loss -= w * (z * log_p + (1.0 - z) * log_q);
        let zhat = 1.0 / (1.0 + (-diff).exp());
        let k = w * (zhat - z);
        for (g, v) in gp.iter_mut().zip(cosine_grad(&prompts.positive, e)) {
            *g += k * v;
        }
        for (g, v) in gn.iter_mut().zip(cosine_grad(&prompts.negative, e)) {
            *g -= k * v;
        }
    }
    Ok((loss, gp, gn))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
pub struct PromptOutcome {
    pub prompts: PromptPair,
    pub initial: PromptPair,
    pub losses: Vec<f64>,
    pub heldout_accuracy: f64,
    pub heldout: Vec<Labelled>,
}

/// Fraction of `items` whose predicted domain matches the label.
pub fn accuracy(prompts: &PromptPair, items: &[Labelled]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyData("accuracy set"));
    }
    let mut hits = 0usize;
    for it in items {
        if prompts.is_clean(&it.embedding)? == (it.label == 1) {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

pub fn label_embeddings(encoder: &FeatureEncoder, rainy: &[Sample], clean: &[Sample]) -> Result<Vec<Labelled>> {
    let mut out = Vec::with_capacity(rainy.len() + clean.len());
    for v in rainy {
        out.push(Labelled { embedding: encoder.embed(v)?, label: 0 });
    }
    for v in clean {
        out.push(Labelled { embedding: encoder.embed(v)?, label: 1 });
    }
    Ok(out)
}

/// Fits the prompt pair with binary cross-entropy on mixed batches.
pub fn train_prompts(
    encoder: &FeatureEncoder,
    rainy: &[Sample],
    clean: &[Sample],
    config: &PromptConfig,
) -> Result<PromptOutcome> {
    if rainy.is_empty() {
        return Err(Error::EmptyData("rainy set"));
    }
    if clean.is_empty() {
        return Err(Error::EmptyData("clean set"));
    }
    if config.iterations == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config("prompt training needs positive iterations, batch and learning rate".into()));
    }
    if !(0.0..1.0).contains(&config.holdout) {
        return Err(Error::Config(format!("holdout fraction {} outside [0, 1)", config.holdout)));
    }
    let mut rng = seeded(config.seed);
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (set, label) in [(rainy, 0u8), (clean, 1u8)] {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut rng);
        let n_hold = (config.holdout * set.len() as f64).round() as usize;
        let n_hold = n_hold.min(set.len() - 1);
        for (j, &i) in idx.iter().enumerate() {
            let item = Labelled { embedding: encoder.embed(&set[i])?, label };
            if j < n_hold {
                heldout.push(item);
            } else {
                train.push(item);
            }
        }
    }

    let initial = PromptPair::random(&mut rng, encoder.embed_dim(), config.init_std);
    let mut prompts = initial.clone();
    let d = prompts.dim();
    let mut opt = Adam::new(2 * d, config.learning_rate, config.adam_beta1, config.adam_beta2);
    let mut params: Vec<f64> = prompts.positive.iter().chain(&prompts.negative).copied().collect();
    let mut losses = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        let batch: Vec<Labelled> =
            (0..config.batch_size).map(|_| train[rng.random_range(0..train.len())].clone()).collect();
        let (loss, gp, gn) = bce_loss_and_grad(&prompts, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, what: format!("prompt loss {loss}") });
        }
        let grad: Vec<f64> = gp.into_iter().chain(gn).collect();
        opt.step(&mut params, &grad);
        prompts.positive.copy_from_slice(&params[..d]);
        prompts.negative.copy_from_slice(&params[d..]);
        losses.push(loss);
    }
    let heldout_accuracy = if heldout.is_empty() { accuracy(&prompts, &train)? } else { accuracy(&prompts, &heldout)? };
    Ok(PromptOutcome { prompts, initial, losses, heldout_accuracy, heldout })
}
