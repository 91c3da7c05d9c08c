use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use energy_derain::checkpoint::{
    prompts_from_checkpoint, prompts_to_checkpoint, score_from_checkpoint, score_to_checkpoint, Checkpoint,
};
use energy_derain::energy::{Distance, EnergyConfig, EnergySign};
use energy_derain::features::{train_prompts, FeatureEncoder, PromptConfig, PromptPair};
use energy_derain::pipeline::{default_grid, derain_batch, evaluate, parse_grid, run_ablation, Sweep};
use energy_derain::report::AblationReport;
use energy_derain::rng::mix_seed;
use energy_derain::sampler::{Components, SamplerConfig, Stepper};
use energy_derain::score::{train_dsm, ScoreFn, ScoreNetwork, TrainConfig};
use energy_derain::toyworld::{
    corrupt, load_images, load_pgm, load_points, make_clean, save_pgm, save_points, standard_encoder, DomainKind,
    DomainSpec,
};
use energy_derain::{Error, Sample};

#[derive(Parser)]
#[command(name = "edm", version, about = "Energy-guided diffusion deraining on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate clean and rainy splits plus the hidden pairing.
    GenData(GenData),
    /// Train the clean-domain score network.
    TrainScore(TrainScore),
    /// Fit the domain prompts on rainy and clean images.
    TrainPrompts(TrainPrompts),
    /// Derain every image of a directory.
    Derain(Derain),
    /// Score predictions against ground truth.
    Eval(Eval),
    /// Derain and evaluate over a parameter grid.
    Ablate(Ablate),
}

#[derive(clap::Args)]
struct GenData {
    #[arg(long, default_value = "streak_images")]
    kind: DomainKind,
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    streaks: usize,
    #[arg(long, default_value_t = 0.8)]
    delta: f64,
}

#[derive(clap::Args)]
struct TrainScore {
    /// Directory of clean images, or of a `points.tsv` file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainPrompts {
    #[arg(long)]
    rainy: PathBuf,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long, default_value_t = 0)]
    encoder_seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 5e-6)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum StepperArg {
    Vp,
    Em,
}

#[derive(clap::Args, Clone)]
struct SamplerArgs {
    #[arg(long, default_value_t = 73.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.72)]
    lambda2: f64,
    /// Start time as a fraction of the horizon.
    #[arg(long, default_value_t = 0.4)]
    ts: f64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, value_enum, default_value = "vp")]
    stepper: StepperArg,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    perturb_ref: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Subtract the content term instead of adding it.
    #[arg(long, hide = true)]
    minus_sign: bool,
    /// Use squared feature distances in the content term.
    #[arg(long, hide = true)]
    squared_distance: bool,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            ts_fraction: self.ts,
            steps: self.steps,
            seed: self.seed,
            stepper: match self.stepper {
                StepperArg::Vp => Stepper::Vp,
                StepperArg::Em => Stepper::EulerMaruyama,
            },
            energy: EnergyConfig {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                perturb_reference: self.perturb_ref,
                sign: if self.minus_sign { EnergySign::Minus } else { EnergySign::Plus },
                distance: if self.squared_distance { Distance::Squared } else { Distance::Norm },
                ..EnergyConfig::default()
            },
        }
    }

    fn echo(&self, e: &mut Echo) {
        e.put("lambda1", self.lambda1);
        e.put("lambda2", self.lambda2);
        e.put("ts", self.ts);
        e.put("steps", self.steps);
        e.put("stepper", match self.stepper {
            StepperArg::Vp => "vp",
            StepperArg::Em => "em",
        });
        e.put("perturb_ref", self.perturb_ref);
        e.put("seed", self.seed);
        e.put("sign", if self.minus_sign { "minus" } else { "plus" });
        e.put("distance", if self.squared_distance { "squared" } else { "norm" });
    }
}

#[derive(clap::Args)]
struct Derain {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    score: PathBuf,
    /// Encoder and prompts; required unless both lambdas are zero.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Directory for per-image trace files.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(clap::Args)]
struct Eval {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(clap::Args)]
struct Ablate {
    #[arg(long)]
    sweep: Sweep,
    /// Comma-separated grid; `l1:l2` pairs, start fractions, or `x0`/`xt`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    report: PathBuf,
    /// Rainy input directory.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    score: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    /// Use only the first N inputs (by file name).
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    sampler: SamplerArgs,
}

/// Resolved flags of one run.
#[derive(Default)]
struct Echo(BTreeMap<String, String>);

impl Echo {
    fn new(command: &str) -> Self {
        let mut e = Echo::default();
        e.put("command", command);
        e.put("version", env!("CARGO_PKG_VERSION"));
        e
    }

    fn put(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    fn path(&mut self, key: &str, value: &Path) {
        self.put(key, value.display());
    }

    fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(&self.0)?)
    }

    fn write_beside(&self, file: &Path) -> Result<()> {
        let path = PathBuf::from(format!("{}.toml", file.display()));
        fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::TrainScore(a) => train_score(a),
        Command::TrainPrompts(a) => train_prompts_cmd(a),
        Command::Derain(a) => derain(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let spec = DomainSpec { kind: a.kind, image_size: a.size, streaks: a.streaks, delta: a.delta, ..DomainSpec::default() };
    let base = mix_seed(a.seed);
    let clean = make_clean(&spec, a.n, base ^ 1)?;
    let corrupted = corrupt(&clean, &spec, base ^ 3)?;
    let (clean_dir, rainy_dir) = (a.out.join("clean"), a.out.join("rainy"));
    for d in [&clean_dir, &rainy_dir] {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }

    let mut echo = Echo::new("gen-data");
    echo.put("kind", a.kind);
    echo.path("out", &a.out);
    echo.put("n", a.n);
    echo.put("size", a.size);
    echo.put("seed", a.seed);
    echo.put("streaks", a.streaks);
    echo.put("delta", a.delta);
    let mut pairs: String = echo.0.iter().map(|(k, v)| format!("# {k} = {v}\n")).collect();

    let width = (a.n.max(2) - 1).to_string().len().max(5);
    match a.kind {
        DomainKind::Gaussian2d => {
            save_points(&clean, &clean_dir.join("points.tsv"))?;
            save_points(&corrupted.rainy, &rainy_dir.join("points.tsv"))?;
            pairs.push_str("# rainy_row\tclean_row\n");
            for i in 0..a.n {
                let j = corrupted.pairing.clean_index(i).expect("pairing covers every row");
                pairs.push_str(&format!("{i}\t{j}\n"));
            }
        }
        DomainKind::StreakImages => {
            let name = |prefix: &str, i: usize| format!("{prefix}_{i:0width$}.pgm");
            pairs.push_str("# rainy_file\tclean_file\n");
            for (i, s) in clean.iter().enumerate() {
                save_pgm(s, &clean_dir.join(name("clean", i)))?;
            }
            for (i, s) in corrupted.rainy.iter().enumerate() {
                save_pgm(s, &rainy_dir.join(name("rainy", i)))?;
                let j = corrupted.pairing.clean_index(i).expect("pairing covers every image");
                pairs.push_str(&format!("{}\t{}\n", name("rainy", i), name("clean", j)));
            }
        }
    }
    fs::write(a.out.join("pairs.tsv"), pairs)?;
    println!("wrote {} clean and {} rainy samples to {}", a.n, a.n, a.out.display());
    Ok(())
}

fn load_collection(dir: &Path) -> Result<Vec<Sample>> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    let points = dir.join("points.tsv");
    let samples = if points.is_file() {
        load_points(&points)?
    } else {
        load_images(dir, None)?.into_iter().map(|(_, s)| s).collect()
    };
    if samples.is_empty() {
        bail!("no samples found in {}", dir.display());
    }
    Ok(samples)
}

fn tail_mean(losses: &[f64]) -> f64 {
    let k = (losses.len() / 10).max(1).min(losses.len());
    losses[losses.len() - k..].iter().sum::<f64>() / k as f64
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    ckpt.save(path).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} (checksum {:#010x})", path.display(), ckpt.checksum());
    Ok(())
}

fn train_score(a: TrainScore) -> Result<()> {
    let clean = load_collection(&a.data)?;
    let config = TrainConfig { steps: a.steps, learning_rate: a.lr, batch_size: a.batch, seed: a.seed, ..TrainConfig::default() };
    let schedule = Default::default();
    let outcome = train_dsm(&clean, &schedule, &config)?;
    println!("final loss: {:.6}", tail_mean(&outcome.losses));

    let mut echo = Echo::new("train-score");
    echo.path("data", &a.data);
    echo.path("out", &a.out);
    echo.put("steps", a.steps);
    echo.put("lr", a.lr);
    echo.put("batch", a.batch);
    echo.put("seed", a.seed);
    echo.put("samples", clean.len());
    save_checkpoint(&score_to_checkpoint(&outcome.network, a.seed)?, &a.out)?;
    echo.write_beside(&a.out)
}

fn square_size(s: &Sample) -> Result<usize> {
    let k = (s.dim() as f64).sqrt().round() as usize;
    if k * k != s.dim() {
        bail!("samples of dimension {} are not square images", s.dim());
    }
    Ok(k)
}

fn train_prompts_cmd(a: TrainPrompts) -> Result<()> {
    for d in [&a.rainy, &a.clean] {
        if !d.is_dir() {
            bail!("data directory {} does not exist", d.display());
        }
    }
    let rainy: Vec<Sample> = load_images(&a.rainy, None)?.into_iter().map(|(_, s)| s).collect();
    let first = rainy.first().with_context(|| format!("no images in {}", a.rainy.display()))?;
    let size = square_size(first)?;
    let clean: Vec<Sample> = load_images(&a.clean, Some(size))?.into_iter().map(|(_, s)| s).collect();
    let spec = DomainSpec { image_size: size, ..DomainSpec::default() };
    let encoder = standard_encoder(&spec, a.encoder_seed)?;
    let config = PromptConfig { iterations: a.iters, learning_rate: a.lr, batch_size: a.batch, seed: a.seed, ..PromptConfig::default() };
    let outcome = train_prompts(&encoder, &rainy, &clean, &config)?;
    println!("final loss: {:.6}", tail_mean(&outcome.losses));
    println!("held-out accuracy: {:.4}", outcome.heldout_accuracy);

    let mut echo = Echo::new("train-prompts");
    echo.path("rainy", &a.rainy);
    echo.path("clean", &a.clean);
    echo.put("encoder_seed", a.encoder_seed);
    echo.path("out", &a.out);
    echo.put("iters", a.iters);
    echo.put("lr", a.lr);
    echo.put("batch", a.batch);
    echo.put("seed", a.seed);
    save_checkpoint(&prompts_to_checkpoint(&encoder, &outcome.prompts, a.seed)?, &a.out)?;
    echo.write_beside(&a.out)
}

fn load_score(path: &Path) -> Result<ScoreNetwork> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading score checkpoint {}", path.display()))?;
    Ok(score_from_checkpoint(&ckpt)?)
}

fn load_prompts(path: &Path) -> Result<(FeatureEncoder, PromptPair)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading prompt checkpoint {}", path.display()))?;
    Ok(prompts_from_checkpoint(&ckpt)?)
}

fn check_dims(images: &[(String, Sample)], dim: usize, what: &str) -> Result<()> {
    if let Some((name, s)) = images.iter().find(|(_, s)| s.dim() != dim) {
        return Err(Error::Dimension { expected: dim, got: s.dim() })
            .with_context(|| format!("{name} does not match the {what} checkpoint"));
    }
    Ok(())
}

fn derain(a: Derain) -> Result<()> {
    let score = load_score(&a.score)?;
    let config = a.sampler.config();
    let guidance = match &a.prompts {
        Some(p) => Some(load_prompts(p)?),
        None if config.energy.is_guided() => bail!("--prompts is required when guidance is on"),
        None => None,
    };
    let inputs = load_images(&a.input, None)?;
    if inputs.is_empty() {
        bail!("no images in {}", a.input.display());
    }
    check_dims(&inputs, score.dim(), "score")?;
    if let Some((enc, _)) = &guidance {
        check_dims(&inputs, enc.input_dim(), "prompt")?;
    }

    let schedule = *score.schedule();
    let parts = Components { schedule: &schedule, score: &score, guidance: guidance.as_ref().map(|(e, p)| (e, p)) };
    let samples: Vec<Sample> = inputs.iter().map(|(_, s)| s.clone()).collect();
    let outputs = derain_batch(&samples, &parts, &config)?;

    fs::create_dir_all(&a.out)?;
    if let Some(t) = &a.trace {
        fs::create_dir_all(t)?;
    }
    for ((name, _), (y, trace)) in inputs.iter().zip(&outputs) {
        save_pgm(y, &a.out.join(name))?;
        if let Some(dir) = &a.trace {
            let mut text = String::from("step\tn\tenergy\tgrad_norm\n");
            for r in trace {
                text.push_str(&format!("{}\t{}\t{}\t{}\n", r.step, r.n, r.energy, r.grad_norm));
            }
            let stem = name.strip_suffix(".pgm").unwrap_or(name);
            fs::write(dir.join(format!("{stem}.tsv")), text)?;
        }
    }

    let mut echo = Echo::new("derain");
    echo.path("input", &a.input);
    echo.path("out", &a.out);
    echo.path("score", &a.score);
    echo.put("prompts", a.prompts.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
    echo.put("trace", a.trace.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
    echo.put("images", inputs.len());
    a.sampler.echo(&mut echo);
    fs::write(a.out.join("derain.toml"), echo.to_toml()?)?;
    println!("derained {} images into {}", inputs.len(), a.out.display());
    Ok(())
}

/// `rainy_file -> clean_file` rows of a pairs file.
fn read_pairs(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (r, c) = line
            .split_once('\t')
            .with_context(|| format!("{}:{}: expected rainy_file<TAB>clean_file", path.display(), i + 1))?;
        if map.insert(r.to_string(), c.trim_end().to_string()).is_some() {
            bail!("{}:{}: duplicate entry for {r}", path.display(), i + 1);
        }
    }
    Ok(map)
}

/// Predictions matched with their ground truth through the pairs file.
fn paired(pred_dir: &Path, gt_dir: &Path, pairs: &Path, limit: Option<usize>) -> Result<Vec<(String, Sample, Sample)>> {
    let map = read_pairs(pairs)?;
    let preds = load_images(pred_dir, None)?;
    if preds.is_empty() {
        bail!("no images in {}", pred_dir.display());
    }
    let n = limit.unwrap_or(preds.len()).min(preds.len());
    if limit.is_none() {
        if let Some(missing) = map.keys().find(|k| !preds.iter().any(|(n, _)| n == *k)) {
            bail!("{} lists {missing} but {} has no such image", pairs.display(), pred_dir.display());
        }
    }
    preds
        .into_iter()
        .take(n)
        .map(|(name, pred)| {
            let gt_name = map.get(&name).with_context(|| format!("no pair entry for {name} in {}", pairs.display()))?;
            let truth = load_pgm(&gt_dir.join(gt_name))?;
            if truth.dim() != pred.dim() {
                bail!("{name} and its ground truth {gt_name} differ in size");
            }
            Ok((name, pred, truth))
        })
        .collect()
}

fn eval(a: Eval) -> Result<()> {
    let (encoder, prompts) = load_prompts(&a.prompts)?;
    let items = paired(&a.pred, &a.gt, &a.pairs, None)?;
    let mut echo = Echo::new("eval");
    echo.path("pred", &a.pred);
    echo.path("gt", &a.gt);
    echo.path("pairs", &a.pairs);
    echo.path("prompts", &a.prompts);
    echo.path("report", &a.report);
    let report = evaluate(&items, &encoder, &prompts, echo.0)?;
    report.save(&a.report)?;
    let s = &report.summary;
    println!(
        "{} images: mean mse {:.6}, mean psnr {:.3} dB, mean clean_prob {:.4}",
        s.count, s.mse.mean, s.psnr.mean, s.clean_prob.mean
    );
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let grid = match &a.grid {
        Some(g) => parse_grid(a.sweep, g)?,
        None => default_grid(a.sweep),
    };
    let score = load_score(&a.score)?;
    let (encoder, prompts) = load_prompts(&a.prompts)?;
    let items = paired(&a.input, &a.gt, &a.pairs, a.limit)?;
    let inputs: Vec<Sample> = items.iter().map(|(_, x, _)| x.clone()).collect();
    let truths: Vec<Sample> = items.iter().map(|(_, _, t)| t.clone()).collect();
    let schedule = *score.schedule();
    let rows = run_ablation(&inputs, &truths, &schedule, &score, &encoder, &prompts, &a.sampler.config(), &grid)?;

    let mut echo = Echo::new("ablate");
    echo.put("sweep", a.sweep);
    echo.put("grid", grid.iter().map(|g| g.label()).collect::<Vec<_>>().join(";"));
    echo.path("input", &a.input);
    echo.path("gt", &a.gt);
    echo.path("pairs", &a.pairs);
    echo.path("score", &a.score);
    echo.path("prompts", &a.prompts);
    echo.put("images", inputs.len());
    a.sampler.echo(&mut echo);
    let report = AblationReport::new(&a.sweep.to_string(), rows, echo.0);
    report.save(&a.report)?;
    print!("{}", report.to_tsv());
    Ok(())
}
