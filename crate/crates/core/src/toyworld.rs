//! Synthetic unpaired rainy/clean data, greymap I/O and embedding-space
//! outlier filtering.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::features::{EncoderConfig, FeatureEncoder, HeadFitConfig};
use crate::rng::{derive_seed, mix_seed, normal_vec, seeded};
use crate::sample::{check_collection, Sample, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    Gaussian2d,
    StreakImages,
}

impl std::str::FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian2d" => Ok(Self::Gaussian2d),
            "streak_images" | "streak-images" | "images" => Ok(Self::StreakImages),
            other => Err(Error::Config(format!("unknown data kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for DomainKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gaussian2d => "gaussian2d",
            Self::StreakImages => "streak_images",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub kind: DomainKind,
    /// Side length `K` of the square images.
    pub image_size: usize,
    /// Per-coefficient texture amplitude; pixel std is roughly this value.
    pub texture_amplitude: f64,
    /// Highest spatial frequency (cycles per image) in the textures.
    pub texture_max_freq: i64,
    pub streaks: usize,
    pub delta: f64,
    pub clean_mean: [f64; 2],
    pub clean_std: f64,
    pub rain_offset: [f64; 2],
    pub rain_jitter_var: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            kind: DomainKind::StreakImages,
            image_size: 16,
            texture_amplitude: 0.15,
            texture_max_freq: 1,
            streaks: 3,
            delta: 0.8,
            clean_mean: [0.0, 0.0],
            clean_std: 1.0,
            rain_offset: [2.0, 2.0],
            rain_jitter_var: 0.05,
        }
    }
}

impl DomainSpec {
    pub fn gaussian2d() -> Self {
        Self { kind: DomainKind::Gaussian2d, ..Self::default() }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            DomainKind::Gaussian2d => 2,
            DomainKind::StreakImages => self.image_size * self.image_size,
        }
    }

    pub fn shape(&self) -> Shape {
        match self.kind {
            DomainKind::Gaussian2d => Shape::Vector(2),
            DomainKind::StreakImages => Shape::Image { height: self.image_size, width: self.image_size },
        }
    }

    fn frequencies(&self) -> Vec<(i64, i64)> {
        let m = self.texture_max_freq;
        let mut out = Vec::new();
        for a in 0..=m {
            for b in -m..=m {
                if (a, b) > (0, 0) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    fn texture(&self, seed: u64) -> Sample {
        let k = self.image_size;
        let mut rng = seeded(seed);
        let freqs = self.frequencies();
        let amp = self.texture_amplitude * (2.0 / freqs.len().max(1) as f64).sqrt();
        let mut img = vec![0.0; k * k];
        for &(a, b) in &freqs {
            let c = amp * normal_vec(&mut rng, 1)[0];
            let phase = 2.0 * PI * rng.random::<f64>();
            for i in 0..k {
                for j in 0..k {
                    let arg = 2.0 * PI * (a * i as i64 + b * j as i64) as f64 / k as f64 + phase;
                    img[i * k + j] += c * arg.cos();
                }
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Sample::image(img, k, k).expect("square image")
    }

    fn rain(&self, clean: &Sample, seed: u64) -> Sample {
        let mut rng = seeded(seed);
        let mut v = clean.values().to_vec();
        match self.kind {
            DomainKind::Gaussian2d => {
                let z = normal_vec(&mut rng, 2);
                let sd = self.rain_jitter_var.sqrt();
                for d in 0..2 {
                    v[d] += self.rain_offset[d] + sd * z[d];
                }
            }
            DomainKind::StreakImages => {
                let k = self.image_size;
                for _ in 0..self.streaks {
                    let offset = rng.random_range(0..k);
                    for i in 0..k {
                        v[i * k + (i + offset) % k] += self.delta;
                    }
                }
                v.iter_mut().for_each(|p| *p = p.clamp(-1.0, 1.0));
            }
        }
        clean.with_values(v).expect("same length")
    }
}

/// Clean-domain samples; sample `i` depends only on `(spec, seed, i)`.
pub fn make_clean(spec: &DomainSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::EmptyData("requested zero clean samples"));
    }
    let base = mix_seed(seed);
    Ok((0..n)
        .map(|i| {
            let s = derive_seed(base, i as u64);
            match spec.kind {
                DomainKind::Gaussian2d => {
                    let z = normal_vec(&mut seeded(s), 2);
                    Sample::vector(vec![
                        spec.clean_mean[0] + spec.clean_std * z[0],
                        spec.clean_mean[1] + spec.clean_std * z[1],
                    ])
                }
                DomainKind::StreakImages => spec.texture(s),
            }
        })
        .collect())
}

/// Map from rainy positions to the clean samples they were made from.
///
/// Only evaluation code should look at this; training entry points take plain
/// sample slices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    clean_of_rainy: Vec<usize>,
}

impl Pairing {
    pub fn from_indices(clean_of_rainy: Vec<usize>) -> Self {
        Self { clean_of_rainy }
    }

    pub fn clean_index(&self, rainy: usize) -> Option<usize> {
        self.clean_of_rainy.get(rainy).copied()
    }

    pub fn len(&self) -> usize {
        self.clean_of_rainy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_of_rainy.is_empty()
    }
}

/// Rainy samples in shuffled order plus the hidden pairing.
#[derive(Debug, Clone)]
pub struct Corrupted {
    pub rainy: Vec<Sample>,
    pub pairing: Pairing,
}

/// Corrupts every clean sample, then shuffles the result.
pub fn corrupt(clean: &[Sample], spec: &DomainSpec, seed: u64) -> Result<Corrupted> {
    let first = clean.first().ok_or(Error::EmptyData("nothing to corrupt"))?;
    check_collection(clean, first.dim())?;
    check_dim(spec.dim(), first.dim())?;
    let base = mix_seed(seed);
    let degraded: Vec<Sample> =
        clean.iter().enumerate().map(|(i, c)| spec.rain(c, derive_seed(base, i as u64))).collect();
    let mut order: Vec<usize> = (0..clean.len()).collect();
    order.shuffle(&mut seeded(mix_seed(base)));
    let rainy = order.iter().map(|&i| degraded[i].clone()).collect();
    Ok(Corrupted { rainy, pairing: Pairing::from_indices(order) })
}

/// Unpaired training view and paired evaluation view of one generated world.
#[derive(Debug, Clone)]
pub struct World {
    pub clean: Vec<Sample>,
    pub rainy: Vec<Sample>,
    pairing: Pairing,
    /// Clean originals of `rainy`, in generation order.
    originals: Vec<Sample>,
}

impl World {
    /// `clean` and the sources of `rainy` are drawn independently, so the two
    /// sets share no content.
    pub fn generate(spec: &DomainSpec, n: usize, seed: u64) -> Result<Self> {
        let clean = make_clean(spec, n, mix_seed(seed) ^ 1)?;
        let originals = make_clean(spec, n, mix_seed(seed) ^ 2)?;
        let c = corrupt(&originals, spec, mix_seed(seed) ^ 3)?;
        Ok(Self { clean, rainy: c.rainy, pairing: c.pairing, originals })
    }

    /// Ground truth for rainy sample `i`; evaluation only.
    pub fn ground_truth(&self, i: usize) -> Option<&Sample> {
        self.pairing.clean_index(i).map(|j| &self.originals[j])
    }

    pub fn pairing(&self) -> &Pairing {
        &self.pairing
    }
}

/// Encoder for a domain: random trunk plus a projection head fitted once on an
/// auxiliary corpus generated from seeds disjoint from any data split.
pub fn standard_encoder(spec: &DomainSpec, seed: u64) -> Result<FeatureEncoder> {
    let enc = FeatureEncoder::new(&EncoderConfig::for_input(spec.dim(), seed))?;
    let aux = mix_seed(seed ^ 0xa0c0_5eed);
    let clean = make_clean(spec, 2000, aux ^ 1)?;
    let rainy = corrupt(&make_clean(spec, 2000, aux ^ 2)?, spec, aux ^ 3)?.rainy;
    enc.with_fitted_head(&rainy, &clean, &HeadFitConfig { seed: aux, ..HeadFitConfig::default() })
}

pub fn pixel_to_value(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Inverse of [`pixel_to_value`] with round-half-up and clipping.
pub fn value_to_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), reason: reason.into() }
}

/// Reads an 8-bit binary greymap.
pub fn load_pgm(path: &Path) -> Result<Sample> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format_err(path, format!("expected P5 magic, found {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad {what} {s:?}")));
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(format_err(path, format!("only 8-bit images are supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height {
        return Err(format_err(path, format!("expected {} pixels, found {}", width * height, raster.len())));
    }
    Sample::image(raster.iter().map(|&p| pixel_to_value(p)).collect(), height, width)
}

pub fn save_pgm(sample: &Sample, path: &Path) -> Result<()> {
    let (h, w) = match sample.shape() {
        Shape::Image { height, width } => (height, width),
        Shape::Vector(_) => return Err(Error::Config("only image samples can be written as greymaps".into())),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(sample.values().iter().map(|&v| value_to_pixel(v)));
    fs::write(path, out)?;
    Ok(())
}

/// All `*.pgm` files of a directory, sorted by name, optionally checked
/// against an expected side length.
pub fn load_images(dir: &Path, expected_size: Option<usize>) -> Result<Vec<(String, Sample)>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let path = dir.join(&name);
        let s = load_pgm(&path)?;
        if let (Some(k), Shape::Image { height, width }) = (expected_size, s.shape()) {
            if height != k || width != k {
                return Err(format_err(&path, format!("{width}x{height} image, expected {k}x{k}")));
            }
        }
        out.push((name, s));
    }
    Ok(out)
}

pub fn save_images(items: &[(String, Sample)], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, s) in items {
        save_pgm(s, &dir.join(name))?;
    }
    Ok(())
}

/// Tab-separated point file, one sample per line.
pub fn save_points(samples: &[Sample], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for s in samples {
        let line: Vec<String> = s.values().iter().map(|v| format!("{v:?}")).collect();
        writeln!(f, "{}", line.join("\t"))?;
    }
    Ok(())
}

pub fn load_points(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split('\t')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        out.push(Sample::vector(vals));
    }
    if let Some(first) = out.first() {
        check_collection(&out, first.dim())?;
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding and a fixed iteration count.
/// Returns `(centroids, assignment)`.
pub fn kmeans(points: &[Vec<f64>], k: usize, iterations: usize, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k > points.len() {
        return Err(Error::Config(format!("k = {k} exceeds the {} samples", points.len())));
    }
    let mut rng = seeded(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    let assign_all = |c: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut best = (f64::INFINITY, 0);
                for (j, cj) in c.iter().enumerate() {
                    let d = sq_dist(p, cj);
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                best.1
            })
            .collect()
    };
    let dim = points[0].len();
    let mut assignment = assign_all(&centroids);
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        assignment = assign_all(&centroids);
    }
    Ok((centroids, assignment))
}

/// Indices kept by [`cluster_filter`].
pub fn cluster_filter_indices(
    samples: &[Sample],
    encoder: &FeatureEncoder,
    k: usize,
    quantile: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::Config(format!("quantile {quantile} outside (0, 1]")));
    }
    let emb = samples.iter().map(|s| encoder.embed(s)).collect::<Result<Vec<_>>>()?;
    let (centroids, assignment) = kmeans(&emb, k, 50, seed)?;
    let mut keep = vec![false; samples.len()];
    for (j, c) in centroids.iter().enumerate() {
        let mut members: Vec<(f64, usize)> = assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == j)
            .map(|(i, _)| (sq_dist(&emb[i], c).sqrt(), i))
            .collect();
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n_keep = (quantile * members.len() as f64).ceil() as usize;
        for &(_, i) in members.iter().take(n_keep) {
            keep[i] = true;
        }
    }
    Ok((0..samples.len()).filter(|&i| keep[i]).collect())
}

/// Drops samples far from their k-means centroid in embedding space, keeping
/// the closest `ceil(quantile * n_c)` members of each cluster in original order.
pub fn cluster_filter(
    samples: &[Sample],
    encoder: &FeatureEncoder,
    k: usize,
    quantile: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    Ok(cluster_filter_indices(samples, encoder, k, quantile, seed)?
        .into_iter()
        .map(|i| samples[i].clone())
        .collect())
}
