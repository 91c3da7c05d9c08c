use std::fs;
use std::path::Path;

use energy_derain::checkpoint::{prompts_from_checkpoint, prompts_to_checkpoint, score_from_checkpoint, score_to_checkpoint, Checkpoint};
use energy_derain::features::{EncoderConfig, FeatureEncoder, PromptPair};
use energy_derain::rng::seeded;
use energy_derain::score::{train_dsm, ScoreFn, TrainConfig};
use energy_derain::toyworld::{make_clean, DomainSpec};
use energy_derain::{DiffusionSchedule, Error, Sample};

fn tmp(name: &str) -> std::path::PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("checkpoint");
    fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn trained_score_round_trips_through_disk() {
    let spec = DomainSpec { image_size: 4, ..DomainSpec::default() };
    let data = make_clean(&spec, 64, 3).unwrap();
    let cfg = TrainConfig { steps: 50, hidden_dims: vec![16, 16], ..TrainConfig::default() };
    let net = train_dsm(&data, &DiffusionSchedule::default(), &cfg).unwrap().network;
    let path = tmp("score.ckpt");
    score_to_checkpoint(&net, 17).unwrap().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.u64("meta.seed").unwrap(), 17);
    let back = score_from_checkpoint(&loaded).unwrap();
    assert_eq!(back.dim(), 16);

    // saving what was loaded reproduces the file exactly
    let again = tmp("score2.ckpt");
    score_to_checkpoint(&back, 17).unwrap().save(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

    let y = data[0].clone();
    let (a, b) = (net.score(&y, 0.2).unwrap(), back.score(&y, 0.2).unwrap());
    let gap = a.values().iter().zip(b.values()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-3, "{gap}");
}

#[test]
fn flipping_any_payload_byte_is_detected() {
    let enc = FeatureEncoder::new(&EncoderConfig::for_input(9, 4)).unwrap();
    let p = PromptPair::random(&mut seeded(2), enc.embed_dim(), 0.02);
    let path = tmp("prompts.ckpt");
    prompts_to_checkpoint(&enc, &p, 1).unwrap().save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let payload_len: usize = Checkpoint::load(&path).unwrap().tensors().iter().map(|t| 4 * t.data.len()).sum();
    let start = bytes.len() - 4 - payload_len;
    for i in (start..bytes.len() - 4).step_by(997) {
        let mut b = bytes.clone();
        b[i] = b[i].wrapping_add(1);
        let bad = tmp("bad.ckpt");
        fs::write(&bad, &b).unwrap();
        assert!(matches!(Checkpoint::load(&bad), Err(Error::Checksum { .. })), "byte {i}");
    }
    let (e2, p2) = prompts_from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(e2.seed(), 4);
    let v = Sample::image(vec![0.1; 9], 3, 3).unwrap();
    let d = enc.embed(&v).unwrap().iter().zip(e2.embed(&v).unwrap()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(d < 1e-4 * enc.feature_scale());
    assert_eq!(p2.dim(), p.dim());
}

#[test]
fn truncated_file_is_a_format_error() {
    let enc = FeatureEncoder::new(&EncoderConfig::for_input(4, 1)).unwrap();
    let p = PromptPair::random(&mut seeded(1), enc.embed_dim(), 0.02);
    let bytes = prompts_to_checkpoint(&enc, &p, 0).unwrap().to_bytes();
    for cut in [0, 7, 9, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut at {cut}");
    }
}
