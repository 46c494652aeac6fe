mod common;

use std::ops::ControlFlow;

use common::*;
use hyper_restormer::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, MAGIC};
use hyper_restormer::degradations::{Degradation, DegradationSpec, NoiseLevel};
use hyper_restormer::model::build_model;
use hyper_restormer::synth::{synth_scene, SyntheticSceneSpec};
use hyper_restormer::training::{make_pairs, Dataset, OptimizerState, RunDir, TrainConfig, Trainer, METRICS_HEADER};
use hyper_restormer::Error;

fn encoded() -> Vec<u8> {
    let cfg = small_model(3);
    let state = build_model(&cfg, 1).unwrap();
    let opt = OptimizerState::new(&state.params);
    encode_checkpoint(&cfg, &state, Some(&opt)).unwrap()
}

#[test]
fn checkpoint_starts_with_magic() {
    let bytes = encoded();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let bytes = encoded();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(m)) if m.contains("magic")));
    let truncated = &bytes[..bytes.len() - 5];
    assert!(matches!(decode_checkpoint(truncated), Err(Error::Format(m)) if m.contains("truncated")));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_checkpoint(&long), Err(Error::Format(m)) if m.contains("trailing")));
    let mut version = bytes;
    version[8] = 9;
    assert!(decode_checkpoint(&version).is_err());
}

#[test]
fn checkpoint_arrays_must_match_config() {
    let cfg = small_model(3);
    let other = small_model(4);
    let state = build_model(&other, 1).unwrap();
    // config says 3 bands, arrays were built for 4
    let bytes = encode_checkpoint(&cfg, &state, None).unwrap();
    let err = decode_checkpoint(&bytes).unwrap_err().to_string();
    assert!(err.contains("shape"), "{err}");
}

#[test]
fn run_directory_records_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_model(3);
    let clean: Vec<_> = (0..2)
        .map(|s| {
            synth_scene(&SyntheticSceneSpec {
                seed: s,
                height: 12,
                width: 12,
                bands: 3,
                ..Default::default()
            })
            .unwrap()
        })
        .collect();
    let spec = DegradationSpec {
        degradation: Degradation::Noise {
            sigma: NoiseLevel::Fixed(30.0),
            clip: false,
        },
        seed: 1,
    };
    let data = Dataset {
        train: make_pairs(&clean, &spec).unwrap(),
        val: Vec::new(),
    };
    let tc = TrainConfig {
        epochs: 4,
        batch_size: 1,
        checkpoint_every: 2,
        ..Default::default()
    };
    let rd = RunDir::create(dir.path().join("run")).unwrap();
    let trainer = Trainer {
        model: &cfg,
        config: &tc,
        data: &data,
        run_dir: Some(rd),
    };
    let mut state = build_model(&cfg, 2).unwrap();
    let mut opt = OptimizerState::new(&state.params);
    trainer
        .run(&mut state, &mut opt, |_| ControlFlow::Continue(()))
        .unwrap();

    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.tsv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 5);
    // 12×12 cubes are large enough for SSIM, so validation columns are filled
    let fields: Vec<&str> = lines[1].split('\t').collect();
    assert_eq!(fields.len(), 6);
    assert!(fields[3..].iter().all(|f| f.parse::<f64>().is_ok()), "{}", lines[1]);
    let ckpts = dir.path().join("run/checkpoints");
    assert!(ckpts.join("step_00000004.ckpt").is_file());
    assert!(ckpts.join("step_00000008.ckpt").is_file());
    let last = load_checkpoint(ckpts.join("last.ckpt")).unwrap();
    assert_eq!(last.state, state);
    assert_eq!(last.optimizer.unwrap().step, 8);
}
