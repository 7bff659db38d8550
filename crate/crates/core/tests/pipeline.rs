use edsc::datagen::{object_centroid, read_sequence, write_sequence, DataSpec};
use edsc::io::{load_checkpoint, save_checkpoint};
use edsc::model::{build_model, ModelConfig};
use edsc::training::{dni_interpolate, predict, samples_at, train, LossConfig, LossKind, TrainConfig};

fn small() -> ModelConfig {
    ModelConfig {
        widths: vec![8, 16, 16],
        estimator_widths: [8, 8, 8],
        block_depth: 1,
        hetconv_p: 2,
        ..ModelConfig::default()
    }
}

fn data(count: usize, seed: u64) -> DataSpec {
    DataSpec {
        size: 16,
        count,
        max_velocity: 3.0,
        max_background_velocity: 1.0,
        object_size: (4.0, 6.0),
        times: vec![0.5],
        seed,
    }
}

#[test]
fn overfits_a_single_triplet() {
    let seqs = data(1, 3).generate().unwrap();
    let val = samples_at(&seqs, 0.5).unwrap();
    let cfg = TrainConfig { epochs: 150, batch: 1, halve_every: 0, flip: false, ..TrainConfig::default() };
    let out = train(build_model::<f32>(&small(), 0).unwrap(), &seqs, &val, &cfg, |_| {}).unwrap();
    assert!(out.diverged.is_none());
    let first = out.log[0].train_loss;
    let best = out.log.iter().map(|e| e.train_loss).fold(f64::INFINITY, f64::min);
    let last = out.log.last().unwrap().train_loss;
    assert!(last < 0.1 * first, "loss {} -> {} (best {})", first, last, best);
}

#[test]
fn training_is_deterministic() {
    let seqs = data(6, 4).generate().unwrap();
    let val = samples_at(&seqs[..2], 0.5).unwrap();
    let cfg = TrainConfig { epochs: 2, batch: 2, crop: Some(8), ..TrainConfig::default() };
    let run = || train(build_model::<f32>(&small(), 1).unwrap(), &seqs, &val, &cfg, |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    for (name, t) in a.params.iter() {
        assert_eq!(t.data(), b.params.get(name).unwrap().data(), "{}", name);
    }
}

#[test]
fn lr_halves_on_schedule() {
    let seqs = data(2, 5).generate().unwrap();
    let val = samples_at(&seqs, 0.5).unwrap();
    let cfg = TrainConfig { epochs: 5, lr: 1e-3, halve_every: 2, batch: 2, ..TrainConfig::default() };
    let out = train(build_model::<f32>(&small(), 1).unwrap(), &seqs, &val, &cfg, |_| {}).unwrap();
    let lrs: Vec<f64> = out.log.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4]);
}

#[test]
fn multi_time_training_visits_every_time() {
    let times = vec![0.167, 0.333, 0.5, 0.667, 0.833];
    let seqs = DataSpec { times: times.clone(), ..data(10, 6) }.generate().unwrap();
    let val = samples_at(&seqs[..2], 0.5).unwrap();
    let model = ModelConfig { multi_time: true, ..small() };
    let cfg = TrainConfig { epochs: 1, batch: 1, times, ..TrainConfig::default() };
    let out = train(build_model::<f32>(&model, 0).unwrap(), &seqs, &val, &cfg, |_| {}).unwrap();
    assert!(out.log[0].t_counts.iter().all(|&c| c > 0), "{:?}", out.log[0].t_counts);
}

#[test]
fn checkpoints_from_two_runs_blend() {
    let dir = tempfile::tempdir().unwrap();
    let seqs = data(4, 7).generate().unwrap();
    let val = samples_at(&seqs[..1], 0.5).unwrap();
    let base = TrainConfig { epochs: 1, batch: 2, ..TrainConfig::default() };
    let feat = TrainConfig {
        loss: LossConfig { kind: LossKind::CharbonnierFeature, ..LossConfig::default() },
        ..base.clone()
    };
    let init = build_model::<f32>(&small(), 2).unwrap();
    let a = train(init.clone(), &seqs, &val, &base, |_| {}).unwrap().params;
    let b = train(a.clone(), &seqs, &val, &feat, |_| {}).unwrap().params;
    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&pa, &a).unwrap();
    save_checkpoint(&pb, &b).unwrap();
    let la = load_checkpoint::<f32>(&pa).unwrap();
    let lb = load_checkpoint::<f32>(&pb).unwrap();
    let mid = dni_interpolate(&la, &lb, 0.5).unwrap();
    for (name, t) in mid.iter() {
        let (x, y) = (a.get(name).unwrap(), b.get(name).unwrap());
        for ((m, p), q) in t.data().iter().zip(x.data()).zip(y.data()) {
            assert!((m - (0.5 * p + 0.5 * q)).abs() <= 1e-6 * (1.0 + p.abs().max(q.abs())));
        }
    }
    let s = &val[0];
    let out = predict(&mid, &s.frame1, &s.frame2, 0.5).unwrap();
    assert_eq!((out.width(), out.height()), (16, 16));
    assert!(dni_interpolate(&la, &build_model::<f32>(&ModelConfig { kernel_size: 3, ..small() }, 0).unwrap(), 0.5).is_err());
}

#[test]
fn sequences_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let seq = &DataSpec { times: vec![0.25, 0.5], ..data(1, 8) }.generate().unwrap()[0];
    write_sequence(dir.path(), seq).unwrap();
    let (frames, flow) = read_sequence(dir.path()).unwrap();
    let times: Vec<f64> = frames.iter().map(|(t, _)| *t).collect();
    assert_eq!(times, vec![0.0, 0.25, 0.5, 1.0]);
    assert_eq!(flow.unwrap().shape(), seq.flow_1to2.shape());
    for ((_, f), g) in frames.iter().zip(&seq.frames) {
        for (a, b) in f.data().iter().zip(g.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
    let (c0, c1) = (seq.spec.object_center(0.0), object_centroid(seq.first()).unwrap());
    assert!((c0.0 - c1.0).abs() < 0.5 && (c0.1 - c1.1).abs() < 0.5);
}
