use eqdiff_core::baselines::{train_bc, train_explicit_diffusion, BcModel};
use eqdiff_core::checkpoint::{resume_trainer, AnyModel, Checkpoint, ModelKind};
use eqdiff_core::diffusion::JointBatch;
use eqdiff_core::metrics::ade;
use eqdiff_core::sampler::{sample_conditional, SamplerConfig};
use eqdiff_core::train::{train_policy, Trainable, Trainer};
use eqdiff_core::{DiffusionConfig, Error, NoiseSchedule, PolicyNetwork, StateActionPair, TrajectoryAction, VideoClipState};
use eqdiff_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> DiffusionConfig {
    let mut cfg = DiffusionConfig {
        steps: 20,
        frames: 2,
        points: 3,
        height: 8,
        width: 8,
        ..DiffusionConfig::default()
    };
    cfg.network.fields = vec![2, 2];
    cfg.network.embed_fields = 2;
    cfg.network.head_hidden = 32;
    cfg.optimizer.batch_size = 4;
    cfg.optimizer.lr = 3e-3;
    cfg
}

fn pairs(cfg: &DiffusionConfig, count: usize, seed: u64) -> Vec<StateActionPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let s = Tensor::uniform(&[cfg.state_len()], 1.0, &mut rng).into_data();
            let a = Tensor::uniform(&[cfg.action_len()], 0.8, &mut rng).into_data();
            StateActionPair::clean(
                VideoClipState::clean(cfg.frames, cfg.height, cfg.width, s).unwrap(),
                TrajectoryAction::from_flat(&a).unwrap(),
            )
        })
        .collect()
}

fn same_weights<M: Trainable, N: Trainable>(a: &M, b: &N) -> bool {
    a.params().iter().zip(b.params().iter()).all(|((_, n1, t1), (_, n2, t2))| n1 == n2 && t1 == t2)
}

#[test]
fn one_epoch_smoke_logs_a_finite_validation_loss() {
    let mut cfg = tiny();
    cfg.optimizer.epochs = 1;
    let data = pairs(&cfg, 4, 0);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut trainer = Trainer::new(PolicyNetwork::new(&cfg, 0).unwrap(), cfg.optimizer.clone(), 1);
    trainer.log_path = Some(log.clone());
    let mut seen = Vec::new();
    trainer.run(&data, &data[..2], 1, |r| seen.push(*r)).unwrap();
    assert_eq!(seen.len(), 1);
    assert!(seen[0].val_loss.is_finite() && seen[0].train_loss.is_finite());
    let text = std::fs::read_to_string(log).unwrap();
    let rec: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "val_loss", "lr"] {
        assert!(rec.get(key).is_some(), "{key}");
    }
}

#[test]
fn empty_training_set_is_a_config_error() {
    let cfg = tiny();
    let r = train_policy(PolicyNetwork::new(&cfg, 0).unwrap(), &[], &[], 0, |_| {});
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn resume_is_exact() {
    let mut cfg = tiny();
    cfg.optimizer.epochs = 4;
    let data = pairs(&cfg, 6, 1);
    let (train, val) = (&data[..5], &data[5..]);
    let mut full = Trainer::new(PolicyNetwork::new(&cfg, 3).unwrap(), cfg.optimizer.clone(), 9);
    full.run(train, val, 4, |_| {}).unwrap();

    let mut first = Trainer::new(PolicyNetwork::new(&cfg, 3).unwrap(), cfg.optimizer.clone(), 9);
    first.run(train, val, 2, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let last = dir.path().join("last.ckpt");
    let best = dir.path().join("best.ckpt");
    Checkpoint::of_trainer(ModelKind::Policy, &cfg, &first).save(&last).unwrap();
    Checkpoint::of_model(ModelKind::Policy, &cfg, &first.best_model()).save(&best).unwrap();

    let load = |p| Checkpoint::load(p).unwrap();
    let mut resumed = resume_trainer(PolicyNetwork::new(&cfg, 77).unwrap(), &load(&last), Some(&load(&best))).unwrap();
    assert!(same_weights(&resumed.model, &first.model));
    resumed.run(train, val, 2, |_| {}).unwrap();
    assert!(same_weights(&resumed.model, &first.model), "zero further epochs changes nothing");
    resumed.run(train, val, 4, |_| {}).unwrap();
    assert!(same_weights(&resumed.model, &full.model));
    assert_eq!(resumed.state.log, full.state.log);
    assert!(same_weights(&resumed.best_model(), &full.best_model()));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = tiny();
    let net = PolicyNetwork::new(&cfg, 5).unwrap();
    let ckpt = Checkpoint::of_model(ModelKind::Policy, &cfg, &net);
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config, cfg);
    let AnyModel::Policy(loaded) = AnyModel::from_checkpoint(&back).unwrap() else {
        panic!("wrong kind")
    };
    assert!(same_weights(&loaded, &net));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { .. })));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut other = tiny();
    other.network.fields = vec![2, 4];
    let mut wrong = back.clone();
    wrong.config = other;
    assert!(AnyModel::from_checkpoint(&wrong).is_err());
}

#[test]
fn bc_fits_a_constant_target() {
    let mut cfg = tiny();
    cfg.optimizer.epochs = 60;
    cfg.optimizer.lr = 1e-2;
    let target = TrajectoryAction::from_flat(&[0.3, -0.2, 0.1, 0.5, -0.6, 0.0]).unwrap();
    let data: Vec<_> = pairs(&cfg, 8, 2)
        .into_iter()
        .map(|p| StateActionPair::clean(p.state, target.clone()))
        .collect();
    let t = train_bc(&cfg, &data, &[], 0, |_| {}).unwrap();
    assert!(t.state.best_val < 1e-3, "{}", t.state.best_val);
    let m = t.best_model();
    let p = m.predict(&data[0].state).unwrap();
    assert_eq!(p, m.predict(&data[0].state).unwrap());
    assert!(p.flat().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn bc_memorizes_one_sample() {
    let mut cfg = tiny();
    cfg.optimizer.epochs = 150;
    cfg.optimizer.lr = 1e-2;
    let data = pairs(&cfg, 1, 3);
    let m = train_bc(&cfg, &data, &[], 0, |_| {}).unwrap().best_model();
    let p = m.predict(&data[0].state).unwrap();
    for (a, b) in p.flat().iter().zip(data[0].action.flat()) {
        assert!((a - b).abs() <= 1e-2, "{a} vs {b}");
    }
}

#[test]
fn every_model_overfits_a_single_example() {
    let mut cfg = tiny();
    cfg.optimizer.epochs = 400;
    cfg.optimizer.lr = 3e-3;
    let data: Vec<_> = std::iter::repeat_n(pairs(&cfg, 1, 4).pop().unwrap(), 8).collect();
    let (h, w) = (cfg.height, cfg.width);
    let gt = &data[0].action;
    let sched = NoiseSchedule::from_config(&cfg).unwrap();
    let det = SamplerConfig {
        deterministic: true,
        ..SamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let policy = train_policy(PolicyNetwork::new(&cfg, 1).unwrap(), &data, &[], 0, |_| {}).unwrap().best_model();
    let got = sample_conditional(&policy, &sched, &data[0].state, &det, &mut rng).unwrap();
    assert!(ade(&got.action, gt, h, w).unwrap() <= 1.0, "policy {}", ade(&got.action, gt, h, w).unwrap());

    let explicit = train_explicit_diffusion(&cfg, &data, &[], 1, |_| {}).unwrap().best_model();
    let got = explicit.predict(&data[0].state, &det, &mut rng).unwrap();
    assert!(ade(&got.action, gt, h, w).unwrap() <= 1.0, "explicit {}", ade(&got.action, gt, h, w).unwrap());

    let mut bc_cfg = cfg.clone();
    bc_cfg.optimizer.epochs = 150;
    let bc: BcModel = train_bc(&bc_cfg, &data, &[], 1, |_| {}).unwrap().best_model();
    let got = bc.predict(&data[0].state).unwrap();
    assert!(ade(&got, gt, h, w).unwrap() <= 1.0);
}

#[test]
fn explicit_sampling_is_seed_deterministic() {
    let mut cfg = tiny();
    cfg.optimizer.epochs = 1;
    let data = pairs(&cfg, 4, 5);
    let m = train_explicit_diffusion(&cfg, &data, &[], 0, |_| {}).unwrap().best_model();
    let clips: Vec<_> = data.iter().map(|p| p.state.clone()).collect();
    let run = |seed| m.sample_batch(&clips, &SamplerConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let _ = JointBatch::from_pairs(&data).unwrap();
}
