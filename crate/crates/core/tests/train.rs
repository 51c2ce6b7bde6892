use hexres::cifar::{synthetic_dataset, CifarDataset, SplitSpec};
use hexres::layers::Mode;
use hexres::resnet::{ArchConfig, ShortcutMode};
use hexres::rng::Rng;
use hexres::tensor::Tensor;
use hexres::train::*;
use hexres::Error;

fn tiny_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        seed: 11,
        train_limit: Some(48),
        val_limit: Some(32),
        ..TrainConfig::default()
    }
}

fn dataset() -> CifarDataset {
    synthetic_dataset(50_000, 0, 1)
}

fn arch() -> ArchConfig {
    ArchConfig::new(8, ShortcutMode::HexProjection).unwrap()
}

#[test]
fn default_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!((cfg.epochs, cfg.batch_size), (182, 128));
    assert_eq!(cfg.lr_at(0), 0.1);
    assert_eq!(cfg.lr_at(31_999), 0.1);
    assert!((cfg.lr_at(32_000) - 0.01).abs() < 1e-15);
    assert!((cfg.lr_at(48_000) - 0.001).abs() < 1e-15);
    assert!((cfg.lr_at(64_000) - 0.0001).abs() < 1e-15);
}

#[test]
fn drops_must_increase() {
    let cfg = TrainConfig {
        lr_drops: vec![10, 10],
        ..TrainConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn zero_epochs_leave_parameters_and_emit_one_record() {
    let ds = dataset();
    let cfg = tiny_cfg(0);
    let data = TrainData::prepare(&ds, &SplitSpec::new(0), &cfg).unwrap();
    let mut state = TrainState::new(arch(), cfg).unwrap();
    let before: Vec<Tensor<f32>> = state.model.named_params().into_iter().map(|(_, p)| p.value.clone()).collect();
    let records = train(&mut state, &data, |_, _| Ok(())).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].epoch, 0);
    assert_eq!(records[0].train_loss, None);
    let after: Vec<Tensor<f32>> = state.model.named_params().into_iter().map(|(_, p)| p.value.clone()).collect();
    assert_eq!(before, after);
    assert_eq!(state.iteration, 0);
}

#[test]
fn smoke_run_loss_decreases() {
    let ds = dataset();
    let cfg = TrainConfig {
        epochs: 2,
        lr: 0.02,
        seed: 3,
        train_limit: Some(500),
        val_limit: Some(100),
        ..TrainConfig::default()
    };
    let data = TrainData::prepare(&ds, &SplitSpec::new(0), &cfg).unwrap();
    let mut state = TrainState::new(ArchConfig::new(20, ShortcutMode::HexProjection).unwrap(), cfg).unwrap();
    let records = train(&mut state, &data, |_, _| Ok(())).unwrap();
    let l1 = records[1].train_loss.unwrap();
    let l2 = records[2].train_loss.unwrap();
    assert!(l2 < l1, "{l1} -> {l2}");
    assert_eq!(state.iteration, 8);
    for r in &records {
        assert!(0.0 <= r.val_top1 && r.val_top1 <= r.val_top5 && r.val_top5 <= 100.0);
    }
}

#[test]
fn metrics_lines_round_trip() {
    let rec = MetricsRecord {
        epoch: 3,
        train_loss: Some(1.25),
        val_loss: 1.5,
        val_top1: 40.0,
        val_top5: 90.0,
        seconds: 2.0,
    };
    let line = rec.to_json_line();
    assert!(!line.contains('\n'));
    let back: MetricsRecord = serde_json::from_str(&line).unwrap();
    assert_eq!(back, rec);
    assert!(rec.same_metrics(&MetricsRecord { seconds: 9.0, ..rec.clone() }));
}

#[test]
fn non_finite_loss_names_the_iteration() {
    let ds = dataset();
    let cfg = tiny_cfg(1);
    let data = TrainData::prepare(&ds, &SplitSpec::new(0), &cfg).unwrap();
    let mut state = TrainState::new(arch(), cfg).unwrap();
    state.model.fc.bias.value.data_mut()[0] = f32::NAN;
    let err = state.train_epoch(&data).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { iteration: 0, .. }));
    assert!(err.to_string().contains("iteration 0"));
}

fn scores(rows: &[[f32; 4]]) -> Tensor<f32> {
    Tensor::from_vec([rows.len(), 4, 1, 1], rows.iter().flatten().copied().collect()).unwrap()
}

#[test]
fn hand_built_topk_counts() {
    let s = scores(&[[0.1, 0.9, 0.5, 0.2], [0.3, 0.3, 0.3, 0.1], [0.7, 0.1, 0.6, 0.65]]);
    let labels = [2, 1, 3];
    // ranks: sample 0 → 1; sample 1 ties with class 0 (lower index wins) → 1; sample 2 → 1
    assert_eq!(label_rank(s.item(0), 2), 1);
    assert_eq!(label_rank(s.item(1), 1), 1);
    assert_eq!(label_rank(s.item(1), 0), 0);
    assert_eq!(label_rank(s.item(2), 3), 1);
    assert_eq!(topk_correct(&s, &labels, 1), 0);
    assert_eq!(topk_correct(&s, &labels, 2), 3);
    assert_eq!(topk_correct(&s, &[1, 0, 0], 1), 3);
}

#[test]
fn uniform_random_scores_give_chance_accuracy() {
    let mut rng = Rng::new(4);
    let n = 10_000;
    let s = Tensor::<f32>::randn([n, 10, 1, 1], 1.0, &mut rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(10)).collect();
    let top1 = 100.0 * topk_correct(&s, &labels, 1) as f64 / n as f64;
    let top5 = 100.0 * topk_correct(&s, &labels, 5) as f64 / n as f64;
    assert!((top1 - 10.0).abs() < 2.0, "{top1}");
    assert!((top5 - 50.0).abs() < 2.0, "{top5}");
}

#[test]
fn perfect_scores() {
    let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
    let s = Tensor::<f32>::from_fn([20, 10, 1, 1], |n, c, _, _| if c == labels[n] { 50.0 } else { 0.0 });
    assert_eq!(topk_correct(&s, &labels, 1), 20);
    assert_eq!(topk_correct(&s, &labels, 5), 20);
    let (loss, _) = hexres::layers::softmax_cross_entropy(&s, &labels).unwrap();
    assert!(loss < 1e-15);
}

#[test]
fn evaluate_reports_percentages() {
    let ds = dataset();
    let cfg = tiny_cfg(0);
    let data = TrainData::prepare(&ds, &SplitSpec::new(0), &cfg).unwrap();
    let mut state = TrainState::new(arch(), cfg).unwrap();
    state.model.zero_classifier();
    let ev = evaluate(&mut state.model, &data.validation, &data.stats, 7).unwrap();
    assert!((ev.loss - 10f64.ln()).abs() < 1e-6);
    // all scores tie, so class 0 is predicted and classes 0..5 form the top 5
    let zeros = data.validation.iter().filter(|r| r.label == 0).count();
    let low = data.validation.iter().filter(|r| r.label < 5).count();
    assert_eq!(ev.top1, 100.0 * zeros as f64 / 32.0);
    assert_eq!(ev.top5, 100.0 * low as f64 / 32.0);
    let x = Tensor::zeros([1, 3, 32, 32]);
    assert_eq!(state.model.forward(&x, Mode::Eval).unwrap().data(), &[0.0; 10]);
}

#[test]
fn seeded_runs_are_identical() {
    let ds = dataset();
    let cfg = tiny_cfg(2);
    let data = TrainData::prepare(&ds, &SplitSpec::new(0), &cfg).unwrap();
    let run = || {
        let mut state = TrainState::new(arch(), cfg.clone()).unwrap();
        train(&mut state, &data, |_, _| Ok(())).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 3);
    assert!(a.iter().zip(&b).all(|(x, y)| x.same_metrics(y)));
}
