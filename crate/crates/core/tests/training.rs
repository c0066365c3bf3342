use faqd_core::data::{synthetic_dataset, DatasetHandle, DataSource, SyntheticSpec};
use faqd_core::losses::{KdKind, LossConfig};
use faqd_core::models::{build_network, NetSpec, Network, QuantMode};
use faqd_core::quantizers::quantize_weights;
use faqd_core::trainer::{
    distill_train, distill_train_with_hook, evaluate, train_supervised, OptimizerConfig, TrainConfig,
};
use faqd_core::Error;

fn blobs(n: usize, classes: usize, seed: u64) -> DatasetHandle {
    synthetic_dataset(&SyntheticSpec::new(seed, n, classes, (3, 8, 8))).unwrap()
}

fn small_cfg(loss: LossConfig, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::end_to_end(loss);
    cfg.epochs = epochs;
    cfg.batch_size = 32;
    cfg.optimizer = OptimizerConfig::sgd().with_lr(0.05);
    cfg
}

fn teacher(data: &DatasetHandle, classes: usize) -> Network<f32> {
    let net = build_network::<f32>(&NetSpec::resnet_tiny(8, classes).unwrap(), 11).unwrap();
    let cfg = small_cfg(LossConfig::default(), 6);
    train_supervised(net, data, &cfg, None).unwrap().0
}

fn student(bits: u32, act_bits: u32, classes: usize) -> Network<f32> {
    let spec = NetSpec::resnet_tiny(8, classes).unwrap().with_bits(bits, act_bits).unwrap();
    build_network(&spec, 23).unwrap()
}

#[test]
fn four_bit_student_learns_separable_blobs() {
    let data = blobs(256, 2, 1);
    let t = teacher(&data, 2);
    assert!(evaluate(&t, &data, 64).unwrap() >= 0.95);
    // 8 batches per epoch, 200 steps
    let cfg = small_cfg(LossConfig::default(), 25);
    let (s, metrics) = distill_train(&t, student(4, 32, 2), &data, &cfg, None).unwrap();
    assert_eq!(metrics.records.len(), 25);
    let acc = evaluate(&s, &data, 64).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
    for p in s.params() {
        if let Some(q) = p.quant() {
            assert_eq!(q.u, quantize_weights(&q.w, &q.scheme).unwrap(), "{}", p.name);
        }
    }
}

#[test]
fn label_free_never_reads_labels() {
    let data = blobs(64, 2, 2);
    let t = teacher(&data, 2);
    let before = data.label_reads();
    let cfg = small_cfg(LossConfig::label_free(1.0, 1.0), 2);
    let (_, metrics) = distill_train(&t, student(4, 32, 2), &data, &cfg, None).unwrap();
    assert_eq!(data.label_reads(), before);
    assert!(metrics.records.iter().all(|r| r.loss.gt == 0.0));
    let unlabeled = data.without_labels();
    distill_train(&t, student(4, 32, 2), &unlabeled, &cfg, None).unwrap();
}

#[test]
fn qd_baseline_drops_affinity_term() {
    let data = blobs(64, 2, 3);
    let t = teacher(&data, 2);
    let loss = LossConfig::qd(0.7);
    assert_eq!((loss.beta, loss.kd_kind), (0.0, KdKind::Kl));
    assert!((loss.gamma - 0.3).abs() < 1e-12);
    let (_, m) = distill_train(&t, student(4, 32, 2), &data, &small_cfg(loss, 2), None).unwrap();
    assert!(m.records.iter().all(|r| r.loss.fa == 0.0 && r.loss.kd > 0.0 && r.loss.gt > 0.0));
}

#[test]
fn teacher_untouched_and_breakdown_consistent() {
    let data = blobs(64, 3, 4);
    let t = teacher(&data, 3);
    let print = t.fingerprint();
    let loss = LossConfig { alpha: 0.8, beta: 2.0, gamma: 0.4, ..LossConfig::default() };
    let (_, m) = distill_train(&t, student(2, 4, 3), &data, &small_cfg(loss, 2), None).unwrap();
    assert_eq!(t.fingerprint(), print);
    for r in &m.records {
        let recombined = 0.8 * r.loss.kd + 2.0 * r.loss.fa + 0.4 * r.loss.gt;
        assert!((recombined - r.loss.total).abs() <= 1e-5 * r.loss.total.abs().max(1.0), "{r:?}");
    }
}

#[test]
fn identical_configs_give_identical_metrics() {
    let data = blobs(64, 2, 5);
    let t = teacher(&data, 2);
    let mut cfg = small_cfg(LossConfig::default(), 2);
    cfg.quant_mode = QuantMode::BinaryRelax { lambda: 1.0, eta: 1.5 };
    let run = || distill_train(&t, student(1, 2, 2), &data, &cfg, Some(&data)).unwrap();
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(ma.to_csv(), mb.to_csv());
    assert_eq!(a, b);
    let lambdas: Vec<f64> = ma.records.iter().map(|r| r.lambda).collect();
    assert!((lambdas[1] - 1.5 * lambdas[0]).abs() < 1e-6, "{lambdas:?}");
}

#[test]
fn qat_forward_weights_stay_projected_every_step() {
    let data = blobs(64, 2, 6);
    let t = teacher(&data, 2);
    let mut steps = 0;
    let mut hook = |_: &faqd_core::trainer::StepInfo, net: &Network<f32>| {
        steps += 1;
        for p in net.params() {
            if let Some(q) = p.quant() {
                assert_eq!(q.u, quantize_weights(&q.w, &q.scheme).unwrap());
            }
        }
    };
    distill_train_with_hook(&t, student(1, 32, 2), &data, &small_cfg(LossConfig::default(), 2), None, &mut hook).unwrap();
    assert_eq!(steps, 4);
}

#[test]
fn tap_mismatch_is_config_error() {
    let data = blobs(32, 2, 7);
    let t = build_network::<f32>(&NetSpec::resnet_tiny(8, 2).unwrap(), 0).unwrap();
    let mut spec = NetSpec::resnet_tiny(8, 2).unwrap();
    spec.group_channels = vec![16, 32];
    let s = build_network::<f32>(&spec, 0).unwrap();
    let err = distill_train(&t, s, &data, &small_cfg(LossConfig::default(), 1), None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn nan_loss_names_the_term() {
    let mut images = vec![0.5f32; 4 * 3 * 8 * 8];
    images[5] = f32::NAN;
    let data = DatasetHandle::from_parts(images, (3, 8, 8), Some(vec![0, 1, 0, 1]), 2, DataSource::Subset).unwrap();
    let t = build_network::<f32>(&NetSpec::resnet_tiny(8, 2).unwrap(), 0).unwrap();
    let mut cfg = small_cfg(LossConfig::default(), 1);
    cfg.batch_size = 4;
    match distill_train(&t, student(4, 32, 2), &data, &cfg, None) {
        Err(Error::Numerical(msg)) => assert!(msg.starts_with("kd"), "{msg}"),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn evaluate_contracts() {
    let data = blobs(100, 10, 8);
    let net = build_network::<f32>(&NetSpec::resnet_tiny(8, 10).unwrap(), 3).unwrap();
    let one = evaluate(&net, &data, 1).unwrap();
    let many = evaluate(&net, &data, 64).unwrap();
    assert_eq!(one, many);
    let empty = DatasetHandle::from_parts(vec![], (3, 8, 8), Some(vec![]), 10, DataSource::Subset).unwrap();
    assert!(matches!(evaluate(&net, &empty, 8), Err(Error::Input(_))));
}

#[test]
fn untrained_accuracy_is_near_chance() {
    let data = blobs(10_000, 10, 9);
    let net = build_network::<f32>(&NetSpec::resnet_tiny(8, 10).unwrap(), 3).unwrap();
    let acc = evaluate(&net, &data, 250).unwrap();
    assert!((0.07..=0.13).contains(&acc), "{acc}");
}

#[test]
fn perfect_predictions_score_one() {
    let data = blobs(200, 2, 10);
    let t = teacher(&data, 2);
    // relabel by the network's own predictions: accuracy must then be exact
    let mut preds = Vec::new();
    for i in 0..data.len() {
        let x = faqd_core::Tensor::new(&[1, 3, 8, 8], data.image(i).to_vec()).unwrap();
        preds.push(faqd_core::trainer::predictions(&t.forward_values(&x).unwrap().0)[0] as u8);
    }
    let images: Vec<f32> = (0..data.len()).flat_map(|i| data.image(i).to_vec()).collect();
    let relabeled = DatasetHandle::from_parts(images, (3, 8, 8), Some(preds), 2, DataSource::Subset).unwrap();
    assert_eq!(evaluate(&t, &relabeled, 50).unwrap(), 1.0);
}
