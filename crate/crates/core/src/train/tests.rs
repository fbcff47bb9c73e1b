use super::*;
use crate::network::{NetworkConfig, Variant};

fn tiny() -> (Network, ParamStore<f32>) {
    let cfg = NetworkConfig {
        stem_channels: 4,
        stage_channels: [4, 4, 8, 8],
        state_dim: 2,
        ..NetworkConfig::reference(Variant::Mamba3d)
    };
    let (net, ps) = Network::build(&cfg, 1).unwrap();
    (net, ps.cast())
}

fn data() -> (Vec<Sample>, Vec<Sample>) {
    train_val_split(&SyntheticVolumeSpec { extent: 16, ..Default::default() }, 4, 2).unwrap()
}

fn short() -> TrainConfig {
    TrainConfig { epochs: 2, iterations: 2, lr: 3e-3, train_samples: 4, val_samples: 2, ..Default::default() }
}

#[test]
fn training_is_deterministic() {
    let (net, ps) = tiny();
    let (tr, va) = data();
    let (p1, r1) = train(&net, ps.clone(), &tr, &va, &short(), 5, |_| {}).unwrap();
    let (p2, r2) = train(&net, ps.clone(), &tr, &va, &short(), 5, |_| {}).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(log_csv(&r1), log_csv(&r2));
    assert_ne!(p1, ps);
    let (p3, _) = train(&net, ps, &tr, &va, &short(), 6, |_| {}).unwrap();
    assert_ne!(p1, p3);
    let csv = log_csv(&r1);
    assert!(csv.starts_with("epoch,loss,val_dice_macro,dice_c0,dice_c1,dice_c2\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(timing_csv(&r1).starts_with("epoch,wall_seconds\n"));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (net, ps) = tiny();
    let (tr, va) = data();
    let cfg = TrainConfig { lr: 0.0, ..short() };
    assert!(cfg.validate().is_err());
    let mut opt = AdamW::new(&ps, 0.0, [0.9, 0.999], 1e-8, 1e-2);
    let mut grads = Grads::zeros_like(&ps);
    let mut p = ps.clone();
    for s in tr.iter().chain(&va) {
        batch_gradient(&net, &p, &[s], &mut grads).unwrap();
        assert!(!grads.all_zero());
        opt.step(&mut p, &grads).unwrap();
    }
    assert_eq!(p, ps);
}

#[test]
fn non_finite_parameters_name_the_first_layer() {
    let (net, mut ps) = tiny();
    let id = ps.find("ES3.h.in_x.w").unwrap();
    ps.get_mut(id).data_mut()[0] = f32::NAN;
    let (tr, va) = data();
    match train(&net, ps, &tr, &va, &short(), 0, |_| {}) {
        Err(Error::NonFinite { layer }) => assert_eq!(layer, "ES3.h"),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn evaluation_of_perfect_predictions() {
    let (_, va) = data();
    let reports: Vec<DiceReport> = va
        .iter()
        .map(|s| {
            let z = labels_as_logits::<f32>(&s.labels, [16; 3], 3).unwrap();
            dice_score(&argmax_labels(&z), &s.labels, 3).unwrap()
        })
        .collect();
    let m = DiceReport::mean(&reports).unwrap();
    assert_eq!(m.macro_fg, 1.0);
    assert_eq!(m.per_class, vec![1.0; 3]);
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let (net, mut ps) = tiny();
    let (tr, _) = data();
    let batch: Vec<&Sample> = tr.iter().take(2).collect();
    let mut grads = Grads::zeros_like(&ps);
    let mut opt = AdamW::new(&ps, 1e-2, [0.9, 0.999], 1e-8, 0.0);
    let first = batch_gradient(&net, &ps, &batch, &mut grads).unwrap();
    let mut last = first;
    for _ in 0..15 {
        opt.step(&mut ps, &grads).unwrap();
        last = batch_gradient(&net, &ps, &batch, &mut grads).unwrap();
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn smoothing_helpers() {
    assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
    assert!(moving_average(&[1.0], 2).is_empty());
    assert!(non_increasing(&[3.0, 3.0, 1.0]));
    assert!(!non_increasing(&[3.0, 3.5]));
}
