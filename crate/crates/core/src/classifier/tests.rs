use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gaussian rows; INACCURATE rows (rate 0.3) are shifted along one axis.
fn synthetic(n: usize, d: usize, shift: f32, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let bad = rng.gen_bool(0.3);
        for j in 0..d {
            let z: f32 = rng.sample(StandardNormal);
            features.push(if bad && j == 0 { z + shift } else { z });
        }
        labels.push(if bad { TokenLabel::Inaccurate } else { TokenLabel::Accurate });
    }
    Dataset::new(d, features, labels).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 8,
        batch_size: 64,
        hidden: vec![16, 8],
        folds: 3,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn learns_a_separable_signal() {
    let data = synthetic(1500, 6, 8.0, 1);
    let (ens, report) = train(&data, FeatureMode::Diff, &small_config()).unwrap();
    assert_eq!(ens.members.len(), 3);
    assert_eq!(report.splits, SplitSizes { train: 900, val: 300, test: 300 });
    assert!(report.test.inaccurate.f1.unwrap() > 0.95, "{}", report.test);
    for h in &report.folds {
        assert_eq!(h.train_loss.len(), 8);
        assert!(h.lr.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn training_is_deterministic() {
    let data = synthetic(600, 4, 3.0, 2);
    let cfg = TrainConfig {
        epochs: 3,
        ..small_config()
    };
    let a = train(&data, FeatureMode::X1Only, &cfg).unwrap();
    let b = train(&data, FeatureMode::X1Only, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn shuffled_labels_fall_back_to_majority() {
    let mut data = synthetic(1500, 6, 8.0, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    rand::seq::SliceRandom::shuffle(data.labels.as_mut_slice(), &mut rng);
    let (_, report) = train(&data, FeatureMode::Diff, &small_config()).unwrap();
    let c = report.test.confusion;
    let majority = (c.accurate_as_accurate + c.accurate_as_inaccurate) as f64 / c.total() as f64;
    assert!((report.test.accuracy - majority).abs() <= 0.03, "{} vs {majority}", report.test.accuracy);
}

#[test]
fn one_class_is_rejected() {
    let mut data = synthetic(300, 3, 1.0, 5);
    data.labels.iter_mut().for_each(|l| *l = TokenLabel::Accurate);
    assert!(matches!(train(&data, FeatureMode::Diff, &small_config()), Err(ClassifierError::Input(_))));
}

#[test]
fn non_finite_features_report_the_epoch() {
    let mut data = synthetic(300, 3, 1.0, 6);
    data.features[5] = f32::NAN;
    match train(&data, FeatureMode::Diff, &small_config()) {
        Err(ClassifierError::Training { epoch, .. }) => assert_eq!(epoch, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bad_configs_rejected() {
    let bad = [
        TrainConfig { split: [0.5, 0.2, 0.2], ..TrainConfig::default() },
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { folds: 1, ..TrainConfig::default() },
        TrainConfig { hidden: vec![], ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    assert!(TrainConfig::default().validate().is_ok());
}

fn random_member(seed: u64) -> Mlp<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Mlp::<f32>::new(4, &[8, 4], 0.5, &mut rng);
    for l in &mut m.layers {
        if let Some(bn) = &mut l.bn {
            bn.running_mean.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            bn.running_var.mapv_inplace(|_| rng.gen_range(0.5..2.0));
        }
    }
    m
}

#[test]
fn identical_members_match_single_model() {
    let m = random_member(7);
    let one = MlpEnsemble::new(FeatureMode::Diff, vec![0.0; 4], vec![1.0; 4], vec![m.clone()]).unwrap();
    let three = MlpEnsemble::new(FeatureMode::Diff, vec![0.0; 4], vec![1.0; 4], vec![m.clone(), m.clone(), m]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<f32> = (0..400).map(|_| rng.sample::<f32, _>(StandardNormal) * 3.0).collect();
    assert_eq!(one.predict(&x).unwrap(), three.predict(&x).unwrap());
}

#[test]
fn model_file_round_trip() {
    let ens = MlpEnsemble::new(
        FeatureMode::X2Only,
        vec![0.1, -0.2, 0.3, 0.0],
        vec![1.0, 2.0, 0.5, 1.0],
        vec![random_member(1), random_member(2)],
    )
    .unwrap();
    let json = serde_json::to_string(&ens.to_file()).unwrap();
    let back = MlpEnsemble::from_file(&serde_json::from_str(&json).unwrap()).unwrap();
    assert_eq!(back, ens);

    let mut f = ens.to_file();
    f.members[0].layers[1].shape = [3, 4];
    assert!(matches!(MlpEnsemble::from_file(&f), Err(ClassifierError::Format(_))));
}

#[test]
fn classify_uses_the_feature_mode() {
    let m = random_member(3);
    let ens = MlpEnsemble::new(FeatureMode::Diff, vec![0.0; 4], vec![1.0; 4], vec![m]).unwrap();
    let p = crate::protocol::HiddenStatePair {
        x1: vec![1.0, 2.0, 3.0, 4.0],
        x2: vec![0.5, 0.5, 0.5, 0.5],
        position: 0,
        token_id: 0,
    };
    let direct = ens.predict(&p.delta()).unwrap();
    assert_eq!(ens.classify(&[p]).unwrap(), direct);
    assert_eq!(AlwaysAccurate.classify(&[]).unwrap(), []);
}
