use ar2_core::corrupt::CorruptionKind;
use ar2_core::data::{synthetic_shapes, Dataset, ShapeConfig};
use ar2_core::metrics::{
    clean_error, corruption_error, error_rate, evaluate, mce, Evaluator, EvalReport, MetricsError, TransferMatrix,
};
use ar2_core::model::{HEAD_BIAS, HEAD_WEIGHT};
use ar2_core::{build_camnet, CamNet, WidthConfig};
use proptest::prelude::*;

fn shapes(n: usize, seed: u64) -> Dataset {
    synthetic_shapes(n, seed, &ShapeConfig::default())
}

fn tiny(data: &Dataset, seed: u64) -> CamNet<f32> {
    build_camnet(data.input_shape(), data.classes(), WidthConfig::tiny(), seed).unwrap()
}

/// A network whose logits ignore the input and always favour `class`.
fn constant_class(data: &Dataset, class: usize) -> CamNet<f32> {
    let mut model = tiny(data, 0);
    model.param_mut(HEAD_WEIGHT).unwrap().data_mut().fill(0.0);
    let bias = model.param_mut(HEAD_BIAS).unwrap().data_mut();
    bias.fill(0.0);
    bias[class] = 1.0;
    model
}

#[test]
fn ce_matches_a_hand_summed_fixture() {
    // model:    0.12 + 0.18 + 0.25 + 0.31 + 0.44 = 1.30
    // baseline: 0.20 + 0.26 + 0.35 + 0.47 + 0.52 = 1.80
    // CE = 100 * 1.30 / 1.80 = 72.2222...
    let model = [0.12, 0.18, 0.25, 0.31, 0.44];
    let base = [0.20, 0.26, 0.35, 0.47, 0.52];
    let ce = corruption_error(CorruptionKind::Fog, &model, &base).unwrap();
    assert!((ce - 72.222_222_222_222_22).abs() < 1e-9, "{ce}");
}

#[test]
fn ce_of_half_errors_is_fifty_and_self_is_exactly_one_hundred() {
    let base = [0.3, 0.35, 0.41, 0.57, 0.66];
    let half = base.map(|e| e / 2.0);
    assert_eq!(corruption_error(CorruptionKind::GaussianNoise, &half, &base).unwrap(), 50.0);
    assert_eq!(corruption_error(CorruptionKind::GaussianNoise, &base, &base).unwrap(), 100.0);
    assert!(matches!(
        corruption_error(CorruptionKind::Snow, &base, &[0.0; 5]),
        Err(MetricsError::UndefinedCe { .. })
    ));
}

#[test]
fn mce_needs_every_kind() {
    let all: Vec<(CorruptionKind, f64)> = CorruptionKind::ALL.iter().map(|&k| (k, 64.5)).collect();
    assert_eq!(mce(&all).unwrap(), 64.5);
    assert!(matches!(mce(&all[1..]), Err(MetricsError::IncompleteMce(m)) if m == ["GN"]));
}

#[test]
fn clean_error_of_trivial_models() {
    let balanced = shapes(100, 3);
    assert!(balanced.class_counts().iter().all(|&c| c == 10));
    assert_eq!(clean_error(&constant_class(&balanced, 7), &balanced).unwrap(), 90.0);

    let fours: Vec<usize> = (0..balanced.len()).filter(|&i| balanced.labels()[i] == 4).collect();
    let only_fours = balanced.subset(&fours);
    assert_eq!(clean_error(&constant_class(&balanced, 4), &only_fours).unwrap(), 0.0);
    assert_eq!(clean_error(&constant_class(&balanced, 5), &only_fours).unwrap(), 100.0);
}

#[test]
fn error_rate_matches_a_per_sample_argmax_oracle() {
    let data = shapes(230, 8);
    for seed in 0..3 {
        let model = tiny(&data, seed);
        let mut wrong = 0;
        for i in 0..data.len() {
            let (x, labels) = data.batch(&[i]);
            let (logits, _) = model.forward(&x).unwrap();
            let row = logits.data();
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            wrong += usize::from(best != labels[0]);
        }
        assert_eq!(error_rate(&model, &data).unwrap(), wrong as f64 / data.len() as f64);
    }
}

#[test]
fn evaluating_a_model_against_itself_gives_ce_100_everywhere() {
    let data = shapes(30, 4);
    let model = tiny(&data, 9);
    let ev = Evaluator::new(&data, 0);
    let kinds = [CorruptionKind::GaussianNoise, CorruptionKind::Contrast, CorruptionKind::Jpeg];
    let report = evaluate(&ev, &model, Some(&model), &kinds).unwrap();
    for k in &report.kinds {
        assert_eq!(k.ce, Some(100.0), "{:?}", k.kind);
        assert!(k.errors.iter().all(|e| (0.0..=100.0).contains(e)));
    }
    assert_eq!(report.mce(), None);
    assert_eq!(EvalReport::from_text(&report.to_text()).unwrap(), report);
}

#[test]
fn transfer_matrix_of_unchanged_models_is_zero() {
    let data = shapes(20, 5);
    let vanilla = tiny(&data, 2);
    let ev = Evaluator::new(&data, 1);
    let models: Vec<(CorruptionKind, &CamNet<f32>)> = CorruptionKind::ALL.iter().rev().map(|&k| (k, &vanilla)).collect();
    let m = TransferMatrix::compute(&ev, &vanilla, &models, &CorruptionKind::ALL, true).unwrap();
    assert_eq!(m.rows, CorruptionKind::ALL.to_vec());
    assert_eq!(m.columns, CorruptionKind::ALL.to_vec());
    assert_eq!(m.values.len(), 15);
    for row in &m.values {
        assert_eq!(row.len(), 15);
        for v in row {
            assert!(matches!(v, Some(x) if *x == 0.0) || v.is_none());
        }
    }
    assert_eq!(TransferMatrix::from_csv(&m.to_csv()).unwrap(), m);

    let missing = &models[..14];
    assert!(matches!(
        TransferMatrix::compute(&ev, &vanilla, missing, &CorruptionKind::ALL, true),
        Err(MetricsError::MissingModel(k)) if k == "GN"
    ));
    let partial = TransferMatrix::compute(&ev, &vanilla, missing, &[CorruptionKind::Fog], false).unwrap();
    assert_eq!(partial.columns.len(), 14);
    assert_eq!(TransferMatrix::from_png(&partial.to_png().unwrap()).unwrap(), partial);
}

proptest! {
    #[test]
    fn ce_equals_the_summed_ratio(
        model in prop::array::uniform5(0.0f64..1.0),
        base in prop::array::uniform5(0.01f64..1.0),
    ) {
        let ce = corruption_error(CorruptionKind::Pixelate, &model, &base).unwrap();
        let oracle = 100.0 * (model[0] + model[1] + model[2] + model[3] + model[4])
            / (base[0] + base[1] + base[2] + base[3] + base[4]);
        prop_assert!((ce - oracle).abs() <= 1e-9 * oracle.max(1.0));
        prop_assert_eq!(corruption_error(CorruptionKind::Pixelate, &base, &base).unwrap(), 100.0);
    }

    #[test]
    fn mce_of_equal_values_is_that_value(v in 0.0f64..400.0) {
        let all: Vec<(CorruptionKind, f64)> = CorruptionKind::ALL.iter().map(|&k| (k, v)).collect();
        prop_assert!((mce(&all).unwrap() - v).abs() <= 1e-12 * v.max(1.0));
    }
}
