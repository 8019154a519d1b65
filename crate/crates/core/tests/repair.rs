use ar2_core::cam::{cam_alignment_loss, CamLossConfig};
use ar2_core::corrupt::CorruptionKind;
use ar2_core::data::{synthetic_shapes, Dataset, ShapeConfig};
use ar2_core::model::{HEAD_BIAS, HEAD_WEIGHT};
use ar2_core::repair::{
    ar2_repair, finetune_only_baseline, finetune_step, refine_step, Perturbation, RepairConfig, RepairError, Stage,
};
use ar2_core::{build_camnet, CamNet, SgdState, Tensor, WidthConfig};

const GN3: Perturbation = Perturbation::Corrupt {
    kind: CorruptionKind::GaussianNoise,
    severity: 3,
};

fn shapes(n: usize) -> Dataset {
    synthetic_shapes(n, 77, &ShapeConfig::default())
}

fn net(data: &Dataset, width: WidthConfig, seed: u64) -> CamNet<f32> {
    build_camnet(data.input_shape(), data.classes(), width, seed).unwrap()
}

fn head_bits(model: &CamNet<f32>) -> Vec<u32> {
    [HEAD_WEIGHT, HEAD_BIAS]
        .iter()
        .flat_map(|n| model.param(n).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn backbone_bits(model: &CamNet<f32>) -> Vec<u32> {
    model
        .named_params()
        .filter(|(n, _)| n.starts_with("conv"))
        .flat_map(|(_, p)| p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn tiny_cfg() -> RepairConfig {
    let mut cfg = RepairConfig::cifar();
    cfg.iterations = 3;
    cfg.refine_steps = 2;
    cfg.finetune_steps = 1;
    cfg.batch_size = 8;
    cfg.seed = 5;
    cfg
}

#[test]
fn refinement_descends_on_the_desk_net() {
    let data = shapes(32);
    let reference = net(&data, WidthConfig::desk(), 3);
    let mut model = reference.clone();
    let idx: Vec<usize> = (0..16).collect();
    let (x, _) = data.batch(&idx);
    let xp = GN3.apply(&x, &idx, 11).unwrap();
    let loss_cfg = CamLossConfig::new(3, 1.0).unwrap();
    let mut opt = SgdState::new(1e-3, RepairConfig::cifar().momentum).unwrap();

    let mut losses = Vec::new();
    for _ in 0..20 {
        losses.push(refine_step(&mut model, &reference, &x, &xp, &loss_cfg, &mut opt).unwrap());
    }
    losses.push(cam_alignment_loss(&model, &reference, &x, &xp, &loss_cfg).unwrap() as f32);
    let descending = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(losses[0] > 0.0);
    assert!(descending >= 18, "{descending}/20 non-increasing: {losses:?}");
}

#[test]
fn refine_step_never_touches_the_head() {
    let data = shapes(8);
    let reference = net(&data, WidthConfig::tiny(), 1);
    let mut model = reference.clone();
    let idx: Vec<usize> = (0..8).collect();
    let (x, _) = data.batch(&idx);
    let xp = GN3.apply(&x, &idx, 2).unwrap();
    let mut opt = SgdState::new(1e-2, 0.9).unwrap();
    let head = head_bits(&model);
    let backbone = backbone_bits(&model);
    for _ in 0..3 {
        refine_step(&mut model, &reference, &x, &xp, &CamLossConfig::new(3, 1.0).unwrap(), &mut opt).unwrap();
    }
    assert_eq!(head_bits(&model), head);
    assert_ne!(backbone_bits(&model), backbone);
}

#[test]
fn identity_refinement_from_the_reference_is_a_fixed_point() {
    let data = shapes(8);
    let reference = net(&data, WidthConfig::tiny(), 4);
    let mut model = reference.clone();
    let idx: Vec<usize> = (0..8).collect();
    let (x, _) = data.batch(&idx);
    let xp = Perturbation::Identity.apply(&x, &idx, 0).unwrap();
    let mut opt = SgdState::new(1e-2, 0.9).unwrap();
    let loss = refine_step(&mut model, &reference, &x, &xp, &CamLossConfig::new(3, 1.0).unwrap(), &mut opt).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(model.content_hash(), reference.content_hash());
}

#[test]
fn finetune_loss_vanishes_at_margin_100() {
    let data = shapes(8);
    let mut model = net(&data, WidthConfig::tiny(), 2);
    let classes = data.classes();
    for v in model.param_mut(HEAD_WEIGHT).unwrap().data_mut() {
        *v = 0.0;
    }
    let bias = model.param_mut(HEAD_BIAS).unwrap().data_mut();
    bias.iter_mut().for_each(|b| *b = 0.0);
    bias[4] = 100.0;
    let idx: Vec<usize> = (0..8).collect();
    let (x, _) = data.batch(&idx);
    let xp = GN3.apply(&x, &idx, 9).unwrap();
    let labels = vec![4; 8];
    let mut opt = SgdState::new(0.0, 0.9).unwrap();
    let before = model.content_hash();
    let loss = finetune_step(&mut model, &x, &xp, &labels, &mut opt).unwrap();
    assert!(loss < 1e-6, "{loss}");
    assert!(loss >= 0.0);
    assert_eq!(model.content_hash(), before, "zero learning rate must not move anything");
    assert_eq!(classes, 10);
}

#[test]
fn finetune_step_moves_the_head() {
    let data = shapes(8);
    let mut model = net(&data, WidthConfig::tiny(), 6);
    let idx: Vec<usize> = (0..8).collect();
    let (x, labels) = data.batch(&idx);
    let xp = GN3.apply(&x, &idx, 9).unwrap();
    let head = head_bits(&model);
    let mut opt = SgdState::new(1e-2, 0.0).unwrap();
    let loss = finetune_step(&mut model, &x, &xp, &labels, &mut opt).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_ne!(head_bits(&model), head);
}

#[test]
fn finetune_loss_is_the_mean_of_clean_and_corrupted_cross_entropy() {
    let data = shapes(6);
    let mut model = net(&data, WidthConfig::tiny(), 8);
    let idx: Vec<usize> = (0..6).collect();
    let (x, labels) = data.batch(&idx);
    let xp = GN3.apply(&x, &idx, 1).unwrap();
    let ce = |m: &CamNet<f32>, t: &Tensor<f32>| -> f64 {
        let (logits, _) = m.forward(t).unwrap();
        let c = logits.shape()[1];
        logits
            .data()
            .chunks(c)
            .zip(&labels)
            .map(|(row, &y)| {
                let max = row.iter().cloned().fold(f32::MIN, f32::max) as f64;
                let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
                lse - row[y] as f64
            })
            .sum::<f64>()
            / labels.len() as f64
    };
    let expected = 0.5 * (ce(&model, &x) + ce(&model, &xp));
    let got = finetune_step(&mut model, &x, &xp, &labels, &mut SgdState::new(0.0, 0.0).unwrap()).unwrap();
    assert!((got as f64 - expected).abs() < 1e-5, "{got} vs {expected}");
}

#[test]
fn zero_refinement_steps_are_rejected_before_any_work() {
    let data = shapes(16);
    let model = net(&data, WidthConfig::tiny(), 0);
    let mut cfg = tiny_cfg();
    cfg.iterations = 1;
    cfg.refine_steps = 0;
    assert!(matches!(ar2_repair(&model, &data, &cfg), Err(RepairError::Config(_))));
    cfg.refine_steps = 1;
    cfg.k = 0;
    assert!(matches!(ar2_repair(&model, &data, &cfg), Err(RepairError::Config(_))));
}

#[test]
fn schedule_log_and_determinism() {
    let data = shapes(24);
    let model = net(&data, WidthConfig::tiny(), 12);
    let cfg = tiny_cfg();
    let (a, run_a) = ar2_repair(&model, &data, &cfg).unwrap();
    let (b, run_b) = ar2_repair(&model, &data, &cfg).unwrap();
    assert_eq!(a.content_hash(), b.content_hash());
    let untimed = |r: &ar2_core::repair::RepairRun| -> Vec<(usize, Stage, usize, u64)> {
        r.log.iter().map(|e| (e.iteration, e.stage, e.step, e.loss.to_bits())).collect()
    };
    assert_eq!(untimed(&run_a), untimed(&run_b));
    assert_eq!(run_a.log.len(), cfg.iterations * (cfg.refine_steps + cfg.finetune_steps));
    let one = [Stage::Refine, Stage::Refine, Stage::Finetune];
    assert_eq!(run_a.stages(), one.repeat(cfg.iterations));
    assert_eq!(run_a.reference_hash, model.content_hash());
    assert_eq!(run_a.final_hash, a.content_hash());

    let mut quiet = |_: &ar2_core::repair::LogEntry| {};
    let (f1, ft_run) = finetune_only_baseline(&model, &data, &cfg, &mut quiet).unwrap();
    let (f2, _) = finetune_only_baseline(&model, &data, &cfg, &mut quiet).unwrap();
    assert_eq!(f1.content_hash(), f2.content_hash());
    assert_eq!(ft_run.stages(), vec![Stage::Finetune; cfg.iterations * cfg.finetune_steps]);
    assert_ne!(f1.content_hash(), a.content_hash());
}
