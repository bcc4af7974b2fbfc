//! Property tests for the two architectural guarantees: attribution
//! equivalence at the deepest layer, and bounded increment through depth.

mod common;

use common::seeded;
use facnn::interpret::{
    audit_bounded_increment, fa_attribution, gradcam_oracle, gradcam_oracle_full, pearson,
    rescale_stack,
};
use facnn::model::{FaModel, HeadKind, ModelConfig};
use facnn::tensor::Tensor;
use facnn::SkipKind;
use rand::Rng;

fn small_config(num_layers: usize, channels: usize, pool_after: Vec<usize>, seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers,
        channels,
        num_classes: 10,
        input_channels: 1,
        input_height: 16,
        input_width: 16,
        pool_after,
        head: HeadKind::Pooling,
        skip: SkipKind::Dampened,
        seed,
    }
}

#[test]
fn deepest_layer_attribution_equals_gradient_cam_up_to_scale() {
    for (layers, pools) in [(3usize, vec![]), (8usize, vec![4])] {
        let model = FaModel::new(small_config(layers, 20, pools, 3)).unwrap();
        let ownership = model.config.channel_ownership();
        let mut rng = seeded(4);
        for img_i in 0..5 {
            let image = Tensor::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
            let (_, features) = model.forward(&image, true).unwrap();
            let features = features.unwrap();
            for class in 0..10 {
                let fa = fa_attribution(&features, 0, layers, class, &ownership).unwrap();
                let oracle = gradcam_oracle(&model, &image, class, layers).unwrap();
                let r = pearson(&fa.values, &oracle.values);
                assert!(
                    r >= 1.0 - 1e-6,
                    "layers {layers} image {img_i} class {class}: correlation {r}"
                );

                // positive-scale equality: the ratio is constant over
                // every pixel where both maps are nonzero
                let mut reference = None;
                for (a, b) in fa.values.iter().zip(&oracle.values) {
                    if *a > 0.0 && *b > 0.0 {
                        let ratio = b / a;
                        let r0 = *reference.get_or_insert(ratio);
                        assert!(
                            (ratio - r0).abs() <= 1e-4 * r0.abs(),
                            "ratio drift: {ratio} vs {r0}"
                        );
                    } else {
                        // zero pixels must agree exactly
                        assert_eq!(*a == 0.0, *b == 0.0);
                    }
                }
                let r0 = reference.expect("all-zero attribution map");
                assert!(r0 > 0.0);
            }
        }
    }
}

#[test]
fn pooling_head_alphas_are_uniform_on_owned_channels() {
    let model = FaModel::new(small_config(4, 20, vec![2], 9)).unwrap();
    let mut rng = seeded(10);
    let image = Tensor::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
    let ownership = model.config.channel_ownership();
    for class in [0usize, 7] {
        let result = gradcam_oracle_full(&model, &image, class, 4).unwrap();
        let owned_alpha = result.alphas[class * 2];
        assert!(owned_alpha > 0.0);
        for (k, &alpha) in result.alphas.iter().enumerate() {
            if ownership[k] == class {
                assert_eq!(alpha, owned_alpha, "channel {k} should share the owned weight");
            } else {
                assert_eq!(alpha, 0.0, "channel {k} belongs to another class");
            }
        }
    }
}

#[test]
fn gradient_cam_runs_on_linear_head_models() {
    let mut cfg = small_config(3, 20, vec![], 5);
    cfg.head = HeadKind::Linear;
    let model = FaModel::new(cfg).unwrap();
    let mut rng = seeded(6);
    let image = Tensor::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
    for layer in 1..=3 {
        let map = gradcam_oracle(&model, &image, 2, layer).unwrap();
        assert!(map.is_all_finite());
        assert!(map.values.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn bounded_increment_holds_for_random_dampened_models() {
    let mut rng = seeded(7);
    for case in 0..25 {
        let layers = *[4usize, 8, 12].get(case % 3).unwrap();
        let classes = *[2usize, 5].get(case % 2).unwrap();
        let channels = classes * rng.gen_range(1..=3);
        let pools = match case % 3 {
            0 => vec![],
            1 => vec![layers / 2],
            _ => vec![layers / 4, layers / 2],
        };
        let cfg = ModelConfig {
            num_layers: layers,
            channels,
            num_classes: classes,
            input_channels: 1,
            input_height: 16,
            input_width: 16,
            pool_after: pools,
            head: HeadKind::Pooling,
            skip: SkipKind::Dampened,
            seed: 1000 + case as u64,
        };
        let model = FaModel::new(cfg).unwrap();
        let image = Tensor::rand_uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut rng);
        let (_, features) = model.forward(&image, true).unwrap();
        let stack = rescale_stack(&features.unwrap(), layers).unwrap();
        let report = audit_bounded_increment(&stack);
        assert!(report.pass, "case {case}: {report}");
        assert_eq!(report.per_layer_steps.len(), layers);
    }
}

#[test]
fn audit_reports_vanilla_skip_steps_faithfully() {
    // the vanilla skip has no bound; the auditor must still report the
    // measured maximum step exactly as a brute-force recomputation sees it
    let cfg = ModelConfig {
        num_layers: 6,
        channels: 8,
        num_classes: 2,
        input_channels: 1,
        input_height: 8,
        input_width: 8,
        pool_after: vec![3],
        head: HeadKind::Pooling,
        skip: SkipKind::Vanilla,
        seed: 77,
    };
    let model = FaModel::new(cfg).unwrap();
    let mut rng = seeded(8);
    let image = Tensor::rand_uniform(&[3, 1, 8, 8], 0.0, 1.0, &mut rng);
    let (_, features) = model.forward(&image, true).unwrap();
    let stack = rescale_stack(&features.unwrap(), 6).unwrap();
    let report = audit_bounded_increment(&stack);

    let mut brute_max = 0.0f32;
    for l in 1..stack.tensors.len() {
        let a = &stack.tensors[l - 1];
        let b = &stack.tensors[l];
        for (x, y) in a.data().iter().zip(b.data()) {
            brute_max = brute_max.max((x - y).abs());
        }
    }
    assert_eq!(report.max_step, brute_max);
}

#[test]
fn rescaled_stack_endpoint_stays_in_unit_range() {
    // at L = N_L the range bound is delta * N_L = 1
    let model = FaModel::new(small_config(8, 20, vec![4], 21)).unwrap();
    let mut rng = seeded(22);
    let image = Tensor::rand_uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut rng);
    let (_, features) = model.forward(&image, true).unwrap();
    let stack = rescale_stack(&features.unwrap(), 8).unwrap();
    let last = stack.tensors.last().unwrap();
    let max = last.data().iter().fold(0.0f32, |a, &b| a.max(b));
    let min = last.data().iter().fold(f32::INFINITY, |a, &b| a.min(b));
    assert!(max <= 1.0 + 1e-6, "max {max}");
    assert!(min >= 0.0, "min {min}");
}
