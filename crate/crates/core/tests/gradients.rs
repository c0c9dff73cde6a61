//! Finite-difference checks for every differentiable primitive and for the
//! end-to-end loss of each representation variant.
//!
//! The numeric side only runs forward passes, so these are independent of
//! the reverse-mode implementation they verify.

use std::collections::BTreeMap;

use objdrive_core::diffcore::{
    gradient_check_trials, CellWindow, Graph, NodeId, Tensor,
};
use objdrive_core::objectcentric::{RepresentationConfig, Variant};
use objdrive_core::perception::{BackboneConfig, BoundingBox, BoxClass, ImageTensor};
use objdrive_core::policy::{forward, Head, PolicyConfig};
use objdrive_core::seeding;
use rand::Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-5;
const TRIALS: usize = 100;

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Random tensor with entries in [-1, 1].
fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| uniform(rng, -1.0, 1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random tensor with magnitudes in [0.1, 1] and one sign for the whole
/// tensor. Dot products against such operands cannot cancel toward zero, so
/// per-coordinate finite differences stay far above the f64 noise floor,
/// while negative values still get exercised.
fn random_tensor_block_signed(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let data: Vec<f64> = (0..n).map(|_| sign * uniform(rng, 0.1, 1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random tensor with entries bounded away from zero, for relu-adjacent
/// sampling.
fn random_tensor_off_kink(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = uniform(rng, 0.05, 1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted mean against fixed coefficients, making the scalar output
/// sensitive to every coordinate of `x` while keeping |f| around 1 so the
/// finite-difference noise floor stays far below the tolerance.
fn weighted_sum(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let n = g.value(x).len();
    let mut rng = seeding::rng(seed);
    let coeffs: Vec<f64> = (0..n)
        .map(|_| uniform(&mut rng, 0.5, 2.0) / n as f64)
        .collect();
    let c = g.constant(Tensor::vector(coeffs)).unwrap();
    let c2 = g.reshape(c, &[1, n]).unwrap();
    let flat = g.reshape(x, &[n]).unwrap();
    let prod = g.matvec(c2, flat).unwrap();
    g.sum(prod).unwrap()
}

#[test]
fn relu_gradient() {
    let err = gradient_check_trials(
        |g, ids| {
            let r = g.relu(ids[0])?;
            Ok(weighted_sum(g, r, 7))
        },
        |trial| {
            let mut rng = seeding::rng_for(100, trial as u64);
            vec![random_tensor_off_kink(&mut rng, &[6])]
        },
        TRIALS,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "relu: {err}");
}

#[test]
fn matmul_gradient() {
    let err = gradient_check_trials(
        |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            Ok(weighted_sum(g, y, 8))
        },
        |trial| {
            let mut rng = seeding::rng_for(101, trial as u64);
            vec![
                random_tensor(&mut rng, &[3, 4]),
                random_tensor(&mut rng, &[4, 2]),
            ]
        },
        TRIALS,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "matmul: {err}");
}

#[test]
fn matvec_gradient() {
    let err = gradient_check_trials(
        |g, ids| {
            let y = g.matvec(ids[0], ids[1])?;
            Ok(weighted_sum(g, y, 9))
        },
        |trial| {
            let mut rng = seeding::rng_for(102, trial as u64);
            vec![
                random_tensor(&mut rng, &[3, 5]),
                random_tensor(&mut rng, &[5]),
            ]
        },
        TRIALS,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "matvec: {err}");
}

#[test]
fn conv2d_gradient_vs_finite_differences() {
    // Random 3x3 conv layer, checked over every parameter coordinate.
    let err = gradient_check_trials(
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
            Ok(weighted_sum(g, y, 10))
        },
        |trial| {
            let mut rng = seeding::rng_for(103, trial as u64);
            vec![
                random_tensor_block_signed(&mut rng, &[2, 6, 6]),
                random_tensor_block_signed(&mut rng, &[3, 2, 3, 3]),
                random_tensor_block_signed(&mut rng, &[3]),
            ]
        },
        TRIALS,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "conv2d: {err}");
}

#[test]
fn global_avg_pool_gradient() {
    let err = gradient_check_trials(
        |g, ids| {
            let y = g.global_avg_pool(ids[0])?;
            Ok(weighted_sum(g, y, 11))
        },
        |trial| {
            let mut rng = seeding::rng_for(104, trial as u64);
            vec![random_tensor(&mut rng, &[3, 4, 4])]
        },
        TRIALS,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "global_avg_pool: {err}");
}

#[test]
fn softmax_gradient() {
    let err = gradient_check_trials(
        |g, ids| {
            let y = g.softmax(ids[0])?;
            Ok(weighted_sum(g, y, 12))
        },
        |trial| {
            let mut rng = seeding::rng_for(105, trial as u64);
            vec![random_tensor(&mut rng, &[7])]
        },
        TRIALS,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "softmax: {err}");
}

#[test]
fn softmax_cross_entropy_gradient() {
    let err = gradient_check_trials(
        |g, ids| Ok(g.cross_entropy(ids[0], 3)?),
        |trial| {
            let mut rng = seeding::rng_for(106, trial as u64);
            vec![random_tensor(&mut rng, &[9])]
        },
        TRIALS,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "softmax+cross_entropy: {err}");
}

#[test]
fn scale_add_sum_gather_concat_gradients() {
    let err = gradient_check_trials(
        |g, ids| {
            let scaled = g.scale(ids[0], ids[1])?;
            let both = g.add(scaled, ids[2])?;
            let joined = g.concat(&[both, ids[1]])?;
            let picked = g.gather(joined, 2)?;
            let total = g.sum(joined)?;
            let mixed = g.add(picked, total)?;
            g.sum(mixed).map_err(Into::into)
        },
        |trial| {
            let mut rng = seeding::rng_for(107, trial as u64);
            vec![
                random_tensor(&mut rng, &[1]),
                random_tensor(&mut rng, &[5]),
                random_tensor(&mut rng, &[5]),
            ]
        },
        TRIALS,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "scale/add/sum/gather/concat: {err}");
}

#[test]
fn scalar_mul_reshape_gradient() {
    let err = gradient_check_trials(
        |g, ids| {
            let doubled = g.scalar_mul(ids[0], -1.75)?;
            let reshaped = g.reshape(doubled, &[2, 3])?;
            Ok(weighted_sum(g, reshaped, 13))
        },
        |trial| {
            let mut rng = seeding::rng_for(108, trial as u64);
            vec![random_tensor(&mut rng, &[6])]
        },
        TRIALS,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "scalar_mul/reshape: {err}");
}

#[test]
fn roi_pool_gradient_wrt_feature_map() {
    // Boxes fixed, map varies. Random values keep max-pool ties improbable.
    let err = gradient_check_trials(
        |g, ids| {
            let window = CellWindow {
                x0: 1,
                x1: 5,
                y0: 0,
                y1: 4,
            };
            let pooled = g.roi_pool_cells(ids[0], window, 2)?;
            Ok(weighted_sum(g, pooled, 14))
        },
        |trial| {
            let mut rng = seeding::rng_for(109, trial as u64);
            vec![random_tensor(&mut rng, &[3, 6, 6])]
        },
        TRIALS,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "roi_pool: {err}");
}

fn tiny_policy(variant: Variant) -> PolicyConfig {
    PolicyConfig {
        image: (3, 16, 16),
        backbone: BackboneConfig {
            in_channels: 3,
            widths: [2, 3, 4, 4],
        },
        rep: RepresentationConfig {
            variant,
            k: 2,
            bins: 2,
            selector_uses_global: true,
        },
        head: Head::Action9,
    }
}

fn test_image(seed: u64, dims: (usize, usize, usize)) -> ImageTensor {
    let mut rng = seeding::rng(seed);
    let mut img = ImageTensor::zeros(dims.0, dims.1, dims.2);
    for c in 0..dims.0 {
        for r in 0..dims.1 {
            for col in 0..dims.2 {
                img.set_pixel(c, r, col, uniform(&mut rng, 0.0, 1.0));
            }
        }
    }
    img
}

fn vehicle(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox {
        class: BoxClass::Vehicle,
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
    }
}

fn e2e_builder<'a>(
    cfg: &'a PolicyConfig,
    expected: &'a [(String, Vec<usize>)],
    image: &'a ImageTensor,
    boxes: &'a [BoundingBox],
    label: usize,
) -> impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId, objdrive_core::diffcore::DiffError> + 'a {
    move |g, ids| {
        let mut param_ids = BTreeMap::new();
        for ((name, _), &id) in expected.iter().zip(ids) {
            param_ids.insert(name.clone(), id);
        }
        let pass = forward(g, cfg, &param_ids, image, boxes).map_err(|e| match e {
            objdrive_core::policy::PolicyError::Diff(d) => d,
            other => panic!("unexpected: {other}"),
        })?;
        g.cross_entropy(pass.logits, label)
    }
}

/// End-to-end loss gradients for every variant, via directional probes
/// (the per-coordinate form drowns in the f64 noise floor on near-zero
/// coordinates of deep compositions). Three boxes with k = 2 exercises the
/// top-k selection path.
#[test]
fn end_to_end_loss_gradients_all_variants() {
    let boxes = [
        vehicle(1.0, 2.0, 7.0, 8.0),
        vehicle(8.0, 9.0, 15.0, 15.5),
        vehicle(3.0, 10.0, 6.0, 14.0),
    ];
    for variant in Variant::ALL {
        let cfg = tiny_policy(variant);
        let expected = cfg.expected_params();
        let init = cfg.init_params(42);
        let inputs: Vec<Tensor> = expected
            .iter()
            .map(|(name, _)| init.get(name).unwrap().clone())
            .collect();
        let image = test_image(5, cfg.image);
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
        let err = objdrive_core::diffcore::gradient_check_directional(
            e2e_builder(&cfg, &expected, &image, &boxes, 4),
            &inputs,
            |draw| {
                let mut rng = seeding::rng_for(777, draw as u64);
                shapes.iter().map(|s| random_tensor(&mut rng, s)).collect()
            },
            TRIALS,
            EPS,
            1e-3,
        )
        .unwrap();
        assert!(err < TOL, "{variant:?} end-to-end: {err}");
    }
}

/// Empty detection lists must still be differentiable end to end.
#[test]
fn end_to_end_gradient_with_no_detections() {
    let cfg = tiny_policy(Variant::SparseSum);
    let expected = cfg.expected_params();
    let init = cfg.init_params(43);
    let inputs: Vec<Tensor> = expected
        .iter()
        .map(|(name, _)| init.get(name).unwrap().clone())
        .collect();
    let image = test_image(6, cfg.image);
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let err = objdrive_core::diffcore::gradient_check_directional(
        e2e_builder(&cfg, &expected, &image, &[], 0),
        &inputs,
        |draw| {
            let mut rng = seeding::rng_for(778, draw as u64);
            shapes.iter().map(|s| random_tensor(&mut rng, s)).collect()
        },
        TRIALS,
        EPS,
        1e-3,
    )
    .unwrap();
    assert!(err < TOL, "no detections: {err}");
}

/// The learned selector must receive nonzero gradient for the learned-object
/// variants, and exactly none for the heuristic variant. Uses a wider
/// backbone than the FD checks: at very small widths a whole block can go
/// relu-dead at init, which genuinely (and correctly) zeroes its gradient.
#[test]
fn selector_gradients_by_variant() {
    // Boxes must land on distinct feature-map windows: if every box pools
    // the same cells, the features are identical and the softmax gradient is
    // correctly zero.
    let boxes = [
        vehicle(2.0, 2.0, 20.0, 20.0),
        vehicle(34.0, 40.0, 60.0, 62.0),
        vehicle(10.0, 44.0, 24.0, 58.0),
    ];
    for variant in [Variant::DenseSum, Variant::SparseSum, Variant::SparseConcat] {
        let mut cfg = tiny_policy(variant);
        cfg.image = (3, 64, 64);
        cfg.backbone.widths = [6, 8, 8, 8];
        let params = cfg.init_params(17);
        let mut g = Graph::new();
        let ids = params.bind(&mut g).unwrap();
        let image = test_image(9, cfg.image);
        let pass = forward(&mut g, &cfg, &ids, &image, &boxes).unwrap();
        let loss = g.cross_entropy(pass.logits, 2).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        let sel = grads.get("selector.w").expect("selector grad present");
        assert!(
            sel.data().iter().any(|&v| v != 0.0),
            "{variant:?}: selector gradient is all zero"
        );
        let backbone = grads.get("backbone.block0.w").unwrap();
        assert!(backbone.data().iter().any(|&v| v != 0.0));
        assert!(grads.get("head.w").unwrap().data().iter().any(|&v| v != 0.0));
    }

    // Heuristic: bind selector params anyway and confirm no gradient reaches
    // them (the loss simply never touches those leaves).
    let cfg = tiny_policy(Variant::HeuristicSparseSum);
    let mut params = cfg.init_params(18);
    let sel_len = cfg.rep.selector_input_len(&cfg.backbone);
    params.insert("selector.w", Tensor::zeros(&[sel_len]));
    params.insert("selector.b", Tensor::zeros(&[1]));
    let mut g = Graph::new();
    let ids = params.bind(&mut g).unwrap();
    let image = test_image(10, cfg.image);
    let pass = forward(&mut g, &cfg, &ids, &image, &boxes).unwrap();
    let loss = g.cross_entropy(pass.logits, 2).unwrap();
    g.backward(loss).unwrap();
    let grads = g.param_grads();
    assert!(
        grads.get("selector.w").is_none(),
        "heuristic variant must not route gradient to the selector"
    );
}
