//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! the reverse-mode code it is checking.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::DiffError;

/// Relative error as used everywhere in this crate's checks:
/// |a - n| / max(1e-12, |a| + |n|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Checks the gradient of a scalar-valued builder with respect to every
/// coordinate of every input, returning the max relative error.
///
/// `build` receives the inputs bound as `param` leaves and must return the
/// scalar output node. Central differences use the given `eps`, which must be
/// in (0, 1e-3].
pub fn gradient_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(DiffError::InvalidTensor(format!(
            "gradient_check eps must be in (0, 1e-3], got {eps}"
        )));
    }
    let run = |probes: &[Tensor]| -> Result<(Graph, NodeId), DiffError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = probes
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(&format!("x{i}"), t.clone()))
            .collect::<Result<_, _>>()?;
        let out = build(&mut g, &ids)?;
        if g.value(out).len() != 1 {
            return Err(DiffError::LossNotScalar {
                shape: g.value(out).shape().to_vec(),
            });
        }
        Ok((g, out))
    };

    let (mut graph, out) = run(inputs)?;
    graph.backward(out)?;
    let analytic: Vec<Tensor> = (0..inputs.len())
        .map(|i| {
            graph
                .param_grads()
                .remove(&format!("x{i}"))
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probes: Vec<Tensor> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for ci in 0..inputs[ti].len() {
            let orig = probes[ti].data()[ci];
            probes[ti].data_mut()[ci] = orig + eps;
            let (g_plus, out_plus) = run(&probes)?;
            let f_plus = g_plus.value(out_plus).item();
            probes[ti].data_mut()[ci] = orig - eps;
            let (g_minus, out_minus) = run(&probes)?;
            let f_minus = g_minus.value(out_minus).item();
            probes[ti].data_mut()[ci] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[ti].data()[ci], numeric));
        }
    }
    Ok(worst)
}

/// Directional finite-difference check: compares the analytic directional
/// derivative g.u against (f(x+eps*u) - f(x-eps*u)) / (2 eps) for random
/// unit directions u. This is the right tool for deep compositions, where
/// per-coordinate differences on near-zero gradient coordinates drown in the
/// f64 noise floor. Directions whose analytic derivative is below
/// `min_directional` carry no finite-difference signal at the given eps and
/// are resampled (bounded retries), mirroring the resample rule for
/// non-differentiable sample points.
pub fn gradient_check_directional<F, S>(
    build: F,
    inputs: &[Tensor],
    mut direction: S,
    trials: usize,
    eps: f64,
    min_directional: f64,
) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
    S: FnMut(usize) -> Vec<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(DiffError::InvalidTensor(format!(
            "gradient_check eps must be in (0, 1e-3], got {eps}"
        )));
    }
    let run = |probes: &[Tensor]| -> Result<(Graph, NodeId), DiffError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = probes
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(&format!("x{i}"), t.clone()))
            .collect::<Result<_, _>>()?;
        let out = build(&mut g, &ids)?;
        Ok((g, out))
    };
    let (mut graph, out) = run(inputs)?;
    if graph.value(out).len() != 1 {
        return Err(DiffError::LossNotScalar {
            shape: graph.value(out).shape().to_vec(),
        });
    }
    graph.backward(out)?;
    let grads: Vec<Tensor> = (0..inputs.len())
        .map(|i| {
            graph
                .param_grads()
                .remove(&format!("x{i}"))
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut draw = 0usize;
    let mut done = 0usize;
    let max_draws = trials * 20;
    while done < trials && draw < max_draws {
        let dir = direction(draw);
        draw += 1;
        let norm: f64 = dir
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let analytic: f64 = grads
            .iter()
            .zip(&dir)
            .flat_map(|(g, d)| g.data().iter().zip(d.data()))
            .map(|(gv, dv)| gv * dv / norm)
            .sum();
        if analytic.abs() < min_directional {
            continue; // below the finite-difference noise floor; resample
        }
        let shift = |sign: f64| -> Result<f64, DiffError> {
            let probes: Vec<Tensor> = inputs
                .iter()
                .zip(&dir)
                .map(|(x, d)| {
                    let data: Vec<f64> = x
                        .data()
                        .iter()
                        .zip(d.data())
                        .map(|(xv, dv)| xv + sign * eps * dv / norm)
                        .collect();
                    Tensor::new(x.shape().to_vec(), data)
                })
                .collect::<Result<_, _>>()?;
            let (g, out) = run(&probes)?;
            Ok(g.value(out).item())
        };
        let numeric = (shift(1.0)? - shift(-1.0)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic, numeric));
        done += 1;
    }
    if done < trials {
        return Err(DiffError::InvalidTensor(format!(
            "directional check exhausted retries: {done}/{trials} informative directions"
        )));
    }
    Ok(worst)
}

/// Repeats `gradient_check` over freshly sampled inputs and returns the max
/// error across trials. `sample` draws one input set per trial; it is also
/// the place to keep samples away from non-differentiable points (relu kinks,
/// max-pool ties), retrying internally if needed.
pub fn gradient_check_trials<F, S>(
    build: F,
    mut sample: S,
    trials: usize,
    eps: f64,
) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
    S: FnMut(usize) -> Vec<Tensor>,
{
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let inputs = sample(trial);
        worst = worst.max(gradient_check(&build, &inputs, eps)?);
    }
    Ok(worst)
}
