//! Central finite-difference check of analytic gradients, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::loss::Loss;
use crate::mask::LabelMask;
use crate::tensor::{Mode, Tensor};
use crate::unet::{build_unet, UNetConfig, INPUT_CHANNELS, NUM_CLASSES};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            tolerance: 1e-3,
            mode: Mode::Train,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    fn new(entries: Vec<GradCheckEntry>, tolerance: f64) -> Self {
        let max_relative_error = entries
            .iter()
            .map(|e| e.max_relative_error)
            .fold(0.0, f64::max);
        Self {
            entries,
            max_relative_error,
            tolerance,
            pass: max_relative_error < tolerance,
        }
    }
}

/// Gradients smaller than this are compared in absolute terms. Central
/// differences of an O(1) loss with epsilon 1e-6 carry a few 1e-10 of
/// rounding noise, and some true gradients (biases feeding a batchnorm) are
/// exactly zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the analytic gradient of `loss_fn(graph(inputs))` against central
/// differences for every trainable parameter entry and every input entry.
///
/// `loss_fn` receives the graph output and returns the loss together with its
/// gradient with respect to the activation of `grad_node` (the output node for
/// ordinary losses, the logits node for losses fused with the final softmax).
pub fn grad_check<L>(
    graph: &mut Graph<f64>,
    inputs: &[Tensor<f64>],
    grad_node: NodeId,
    loss_fn: L,
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    let out = graph.forward(inputs, options.mode)?;
    let (_, upstream) = loss_fn(&out)?;
    let input_grads = graph.backward_from(grad_node, &upstream)?;
    let param_grads: Vec<(usize, Tensor<f64>)> = graph
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, p)| (i, p.grad.clone()))
        .collect();
    let eps = options.epsilon;
    let mut entries = Vec::new();

    let eval = |graph: &mut Graph<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let out = graph.forward(inputs, options.mode)?;
        Ok(loss_fn(&out)?.0)
    };

    for (pid, analytic) in &param_grads {
        let mut worst = 0.0f64;
        for k in 0..analytic.len() {
            let orig = graph.params()[*pid].value.data()[k];
            graph.params_mut()[*pid].value.data_mut()[k] = orig + eps;
            let plus = eval(graph, inputs)?;
            graph.params_mut()[*pid].value.data_mut()[k] = orig - eps;
            let minus = eval(graph, inputs)?;
            graph.params_mut()[*pid].value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
        entries.push(GradCheckEntry {
            name: graph.params()[*pid].name.clone(),
            max_relative_error: worst,
        });
    }

    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (slot, analytic) in input_grads.iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..analytic.len() {
            let orig = probe[slot].data()[k];
            probe[slot].data_mut()[k] = orig + eps;
            let plus = eval(graph, &probe)?;
            probe[slot].data_mut()[k] = orig - eps;
            let minus = eval(graph, &probe)?;
            probe[slot].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
        entries.push(GradCheckEntry {
            name: format!("input{slot}"),
            max_relative_error: worst,
        });
    }

    Ok(GradCheckReport::new(entries, options.tolerance))
}

/// Checks a freshly built U-Net (cast to `f64`) under `loss` on a random
/// batch of `size`x`size` images with random labels.
pub fn unet_grad_check(
    config: UNetConfig,
    loss: &Loss,
    size: usize,
    batch: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let model = build_unet(config, seed)?;
    model.check_input([batch, INPUT_CHANNELS, size, size])?;
    let mut graph = model.graph().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C0C);
    // Move off the zero-bias initialization so no ReLU sits exactly on its kink.
    for p in graph.params_mut().iter_mut().filter(|p| p.trainable && p.value.shape()[1..] == [1, 1, 1]) {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let x = Tensor::from_fn([batch, INPUT_CHANNELS, size, size], |_| rng.random_range(0.0..1.0));
    let labels: Vec<LabelMask> = (0..batch)
        .map(|_| {
            let l = (0..size * size).map(|_| rng.random_range(0..NUM_CLASSES as u8)).collect();
            LabelMask::new(size, size, l)
        })
        .collect::<Result<_>>()?;
    grad_check(
        &mut graph,
        &[x],
        model.logits_node(),
        |probs| loss.evaluate(probs, &labels),
        GradCheckOptions::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_on_identity_graph() {
        let mut g = Graph::<f64>::new();
        let x = g.input();
        let out = g.relu(x);
        let input = Tensor::from_fn([1, 1, 3, 3], |[_, _, y, x]| 0.5 + (y * 3 + x) as f64 * 0.25);
        let report = grad_check(
            &mut g,
            &[input],
            out,
            |t| Ok((t.data().iter().map(|v| v * v).sum(), t.map(|v| 2.0 * v))),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
    }
}
