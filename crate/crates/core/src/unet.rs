//! Configurable regular U-Net assembled over [`Graph`].
//!
//! Layout for depth `d` and base width `b`:
//! encoder level `l` (0..d): two conv units to `b * 2^l` channels, then 2x2 max pool;
//! bottleneck: two conv units to `b * 2^d`;
//! decoder level `l` (d-1..=0): nearest upsample, conv unit to `b * 2^l`,
//! concat with the encoder skip, two conv units;
//! head: 3x3 conv to 4 channels followed by a channel softmax.
//! A conv unit is conv3x3, optional batchnorm, relu.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mask::LabelMask;
use crate::tensor::{Mode, Scalar, Tensor};

pub const NUM_CLASSES: usize = 4;
pub const INPUT_CHANNELS: usize = 3;
pub const VALID_DEPTHS: [usize; 3] = [2, 4, 6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of pooling stages.
    pub depth: usize,
    pub base_channels: usize,
    pub batchnorm: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            base_channels: 16,
            batchnorm: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !VALID_DEPTHS.contains(&self.depth) {
            return Err(Error::config(
                "depth",
                format!("{} (must be 2, 4, or 6)", self.depth),
            ));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels", "must be positive"));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Channel widths of the encoder levels followed by the bottleneck.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth).map(|l| self.base_channels << l).collect()
    }
}

#[derive(Clone, Debug)]
pub struct UNetModel {
    config: UNetConfig,
    graph: Graph<f32>,
    logits: NodeId,
}

const HEAD_GAIN: f64 = 0.1;

struct Builder<'a> {
    graph: Graph<f32>,
    rng: &'a mut ChaCha8Rng,
    batchnorm: bool,
}

impl Builder<'_> {
    fn conv(&mut self, x: NodeId, ci: usize, co: usize, name: &str, gain: f64) -> NodeId {
        let bound = gain * (6.0 / (ci * 9) as f64).sqrt();
        let weight: Vec<f32> = (0..co * ci * 9)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        let w = self.graph.add_param(
            format!("{name}.weight"),
            Tensor::new([co, ci, 3, 3], weight).expect("shape"),
            true,
        );
        let b = self
            .graph
            .add_param(format!("{name}.bias"), Tensor::zeros([co, 1, 1, 1]), true);
        self.graph.conv3x3(x, w, b)
    }

    fn unit(&mut self, x: NodeId, ci: usize, co: usize, name: &str, bn_name: &str) -> NodeId {
        let mut y = self.conv(x, ci, co, name, 1.0);
        if self.batchnorm {
            let s = self
                .graph
                .add_param(format!("{bn_name}.scale"), Tensor::full([co, 1, 1, 1], 1.0), true);
            let t = self
                .graph
                .add_param(format!("{bn_name}.shift"), Tensor::zeros([co, 1, 1, 1]), true);
            let m = self
                .graph
                .add_param(format!("{bn_name}.running_mean"), Tensor::zeros([co, 1, 1, 1]), false);
            let v = self
                .graph
                .add_param(format!("{bn_name}.running_var"), Tensor::full([co, 1, 1, 1], 1.0), false);
            y = self.graph.batchnorm(y, s, t, m, v);
        }
        self.graph.relu(y)
    }
}

/// Builds a freshly initialized model. Conv weights are drawn uniformly from
/// `±sqrt(6 / fan_in)`, biases start at zero. The head uses a tenth of that
/// bound so a fresh model predicts close to uniform class probabilities.
pub fn build_unet(config: UNetConfig, seed: u64) -> Result<UNetModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        graph: Graph::new(),
        rng: &mut rng,
        batchnorm: config.batchnorm,
    };
    let widths = config.widths();
    let mut x = b.graph.input();
    let mut ci = INPUT_CHANNELS;
    let mut skips = Vec::with_capacity(config.depth);
    for (l, &co) in widths.iter().take(config.depth).enumerate() {
        x = b.unit(x, ci, co, &format!("enc{l}.conv0"), &format!("enc{l}.bn0"));
        x = b.unit(x, co, co, &format!("enc{l}.conv1"), &format!("enc{l}.bn1"));
        skips.push(x);
        x = b.graph.maxpool2(x);
        ci = co;
    }
    let wb = widths[config.depth];
    x = b.unit(x, ci, wb, "mid.conv0", "mid.bn0");
    x = b.unit(x, wb, wb, "mid.conv1", "mid.bn1");
    ci = wb;
    for l in (0..config.depth).rev() {
        let co = widths[l];
        x = b.graph.upsample2(x);
        x = b.unit(x, ci, co, &format!("dec{l}.up"), &format!("dec{l}.upbn"));
        x = b.graph.concat(skips[l], x);
        x = b.unit(x, 2 * co, co, &format!("dec{l}.conv0"), &format!("dec{l}.bn0"));
        x = b.unit(x, co, co, &format!("dec{l}.conv1"), &format!("dec{l}.bn1"));
        ci = co;
    }
    let logits = b.conv(x, ci, NUM_CLASSES, "head", HEAD_GAIN);
    b.graph.softmax_channels(logits);
    Ok(UNetModel {
        config,
        graph: b.graph,
        logits,
    })
}

impl UNetModel {
    pub fn config(&self) -> UNetConfig {
        self.config
    }

    pub fn graph(&self) -> &Graph<f32> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<f32> {
        &mut self.graph
    }

    /// Node holding the pre-softmax class scores.
    pub fn logits_node(&self) -> NodeId {
        self.logits
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "expected {INPUT_CHANNELS} input channels, got {c}"
            )));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::SpatialSize {
                height: h,
                width: w,
                multiple: m,
            });
        }
        Ok(())
    }

    /// Per-pixel class probabilities, shape (n, 4, h, w).
    pub fn forward(&mut self, images: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        self.check_input(images.shape())?;
        self.graph.forward(std::slice::from_ref(images), mode)
    }

    /// Backpropagates a gradient given with respect to the logits.
    pub fn backward_logits(&mut self, grad: &Tensor<f32>) -> Result<()> {
        self.graph.backward_from(self.logits, grad)?;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.graph
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Snapshot of every parameter tensor (trainable and running statistics).
    pub fn snapshot(&self) -> Vec<Tensor<f32>> {
        self.graph.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor<f32>]) {
        assert_eq!(values.len(), self.graph.params().len());
        for (p, v) in self.graph.params_mut().iter_mut().zip(values) {
            p.value = v.clone();
        }
    }
}

/// Per-pixel argmax over the class axis; ties go to the lower class index.
pub fn predict_mask<T: Scalar>(probabilities: &Tensor<T>) -> Vec<LabelMask> {
    let [n, c, h, w] = probabilities.shape();
    let hw = h * w;
    (0..n)
        .map(|s| {
            let p = probabilities.sample(s);
            let labels = (0..hw)
                .map(|i| {
                    let mut best = 0;
                    for k in 1..c {
                        if p[k * hw + i] > p[best * hw + i] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMask::new(h, w, labels).expect("argmax is a valid label")
        })
        .collect()
}
