//! Oracles and harnesses shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use cfuseg::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use cfuseg::graph::Graph;
use cfuseg::mask::{ColonyKind, LabelMask};
use cfuseg::tensor::{maxpool2, Scalar, Tensor};
use cfuseg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor<T: Scalar>(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)))
}

/// Direct six-loop 3x3 "same" convolution in f64.
pub fn conv_oracle<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    let [n, ci, h, wd] = x.shape();
    let co = w.shape()[0];
    let mut out = vec![0.0; n * co * h * wd];
    for s in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[o].as_f64();
                    for i in 0..ci {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let yy = y as isize + dy as isize - 1;
                                let xs = xx as isize + dx as isize - 1;
                                if yy < 0 || xs < 0 || yy >= h as isize || xs >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, i, dy, dx).as_f64() * x.at(s, i, yy as usize, xs as usize).as_f64();
                            }
                        }
                    }
                    out[((s * co + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

/// Window scan; returns maxima and the flat index of each window's first maximum.
pub fn maxpool_oracle(x: &Tensor<f32>) -> (Vec<f32>, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    let (mut vals, mut idx) = (Vec::new(), Vec::new());
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut best = f32::NEG_INFINITY;
                    let mut at = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                            if x.at(s, ch, y, xx) > best {
                                best = x.at(s, ch, y, xx);
                                at = x.offset(s, ch, y, xx);
                            }
                        }
                    }
                    vals.push(best);
                    idx.push(at);
                }
            }
        }
    }
    (vals, idx)
}

/// Runs the conv and maxpool oracles on `cases` random shapes each; returns
/// the largest absolute deviation seen and whether every argmax agreed. The
/// convolution runs in f64 so the comparison measures indexing, not f32
/// accumulation order.
pub fn conv_and_pool_oracle_sweep(cases: usize, seed: u64) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut argmax_ok = true;
    for _ in 0..cases {
        let (n, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let x = random_tensor::<f64>([n, ci, h, w], &mut rng);
        let k = random_tensor::<f64>([co, ci, 3, 3], &mut rng);
        let b = random_tensor::<f64>([co, 1, 1, 1], &mut rng);
        let got = cfuseg::tensor::conv3x3(&x, &k, &b).unwrap();
        for (g, e) in got.data().iter().zip(conv_oracle(&x, &k, &b)) {
            worst = worst.max((g - e).abs());
        }
        let xp = random_tensor::<f32>([n, ci, 2 * (h / 2).max(1), 2 * (w / 2).max(1)], &mut rng);
        let (pooled, argmax) = maxpool2(&xp).unwrap();
        let (vals, idx) = maxpool_oracle(&xp);
        for (g, e) in pooled.data().iter().zip(&vals) {
            worst = worst.max((*g as f64 - *e as f64).abs());
        }
        argmax_ok &= argmax == idx;
    }
    (worst, argmax_ok)
}

/// Loss `sum(r * y)` with a fixed random `r`, so every output entry matters.
pub fn projection_loss(shape: [usize; 4], seed: u64) -> impl Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Tensor<f64> = random_tensor(shape, &mut rng);
    move |y: &Tensor<f64>| {
        let loss = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        Ok((loss, r.clone()))
    }
}

fn check_layer(
    name: &str,
    mut g: Graph<f64>,
    inputs: Vec<Tensor<f64>>,
    out_shape: [usize; 4],
    seed: u64,
) -> (String, GradCheckReport) {
    let out = g.output();
    let report = grad_check(&mut g, &inputs, out, projection_loss(out_shape, seed), GradCheckOptions::default())
        .expect("grad check runs");
    (name.to_string(), report)
}

/// Gradient check of every layer kind in isolation on 8x8 inputs.
pub fn layer_grad_checks(seed: u64) -> Vec<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, s) = (2, 3, 8);
    let x = |rng: &mut ChaCha8Rng| random_tensor::<f64>([n, c, s, s], rng);
    let mut out = Vec::new();

    let mut g = Graph::new();
    let i = g.input();
    let w = g.add_param("w", random_tensor([4, c, 3, 3], &mut rng), true);
    let b = g.add_param("b", random_tensor([4, 1, 1, 1], &mut rng), true);
    g.conv3x3(i, w, b);
    out.push(check_layer("conv3x3", g, vec![x(&mut rng)], [n, 4, s, s], seed));

    let mut g = Graph::new();
    let i = g.input();
    g.maxpool2(i);
    out.push(check_layer("maxpool2", g, vec![x(&mut rng)], [n, c, s / 2, s / 2], seed));

    let mut g = Graph::new();
    let i = g.input();
    g.upsample2(i);
    out.push(check_layer("upsample2", g, vec![x(&mut rng)], [n, c, 2 * s, 2 * s], seed));

    let mut g = Graph::new();
    let i = g.input();
    g.relu(i);
    out.push(check_layer("relu", g, vec![x(&mut rng)], [n, c, s, s], seed));

    let mut g = Graph::new();
    let i = g.input();
    let sc = g.add_param("scale", Tensor::from_fn([c, 1, 1, 1], |_| rng.random_range(0.5..1.5)), true);
    let sh = g.add_param("shift", random_tensor([c, 1, 1, 1], &mut rng), true);
    let m = g.add_param("running_mean", Tensor::zeros([c, 1, 1, 1]), false);
    let v = g.add_param("running_var", Tensor::full([c, 1, 1, 1], 1.0), false);
    g.batchnorm(i, sc, sh, m, v);
    out.push(check_layer("batchnorm", g, vec![x(&mut rng)], [n, c, s, s], seed));

    let mut g = Graph::new();
    let a = g.input();
    let b = g.input();
    g.concat(a, b);
    let other = random_tensor([n, 2, s, s], &mut rng);
    out.push(check_layer("concat", g, vec![x(&mut rng), other], [n, c + 2, s, s], seed));

    let mut g = Graph::new();
    let i = g.input();
    g.softmax_channels(i);
    out.push(check_layer("softmax_channels", g, vec![x(&mut rng)], [n, c, s, s], seed));

    out
}

/// A random mask over the four labels, biased towards colony labels so that
/// components of varied shapes appear.
pub fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> LabelMask {
    let labels = (0..h * w)
        .map(|_| match rng.random_range(0..10) {
            0..=2 => 0,
            3..=5 => 1,
            6..=8 => 2,
            _ => 3,
        })
        .collect();
    LabelMask::new(h, w, labels).unwrap()
}

fn fill(mask: &LabelMask, label: u8, seen: &mut [bool], y: usize, x: usize, out: &mut Vec<u32>) {
    let w = mask.width();
    let i = y * w + x;
    if seen[i] || mask.labels()[i] != label {
        return;
    }
    seen[i] = true;
    out.push(i as u32);
    if y > 0 {
        fill(mask, label, seen, y - 1, x, out);
    }
    if y + 1 < mask.height() {
        fill(mask, label, seen, y + 1, x, out);
    }
    if x > 0 {
        fill(mask, label, seen, y, x - 1, out);
    }
    if x + 1 < w {
        fill(mask, label, seen, y, x + 1, out);
    }
}

/// Recursive 4-connected flood fill; components sorted by their smallest pixel.
pub fn flood_fill_oracle(mask: &LabelMask, kind: ColonyKind) -> Vec<Vec<u32>> {
    let label = kind.class().label();
    let mut seen = vec![false; mask.labels().len()];
    let mut comps = Vec::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let mut c = Vec::new();
            fill(mask, label, &mut seen, y, x, &mut c);
            if !c.is_empty() {
                c.sort_unstable();
                comps.push(c);
            }
        }
    }
    comps.sort();
    comps
}

/// Number of random 16x16 masks on which `connected_components` disagrees
/// with the flood-fill oracle for either colony kind.
pub fn components_oracle_mismatches(masks: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..masks {
        let m = random_mask(16, 16, &mut rng);
        for kind in ColonyKind::ALL {
            let mut got: Vec<Vec<u32>> = cfuseg::evalkit::connected_components(&m, kind)
                .instances
                .into_iter()
                .map(|i| i.pixels)
                .collect();
            got.sort();
            if got != flood_fill_oracle(&m, kind) {
                bad += 1;
            }
        }
    }
    bad
}

/// Pixel indices of an axis-aligned rectangle on a canvas of width `w`.
pub fn rect(x0: usize, y0: usize, width: usize, height: usize, w: usize) -> Vec<u32> {
    let mut px: Vec<u32> = (y0..y0 + height)
        .flat_map(|y| (x0..x0 + width).map(move |x| (y * w + x) as u32))
        .collect();
    px.sort_unstable();
    px
}

/// IoU of two 2x2 squares sharing a 1x2 strip.
pub fn iou_square_fixture() -> f64 {
    cfuseg::evalkit::instance_iou(&rect(0, 0, 2, 2, 8), &rect(1, 0, 2, 2, 8))
}

/// Ground truth: one 10x5 bvg+ block. Prediction: a 31-pixel bvg+ blob
/// inside it, so the single pair has IoU 31/50 = 0.62.
pub fn iou_062_masks() -> (LabelMask, LabelMask) {
    let (h, w) = (8, 12);
    let mut gt = vec![0u8; h * w];
    let mut pred = vec![0u8; h * w];
    for p in rect(1, 1, 10, 5, w) {
        gt[p as usize] = 1;
    }
    for p in rect(1, 1, 6, 5, w) {
        pred[p as usize] = 1;
    }
    pred[w + 7] = 1;
    (LabelMask::new(h, w, pred).unwrap(), LabelMask::new(h, w, gt).unwrap())
}

pub fn map_062_fixture() -> f64 {
    let (pred, gt) = iou_062_masks();
    cfuseg::evalkit::mask_map(&[pred], &[gt]).unwrap()
}

pub struct OverfitRun {
    pub train_loss: Vec<f64>,
    pub accuracy: f64,
    pub seconds: f64,
}

/// Depth-2 U-Net trained on 4 realistic 64x64 images with the default
/// weighted cross-entropy, lr 1e-3, no augmentation.
pub fn overfit_run(epochs: usize, seed: u64) -> OverfitRun {
    use cfuseg::config::RunConfig;
    use cfuseg::dataset::synthesize;
    use cfuseg::dishgen::GeneratorParams;
    use cfuseg::train::{pixel_accuracy, train_fixed_epochs};

    let start = std::time::Instant::now();
    let data = synthesize(&GeneratorParams::realistic(64), 4, seed).expect("synthesize");
    let cfg = RunConfig {
        depth: 2,
        image_size: 64,
        batch_size: 4,
        lr: 1e-3,
        augment: false,
        seed,
        ..RunConfig::default()
    };
    let model = cfuseg::build_unet(cfg.unet(), seed).expect("model");
    let (mut model, history) = train_fixed_epochs(model, &data, epochs, &cfg).expect("training");
    let accuracy = pixel_accuracy(&mut model, &data, 4).expect("accuracy");
    OverfitRun {
        train_loss: history.train_loss,
        accuracy,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Whether every 20-epoch window ends no higher than 5% above where it began,
/// i.e. the loss trends down with only small single-epoch noise.
pub fn loss_trends_down(losses: &[f64]) -> bool {
    losses.windows(20).all(|w| w[19] <= w[0] * 1.05)
}
