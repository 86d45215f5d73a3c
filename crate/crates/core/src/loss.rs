//! Class-imbalance aware segmentation losses. Both losses take post-softmax
//! probabilities and return the gradient with respect to the pre-softmax
//! logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::{Scalar, Tensor};
use crate::unet::NUM_CLASSES;

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub background: f64,
    pub bvg_plus: f64,
    pub bvg_minus: f64,
    pub border: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            background: 0.01,
            bvg_plus: 0.25,
            bvg_minus: 0.34,
            border: 0.4,
        }
    }
}

impl ClassWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            background: w,
            bvg_plus: w,
            bvg_minus: w,
            border: w,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.background, self.bvg_plus, self.bvg_minus, self.border]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        let keys = ["w_background", "w_bvg_plus", "w_bvg_minus", "w_border"];
        for (k, v) in keys.iter().zip(w) {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("{v} (must be a nonnegative number)")));
            }
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::config("w_background", "at least one class weight must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    WeightedCe,
    CeSoftDice,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::WeightedCe => "weighted_ce",
            LossKind::CeSoftDice => "ce_soft_dice",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "weighted_ce" => Ok(LossKind::WeightedCe),
            "ce_soft_dice" => Ok(LossKind::CeSoftDice),
            other => Err(format!("{other} (must be weighted_ce or ce_soft_dice)")),
        }
    }
}

/// A loss kind together with its weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loss {
    pub kind: LossKind,
    pub weights: ClassWeights,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for Loss {
    fn default() -> Self {
        Self {
            kind: LossKind::WeightedCe,
            weights: ClassWeights::default(),
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl Loss {
    pub fn evaluate<T: Scalar>(&self, probs: &Tensor<T>, labels: &[LabelMask]) -> Result<(f64, Tensor<T>)> {
        match self.kind {
            LossKind::WeightedCe => weighted_ce(probs, labels, &self.weights),
            LossKind::CeSoftDice => ce_soft_dice(probs, labels, self.alpha, self.beta),
        }
    }
}

fn check_labels<T: Scalar>(probs: &Tensor<T>, labels: &[LabelMask]) -> Result<()> {
    let [n, c, h, w] = probs.shape();
    if c != NUM_CLASSES {
        return Err(Error::Shape(format!("expected {NUM_CLASSES} class channels, got {c}")));
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: n,
        });
    }
    for m in labels {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match probabilities {h}x{w}",
                m.height(),
                m.width()
            )));
        }
        if let Some(&bad) = m.labels().iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidLabel(bad));
        }
    }
    Ok(())
}

fn clamp_log(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
}

/// `-(1/N) * sum_p w[y(p)] * ln prob[y(p)](p)` over all N pixels of the batch.
pub fn weighted_ce<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[LabelMask],
    weights: &ClassWeights,
) -> Result<(f64, Tensor<T>)> {
    check_labels(probs, labels)?;
    let [n, c, h, w] = probs.shape();
    let hw = h * w;
    let total = (n * hw) as f64;
    let wv = weights.as_array();
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(probs.shape());
    for (s, mask) in labels.iter().enumerate() {
        let p = probs.sample(s);
        let g = &mut grad.data_mut()[s * c * hw..(s + 1) * c * hw];
        for (i, &y) in mask.labels().iter().enumerate() {
            let y = y as usize;
            let wy = wv[y];
            loss -= wy * clamp_log(p[y * hw + i].as_f64());
            let scale = wy / total;
            for k in 0..c {
                let onehot = if k == y { 1.0 } else { 0.0 };
                g[k * hw + i] = T::of(scale * (p[k * hw + i].as_f64() - onehot));
            }
        }
    }
    Ok((loss / total, grad))
}

/// Soft DICE coefficient per class channel over the whole batch.
pub fn soft_dice_coefficients<T: Scalar>(probs: &Tensor<T>, labels: &[LabelMask]) -> Result<[f64; 4]> {
    check_labels(probs, labels)?;
    let (inter, psum, gsum) = dice_sums(probs, labels);
    Ok(std::array::from_fn(|k| {
        (2.0 * inter[k] + DICE_SMOOTHING) / (psum[k] + gsum[k] + DICE_SMOOTHING)
    }))
}

fn dice_sums<T: Scalar>(probs: &Tensor<T>, labels: &[LabelMask]) -> ([f64; 4], [f64; 4], [f64; 4]) {
    let [_, _, h, w] = probs.shape();
    let hw = h * w;
    let mut inter = [0.0; 4];
    let mut psum = [0.0; 4];
    let mut gsum = [0.0; 4];
    for (s, mask) in labels.iter().enumerate() {
        let p = probs.sample(s);
        for k in 0..NUM_CLASSES {
            psum[k] += p[k * hw..(k + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        for (i, &y) in mask.labels().iter().enumerate() {
            let y = y as usize;
            inter[y] += p[y * hw + i].as_f64();
            gsum[y] += 1.0;
        }
    }
    (inter, psum, gsum)
}

/// `alpha * CE + beta * mean_c (1 - D_c)` with unweighted CE and soft DICE
/// `D_c = (2 sum p_c g_c + 1) / (sum p_c + sum g_c + 1)`.
pub fn ce_soft_dice<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[LabelMask],
    alpha: f64,
    beta: f64,
) -> Result<(f64, Tensor<T>)> {
    if !(alpha >= 0.0 && beta >= 0.0) || (alpha == 0.0 && beta == 0.0) {
        return Err(Error::config(
            "alpha",
            format!("alpha={alpha}, beta={beta} (both nonnegative, not both zero)"),
        ));
    }
    check_labels(probs, labels)?;
    let [n, c, h, w] = probs.shape();
    let hw = h * w;
    let total = (n * hw) as f64;
    let (inter, psum, gsum) = dice_sums(probs, labels);
    let mut dice_loss = 0.0;
    // d(dice term)/d p_k(i) = coef_a[k] * g_k(i) + coef_b[k]
    let mut coef_a = [0.0; 4];
    let mut coef_b = [0.0; 4];
    for k in 0..NUM_CLASSES {
        let num = 2.0 * inter[k] + DICE_SMOOTHING;
        let den = psum[k] + gsum[k] + DICE_SMOOTHING;
        dice_loss += 1.0 - num / den;
        let scale = -beta / NUM_CLASSES as f64;
        coef_a[k] = scale * 2.0 / den;
        coef_b[k] = scale * (-num / (den * den));
    }
    let mut ce = 0.0;
    let mut grad = Tensor::zeros(probs.shape());
    let mut gp = [0.0f64; 4];
    for (s, mask) in labels.iter().enumerate() {
        let p = probs.sample(s);
        let g = &mut grad.data_mut()[s * c * hw..(s + 1) * c * hw];
        for (i, &y) in mask.labels().iter().enumerate() {
            let y = y as usize;
            ce -= clamp_log(p[y * hw + i].as_f64());
            let mut dot = 0.0;
            for k in 0..c {
                let onehot = if k == y { 1.0 } else { 0.0 };
                gp[k] = coef_a[k] * onehot + coef_b[k];
                dot += p[k * hw + i].as_f64() * gp[k];
            }
            for k in 0..c {
                let pk = p[k * hw + i].as_f64();
                let onehot = if k == y { 1.0 } else { 0.0 };
                let d_ce = alpha / total * (pk - onehot);
                let d_dice = pk * (gp[k] - dot);
                g[k * hw + i] = T::of(d_ce + d_dice);
            }
        }
    }
    let loss = alpha * ce / total + beta * dice_loss / NUM_CLASSES as f64;
    Ok((loss, grad))
}
