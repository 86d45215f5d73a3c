//! Instance extraction, colony counting and the evaluation metrics:
//! per-class pixel precision/recall, counting MAE, IoU matching and mAP over
//! IoU thresholds, plus overlay rendering for visual inspection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Class, ColonyKind, LabelMask};
use crate::netpbm::RgbImage;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub kind: ColonyKind,
    /// Sorted flat pixel offsets (`y * width + x`).
    pub pixels: Vec<u32>,
}

impl Instance {
    pub fn bounding_box(&self, width: usize) -> BoundingBox {
        let mut b = BoundingBox {
            x0: usize::MAX,
            y0: usize::MAX,
            x1: 0,
            y1: 0,
        };
        for &p in &self.pixels {
            let (y, x) = (p as usize / width, p as usize % width);
            b.x0 = b.x0.min(x);
            b.y0 = b.y0.min(y);
            b.x1 = b.x1.max(x);
            b.y1 = b.y1.max(y);
        }
        b
    }
}

/// Inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InstanceSet {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<Instance>,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// 4-connected components of the pixels labelled `kind`; every other label
/// (border included) separates instances. Instances are ordered by their first
/// pixel in raster order.
pub fn connected_components(mask: &LabelMask, kind: ColonyKind) -> InstanceSet {
    let (h, w) = (mask.height(), mask.width());
    let target = kind.class().label();
    let labels = mask.labels();
    let mut seen = vec![false; h * w];
    let mut instances = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || labels[start] != target {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p as u32);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == target {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        pixels.sort_unstable();
        instances.push(Instance { kind, pixels });
    }
    InstanceSet {
        height: h,
        width: w,
        instances,
    }
}

/// Instances of both colony kinds, bvg+ first.
pub fn extract_instances(mask: &LabelMask) -> InstanceSet {
    let mut set = connected_components(mask, ColonyKind::BvgPlus);
    set.instances
        .extend(connected_components(mask, ColonyKind::BvgMinus).instances);
    set
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColonyCounts {
    pub bvg_plus: usize,
    pub bvg_minus: usize,
}

impl ColonyCounts {
    pub fn get(&self, kind: ColonyKind) -> usize {
        match kind {
            ColonyKind::BvgPlus => self.bvg_plus,
            ColonyKind::BvgMinus => self.bvg_minus,
        }
    }
}

pub fn count_colonies(mask: &LabelMask) -> ColonyCounts {
    ColonyCounts {
        bvg_plus: connected_components(mask, ColonyKind::BvgPlus).len(),
        bvg_minus: connected_components(mask, ColonyKind::BvgMinus).len(),
    }
}

/// Mean absolute counting error over images.
pub fn mae(pred: &[ColonyCounts], gt: &[ColonyCounts], kind: ColonyKind) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p.get(kind) as f64 - g.get(kind) as f64).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Pixel confusion counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    /// `None` when nothing was predicted as the class.
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `None` when the class is absent from the ground truth.
    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn merge(&mut self, other: Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

pub fn pixel_confusion(pred: &LabelMask, gt: &LabelMask, class: Class) -> Result<Confusion> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let c = class.label();
    let mut out = Confusion::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        match (p == c, g == c) {
            (true, true) => out.tp += 1,
            (true, false) => out.fp += 1,
            (false, true) => out.fn_ += 1,
            _ => {}
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn pixel_pr(pred: &LabelMask, gt: &LabelMask, class: Class) -> Result<PrecisionRecall> {
    let c = pixel_confusion(pred, gt, class)?;
    Ok(PrecisionRecall {
        precision: c.precision(),
        recall: c.recall(),
    })
}

/// `|a ∩ b| / |a ∪ b|` for sorted pixel lists; two empty sets score 1.
pub fn instance_iou(a: &[u32], b: &[u32]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Nonzero IoUs between same-kind (gt, pred) instance pairs.
fn overlapping_pairs(pred: &InstanceSet, gt: &InstanceSet) -> Vec<(f64, usize, usize)> {
    let mut owner = vec![u32::MAX; gt.height * gt.width];
    for (g, inst) in gt.instances.iter().enumerate() {
        for &p in &inst.pixels {
            owner[p as usize] = g as u32;
        }
    }
    let mut pairs = Vec::new();
    for (pi, p) in pred.instances.iter().enumerate() {
        let mut touched: Vec<usize> = p
            .pixels
            .iter()
            .filter_map(|&px| owner.get(px as usize).copied())
            .filter(|&g| g != u32::MAX)
            .map(|g| g as usize)
            .collect();
        touched.sort_unstable();
        touched.dedup();
        for gi in touched {
            if gt.instances[gi].kind != p.kind {
                continue;
            }
            pairs.push((instance_iou(&p.pixels, &gt.instances[gi].pixels), gi, pi));
        }
    }
    // Descending IoU, ties by (gt index, pred index).
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    pairs
}

fn greedy_match(pairs: &[(f64, usize, usize)], n_pred: usize, n_gt: usize, t: f64) -> MatchCounts {
    let mut gt_used = vec![false; n_gt];
    let mut pred_used = vec![false; n_pred];
    let mut tp = 0;
    for &(iou, g, p) in pairs {
        if iou < t {
            break;
        }
        if !gt_used[g] && !pred_used[p] {
            gt_used[g] = true;
            pred_used[p] = true;
            tp += 1;
        }
    }
    MatchCounts {
        tp,
        fp: n_pred - tp,
        fn_: n_gt - tp,
    }
}

/// Greedy one-to-one matching of same-kind instances with IoU ≥ `t`, in
/// descending IoU order.
pub fn match_at_threshold(pred: &InstanceSet, gt: &InstanceSet, t: f64) -> MatchCounts {
    let pairs = overlapping_pairs(pred, gt);
    greedy_match(&pairs, pred.len(), gt.len(), t)
}

/// 0.50, 0.55, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Score of one image: mean over thresholds of `TP / (TP + FP + FN)`, where an
/// image with nothing predicted and nothing to find scores 1.
pub fn image_score(pred: &InstanceSet, gt: &InstanceSet, thresholds: &[f64]) -> f64 {
    let pairs = overlapping_pairs(pred, gt);
    let total: f64 = thresholds
        .iter()
        .map(|&t| {
            let m = greedy_match(&pairs, pred.len(), gt.len(), t);
            let d = m.tp + m.fp + m.fn_;
            if d == 0 {
                1.0
            } else {
                m.tp as f64 / d as f64
            }
        })
        .sum();
    total / thresholds.len() as f64
}

/// Mean over images of [`image_score`].
pub fn map_over_thresholds(pred: &[InstanceSet], gt: &[InstanceSet], thresholds: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.is_empty() || thresholds.is_empty() {
        return Err(Error::Invalid("mAP needs at least one image and one threshold".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| image_score(p, g, thresholds))
        .sum();
    Ok(total / pred.len() as f64)
}

/// mAP computed directly from predicted and ground-truth masks.
pub fn mask_map(pred: &[LabelMask], gt: &[LabelMask]) -> Result<f64> {
    let p: Vec<InstanceSet> = pred.iter().map(extract_instances).collect();
    let g: Vec<InstanceSet> = gt.iter().map(extract_instances).collect();
    map_over_thresholds(&p, &g, &default_thresholds())
}

pub const BVG_PLUS_TINT: [u8; 3] = [40, 220, 60];
pub const BVG_MINUS_TINT: [u8; 3] = [240, 220, 30];
pub const BORDER_COLOR: [u8; 3] = [230, 30, 230];
pub const BOX_COLOR: [u8; 3] = [40, 90, 255];

#[derive(Clone, Debug)]
pub struct Overlay {
    pub image: RgbImage,
    pub boxes: Vec<BoundingBox>,
}

// 3x5 digit glyphs, one row per u8 (low three bits, MSB left).
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];

fn draw_number(img: &mut RgbImage, n: usize, x: usize, y_bottom: usize) {
    let text = n.to_string();
    let y0 = y_bottom.saturating_sub(6);
    for (i, ch) in text.bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    let (yy, xx) = (y0 + row, x + i * 4 + col);
                    if yy < img.height() && xx < img.width() {
                        img.put(yy, xx, BOX_COLOR);
                    }
                }
            }
        }
    }
}

fn blend(a: [u8; 3], b: [u8; 3]) -> [u8; 3] {
    std::array::from_fn(|i| ((a[i] as u16 + b[i] as u16) / 2) as u8)
}

/// Tints colony pixels by kind, paints border pixels, and draws a numbered
/// bounding box around every instance.
pub fn render_overlay(image: &RgbImage, mask: &LabelMask) -> Result<Overlay> {
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    let (h, w) = (mask.height(), mask.width());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            match mask.get(y, x) {
                Class::BvgPlus => out.put(y, x, blend(image.get(y, x), BVG_PLUS_TINT)),
                Class::BvgMinus => out.put(y, x, blend(image.get(y, x), BVG_MINUS_TINT)),
                Class::Border => out.put(y, x, BORDER_COLOR),
                Class::Background => {}
            }
        }
    }
    let instances = extract_instances(mask);
    let boxes: Vec<BoundingBox> = instances.instances.iter().map(|i| i.bounding_box(w)).collect();
    for (k, b) in boxes.iter().enumerate() {
        for x in b.x0..=b.x1 {
            out.put(b.y0, x, BOX_COLOR);
            out.put(b.y1, x, BOX_COLOR);
        }
        for y in b.y0..=b.y1 {
            out.put(y, b.x0, BOX_COLOR);
            out.put(y, b.x1, BOX_COLOR);
        }
        draw_number(&mut out, k + 1, b.x0, b.y0);
    }
    Ok(Overlay { image: out, boxes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// Absent for the border class, which is not counted.
    pub mae: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub gt_counts: ColonyCounts,
    pub pred_counts: ColonyCounts,
    pub score: f64,
}

/// Metrics of one model on one set of images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bvg_plus: ClassMetrics,
    pub bvg_minus: ClassMetrics,
    pub border: ClassMetrics,
    pub map: f64,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn class(&self, class: Class) -> Option<&ClassMetrics> {
        match class {
            Class::BvgPlus => Some(&self.bvg_plus),
            Class::BvgMinus => Some(&self.bvg_minus),
            Class::Border => Some(&self.border),
            Class::Background => None,
        }
    }
}

/// Evaluates predicted masks against ground truth. Pixel precision and recall
/// pool the confusion counts of all images.
pub fn evaluate_masks(ids: &[String], pred: &[LabelMask], gt: &[LabelMask]) -> Result<MetricsReport> {
    if pred.len() != gt.len() || ids.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    let mut conf = [Confusion::default(); 3];
    let classes = [Class::BvgPlus, Class::BvgMinus, Class::Border];
    let mut per_image = Vec::with_capacity(gt.len());
    let thresholds = default_thresholds();
    for ((id, p), g) in ids.iter().zip(pred).zip(gt) {
        for (acc, class) in conf.iter_mut().zip(classes) {
            acc.merge(pixel_confusion(p, g, class)?);
        }
        let (pi, gi) = (extract_instances(p), extract_instances(g));
        per_image.push(ImageMetrics {
            id: id.clone(),
            gt_counts: count_colonies(g),
            pred_counts: count_colonies(p),
            score: image_score(&pi, &gi, &thresholds),
        });
    }
    let pc: Vec<ColonyCounts> = per_image.iter().map(|m| m.pred_counts).collect();
    let gc: Vec<ColonyCounts> = per_image.iter().map(|m| m.gt_counts).collect();
    let class_metrics = |c: Confusion, kind: Option<ColonyKind>| -> Result<ClassMetrics> {
        Ok(ClassMetrics {
            mae: kind.map(|k| mae(&pc, &gc, k)).transpose()?,
            precision: c.precision(),
            recall: c.recall(),
            confusion: c,
        })
    };
    let map = if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().map(|m| m.score).sum::<f64>() / per_image.len() as f64
    };
    Ok(MetricsReport {
        bvg_plus: class_metrics(conf[0], Some(ColonyKind::BvgPlus))?,
        bvg_minus: class_metrics(conf[1], Some(ColonyKind::BvgMinus))?,
        border: class_metrics(conf[2], None)?,
        map,
        per_image,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

/// Plain-text table with one row per class and dataset (MAE, precision,
/// recall) followed by one mAP line per dataset.
pub fn format_table(reports: &[(&str, &MetricsReport)]) -> String {
    let dw = reports.iter().map(|(d, _)| d.len()).max().unwrap_or(0).max(10);
    let mut out = format!(
        "{:<8} | {:<dw$} | {:>6} | {:>9} | {:>6}\n",
        "Class", "Dataset", "MAE", "Precision", "Recall"
    );
    out.push_str(&"-".repeat(41 + dw));
    out.push('\n');
    for (name, class) in [("bvg+", Class::BvgPlus), ("bvg-", Class::BvgMinus), ("border", Class::Border)] {
        for (dataset, report) in reports {
            let m = report.class(class).expect("foreground class");
            let mae = m.mae.map_or_else(String::new, |v| format!("{v:.3}"));
            out.push_str(&format!(
                "{:<8} | {:<dw$} | {:>6} | {:>9} | {:>6}\n",
                name,
                dataset,
                mae,
                cell(m.precision),
                cell(m.recall)
            ));
        }
    }
    for (dataset, report) in reports {
        out.push_str(&format!("mAP@[0.50:0.95] {dataset}: {:.3}\n", report.map));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> LabelMask {
        let h = rows.len();
        let w = rows[0].len();
        let labels = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| b - b'0'))
            .collect();
        LabelMask::new(h, w, labels).unwrap()
    }

    #[test]
    fn diagonal_touch_is_two_instances() {
        let m = mask(&["10", "01"]);
        assert_eq!(connected_components(&m, ColonyKind::BvgPlus).len(), 2);
    }

    #[test]
    fn diagonal_border_seam_splits_blob() {
        let m = mask(&[
            "11113", //
            "11131", //
            "11311", //
            "13111", //
            "31111",
        ]);
        assert_eq!(connected_components(&m, ColonyKind::BvgPlus).len(), 2);
    }

    #[test]
    fn counting_rules() {
        assert_eq!(count_colonies(&LabelMask::background(4, 4)), ColonyCounts::default());
        // Two fused colonies without a seam count once.
        let fused = mask(&["1100", "1111", "0011"]);
        assert_eq!(count_colonies(&fused).bvg_plus, 1);
    }

    #[test]
    fn mae_values() {
        let a = [ColonyCounts { bvg_plus: 21, bvg_minus: 3 }];
        let b = [ColonyCounts { bvg_plus: 20, bvg_minus: 3 }];
        assert_eq!(mae(&a, &b, ColonyKind::BvgPlus).unwrap(), 1.0);
        assert_eq!(mae(&a, &a, ColonyKind::BvgPlus).unwrap(), 0.0);
        assert!(mae(&a, &[], ColonyKind::BvgPlus).is_err());
    }

    #[test]
    fn precision_undefined_without_predictions() {
        let gt = mask(&["11", "00"]);
        let pred = LabelMask::background(2, 2);
        let pr = pixel_pr(&pred, &gt, Class::BvgPlus).unwrap();
        assert_eq!(pr.precision, None);
        assert_eq!(pr.recall, Some(0.0));
        let same = pixel_pr(&gt, &gt, Class::BvgPlus).unwrap();
        assert_eq!((same.precision, same.recall), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn iou_of_overlapping_squares() {
        // 2x2 squares on a 4-wide canvas offset by one column share a 1x2 strip.
        let a = [0, 1, 4, 5];
        let b = [1, 2, 5, 6];
        assert!((instance_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(instance_iou(&a, &a), 1.0);
        assert_eq!(instance_iou(&a, &[10, 11]), 0.0);
    }

    #[test]
    fn kind_mismatch_is_not_a_match() {
        let gt = extract_instances(&mask(&["1111", "1111"]));
        let pred = extract_instances(&mask(&["2222", "2222"]));
        let m = match_at_threshold(&pred, &gt, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let gt = vec![extract_instances(&mask(&["1100"]))];
        let pred = vec![extract_instances(&mask(&["0000"]))];
        assert_eq!(map_over_thresholds(&pred, &gt, &default_thresholds()).unwrap(), 0.0);
        assert_eq!(map_over_thresholds(&gt, &gt, &default_thresholds()).unwrap(), 1.0);
    }

    #[test]
    fn overlay_leaves_background_untouched() {
        let img = RgbImage::filled(6, 6, [10, 20, 30]);
        let o = render_overlay(&img, &LabelMask::background(6, 6)).unwrap();
        assert_eq!(o.image, img);
        assert!(o.boxes.is_empty());
    }
}
