//! Training loop with early stopping, k-fold cross-validation and grid search.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{rotate_augment, sample_angle};
use crate::config::RunConfig;
use crate::dataset::{images_to_tensor, Sample};
use crate::error::{Error, Result};
use crate::evalkit::mask_map;
use crate::mask::LabelMask;
use crate::optim::{Adam, AdamConfig};
use crate::seeds::derive_seed;
use crate::tensor::Mode;
use crate::unet::{build_unet, predict_mask, UNetModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    /// Empty when training without a validation set.
    pub val_loss: Vec<f64>,
    pub val_map: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
}

impl TrainingHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn best_val_map(&self) -> Option<f64> {
        self.best_epoch.and_then(|e| self.val_map.get(e).copied())
    }

    /// `epoch,train_loss,val_loss,val_map` with one row per epoch.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,train_loss,val_loss,val_map")?;
        for e in 0..self.train_loss.len() {
            let opt = |v: Option<&f64>| v.map_or_else(String::new, |v| format!("{v}"));
            writeln!(
                out,
                "{e},{},{},{}",
                self.train_loss[e],
                opt(self.val_loss.get(e)),
                opt(self.val_map.get(e))
            )?;
        }
        Ok(())
    }
}

/// Patience-based stopping on a monitored loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn update(&mut self, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

const SHUFFLE_STREAM: u64 = 0x5348;
const LABEL_STREAM: u64 = 0x4c42;

/// Pairs every image with a different sample's mask (a derangement).
fn permute_labels(set: &[Sample], seed: u64) -> Vec<Sample> {
    let n = set.len();
    if n < 2 {
        return set.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[LABEL_STREAM]));
    let shift = 1 + rand::Rng::random_range(&mut rng, 0..n - 1);
    (0..n)
        .map(|i| Sample {
            id: set[i].id.clone(),
            image: set[i].image.clone(),
            mask: set[(i + shift) % n].mask.clone(),
        })
        .collect()
}

fn check_sizes(model: &UNetModel, set: &[Sample]) -> Result<()> {
    for s in set {
        model.check_input([1, 3, s.image.height(), s.image.width()])?;
    }
    Ok(())
}

/// One pass over `set` in shuffled mini-batches. Returns the mean batch loss
/// (non-finite if training diverged).
fn run_epoch(
    model: &mut UNetModel,
    opt: &mut Adam,
    set: &[Sample],
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let loss_fn = cfg.loss_fn();
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let (images, masks): (Vec<_>, Vec<_>) = batch
            .iter()
            .map(|&i| {
                let s = &set[i];
                if cfg.augment {
                    rotate_augment(&s.image, &s.mask, sample_angle(rng))
                } else {
                    (s.image.clone(), s.mask.clone())
                }
            })
            .unzip();
        let x = images_to_tensor(&images)?;
        let probs = model.forward(&x, Mode::Train)?;
        let (loss, grad) = loss_fn.evaluate(&probs, &masks)?;
        if !loss.is_finite() {
            return Ok(f64::NAN);
        }
        model.backward_logits(&grad)?;
        opt.step(model.graph_mut())?;
        total += loss * batch.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Inference-mode probabilities turned into masks, in batches.
pub fn predict_samples(model: &mut UNetModel, set: &[Sample], batch_size: usize) -> Result<Vec<LabelMask>> {
    let mut out = Vec::with_capacity(set.len());
    for batch in set.chunks(batch_size.max(1)) {
        let x = images_to_tensor(batch.iter().map(|s| &s.image))?;
        let probs = model.forward(&x, Mode::Infer)?;
        out.extend(predict_mask(&probs));
    }
    Ok(out)
}

/// Mean inference-mode loss and mAP over `set`.
pub fn evaluate_set(model: &mut UNetModel, set: &[Sample], cfg: &RunConfig) -> Result<(f64, f64)> {
    let loss_fn = cfg.loss_fn();
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(set.len());
    for batch in set.chunks(cfg.batch_size) {
        let x = images_to_tensor(batch.iter().map(|s| &s.image))?;
        let masks: Vec<LabelMask> = batch.iter().map(|s| s.mask.clone()).collect();
        let probs = model.forward(&x, Mode::Infer)?;
        let (loss, _) = loss_fn.evaluate(&probs, &masks)?;
        total += loss * batch.len() as f64;
        preds.extend(predict_mask(&probs));
    }
    let gt: Vec<LabelMask> = set.iter().map(|s| s.mask.clone()).collect();
    Ok((total / set.len() as f64, mask_map(&preds, &gt)?))
}

/// Fraction of pixels whose inference-mode argmax equals the label.
pub fn pixel_accuracy(model: &mut UNetModel, set: &[Sample], batch_size: usize) -> Result<f64> {
    let preds = predict_samples(model, set, batch_size)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, s) in preds.iter().zip(set) {
        hit += p.labels().iter().zip(s.mask.labels()).filter(|(a, b)| a == b).count();
        total += p.labels().len();
    }
    Ok(hit as f64 / total as f64)
}

/// Trains with Adam, evaluating validation loss and mAP after every epoch.
/// Stops after `patience` epochs without a validation-loss improvement and
/// returns the weights of the best epoch.
pub fn train(
    mut model: UNetModel,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &RunConfig,
) -> Result<(UNetModel, TrainingHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Invalid("training and validation sets must be non-empty".into()));
    }
    check_sizes(&model, train_set)?;
    check_sizes(&model, val_set)?;
    let shuffled;
    let train_set = if cfg.shuffle_labels {
        shuffled = permute_labels(train_set, cfg.seed);
        &shuffled[..]
    } else {
        train_set
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SHUFFLE_STREAM]));
    let mut opt = Adam::new(model.graph(), AdamConfig::with_lr(cfg.lr));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainingHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_map: Vec::new(),
        best_epoch: None,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best = model.snapshot();
    for epoch in 0..cfg.max_epochs {
        let tl = run_epoch(&mut model, &mut opt, train_set, cfg, &mut rng)?;
        history.train_loss.push(tl);
        if !tl.is_finite() {
            history.stop_reason = StopReason::Diverged;
            break;
        }
        let (vl, vm) = evaluate_set(&mut model, val_set, cfg)?;
        history.val_loss.push(vl);
        history.val_map.push(vm);
        if !vl.is_finite() {
            history.stop_reason = StopReason::Diverged;
            break;
        }
        match stopper.update(vl) {
            StopDecision::Improved => {
                history.best_epoch = Some(epoch);
                best = model.snapshot();
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.stop_reason = StopReason::EarlyStopped;
                break;
            }
        }
    }
    model.restore(&best);
    Ok((model, history))
}

/// Trains for a fixed number of epochs without a validation set, as when
/// refitting a selected configuration on the full training-validation data.
pub fn train_fixed_epochs(
    mut model: UNetModel,
    train_set: &[Sample],
    epochs: usize,
    cfg: &RunConfig,
) -> Result<(UNetModel, TrainingHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training set must be non-empty".into()));
    }
    check_sizes(&model, train_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SHUFFLE_STREAM]));
    let mut opt = Adam::new(model.graph(), AdamConfig::with_lr(cfg.lr));
    let mut history = TrainingHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_map: Vec::new(),
        best_epoch: None,
        stop_reason: StopReason::MaxEpochs,
    };
    for epoch in 0..epochs {
        let tl = run_epoch(&mut model, &mut opt, train_set, cfg, &mut rng)?;
        history.train_loss.push(tl);
        if !tl.is_finite() {
            history.stop_reason = StopReason::Diverged;
            break;
        }
        history.best_epoch = Some(epoch);
    }
    Ok((model, history))
}

/// Deterministic shuffle followed by `k` contiguous folds whose sizes differ
/// by at most one. Returns `(train, validation)` pairs.
pub fn kfold_split<T: Clone>(ids: &[T], k: usize, seed: u64) -> Result<Vec<(Vec<T>, Vec<T>)>> {
    if k < 2 {
        return Err(Error::config("k", format!("{k} (must be at least 2)")));
    }
    if ids.len() < k {
        return Err(Error::Invalid(format!("{} items cannot form {k} folds", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let val_idx = &order[start..start + size];
        let val: Vec<T> = val_idx.iter().map(|&i| ids[i].clone()).collect();
        let train: Vec<T> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .map(|&i| ids[i].clone())
            .collect();
        folds.push((train, val));
        start += size;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub val_map: f64,
    pub best_epoch: Option<usize>,
    pub epochs: usize,
    pub stop_reason: StopReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    /// Position of the configuration in the grid.
    pub index: usize,
    pub config: RunConfig,
    pub folds: Vec<FoldResult>,
    pub mean_val_map: f64,
}

impl CvResult {
    pub fn diverged_folds(&self) -> usize {
        self.folds
            .iter()
            .filter(|f| f.stop_reason == StopReason::Diverged)
            .count()
    }

    /// Epoch count for refitting: mean of (best epoch + 1) over folds.
    pub fn refit_epochs(&self) -> usize {
        let epochs: Vec<usize> = self.folds.iter().filter_map(|f| f.best_epoch.map(|e| e + 1)).collect();
        if epochs.is_empty() {
            return 1;
        }
        (epochs.iter().sum::<usize>() as f64 / epochs.len() as f64).round().max(1.0) as usize
    }
}

/// k-fold cross-validation of one configuration; the model and shuffling
/// seeds of each fold derive from `(config.seed, index, fold)`. A diverged
/// fold scores the validation mAP of its best epoch, or 0.
pub fn cross_validate(cfg: &RunConfig, index: usize, dataset: &[Sample], k: usize) -> Result<CvResult> {
    cfg.validate()?;
    let folds = kfold_split(dataset, k, derive_seed(cfg.seed, &[0xF01D]))?;
    let mut results = Vec::with_capacity(k);
    for (f, (train_set, val_set)) in folds.iter().enumerate() {
        let run_seed = derive_seed(cfg.seed, &[index as u64, f as u64]);
        let run_cfg = RunConfig {
            seed: run_seed,
            ..cfg.clone()
        };
        let model = build_unet(cfg.unet(), run_seed)?;
        let (_, history) = train(model, train_set, val_set, &run_cfg)?;
        results.push(FoldResult {
            fold: f,
            val_map: history.best_val_map().unwrap_or(0.0),
            best_epoch: history.best_epoch,
            epochs: history.epochs(),
            stop_reason: history.stop_reason,
        });
    }
    let mean_val_map = results.iter().map(|r| r.val_map).sum::<f64>() / results.len() as f64;
    Ok(CvResult {
        index,
        config: cfg.clone(),
        folds: results,
        mean_val_map,
    })
}

/// Cross-validates every configuration and ranks them by mean validation
/// mAP, best first (ties keep grid order).
pub fn grid_search(grid: &[RunConfig], dataset: &[Sample], k: usize) -> Result<Vec<CvResult>> {
    grid_search_with(grid, dataset, k, |_| {})
}

/// [`grid_search`] with a callback after each configuration finishes.
pub fn grid_search_with(
    grid: &[RunConfig],
    dataset: &[Sample],
    k: usize,
    mut on_result: impl FnMut(&CvResult),
) -> Result<Vec<CvResult>> {
    if grid.is_empty() {
        return Err(Error::Invalid("grid search needs at least one configuration".into()));
    }
    let mut results = Vec::with_capacity(grid.len());
    for (i, cfg) in grid.iter().enumerate() {
        let r = cross_validate(cfg, i, dataset, k)?;
        on_result(&r);
        results.push(r);
    }
    results.sort_by(|a, b| b.mean_val_map.total_cmp(&a.mean_val_map).then(a.index.cmp(&b.index)));
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_trace() {
        let mut s = EarlyStopping::new(10);
        assert_eq!(s.update(1.0), StopDecision::Improved);
        let mut n = 0;
        loop {
            n += 1;
            if s.update(1.0 + n as f64) == StopDecision::Stop {
                break;
            }
        }
        assert_eq!(n, 10);
    }

    #[test]
    fn folds_partition() {
        let ids: Vec<usize> = (0..8).collect();
        let folds = kfold_split(&ids, 4, 1).unwrap();
        let mut all: Vec<usize> = folds.iter().flat_map(|(_, v)| v.clone()).collect();
        assert!(folds.iter().all(|(t, v)| v.len() == 2 && t.len() == 6));
        all.sort_unstable();
        assert_eq!(all, ids);
        assert!(kfold_split(&ids, 1, 0).is_err());
        assert!(kfold_split(&ids[..3], 4, 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let h = TrainingHistory {
            train_loss: vec![1.0, 0.5],
            val_loss: vec![2.0, 1.5],
            val_map: vec![0.1, 0.2],
            best_epoch: Some(1),
            stop_reason: StopReason::MaxEpochs,
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,val_loss,val_map\n0,1,2,0.1\n1,0.5,1.5,0.2\n"
        );
    }
}
