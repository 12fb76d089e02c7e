//! Permutation-invariant MSE, evaluation metrics, the plateau learning-rate
//! schedule and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error};
use crate::features::{extract, StftConfig};
use crate::nn::Ctx;
use crate::numerics::{no_grad, AdamState, Rng, Tensor};
use crate::scenegen::{load_clip, read_manifest, MAX_SOURCES};
use crate::stateformer::Stateformer;
use crate::wav::Waveform;

/// Accuracy thresholds in degrees.
pub const ACC_THRESHOLDS: [u32; 3] = [5, 10, 15];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    /// Epochs without validation improvement before the rate decays.
    pub patience: usize,
    /// Smallest validation-loss drop that counts as an improvement.
    pub min_delta: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr0: 1e-3, decay: 0.8, patience: 3, min_delta: 1e-4, epochs: 80, batch: 8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(invalid("train config", format!("decay {} must be in (0, 1)", self.decay)));
        }
        if !(self.lr0 > 0.0) || self.batch == 0 || self.min_delta < 0.0 {
            return Err(invalid("train config", "lr0 and batch must be positive, min_delta non-negative"));
        }
        Ok(())
    }
}

/// Decays the rate by a constant factor after `patience` epochs without
/// improvement, then restarts the count.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub lr: f64,
    decay: f64,
    patience: usize,
    min_delta: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauScheduler { lr: cfg.lr0, decay: cfg.decay, patience: cfg.patience, min_delta: cfg.min_delta, best: f64::INFINITY, stale: 0 }
    }

    /// Records one validation loss; returns true if the rate decayed.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr *= self.decay;
            self.stale = 0;
            return true;
        }
        false
    }
}

/// Every ordering of `0..n`, identity first.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in (0..n).rev() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

/// Masked squared error of `pred` against `target` under `perm`, where
/// predicted track `s` is compared with target track `perm[s]`. Returns
/// the sum and the number of active entries.
fn masked_sse(pred: &[f64], target: &[f64], mask: &[f64], tracks: usize, perm: &[usize]) -> (f64, f64) {
    let frames = mask.len() / tracks;
    let mut sum = 0.0;
    let mut count = 0.0;
    for t in 0..frames {
        for s in 0..tracks {
            let m = mask[t * tracks + perm[s]];
            for c in 0..3 {
                let d = pred[(t * tracks + s) * 3 + c] - target[(t * tracks + perm[s]) * 3 + c];
                sum += m * (d * d);
            }
            count += 3.0 * m;
        }
    }
    (sum, count)
}

/// Loss value and the chosen assignment.
#[derive(Clone, Debug)]
pub struct PitLoss {
    pub loss: Tensor,
    /// `perm[s]` is the target track matched to predicted track `s`.
    pub perm: Vec<usize>,
}

/// Minimum over track permutations of the masked MSE between `pred`
/// (`T × S × 3`) and `target` (flattened `T × S × 3`), with `mask`
/// (flattened `T × S`) selecting active sources. One assignment is chosen
/// per sequence.
pub fn pit_mse_loss(pred: &Tensor, target: &[f64], mask: &[f64]) -> Result<PitLoss, Error> {
    let [frames, tracks, 3] = *pred.shape() else {
        return Err(invalid("pit_mse_loss", format!("prediction shape {:?} is not T × S × 3", pred.shape())));
    };
    if target.len() != pred.numel() || mask.len() != frames * tracks {
        return Err(invalid("pit_mse_loss", "target or mask size does not match the prediction"));
    }
    let active: f64 = mask.iter().sum();
    if active <= 0.0 {
        return Err(invalid("pit_mse_loss", "no active source in any frame"));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(tracks) {
        let (sum, count) = masked_sse(pred.data(), target, mask, tracks, &perm);
        let value = sum / count;
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, perm));
        }
    }
    let (_, perm) = best.expect("at least one permutation");
    let mut aligned = vec![0.0; pred.numel()];
    let mut weights = vec![0.0; pred.numel()];
    for t in 0..frames {
        for s in 0..tracks {
            let src = t * tracks + perm[s];
            for c in 0..3 {
                aligned[(t * tracks + s) * 3 + c] = target[src * 3 + c];
                weights[(t * tracks + s) * 3 + c] = mask[src];
            }
        }
    }
    let aligned = Tensor::new(pred.shape(), aligned)?;
    let weights = Tensor::new(pred.shape(), weights)?;
    let sse = pred.sub(&aligned)?.square().mul(&weights)?.sum_all();
    let loss = sse.div(&Tensor::scalar(3.0 * active))?;
    Ok(PitLoss { loss, perm })
}

/// Azimuth of `v` in degrees, in `(-180, 180]`.
pub fn cartesian_to_azimuth(v: [f64; 3]) -> Result<f64, Error> {
    if !(v[0].is_finite() && v[1].is_finite()) {
        return Err(Error::NonFinite("direction vector".into()));
    }
    if v[0] == 0.0 && v[1] == 0.0 {
        return Err(invalid("cartesian_to_azimuth", "zero horizontal component"));
    }
    let deg = v[1].atan2(v[0]).to_degrees();
    Ok(if deg == -180.0 { 180.0 } else { deg })
}

/// Azimuth folded into `[0, 180]`. A two-microphone line array cannot tell
/// mirror images across its axis apart, so scoring uses the folded angle.
pub fn folded_azimuth(v: [f64; 3]) -> Result<f64, Error> {
    cartesian_to_azimuth(v).map(f64::abs)
}

/// Mean over samples of each sample's mean absolute error over its sources.
pub fn mae_metric(errors: &[Vec<f64>]) -> Result<f64, Error> {
    if errors.is_empty() || errors.iter().any(Vec::is_empty) {
        return Err(invalid("mae_metric", "empty evaluation set or sample without sources"));
    }
    let total: f64 = errors.iter().map(|e| e.iter().map(|x| x.abs()).sum::<f64>() / e.len() as f64).sum();
    Ok(total / errors.len() as f64)
}

/// Percentage of samples whose largest per-source error is at most `lambda`.
pub fn accuracy_metric(errors: &[Vec<f64>], lambda: f64) -> Result<f64, Error> {
    if errors.is_empty() {
        return Err(invalid("accuracy_metric", "empty evaluation set"));
    }
    if !(lambda > 0.0) {
        return Err(invalid("accuracy_metric", format!("threshold {lambda} must be positive")));
    }
    let correct = errors.iter().filter(|e| e.iter().fold(0.0f64, |m, x| m.max(x.abs())) <= lambda).count();
    Ok(100.0 * correct as f64 / errors.len() as f64)
}

/// Features and ground truth of one clip.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `planes × F × T`.
    pub features: Tensor,
    pub frames: usize,
    /// Flattened `T × S × 3`.
    pub labels: Vec<f64>,
    /// Flattened `T × S`.
    pub mask: Vec<f64>,
}

impl Sample {
    /// Frames `start..end` of the clip.
    pub fn window(&self, start: usize, end: usize) -> Result<Sample, Error> {
        let s = MAX_SOURCES;
        Ok(Sample {
            features: self.features.slice(2, start, end)?,
            frames: end - start,
            labels: self.labels[start * s * 3..end * s * 3].to_vec(),
            mask: self.mask[start * s..end * s].to_vec(),
        })
    }
}

/// Loads every clip of a manifest and computes its features.
pub fn load_samples(manifest: impl AsRef<Path>, stft: &StftConfig) -> Result<Vec<Sample>, Error> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(manifest)?;
    records
        .iter()
        .map(|rec| {
            let clip = load_clip(base, rec)?;
            let feats = extract(&clip.waveform.channels, stft)?;
            if feats.frames != clip.frames {
                return Err(Error::Format {
                    what: format!("label file {}", rec.label_path),
                    reason: format!("{} label frames but {} feature frames", clip.frames, feats.frames),
                });
            }
            Ok(Sample { features: feats.to_tensor(), frames: clip.frames, labels: clip.labels, mask: clip.mask })
        })
        .collect()
}

/// Splits clips longer than `max_frames` into consecutive windows.
pub fn windows(samples: &[Sample], max_frames: usize) -> Result<Vec<Sample>, Error> {
    let mut out = Vec::new();
    for s in samples {
        if s.frames <= max_frames {
            out.push(s.clone());
            continue;
        }
        for start in (0..s.frames).step_by(max_frames) {
            out.push(s.window(start, (start + max_frames).min(s.frames))?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip: usize,
    pub frames: usize,
    pub mae: f64,
    pub max_error: f64,
}

/// Frame-level scores: each frame is one sample holding one error per
/// active source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    /// Threshold in degrees → percentage of frames with every source within it.
    pub acc: BTreeMap<String, f64>,
    pub samples: usize,
    pub clips: usize,
    pub loss: f64,
    pub per_clip: Vec<ClipScore>,
}

impl EvalReport {
    pub fn acc_at(&self, lambda: u32) -> f64 {
        self.acc.get(&lambda.to_string()).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-frame absolute azimuth errors of one clip under the assignment `perm`.
pub fn frame_errors(pred: &[f64], labels: &[f64], mask: &[f64], perm: &[usize]) -> Result<Vec<Vec<f64>>, Error> {
    let s = perm.len();
    let frames = mask.len() / s;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut errs = Vec::new();
        for (p, &q) in perm.iter().enumerate() {
            if mask[t * s + q] <= 0.0 {
                continue;
            }
            let at = |v: &[f64], k: usize| [v[(t * s + k) * 3], v[(t * s + k) * 3 + 1], v[(t * s + k) * 3 + 2]];
            errs.push((folded_azimuth(at(pred, p))? - folded_azimuth(at(labels, q))?).abs());
        }
        if !errs.is_empty() {
            out.push(errs);
        }
    }
    Ok(out)
}

/// Scores clips from their flattened `T × S × 3` predictions.
pub fn score(predictions: &[Vec<f64>], samples: &[Sample]) -> Result<EvalReport, Error> {
    if predictions.len() != samples.len() || samples.is_empty() {
        return Err(invalid("evaluation", "empty set or prediction count mismatch"));
    }
    let mut all = Vec::new();
    let mut per_clip = Vec::new();
    let mut loss = 0.0;
    for (i, (pred, s)) in predictions.iter().zip(samples).enumerate() {
        let pt = Tensor::new(&[s.frames, MAX_SOURCES, 3], pred.clone())?;
        let pit = pit_mse_loss(&pt, &s.labels, &s.mask)?;
        loss += pit.loss.item();
        let errs = frame_errors(pred, &s.labels, &s.mask, &pit.perm)?;
        if errs.is_empty() {
            continue;
        }
        per_clip.push(ClipScore {
            clip: i,
            frames: errs.len(),
            mae: mae_metric(&errs)?,
            max_error: errs.iter().flatten().fold(0.0, |m: f64, &x| m.max(x)),
        });
        all.extend(errs);
    }
    let acc = ACC_THRESHOLDS.iter().map(|&l| Ok((l.to_string(), accuracy_metric(&all, l as f64)?))).collect::<Result<_, Error>>()?;
    Ok(EvalReport { mae: mae_metric(&all)?, acc, samples: all.len(), clips: samples.len(), loss: loss / samples.len() as f64, per_clip })
}

pub fn evaluate(model: &Stateformer, samples: &[Sample]) -> Result<EvalReport, Error> {
    let preds = samples.iter().map(|s| model.predict(&s.features)).collect::<Result<Vec<_>, _>>()?;
    score(&preds, samples)
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub val_mae: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,lr,val_mae";

pub fn history_csv(rows: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr, r.val_mae);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

/// One optimizer step on `batch`: forward, PIT loss, backward, Adam.
/// Returns the mean batch loss.
pub fn train_step(model: &mut Stateformer, batch: &[&Sample], adam: &mut AdamState, rng: &mut Rng) -> Result<f64, Error> {
    model.params.zero_grad();
    let mut total = 0.0;
    for s in batch {
        let ctx = Ctx::train(&model.params, rng.fork("dropout"));
        let pred = model.forward(&ctx, &s.features)?;
        let pit = pit_mse_loss(&pred, &s.labels, &s.mask)?;
        let value = pit.loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        total += value;
        pit.loss.scale(1.0 / batch.len() as f64).backward()?;
    }
    adam.step(&mut model.params)?;
    Ok(total / batch.len() as f64)
}

/// Trains `model` in place. Writes the best-validation checkpoint and the
/// history table to `out_dir`, calls `on_epoch` after each epoch, and leaves
/// the best parameters in `model`.
pub fn train(
    model: &mut Stateformer,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary, Error> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid("training", "training and validation sets must be non-empty"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let train_windows = windows(train_set, model.cfg.max_frames)?;
    let mut adam = AdamState::for_store(&model.params, cfg.lr0);
    let mut sched = PlateauScheduler::new(cfg);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;
    for epoch in 1..=cfg.epochs {
        adam.lr = sched.lr;
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        Rng::labeled(cfg.seed, &format!("shuffle/{epoch}")).shuffle(&mut order);
        let mut rng = Rng::labeled(cfg.seed, &format!("dropout/{epoch}"));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_windows[i]).collect();
            loss_sum += train_step(model, &batch, &mut adam, &mut rng)?;
            batches += 1;
        }
        let report = no_grad(|| evaluate(model, val_set))?;
        if !report.loss.is_finite() {
            return Err(Error::NonFinite("validation loss".into()));
        }
        let record = EpochRecord { epoch, train_loss: loss_sum / batches as f64, val_loss: report.loss, lr: sched.lr, val_mae: report.mae };
        if best.as_ref().is_none_or(|(_, b, _)| report.loss < *b) {
            best = Some((epoch, report.loss, model.params.iter().map(|p| p.tensor.to_vec()).collect()));
            model.save(out_dir.join(BEST_CHECKPOINT))?;
        }
        sched.observe(report.loss);
        on_epoch(&record);
        history.push(record);
        let path = out_dir.join(HISTORY_FILE);
        std::fs::write(&path, history_csv(&history)).map_err(|e| io_err(&path, e))?;
    }
    let Some((best_epoch, best_val_loss, values)) = best else {
        return Err(invalid("training", "epochs must be at least 1"));
    };
    for (i, v) in values.into_iter().enumerate() {
        model.params.set(crate::numerics::ParamId(i), v)?;
    }
    Ok(TrainSummary { history, best_epoch, best_val_loss })
}

/// One row of an inference track.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRow {
    pub time: f64,
    pub azimuth: [f64; MAX_SOURCES],
}

/// Per-frame folded azimuths for both output tracks of a recording.
pub fn infer_track(model: &Stateformer, wave: &Waveform, stft: &StftConfig) -> Result<Vec<TrackRow>, Error> {
    if wave.channels.len() != 2 {
        return Err(invalid("inference", format!("expected two channels, got {}", wave.channels.len())));
    }
    if wave.sample_rate != stft.sample_rate {
        return Err(invalid("inference", format!("sample rate {} differs from {}", wave.sample_rate, stft.sample_rate)));
    }
    let feats = extract(&wave.channels, stft)?;
    if feats.frames == 0 {
        return Err(invalid("inference", "recording shorter than one analysis window"));
    }
    let pred = model.predict(&feats.to_tensor())?;
    (0..feats.frames)
        .map(|t| {
            let mut azimuth = [0.0; MAX_SOURCES];
            for (s, a) in azimuth.iter_mut().enumerate() {
                let k = (t * MAX_SOURCES + s) * 3;
                *a = folded_azimuth([pred[k], pred[k + 1], pred[k + 2]])?;
            }
            Ok(TrackRow { time: stft.frame_center(t), azimuth })
        })
        .collect()
}

pub fn track_text(rows: &[TrackRow]) -> String {
    let mut s = String::from("frame_time_s,az1_deg,az2_deg\n");
    for r in rows {
        let _ = writeln!(s, "{:.4},{:.3},{:.3}", r.time, r.azimuth[0], r.azimuth[1]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_listing() {
        assert_eq!(permutations(2), vec![vec![0, 1], vec![1, 0]]);
        assert_eq!(permutations(3).len(), 6);
    }

    #[test]
    fn pit_identity_and_swap() {
        let target = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.6, 0.8, 0.0, -0.8, 0.6, 0.0];
        let mask = vec![1.0; 4];
        let pred = Tensor::new(&[2, 2, 3], target.clone()).unwrap();
        let r = pit_mse_loss(&pred, &target, &mask).unwrap();
        assert_eq!((r.loss.item(), r.perm.clone()), (0.0, vec![0, 1]));
        let mut swapped = target.clone();
        for t in 0..2 {
            for c in 0..3 {
                swapped.swap(t * 6 + c, t * 6 + 3 + c);
            }
        }
        let r = pit_mse_loss(&pred, &swapped, &mask).unwrap();
        assert_eq!((r.loss.item(), r.perm), (0.0, vec![1, 0]));
    }

    #[test]
    fn pit_rejects_silent_target() {
        let pred = Tensor::zeros(&[1, 2, 3]);
        assert!(pit_mse_loss(&pred, &[0.0; 6], &[0.0; 2]).is_err());
    }

    #[test]
    fn azimuth_conversion() {
        assert_eq!(cartesian_to_azimuth([1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cartesian_to_azimuth([0.0, 1.0, 0.0]).unwrap(), 90.0);
        assert_eq!(cartesian_to_azimuth([-1.0, 0.0, 0.0]).unwrap(), 180.0);
        assert_eq!(cartesian_to_azimuth([-1.0, -0.0, 0.0]).unwrap(), 180.0);
        assert!(cartesian_to_azimuth([0.0, 0.0, 1.0]).is_err());
        assert_eq!(folded_azimuth([0.0, -1.0, 0.0]).unwrap(), 90.0);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mae_metric(&[vec![2.0, 4.0]]).unwrap(), 3.0);
        assert_eq!(mae_metric(&[vec![1.0], vec![3.0]]).unwrap(), 2.0);
        assert_eq!(mae_metric(&[vec![0.0, 0.0]]).unwrap(), 0.0);
        assert_eq!(accuracy_metric(&[vec![3.0, 6.0]], 5.0).unwrap(), 0.0);
        assert_eq!(accuracy_metric(&[vec![3.0, 4.0]], 5.0).unwrap(), 100.0);
        assert!(mae_metric(&[]).is_err());
        assert!(accuracy_metric(&[], 5.0).is_err());
        assert!(accuracy_metric(&[vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn plateau_decays_after_patience() {
        let cfg = TrainConfig::default();
        let mut s = PlateauScheduler::new(&cfg);
        assert!(!s.observe(1.0));
        assert!(!s.observe(1.0));
        assert!(!s.observe(0.99995));
        assert!(s.observe(1.0));
        assert!((s.lr - 0.0008).abs() < 1e-15);
        assert!(!s.observe(0.5));
        assert_eq!(s.lr, 0.8 * 1e-3);
    }

    #[test]
    fn history_format() {
        let rows = [EpochRecord { epoch: 1, train_loss: 0.5, val_loss: 0.25, lr: 0.001, val_mae: 12.5 }];
        assert_eq!(history_csv(&rows), "epoch,train_loss,val_loss,lr,val_mae\n1,0.5,0.25,0.001,12.5\n");
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let labels: Vec<f64> = (0..4).flat_map(|t| {
            let a = (20.0 * t as f64 + 10.0).to_radians();
            [a.cos(), a.sin(), 0.0, 0.0, 1.0, 0.0]
        }).collect();
        let s = Sample { features: Tensor::zeros(&[4, 4, 4]), frames: 4, labels: labels.clone(), mask: vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0] };
        let r = score(&[labels], &[s]).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.acc_at(5), 100.0);
        assert_eq!(r.samples, 4);
    }
}
