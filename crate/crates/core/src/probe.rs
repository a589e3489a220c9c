//! Linear probing of frozen representations: per-AU batch-norm + bias-free
//! linear classifiers trained with cross-entropy, and F1 reporting.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{build_attention, AttentionConfig, AuRegionSpec};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::io;
use crate::model::Model;
use crate::numeric::{Binding, DiffArray, ParamSet, Tape, Var};
use crate::pipeline::{AdamW, TrainConfig};
use crate::rng::Rng;
use crate::synth::Dataset;

const BN_EPS: f64 = 1e-5;
/// Images per encoder forward during feature extraction.
pub const FEATURE_BATCH: usize = 32;

/// Positive iff the FACS intensity exceeds 1.
pub fn binarize_intensity(intensity: i64) -> Result<u8> {
    if !(0..=5).contains(&intensity) {
        return Err(Error::contract(format!("AU intensity {intensity} outside 0..=5")));
    }
    Ok((intensity > 1) as u8)
}

/// `2PR/(P+R)`; 0 when there is no true positive but some error, 1 when
/// there is nothing to find and nothing was predicted.
pub fn f1_score(tp: i64, fp: i64, fn_: i64) -> Result<f64> {
    if tp < 0 || fp < 0 || fn_ < 0 {
        return Err(Error::contract(format!("negative confusion count ({tp}, {fp}, {fn_})")));
    }
    if tp == 0 {
        return Ok(if fp == 0 && fn_ == 0 { 1.0 } else { 0.0 });
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let p = tp / (tp + fp);
    let r = tp / (tp + fn_);
    Ok(2.0 * p * r / (p + r))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Append the `K` local features to the global one.
    pub with_local: bool,
    pub seed: u64,
    /// Feature-extraction workers.
    pub threads: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.01,
            weight_decay: 1e-4,
            with_local: false,
            seed: 0,
            threads: 1,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::contract(format!(
                "probe lr {} / weight decay {} out of range",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Frozen features `[n, dim]` with binary labels `[n, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub ids: Vec<String>,
    pub dim: usize,
    pub data: Vec<f64>,
    pub k: usize,
    pub labels: Vec<u8>,
}

impl Features {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f64>, k: usize, labels: Vec<u8>) -> Result<Self> {
        let n = ids.len();
        if dim == 0 || data.len() != n * dim || labels.len() != n * k {
            return Err(Error::contract(format!(
                "{n} samples need {} feature and {} label entries, got {} and {}",
                n * dim,
                n * k,
                data.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::contract("probe labels must be binary"));
        }
        Ok(Self { ids, dim, data, k, labels })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            ids: order.iter().map(|&i| self.ids[i].clone()).collect(),
            dim: self.dim,
            data: order.iter().flat_map(|&i| self.row(i).to_vec()).collect(),
            k: self.k,
            labels: order.iter().flat_map(|&i| self.labels[i * self.k..(i + 1) * self.k].to_vec()).collect(),
        }
    }
}

/// SHA-256 over the names, shapes and little-endian bytes of every encoder
/// parameter, in order.
pub fn encoder_hash(params: &ParamSet<f64>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, a) in params.iter().filter(|(n, _)| crate::model::is_encoder_param(n)) {
        h.update(name.as_bytes());
        h.update([0]);
        for &d in a.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in a.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Binary per-AU labels from the dataset's intensities.
pub fn dataset_labels(data: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len() * data.k);
    for s in &data.samples {
        if s.intensities.len() != data.k {
            return Err(Error::contract(format!(
                "{}: {} intensities for K={}",
                s.id,
                s.intensities.len(),
                data.k
            )));
        }
        for &v in &s.intensities {
            out.push(binarize_intensity(v.into())?);
        }
    }
    Ok(out)
}

/// Runs the online encoder of `ckpt` over `data` with every parameter on
/// the tape as a constant. Global features only, or global followed by the
/// `K` region features when `with_local`. Chunks of [`FEATURE_BATCH`]
/// images are spread over `threads` workers; the result does not depend on
/// the thread count.
pub fn extract_features(
    ckpt: &Checkpoint,
    data: &Dataset,
    regions: &[AuRegionSpec],
    with_local: bool,
    threads: usize,
) -> Result<Features> {
    let cfg = TrainConfig::from_map(&ckpt.config, "checkpoint config")?;
    extract_with(&cfg.model, &cfg.attention, &ckpt.state.theta, data, regions, with_local, threads)
}

pub fn extract_with(
    model_cfg: &crate::model::ModelConfig,
    attention: &AttentionConfig,
    params: &ParamSet<f64>,
    data: &Dataset,
    regions: &[AuRegionSpec],
    with_local: bool,
    threads: usize,
) -> Result<Features> {
    if data.is_empty() {
        return Err(Error::contract("feature extraction needs a non-empty dataset"));
    }
    let k = model_cfg.k;
    if data.k != k || (with_local && regions.len() != k) {
        return Err(Error::contract(format!(
            "model has K={k}; dataset has {} AUs and {} region specs",
            data.k,
            regions.len()
        )));
    }
    let size = model_cfg.encoder.input_size;
    if data.image_size != size {
        return Err(Error::contract(format!(
            "dataset images are {0}×{0}; encoder expects {size}×{size}",
            data.image_size
        )));
    }
    let d = model_cfg.encoder.out_dim();
    let dim = if with_local { d * (k + 1) } else { d };
    let chunks: Vec<&[crate::synth::Sample]> = data.samples.chunks(FEATURE_BATCH).collect();
    let threads = threads.clamp(1, chunks.len());
    // contiguous runs of chunks per worker keep the output order fixed
    let per = chunks.len().div_ceil(threads);
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let workers: Vec<_> = chunks
            .chunks(per)
            .map(|run| {
                scope.spawn(move || {
                    let model = Model::new(model_cfg.clone())?;
                    let mut out = Vec::new();
                    for chunk in run {
                        out.extend(encode_chunk(&model, params, chunk, regions, attention, with_local)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().unwrap_or_else(|_| Err(Error::contract("feature worker panicked"))))
            .collect()
    });
    let mut feats = Vec::with_capacity(data.len() * dim);
    for part in parts {
        feats.extend(part?);
    }
    let ids = data.samples.iter().map(|s| s.id.clone()).collect();
    Features::new(ids, dim, feats, k, dataset_labels(data)?)
}

fn encode_chunk(
    model: &Model,
    params: &ParamSet<f64>,
    chunk: &[crate::synth::Sample],
    regions: &[AuRegionSpec],
    attention: &AttentionConfig,
    with_local: bool,
) -> Result<Vec<f64>> {
    let (b, k) = (chunk.len(), model.config().k);
    let size = model.config().encoder.input_size;
    let d = model.config().encoder.out_dim();
    let tape = Tape::<f64>::new();
    let p = Binding::new(&tape, params, false);
    let pixels: Vec<f64> = chunk.iter().flat_map(|s| s.image.iter().copied()).collect();
    let images = tape.constant(&[b, size, size, 1], pixels)?;
    let enc = model.encode(&p, images)?;
    let global = enc.global.values();
    if !with_local {
        return Ok(global);
    }
    let mut maps = Vec::with_capacity(b * k * crate::pipeline::MAP_CELLS);
    for s in chunk {
        maps.extend_from_slice(build_attention::<f64>(&s.landmarks, regions, attention)?.as_slice());
    }
    let local = model.local_features(&p, enc.grid, &maps)?.values();
    let mut out = Vec::with_capacity(b * d * (k + 1));
    for i in 0..b {
        out.extend_from_slice(&global[i * d..(i + 1) * d]);
        out.extend_from_slice(&local[i * k * d..(i + 1) * k * d]);
    }
    Ok(out)
}

/// One classifier per AU: batch-norm over the input features, then a
/// bias-free linear map to two logits. Normalization statistics are those
/// of the (full-batch) training features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub k: usize,
    pub dim: usize,
    pub with_local: bool,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// `[k, dim]`.
    pub gamma: Vec<f64>,
    /// `[k, dim]`.
    pub beta: Vec<f64>,
    /// `[k, dim, 2]`.
    pub weight: Vec<f64>,
}

impl ProbeHead {
    pub fn init(k: usize, dim: usize, with_local: bool, seed: u64) -> Self {
        let mut rng = Rng::new(seed).fork(0x9B0E);
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            k,
            dim,
            with_local,
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            gamma: vec![1.0; k * dim],
            beta: vec![0.0; k * dim],
            weight: (0..k * dim * 2).map(|_| rng.uniform_in(-bound, bound)).collect(),
        }
    }

    fn params(&self) -> Result<ParamSet<f64>> {
        let (d, mut p) = (self.dim, ParamSet::new());
        for a in 0..self.k {
            p.insert(format!("au{a}.bn.g"), DiffArray::vector(self.gamma[a * d..(a + 1) * d].to_vec()));
            p.insert(format!("au{a}.bn.b"), DiffArray::vector(self.beta[a * d..(a + 1) * d].to_vec()));
            p.insert(format!("au{a}.w"), DiffArray::new(vec![d, 2], self.weight[a * d * 2..(a + 1) * d * 2].to_vec())?);
        }
        Ok(p)
    }

    fn store(&mut self, p: &ParamSet<f64>) -> Result<()> {
        let d = self.dim;
        for a in 0..self.k {
            self.gamma[a * d..(a + 1) * d].copy_from_slice(p.require(&format!("au{a}.bn.g"))?.data());
            self.beta[a * d..(a + 1) * d].copy_from_slice(p.require(&format!("au{a}.bn.b"))?.data());
            self.weight[a * d * 2..(a + 1) * d * 2].copy_from_slice(p.require(&format!("au{a}.w"))?.data());
        }
        Ok(())
    }

    fn normalized(&self, f: &Features) -> Vec<f64> {
        let scale: Vec<f64> = self.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut out = Vec::with_capacity(f.data.len());
        for i in 0..f.len() {
            for ((x, m), s) in f.row(i).iter().zip(&self.mean).zip(&scale) {
                out.push((x - m) * s);
            }
        }
        out
    }

    fn check(&self, f: &Features) -> Result<()> {
        if f.dim != self.dim || f.k != self.k {
            return Err(Error::contract(format!(
                "probe expects dim {} and K={}, features have dim {} and K={}",
                self.dim, self.k, f.dim, f.k
            )));
        }
        Ok(())
    }

    /// Logits `[n, 2]` for each AU.
    fn logits<'t>(&self, tape: &'t Tape<f64>, p: &Binding<'_, 't, f64>, f: &Features) -> Result<Vec<Var<'t, f64>>> {
        let x = tape.constant(&[f.len(), self.dim], self.normalized(f))?;
        (0..self.k)
            .map(|a| {
                x.mul(p.get(&format!("au{a}.bn.g"))?)?
                    .add(p.get(&format!("au{a}.bn.b"))?)?
                    .linear(p.get(&format!("au{a}.w"))?, None)
            })
            .collect()
    }

    /// Predicted labels `[n, k]` by argmax (ties go to the negative class).
    pub fn predict(&self, f: &Features) -> Result<Vec<u8>> {
        self.check(f)?;
        let params = self.params()?;
        let tape = Tape::new();
        let p = Binding::new(&tape, &params, false);
        let mut out = vec![0u8; f.len() * self.k];
        for (a, z) in self.logits(&tape, &p, f)?.into_iter().enumerate() {
            for (i, r) in z.values().chunks(2).enumerate() {
                out[i * self.k + a] = (r[1] > r[0]) as u8;
            }
        }
        Ok(out)
    }

    /// Sum over AUs of the mean softmax cross-entropy.
    pub fn loss(&self, f: &Features) -> Result<f64> {
        self.check(f)?;
        let params = self.params()?;
        let tape = Tape::new();
        let p = Binding::new(&tape, &params, false);
        Ok(cross_entropy(&tape, self.logits(&tape, &p, f)?, f)?.item())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::contract(format!("probe head encoding: {e}")))
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let h: Self = serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        let n = h.k * h.dim;
        if h.mean.len() != h.dim || h.var.len() != h.dim || h.gamma.len() != n || h.beta.len() != n || h.weight.len() != 2 * n {
            return Err(Error::parse(origin, "probe head arrays do not match k and dim"));
        }
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&io::read_to_string(path)?, &path.display().to_string())
    }
}

/// Sum over AUs of the mean softmax cross-entropy.
fn cross_entropy<'t>(tape: &'t Tape<f64>, logits: Vec<Var<'t, f64>>, f: &Features) -> Result<Var<'t, f64>> {
    let (k, n) = (f.k, f.len());
    let mut total = tape.scalar(0.0);
    for (a, z) in logits.into_iter().enumerate() {
        // the row max only stabilizes exp; log-sum-exp is invariant to it
        let shift: Vec<f64> = z.values().chunks(2).map(|r| r[0].max(r[1])).collect();
        let mut onehot = vec![0.0; n * 2];
        for i in 0..n {
            onehot[i * 2 + f.labels[i * k + a] as usize] = 1.0;
        }
        let shifted = z.sub(tape.constant(&[n, 1], shift)?)?;
        let lse = shifted.exp().sum_axis(1)?.ln();
        let picked = shifted.mul(tape.constant(&[n, 2], onehot)?)?.sum_axis(1)?;
        total = total.add(lse.sub(picked)?.mean())?;
    }
    Ok(total)
}

/// Full-batch AdamW on the per-AU cross-entropy over precomputed features.
pub fn fit_probe(f: &Features, cfg: &ProbeConfig) -> Result<ProbeHead> {
    cfg.validate()?;
    if f.is_empty() {
        return Err(Error::contract("probe training needs at least one sample"));
    }
    let n = f.len() as f64;
    let mut head = ProbeHead::init(f.k, f.dim, cfg.with_local, cfg.seed);
    for j in 0..f.dim {
        let col = (0..f.len()).map(|i| f.row(i)[j]);
        let mean = col.clone().sum::<f64>() / n;
        head.mean[j] = mean;
        head.var[j] = col.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    }
    let mut params = head.params()?;
    let mut opt = AdamW::<f64>::new(0.9, 0.999, 1e-8);
    for _ in 0..cfg.epochs {
        let grads = {
            let tape = Tape::new();
            let p = Binding::new(&tape, &params, true);
            let loss = cross_entropy(&tape, head.logits(&tape, &p, f)?, f)?;
            if !loss.item().is_finite() {
                return Err(Error::contract("probe loss became non-finite"));
            }
            p.collect(&tape.backward(loss)?)
        };
        opt.step(&mut params, &grads, cfg.lr, cfg.weight_decay, |name, _| name.ends_with(".w"))?;
    }
    head.store(&params)?;
    Ok(head)
}

/// Extracts frozen features from `ckpt` and fits the probe. Fails if the
/// encoder hash changes across training.
pub fn train_probe(ckpt: &Checkpoint, data: &Dataset, regions: &[AuRegionSpec], cfg: &ProbeConfig) -> Result<ProbeHead> {
    let before = encoder_hash(&ckpt.state.theta);
    let f = extract_features(ckpt, data, regions, cfg.with_local, cfg.threads)?;
    let head = fit_probe(&f, cfg)?;
    if encoder_hash(&ckpt.state.theta) != before {
        return Err(Error::contract("encoder parameters changed during probe training"));
    }
    Ok(head)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuScore {
    pub au: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// Percent, unrounded.
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_au: Vec<AuScore>,
    /// Unweighted mean of the per-AU F1 (percent, unrounded).
    pub average: f64,
}

impl EvalReport {
    /// `counts[k] = (tp, fp, fn)`.
    pub fn from_counts(counts: &[(u64, u64, u64)]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::contract("report needs at least one AU"));
        }
        let per_au = counts
            .iter()
            .enumerate()
            .map(|(au, &(tp, fp, fn_))| {
                Ok(AuScore {
                    au,
                    tp,
                    fp,
                    fn_,
                    f1: 100.0 * f1_score(tp as i64, fp as i64, fn_ as i64)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let average = per_au.iter().map(|s| s.f1).sum::<f64>() / per_au.len() as f64;
        Ok(Self { per_au, average })
    }

    pub fn from_predictions(pred: &[u8], truth: &[u8], k: usize) -> Result<Self> {
        if k == 0 || pred.len() != truth.len() || truth.len() % k != 0 || truth.is_empty() {
            return Err(Error::contract(format!(
                "{} predictions vs {} labels for K={k}",
                pred.len(),
                truth.len()
            )));
        }
        let mut counts = vec![(0u64, 0u64, 0u64); k];
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            let c = &mut counts[i % k];
            match (p, t) {
                (1, 1) => c.0 += 1,
                (1, 0) => c.1 += 1,
                (0, 1) => c.2 += 1,
                _ => {}
            }
        }
        Self::from_counts(&counts)
    }

    /// `au,tp,fp,fn,f1` rows plus a final `average` row; F1 in percent
    /// with one decimal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("au,tp,fp,fn,f1\n");
        for s in &self.per_au {
            let _ = writeln!(out, "{},{},{},{},{:.1}", s.au, s.tp, s.fp, s.fn_, s.f1);
        }
        let _ = writeln!(out, "average,,,,{:.1}", self.average);
        out
    }
}

pub fn evaluate_features(head: &ProbeHead, f: &Features) -> Result<EvalReport> {
    if f.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    EvalReport::from_predictions(&head.predict(f)?, &f.labels, f.k)
}

pub fn evaluate(
    head: &ProbeHead,
    ckpt: &Checkpoint,
    data: &Dataset,
    regions: &[AuRegionSpec],
    threads: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    evaluate_features(head, &extract_features(ckpt, data, regions, head.with_local, threads)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn binarize_threshold_is_strict() {
        assert_eq!(binarize_intensity(0).unwrap(), 0);
        assert_eq!(binarize_intensity(1).unwrap(), 0);
        assert_eq!(binarize_intensity(2).unwrap(), 1);
        assert_eq!(binarize_intensity(5).unwrap(), 1);
        assert!(binarize_intensity(6).is_err());
        assert!(binarize_intensity(-1).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(10, 0, 0).unwrap(), 1.0);
        assert_eq!(f1_score(0, 5, 5).unwrap(), 0.0);
        assert_abs_diff_eq!(f1_score(2, 1, 1).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(f1_score(0, 0, 0).unwrap(), 1.0);
        assert!(f1_score(-1, 0, 0).is_err());
    }

    #[test]
    fn report_from_hand_counts() {
        let r = EvalReport::from_counts(&[(2, 1, 1), (10, 0, 0)]).unwrap();
        let csv = r.to_csv();
        assert!(csv.contains("0,2,1,1,66.7\n"), "{csv}");
        assert!(csv.contains("1,10,0,0,100.0\n"));
        assert!(csv.ends_with("average,,,,83.3\n"));
        assert!(EvalReport::from_counts(&[]).is_err());
    }

    #[test]
    fn perfect_predictions_score_100() {
        let truth = vec![1, 0, 0, 1, 1, 1];
        let r = EvalReport::from_predictions(&truth, &truth, 2).unwrap();
        assert!(r.per_au.iter().all(|s| s.f1 == 100.0));
        assert_eq!(r.average, 100.0);
    }

    fn toy_features(n: usize, seed: u64) -> Features {
        // AU a is on iff feature a is positive, with a margin of 0.25;
        // other coordinates are noise
        let (k, dim) = (3, 5);
        let mut rng = Rng::new(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let mut row: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            for x in &mut row[..k] {
                *x += 0.25f64.copysign(*x);
            }
            for a in 0..k {
                labels.push((row[a] > 0.0) as u8);
            }
            data.extend(row);
        }
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        Features::new(ids, dim, data, k, labels).unwrap()
    }

    #[test]
    fn separable_features_reach_full_training_accuracy() {
        let f = toy_features(120, 3);
        let cfg = ProbeConfig {
            epochs: 200,
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let head = fit_probe(&f, &cfg).unwrap();
        assert_eq!(head.predict(&f).unwrap(), f.labels);
        let r = evaluate_features(&head, &f).unwrap();
        assert_eq!(r.average, 100.0);
    }

    #[test]
    fn zero_epochs_keep_initial_head() {
        let f = toy_features(20, 4);
        let cfg = ProbeConfig {
            epochs: 0,
            seed: 9,
            ..Default::default()
        };
        let head = fit_probe(&f, &cfg).unwrap();
        let init = ProbeHead::init(f.k, f.dim, false, 9);
        assert_eq!(head.gamma, init.gamma);
        assert_eq!(head.beta, init.beta);
        assert_eq!(head.weight, init.weight);
    }

    #[test]
    fn probe_gradient_matches_finite_differences() {
        let f = toy_features(10, 5);
        let head = ProbeHead::init(f.k, f.dim, false, 1);
        let params = head.params().unwrap();
        let tape = Tape::new();
        let p = Binding::new(&tape, &params, true);
        let loss = cross_entropy(&tape, head.logits(&tape, &p, &f).unwrap(), &f).unwrap();
        let grads = p.collect(&tape.backward(loss).unwrap());
        let h = 1e-6;
        for (name, g) in &grads {
            for idx in [0, g.len() / 2, g.len() - 1] {
                let bumped = |d: f64| {
                    let mut hh = head.clone();
                    let mut p = hh.params().unwrap();
                    p.get_mut(name).unwrap().data_mut()[idx] += d;
                    hh.store(&p).unwrap();
                    hh.loss(&f).unwrap()
                };
                let num = (bumped(h) - bumped(-h)) / (2.0 * h);
                assert_abs_diff_eq!(g[idx], num, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn report_is_order_invariant() {
        let f = toy_features(40, 6);
        let head = ProbeHead::init(f.k, f.dim, false, 2);
        let r = evaluate_features(&head, &f).unwrap();
        let mut order: Vec<usize> = (0..f.len()).collect();
        Rng::new(1).shuffle(&mut order);
        assert_eq!(evaluate_features(&head, &f.permuted(&order)).unwrap(), r);
    }

    #[test]
    fn head_json_round_trip() {
        let head = ProbeHead::init(2, 3, true, 5);
        assert_eq!(ProbeHead::from_json(&head.to_json().unwrap(), "mem").unwrap(), head);
        assert!(ProbeHead::from_json("{}", "mem").is_err());
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        assert!(Features::new(vec!["a".into()], 2, vec![0.0; 2], 3, vec![0; 2]).is_err());
        assert!(Features::new(vec!["a".into()], 2, vec![0.0; 2], 1, vec![2]).is_err());
    }
}
