//! Two-view augmentation, schedules, AdamW, the flat `key = value` training
//! config, and the self-supervised pre-training loop.
//!
//! Step `s` of a run seeded with `seed` draws everything from
//! [`batch_seed`]`(seed, s)`: batch membership first, then one forked
//! generator per batch element for its two views.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use crate::attention::{build_attention, AttentionConfig, AuRegionSpec, LandmarkSet, GRID};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::io;
use crate::losses::{correlation_plans, global_loss, local_loss, total_loss, LossWeights, PlanStats};
use crate::model::{init_params, DualNetworkState, EncoderConfig, Model, ModelConfig};
use crate::numeric::{Binding, ParamSet, Tape, Var};
use crate::relation::{correlation_loss, cost_from_relation, RelationMatrix, SinkhornConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::synth::Dataset;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_p: f64,
    /// Probability of applying brightness/contrast jitter.
    pub jitter_p: f64,
    /// Additive brightness offset drawn from `±brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`, applied about the mean.
    pub contrast: f64,
    pub blur_p: f64,
    /// Blur σ range in pixels of a `blur_reference`-pixel image; rescaled
    /// to the actual image size when applied.
    pub blur_sigma: (f64, f64),
    pub blur_reference: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.2,
            contrast: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            blur_reference: 224.0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            flip_p: 0.0,
            jitter_p: 0.0,
            blur_p: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Vec<f64>,
    pub landmarks: LandmarkSet,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: View,
    pub view2: View,
}

fn blur(img: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let last = size as isize - 1;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; size * size];
        for r in 0..size {
            for c in 0..size {
                let mut acc = 0.0;
                for (j, &w) in k.iter().enumerate() {
                    let off = j as isize - radius;
                    let (rr, cc) = if horizontal {
                        (r as isize, (c as isize + off).clamp(0, last))
                    } else {
                        ((r as isize + off).clamp(0, last), c as isize)
                    };
                    acc += w * src[rr as usize * size + cc as usize];
                }
                out[r * size + c] = acc;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn augment_one(img: &[f64], size: usize, lm: &LandmarkSet, cfg: &AugmentConfig, rng: &mut Rng) -> View {
    // draws happen unconditionally so the stream does not depend on outcomes
    let flip = rng.bernoulli(cfg.flip_p);
    let jitter = rng.bernoulli(cfg.jitter_p);
    let db = rng.uniform_in(-cfg.brightness, cfg.brightness);
    let dc = rng.uniform_in(1.0 - cfg.contrast, 1.0 + cfg.contrast);
    let blurred = rng.bernoulli(cfg.blur_p);
    let sigma = rng.uniform_in(cfg.blur_sigma.0, cfg.blur_sigma.1);
    let mut out = img.to_vec();
    if flip {
        for row in out.chunks_mut(size) {
            row.reverse();
        }
    }
    if jitter {
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        out.iter_mut().for_each(|v| *v = (*v - mean) * dc + mean + db);
    }
    if blurred {
        out = blur(&out, size, sigma * size as f64 / cfg.blur_reference);
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    View {
        image: out,
        landmarks: if flip { lm.flipped() } else { lm.clone() },
        flipped: flip,
    }
}

/// Two independently augmented views of `img` (`size × size`, values in `[0,1]`).
pub fn augment(img: &[f64], size: usize, lm: &LandmarkSet, cfg: &AugmentConfig, seed: u64) -> Result<ViewPair> {
    if img.len() != size * size {
        return Err(Error::dim(format!("image has {} pixels, expected {size}²", img.len())));
    }
    let mut rng = Rng::new(seed);
    let view1 = augment_one(img, size, lm, cfg, &mut rng);
    let view2 = augment_one(img, size, lm, cfg, &mut rng);
    Ok(ViewPair { view1, view2 })
}

/// `end + (start − end)·(1 + cos(π·step/total))/2`.
pub fn cosine_schedule(start: f64, end: f64, step: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::contract("schedule needs total > 0"));
    }
    if step > total {
        return Err(Error::contract(format!("step {step} beyond total {total}")));
    }
    if step == 0 {
        return Ok(start);
    }
    if step == total {
        return Ok(end);
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(end + (start - end) * (1.0 + phase.cos()) / 2.0)
}

/// `0.05 · batch / 256`.
pub fn base_lr(batch_size: usize) -> f64 {
    0.05 * batch_size as f64 / 256.0
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Names of every parameter with optimizer state.
    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.m.keys().map(String::as_str)
    }

    /// `p ← p − lr·(m̂/(√v̂ + eps) + wd·p)`; `decay(name)` selects which
    /// parameters receive weight decay.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[(String, Vec<T>)],
        lr: f64,
        weight_decay: f64,
        decay: impl Fn(&str, &[usize]) -> bool,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            if g.len() != p.numel() {
                return Err(Error::dim(format!("{name}: gradient has {} entries for {}", g.len(), p.numel())));
            }
            let wd = if decay(name, p.shape()) { T::lit(weight_decay) } else { T::zero() };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = *pv - lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
            }
        }
        Ok(())
    }
}

/// Weight decay applies to matrices and conv kernels, not to biases,
/// normalization affines or other vectors.
pub fn decays(_name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub model: ModelConfig,
    pub loss_weights: LossWeights,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub sinkhorn: SinkhornConfig,
    pub attention: AttentionConfig,
    pub augment: AugmentConfig,
    pub symmetric_global: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 300,
            batch_size: 16,
            model: ModelConfig::default(),
            loss_weights: LossWeights::default(),
            wd_start: 0.04,
            wd_end: 0.4,
            ema_start: 0.98,
            ema_end: 1.0,
            sinkhorn: SinkhornConfig::default(),
            attention: AttentionConfig::default(),
            augment: AugmentConfig::default(),
            symmetric_global: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str, origin: &str) -> Result<IndexMap<String, String>> {
    let mut out = IndexMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::parse(origin, format!("line {}: empty key", n + 1)));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        base_lr(self.batch_size)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let e = &self.model.encoder;
        let f = io::fmt_f64;
        let a = &self.augment;
        [
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("k", self.model.k.to_string()),
            ("input_size", e.input_size.to_string()),
            ("patch", e.patch.to_string()),
            ("embed_dim", e.embed_dim.to_string()),
            ("window", e.window.to_string()),
            ("depths", join(&e.depths)),
            ("heads", join(&e.heads)),
            ("shift", join(&e.shift)),
            ("mlp_ratio", e.mlp_ratio.to_string()),
            ("refiner_channels", self.model.refiner_channels.to_string()),
            ("head_hidden", self.model.head_hidden.to_string()),
            ("z_dim", self.model.z_dim.to_string()),
            ("alpha1", f(self.loss_weights.alpha1)),
            ("alpha2", f(self.loss_weights.alpha2)),
            ("alpha3", f(self.loss_weights.alpha3)),
            ("wd_start", f(self.wd_start)),
            ("wd_end", f(self.wd_end)),
            ("ema_start", f(self.ema_start)),
            ("ema_end", f(self.ema_end)),
            ("epsilon", f(self.sinkhorn.epsilon)),
            ("sinkhorn_max_iter", self.sinkhorn.max_iter.to_string()),
            ("sinkhorn_tol", f(self.sinkhorn.tol)),
            ("sigma", f(self.attention.sigma)),
            ("min_semi_axis_cells", f(self.attention.min_semi_axis_cells)),
            ("flip_p", f(a.flip_p)),
            ("jitter_p", f(a.jitter_p)),
            ("brightness", f(a.brightness)),
            ("contrast", f(a.contrast)),
            ("blur_p", f(a.blur_p)),
            ("blur_sigma_min", f(a.blur_sigma.0)),
            ("blur_sigma_max", f(a.blur_sigma.1)),
            ("blur_reference", f(a.blur_reference)),
            ("symmetric_global", self.symmetric_global.to_string()),
            ("adam_beta1", f(self.adam_beta1)),
            ("adam_beta2", f(self.adam_beta2)),
            ("adam_eps", f(self.adam_eps)),
            ("lr", f(self.lr())),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies overrides on top of `self`. `lr` is accepted only when it
    /// equals the value implied by the batch size.
    pub fn apply<'a>(&mut self, kv: impl IntoIterator<Item = (&'a str, &'a str)>, origin: &str) -> Result<()> {
        let mut lr_claim = None;
        for (k, v) in kv {
            let bad = |what: &str| Error::parse(origin, format!("{k} = {v:?}: expected {what}"));
            let num = || v.parse::<f64>().map_err(|_| bad("a number"));
            let int = || v.parse::<usize>().map_err(|_| bad("a non-negative integer"));
            let list = || -> Result<Vec<usize>> {
                v.split(',').map(|x| x.trim().parse::<usize>().map_err(|_| bad("a comma-separated integer list"))).collect()
            };
            let flag = || v.parse::<bool>().map_err(|_| bad("true or false"));
            let e = &mut self.model.encoder;
            match k {
                "seed" => self.seed = v.parse().map_err(|_| bad("a 64-bit unsigned integer"))?,
                "steps" => self.steps = int()?,
                "batch_size" => self.batch_size = int()?,
                "k" => self.model.k = int()?,
                "input_size" => e.input_size = int()?,
                "patch" => e.patch = int()?,
                "embed_dim" => e.embed_dim = int()?,
                "window" => e.window = int()?,
                "depths" => e.depths = list()?,
                "heads" => e.heads = list()?,
                "shift" => {
                    e.shift = v
                        .split(',')
                        .map(|x| x.trim().parse::<bool>().map_err(|_| bad("a comma-separated bool list")))
                        .collect::<Result<_>>()?
                }
                "mlp_ratio" => e.mlp_ratio = int()?,
                "refiner_channels" => self.model.refiner_channels = int()?,
                "head_hidden" => self.model.head_hidden = int()?,
                "z_dim" => self.model.z_dim = int()?,
                "alpha1" => self.loss_weights.alpha1 = num()?,
                "alpha2" => self.loss_weights.alpha2 = num()?,
                "alpha3" => self.loss_weights.alpha3 = num()?,
                "wd_start" => self.wd_start = num()?,
                "wd_end" => self.wd_end = num()?,
                "ema_start" => self.ema_start = num()?,
                "ema_end" => self.ema_end = num()?,
                "epsilon" => self.sinkhorn.epsilon = num()?,
                "sinkhorn_max_iter" => self.sinkhorn.max_iter = int()?,
                "sinkhorn_tol" => self.sinkhorn.tol = num()?,
                "sigma" => self.attention.sigma = num()?,
                "min_semi_axis_cells" => self.attention.min_semi_axis_cells = num()?,
                "flip_p" => self.augment.flip_p = num()?,
                "jitter_p" => self.augment.jitter_p = num()?,
                "brightness" => self.augment.brightness = num()?,
                "contrast" => self.augment.contrast = num()?,
                "blur_p" => self.augment.blur_p = num()?,
                "blur_sigma_min" => self.augment.blur_sigma.0 = num()?,
                "blur_sigma_max" => self.augment.blur_sigma.1 = num()?,
                "blur_reference" => self.augment.blur_reference = num()?,
                "symmetric_global" => self.symmetric_global = flag()?,
                "adam_beta1" => self.adam_beta1 = num()?,
                "adam_beta2" => self.adam_beta2 = num()?,
                "adam_eps" => self.adam_eps = num()?,
                "lr" => lr_claim = Some(num()?),
                other => return Err(Error::parse(origin, format!("unknown key {other:?}"))),
            }
        }
        if let Some(lr) = lr_claim {
            if lr != self.lr() {
                return Err(Error::contract(format!(
                    "lr is fixed at 0.05·batch/256 = {} for batch {}; got {lr}",
                    self.lr(),
                    self.batch_size
                )));
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let kv = parse_kv(text, origin)?;
        let mut cfg = Self::default();
        cfg.apply(kv.iter().map(|(k, v)| (k.as_str(), v.as_str())), origin)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_map(map: &BTreeMap<String, String>, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(map.iter().map(|(k, v)| (k.as_str(), v.as_str())), origin)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&io::read_to_string(path)?, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_weights.validate()?;
        if self.batch_size < 2 {
            return Err(Error::contract("batch_size must be at least 2 (heads use batch statistics)"));
        }
        for (name, v) in [("ema_start", self.ema_start), ("ema_end", self.ema_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!("{name} = {v} outside [0,1]")));
            }
        }
        if !(self.sinkhorn.epsilon > 0.0) {
            return Err(Error::contract("epsilon must be positive"));
        }
        let a = &self.augment;
        if [a.flip_p, a.jitter_p, a.blur_p].iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract("augmentation probabilities must lie in [0,1]"));
        }
        if !(a.blur_sigma.0 > 0.0 && a.blur_sigma.0 <= a.blur_sigma.1 && a.blur_reference > 0.0) {
            return Err(Error::contract("blur sigma range must be positive and ordered"));
        }
        Ok(())
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.model.encoder
    }
}

/// Seed that determines everything drawn at `step`.
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    Rng::new(seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub l_glo: f64,
    pub l_loc: f64,
    pub l_corr: f64,
    pub l_all: f64,
    pub lr: f64,
    pub wd: f64,
    pub m: f64,
}

pub const LOSS_HEADER: &str = "step,l_glo,l_loc,l_corr,l_all,lr,wd,m";

pub fn format_loss_log(rows: &[LossRow]) -> String {
    let mut s = String::from(LOSS_HEADER);
    s.push('\n');
    let f = io::fmt_f64;
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step,
            f(r.l_glo),
            f(r.l_loc),
            f(r.l_corr),
            f(r.l_all),
            f(r.lr),
            f(r.wd),
            f(r.m)
        );
    }
    s
}

pub fn parse_loss_log(text: &str, origin: &str) -> Result<Vec<LossRow>> {
    let t = io::parse_csv(text, origin)?;
    if t.header.join(",") != LOSS_HEADER {
        return Err(Error::parse(origin, format!("loss log header must be {LOSS_HEADER}")));
    }
    t.rows
        .iter()
        .map(|r| {
            let g = |i: usize| io::parse_f64(&r[i], origin);
            Ok(LossRow {
                step: io::parse_usize(&r[0], origin)?,
                l_glo: g(1)?,
                l_loc: g(2)?,
                l_corr: g(3)?,
                l_all: g(4)?,
                lr: g(5)?,
                wd: g(6)?,
                m: g(7)?,
            })
        })
        .collect()
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRow>,
    pub plan_stats: PlanStats,
}

/// Stacked views and their attention maps for one batch.
pub struct BatchViews {
    pub ids: Vec<String>,
    pub views: [Vec<f64>; 2],
    pub maps: [Vec<f64>; 2],
}

pub fn build_batch(cfg: &TrainConfig, data: &Dataset, regions: &[AuRegionSpec], seed: u64) -> Result<BatchViews> {
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    // partial Fisher–Yates: the first `batch` slots form the batch
    let b = cfg.batch_size.min(data.len());
    for i in 0..b {
        let j = i + rng.below(data.len() - i);
        order.swap(i, j);
    }
    let size = data.image_size;
    let mut out = BatchViews {
        ids: Vec::with_capacity(b),
        views: [Vec::with_capacity(b * size * size), Vec::with_capacity(b * size * size)],
        maps: [Vec::new(), Vec::new()],
    };
    for &i in &order[..b] {
        let s = &data.samples[i];
        let pair = augment(&s.image, size, &s.landmarks, &cfg.augment, rng.next_u64())?;
        for (slot, v) in [pair.view1, pair.view2].into_iter().enumerate() {
            out.views[slot].extend_from_slice(&v.image);
            let a = build_attention::<f64>(&v.landmarks, regions, &cfg.attention)?;
            out.maps[slot].extend_from_slice(a.as_slice());
        }
        out.ids.push(s.id.clone());
    }
    Ok(out)
}

/// Loss terms of one step, before any optimizer update.
pub struct StepLosses {
    pub l_glo: f64,
    pub l_loc: f64,
    pub l_corr: f64,
    pub l_all: f64,
    pub grads: Vec<(String, Vec<f64>)>,
    pub stats: PlanStats,
}

/// The loss terms of one step as tape nodes.
pub struct LossGraph<'t> {
    pub l_glo: Var<'t, f64>,
    pub l_loc: Var<'t, f64>,
    pub l_corr: Var<'t, f64>,
    pub l_all: Var<'t, f64>,
    /// Transport plans used by the correlation term (empty when it is off).
    pub plans: Vec<f64>,
    pub stats: PlanStats,
}

/// Builds every loss term for one batch: the online network sees view 1,
/// the target view 2. Plans are solved from the current features unless
/// `fixed_plans` supplies them; either way they enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph<'t>(
    model: &Model,
    cfg: &TrainConfig,
    online: &Binding<'_, 't, f64>,
    target: &Binding<'_, 't, f64>,
    cost: &[f64],
    batch: usize,
    views: &[Vec<f64>; 2],
    maps: &[Vec<f64>; 2],
    fixed_plans: Option<&[f64]>,
) -> Result<LossGraph<'t>> {
    let w = &cfg.loss_weights;
    let k = cfg.model.k;
    let n = cfg.encoder().input_size;
    let need_local = w.alpha2 > 0.0 || w.alpha3 > 0.0;
    let tape = online.tape();
    let img = |i: usize| tape.constant(&[batch, n, n, 1], views[i].clone());
    let on = model.forward(online, img(0)?, &maps[0], true, need_local)?;
    let tg = model.forward(target, img(1)?, &maps[1], false, need_local)?;
    let q1g = on.q_global.expect("online prediction");
    let mut l_glo = global_loss(q1g, tg.z_global)?;
    if cfg.symmetric_global {
        let on2 = model.forward(online, img(1)?, &maps[1], true, false)?;
        let tg2 = model.forward(target, img(0)?, &maps[0], false, false)?;
        let other = global_loss(on2.q_global.expect("online prediction"), tg2.z_global)?;
        l_glo = l_glo.add(other)?.scale(0.5);
    }
    let zero = tape.scalar(0.0);
    let mut stats = PlanStats::default();
    let mut plans = Vec::new();
    let (l_loc, l_corr) = if need_local {
        let z = cfg.model.z_dim;
        let q1k = on.q_local.expect("local prediction").reshape(&[batch, k, z])?;
        let z2k = tg.z_local.expect("local projection").reshape(&[batch, k, z])?;
        let l_loc = local_loss(q1k, q1g, tg.z_global, z2k)?;
        let (o, t) = (on.local.expect("online local"), tg.local.expect("target local"));
        let l_corr = if w.alpha3 > 0.0 {
            plans = match fixed_plans {
                Some(p) => p.to_vec(),
                None => {
                    let (p, s) = correlation_plans(
                        &o.values(),
                        &t.values(),
                        &on.global.values(),
                        &tg.global.values(),
                        batch,
                        k,
                        cost,
                        &cfg.sinkhorn,
                    )?;
                    stats = s;
                    p
                }
            };
            correlation_loss(o, t.stop_gradient(), &plans)?
        } else {
            zero
        };
        (l_loc, l_corr)
    } else {
        (zero, zero)
    };
    let l_all = total_loss(l_glo, l_loc, l_corr, w)?;
    Ok(LossGraph {
        l_glo,
        l_loc,
        l_corr,
        l_all,
        plans,
        stats,
    })
}

/// Forward and backward pass of one step on prepared views.
#[allow(clippy::too_many_arguments)]
pub fn step_losses(
    model: &Model,
    cfg: &TrainConfig,
    state: &DualNetworkState<f64>,
    cost: &[f64],
    batch: usize,
    views: &[Vec<f64>; 2],
    maps: &[Vec<f64>; 2],
) -> Result<StepLosses> {
    let tape = Tape::<f64>::new();
    let online = Binding::new(&tape, &state.theta, true);
    let target = Binding::new(&tape, &state.xi, false);
    let g = loss_graph(model, cfg, &online, &target, cost, batch, views, maps, None)?;
    let value = g.l_all.item();
    let mut grads = Vec::new();
    if value.is_finite() {
        grads = online.collect(&tape.backward(g.l_all)?);
    }
    Ok(StepLosses {
        l_glo: g.l_glo.item(),
        l_loc: g.l_loc.item(),
        l_corr: g.l_corr.item(),
        l_all: value,
        grads,
        stats: g.stats,
    })
}

/// Runs `cfg.steps` optimizer steps. `observe` sees every log row as it is
/// produced.
pub fn pretrain(
    cfg: &TrainConfig,
    data: &Dataset,
    relation: &RelationMatrix<f64>,
    regions: &[AuRegionSpec],
    mut observe: impl FnMut(&LossRow),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let k = cfg.model.k;
    if data.is_empty() {
        return Err(Error::contract("pre-training needs a non-empty dataset"));
    }
    if data.image_size != cfg.encoder().input_size {
        return Err(Error::contract(format!(
            "dataset images are {0}×{0}; encoder expects {1}×{1}",
            data.image_size,
            cfg.encoder().input_size
        )));
    }
    if regions.len() != k || relation.k() != k {
        return Err(Error::contract(format!(
            "K={k} but {} region specs and a {}×{} relation matrix",
            regions.len(),
            relation.k(),
            relation.k()
        )));
    }
    let model = Model::new(cfg.model.clone())?;
    let theta = init_params::<f64>(&cfg.model, &mut Rng::new(cfg.seed).fork(0x1A17))?;
    let mut state = DualNetworkState::new(theta, cfg.ema_start);
    let mut opt = AdamW::<f64>::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let cost = cost_from_relation(relation);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut plan_stats = PlanStats::default();
    for step in 0..cfg.steps {
        let seed = batch_seed(cfg.seed, step);
        let bv = build_batch(cfg, data, regions, seed)?;
        let batch = bv.ids.len();
        let lr = cosine_schedule(cfg.lr(), 0.0, step, cfg.steps)?;
        let wd = cosine_schedule(cfg.wd_start, cfg.wd_end, step, cfg.steps)?;
        let m = cosine_schedule(cfg.ema_start, cfg.ema_end, step, cfg.steps)?;
        let s = step_losses(&model, cfg, &state, &cost, batch, &bv.views, &bv.maps)?;
        if !s.l_all.is_finite() || s.grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                step,
                batch_seed: seed,
                detail: format!(
                    "l_glo={} l_loc={} l_corr={} l_all={}; images {}",
                    s.l_glo,
                    s.l_loc,
                    s.l_corr,
                    s.l_all,
                    bv.ids.join(" ")
                ),
            });
        }
        plan_stats.unconverged += s.stats.unconverged;
        plan_stats.uniform_fallbacks += s.stats.uniform_fallbacks;
        opt.step(&mut state.theta, &s.grads, lr, wd, decays)?;
        state.m = m;
        state.ema_update()?;
        let row = LossRow {
            step,
            l_glo: s.l_glo,
            l_loc: s.l_loc,
            l_corr: s.l_corr,
            l_all: s.l_all,
            lr,
            wd,
            m,
        };
        observe(&row);
        log.push(row);
    }
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            step: cfg.steps,
            config: cfg.to_kv(),
            state,
        },
        log,
        plan_stats,
    })
}

/// Maps of a single image, `[K, 14, 14]`.
pub fn attention_for(lm: &LandmarkSet, regions: &[AuRegionSpec], cfg: &AttentionConfig) -> Result<Vec<f64>> {
    Ok(build_attention::<f64>(lm, regions, cfg)?.as_slice().to_vec())
}

/// Cells per attention map.
pub const MAP_CELLS: usize = GRID * GRID;
