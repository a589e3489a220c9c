//! Toy Swin encoder, attention-gated local refiner, projection/prediction
//! heads, and the online/target pair updated by EMA.
//!
//! Tensors are NHWC. Parameter names are flat strings (`s0.b1.wq`, `g.l1.w`,
//! …); the target network carries the same names as the online one.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::attention::GRID;
use crate::error::{Error, Result};
use crate::numeric::{Binding, ParamSet, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Mask value added to attention logits across shifted-window regions.
const MASK_NEG: f64 = -100.0;
const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub in_chans: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub window: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    /// Per stage: whether every second block uses shifted windows.
    pub shift: Vec<bool>,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 56,
            in_chans: 1,
            patch: 2,
            embed_dim: 16,
            window: 7,
            depths: vec![2, 2],
            heads: vec![2, 4],
            shift: vec![true, true],
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Token grid side of stage `s`.
    pub fn stage_grid(&self, s: usize) -> usize {
        self.input_size / self.patch >> s
    }

    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn out_grid(&self) -> usize {
        self.stage_grid(self.stages() - 1)
    }

    pub fn out_dim(&self) -> usize {
        self.stage_dim(self.stages() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages();
        if n == 0 || self.heads.len() != n || self.shift.len() != n {
            return Err(Error::contract("depths, heads and shift must have one entry per stage"));
        }
        if self.patch == 0 || self.input_size % self.patch != 0 || self.in_chans == 0 || self.mlp_ratio == 0 {
            return Err(Error::contract(format!(
                "input {} is not divisible into {}-pixel patches",
                self.input_size, self.patch
            )));
        }
        for s in 0..n {
            let g = self.input_size / self.patch;
            if s > 0 && (g >> (s - 1)) % 2 != 0 {
                return Err(Error::contract(format!("stage {s} merges an odd grid")));
            }
            let grid = self.stage_grid(s);
            if self.window == 0 || grid % self.window != 0 {
                return Err(Error::contract(format!(
                    "stage {s} grid {grid} is not a multiple of window {}",
                    self.window
                )));
            }
            if self.heads[s] == 0 || self.stage_dim(s) % self.heads[s] != 0 {
                return Err(Error::contract(format!("stage {s}: dim not divisible by heads")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub k: usize,
    pub refiner_channels: usize,
    pub head_hidden: usize,
    pub z_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            k: 8,
            refiner_channels: 8,
            head_hidden: 64,
            z_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.out_grid() != GRID {
            return Err(Error::contract(format!(
                "encoder ends at a {g}×{g} grid; attention maps need {GRID}×{GRID}",
                g = self.encoder.out_grid()
            )));
        }
        if self.k == 0 || self.refiner_channels == 0 || self.head_hidden == 0 || self.z_dim == 0 {
            return Err(Error::contract("K and head sizes must be positive"));
        }
        Ok(())
    }
}

fn block_prefix(s: usize, b: usize) -> String {
    format!("s{s}.b{b}")
}

fn block_shifted(cfg: &EncoderConfig, s: usize, b: usize) -> bool {
    cfg.shift[s] && b % 2 == 1
}

/// Fresh online parameters.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let e = &cfg.encoder;
    let mut p = ParamSet::new();
    let lin = |p: &mut ParamSet<T>, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool| {
        p.add_normal(rng, &format!("{name}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
        if bias {
            p.add_const(&format!("{name}.b"), &[fan_out], 0.0);
        }
    };
    let norm = |p: &mut ParamSet<T>, name: &str, dim: usize| {
        p.add_const(&format!("{name}.g"), &[dim], 1.0);
        p.add_const(&format!("{name}.b"), &[dim], 0.0);
    };
    let fan = e.patch * e.patch * e.in_chans;
    p.add_normal(rng, "patch.w", &[e.patch, e.patch, e.in_chans, e.embed_dim], (1.0 / fan as f64).sqrt());
    p.add_const("patch.b", &[e.embed_dim], 0.0);
    norm(&mut p, "patch.ln", e.embed_dim);
    let w = e.window;
    for s in 0..e.stages() {
        let c = e.stage_dim(s);
        if s > 0 {
            let cin = e.stage_dim(s - 1);
            norm(&mut p, &format!("s{s}.merge.ln"), 4 * cin);
            lin(&mut p, rng, &format!("s{s}.merge"), 4 * cin, c, false);
        }
        for b in 0..e.depths[s] {
            let pre = block_prefix(s, b);
            norm(&mut p, &format!("{pre}.ln1"), c);
            for n in ["q", "k", "v", "proj"] {
                lin(&mut p, rng, &format!("{pre}.{n}"), c, c, true);
            }
            p.add_normal(rng, &format!("{pre}.rpb"), &[(2 * w - 1) * (2 * w - 1), e.heads[s]], 0.02);
            norm(&mut p, &format!("{pre}.ln2"), c);
            lin(&mut p, rng, &format!("{pre}.mlp1"), c, c * e.mlp_ratio, true);
            lin(&mut p, rng, &format!("{pre}.mlp2"), c * e.mlp_ratio, c, true);
        }
    }
    let d = e.out_dim();
    norm(&mut p, "norm", d);
    let r = cfg.refiner_channels;
    p.add_normal(rng, "local.c1.w", &[3, 3, d, r], (2.0 / (9 * d) as f64).sqrt());
    p.add_const("local.c1.b", &[r], 0.0);
    p.add_normal(rng, "local.c2.w", &[3, 3, r, d], (2.0 / (9 * r) as f64).sqrt());
    p.add_const("local.c2.b", &[d], 0.0);
    for (head, din) in [("g", d), ("q", cfg.z_dim)] {
        lin(&mut p, rng, &format!("{head}.l1"), din, cfg.head_hidden, true);
        norm(&mut p, &format!("{head}.bn"), cfg.head_hidden);
        lin(&mut p, rng, &format!("{head}.l2"), cfg.head_hidden, cfg.z_dim, true);
    }
    Ok(p)
}

/// True for parameters that belong to the encoder (everything the probe
/// freezes and hashes).
pub fn is_encoder_param(name: &str) -> bool {
    !(name.starts_with("local.") || name.starts_with("g.") || name.starts_with("q."))
}

pub struct EncoderOutput<'t, T: Scalar> {
    /// `[B, 14, 14, D]`.
    pub grid: Var<'t, T>,
    /// `[B, D]` spatial mean.
    pub global: Var<'t, T>,
}

/// Forward passes for one configuration. Index tables for window
/// partitioning are built once per batch size and reused.
pub struct Model {
    cfg: ModelConfig,
    cache: RefCell<HashMap<String, Rc<Vec<usize>>>>,
    masks: RefCell<HashMap<usize, Rc<Vec<f64>>>>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            cache: RefCell::new(HashMap::new()),
            masks: RefCell::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn cached(&self, key: String, build: impl FnOnce() -> Vec<usize>) -> Rc<Vec<usize>> {
        if let Some(v) = self.cache.borrow().get(&key) {
            return v.clone();
        }
        let v = Rc::new(build());
        self.cache.borrow_mut().insert(key, v.clone());
        v
    }

    /// `[B,G,G,C]` → `[B·nW, w², C]` after rolling the grid by `−shift`.
    fn partition_index(&self, batch: usize, g: usize, c: usize, shift: usize) -> Rc<Vec<usize>> {
        let w = self.cfg.encoder.window;
        self.cached(format!("part.{batch}.{g}.{c}.{shift}"), || {
            let nw = g / w;
            let mut idx = Vec::with_capacity(batch * g * g * c);
            for b in 0..batch {
                for wi in 0..nw {
                    for wj in 0..nw {
                        for a in 0..w {
                            for bb in 0..w {
                                let r = (wi * w + a + shift) % g;
                                let col = (wj * w + bb + shift) % g;
                                let base = ((b * g + r) * g + col) * c;
                                idx.extend(base..base + c);
                            }
                        }
                    }
                }
            }
            idx
        })
    }

    /// Inverse of [`Self::partition_index`].
    fn reverse_index(&self, batch: usize, g: usize, c: usize, shift: usize) -> Rc<Vec<usize>> {
        let w = self.cfg.encoder.window;
        self.cached(format!("rev.{batch}.{g}.{c}.{shift}"), || {
            let nw = g / w;
            let mut idx = Vec::with_capacity(batch * g * g * c);
            for b in 0..batch {
                for r in 0..g {
                    for col in 0..g {
                        let rs = (r + g - shift) % g;
                        let cs = (col + g - shift) % g;
                        let win = (b * nw + rs / w) * nw + cs / w;
                        let pos = (rs % w) * w + cs % w;
                        let base = (win * w * w + pos) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
            idx
        })
    }

    /// Gathers the `[(2w−1)², h]` bias table into `[h, w², w²]`.
    fn rel_index(&self, heads: usize) -> Rc<Vec<usize>> {
        let w = self.cfg.encoder.window;
        self.cached(format!("rel.{heads}"), || {
            let n = w * w;
            let mut idx = Vec::with_capacity(heads * n * n);
            for h in 0..heads {
                for i in 0..n {
                    for j in 0..n {
                        let dy = (i / w) as isize - (j / w) as isize + w as isize - 1;
                        let dx = (i % w) as isize - (j % w) as isize + w as isize - 1;
                        idx.push((dy as usize * (2 * w - 1) + dx as usize) * heads + h);
                    }
                }
            }
            idx
        })
    }

    /// `[nW, 1, w², w²]` additive mask separating the rolled-in regions.
    fn shift_mask(&self, g: usize) -> Rc<Vec<f64>> {
        if let Some(m) = self.masks.borrow().get(&g) {
            return m.clone();
        }
        let w = self.cfg.encoder.window;
        let s = w / 2;
        let region = |x: usize| -> usize {
            if x < g - w {
                0
            } else if x < g - s {
                1
            } else {
                2
            }
        };
        let nw = g / w;
        let n = w * w;
        let mut m = vec![0.0; nw * nw * n * n];
        for wi in 0..nw {
            for wj in 0..nw {
                let label = |p: usize| region(wi * w + p / w) * 3 + region(wj * w + p % w);
                let base = (wi * nw + wj) * n * n;
                for i in 0..n {
                    for j in 0..n {
                        if label(i) != label(j) {
                            m[base + i * n + j] = MASK_NEG;
                        }
                    }
                }
            }
        }
        let m = Rc::new(m);
        self.masks.borrow_mut().insert(g, m.clone());
        m
    }

    /// One Swin block on `[B,G,G,C]`.
    pub fn window_block<'t, T: Scalar>(
        &self,
        p: &Binding<'_, 't, T>,
        x: Var<'t, T>,
        prefix: &str,
        heads: usize,
        shifted: bool,
    ) -> Result<Var<'t, T>> {
        let tape = p.tape();
        let s = x.shape();
        let (batch, g, c) = (s[0], s[1], s[3]);
        let w = self.cfg.encoder.window;
        let (nw, n, hd) = ((g / w) * (g / w), w * w, c / heads);
        let shift = if shifted && g > w { w / 2 } else { 0 };
        let ln = |v: Var<'t, T>, name: &str| -> Result<Var<'t, T>> {
            v.layer_norm(p.get(&format!("{prefix}.{name}.g"))?, p.get(&format!("{prefix}.{name}.b"))?, T::lit(LN_EPS))
        };
        let lin = |v: Var<'t, T>, name: &str| -> Result<Var<'t, T>> {
            v.linear(p.get(&format!("{prefix}.{name}.w"))?, Some(p.get(&format!("{prefix}.{name}.b"))?))
        };
        let xn = ln(x, "ln1")?;
        let win = xn.gather(self.partition_index(batch, g, c, shift), &[batch * nw, n, c])?;
        let q = lin(win, "q")?.scale(T::lit(1.0 / (hd as f64).sqrt()));
        let k = lin(win, "k")?;
        let v = lin(win, "v")?;
        let mut bias = p
            .get(&format!("{prefix}.rpb"))?
            .gather(self.rel_index(heads), &[1, heads, n, n])?;
        if shift > 0 {
            let mask = self.shift_mask(g).iter().map(|&v| T::lit(v)).collect();
            bias = bias.add(tape.constant(&[nw, 1, n, n], mask)?)?;
        }
        let out = q.window_attention(k, v, bias, heads)?;
        let out = lin(out, "proj")?.gather(self.reverse_index(batch, g, c, shift), &[batch, g, g, c])?;
        let x = x.add(out)?;
        let h = lin(ln(x, "ln2")?, "mlp1")?.gelu();
        x.add(lin(h, "mlp2")?)
    }

    /// 2×2 neighborhood concat, LayerNorm, linear to the next width.
    fn merge<'t, T: Scalar>(&self, p: &Binding<'_, 't, T>, x: Var<'t, T>, stage: usize) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (batch, g, c) = (s[0], s[1], s[3]);
        let h = g / 2;
        let idx = self.cached(format!("merge.{batch}.{g}.{c}"), || {
            let mut idx = Vec::with_capacity(batch * g * g * c);
            for b in 0..batch {
                for i in 0..h {
                    for j in 0..h {
                        for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                            let base = ((b * g + 2 * i + di) * g + 2 * j + dj) * c;
                            idx.extend(base..base + c);
                        }
                    }
                }
            }
            idx
        });
        let m = x.gather(idx, &[batch, h, h, 4 * c])?;
        let pre = format!("s{stage}.merge");
        m.layer_norm(p.get(&format!("{pre}.ln.g"))?, p.get(&format!("{pre}.ln.b"))?, T::lit(LN_EPS))?
            .linear(p.get(&format!("{pre}.w"))?, None)
    }

    /// `images`: `[B, H, W, C]` → 14×14 feature grid and its spatial mean.
    pub fn encode<'t, T: Scalar>(&self, p: &Binding<'_, 't, T>, images: Var<'t, T>) -> Result<EncoderOutput<'t, T>> {
        self.encode_with(p, images, true)
    }

    /// As [`Self::encode`]; `allow_shift = false` turns every block into a
    /// plain windowed block.
    pub fn encode_with<'t, T: Scalar>(
        &self,
        p: &Binding<'_, 't, T>,
        images: Var<'t, T>,
        allow_shift: bool,
    ) -> Result<EncoderOutput<'t, T>> {
        let e = &self.cfg.encoder;
        let s = images.shape();
        if s.len() != 4 || s[1] != e.input_size || s[2] != e.input_size || s[3] != e.in_chans {
            return Err(Error::contract(format!(
                "encoder expects [B,{n},{n},{c}] images, got {s:?}",
                n = e.input_size,
                c = e.in_chans
            )));
        }
        let batch = s[0];
        let mut x = images
            .conv2d(p.get("patch.w")?, Some(p.get("patch.b")?), e.patch, 0)?
            .layer_norm(p.get("patch.ln.g")?, p.get("patch.ln.b")?, T::lit(LN_EPS))?;
        for st in 0..e.stages() {
            if st > 0 {
                x = self.merge(p, x, st)?;
            }
            for b in 0..e.depths[st] {
                let shifted = allow_shift && block_shifted(e, st, b);
                x = self.window_block(p, x, &block_prefix(st, b), e.heads[st], shifted)?;
            }
        }
        let grid = x.layer_norm(p.get("norm.g")?, p.get("norm.b")?, T::lit(LN_EPS))?;
        let d = e.out_dim();
        let global = grid.reshape(&[batch, GRID * GRID, d])?.mean_axis(1)?;
        Ok(EncoderOutput { grid, global })
    }

    /// Gates the grid with each of the `K` maps (`[B, K, 14, 14]` row-major),
    /// refines with the shared conv stack and mean-pools to `[B, K, D]`.
    pub fn local_features<'t, T: Scalar>(
        &self,
        p: &Binding<'_, 't, T>,
        grid: Var<'t, T>,
        maps: &[T],
    ) -> Result<Var<'t, T>> {
        let s = grid.shape();
        if s.len() != 4 || s[1] != GRID || s[2] != GRID {
            return Err(Error::contract(format!("feature grid {s:?} is not [B,{GRID},{GRID},D]")));
        }
        let (batch, d, k) = (s[0], s[3], self.cfg.k);
        if maps.len() != batch * k * GRID * GRID {
            return Err(Error::contract(format!(
                "expected {batch}×{k} maps of {GRID}×{GRID}, got {} cells",
                maps.len()
            )));
        }
        let gate = p.tape().constant(&[batch, k, GRID, GRID, 1], maps.to_vec())?;
        let gated = grid
            .reshape(&[batch, 1, GRID, GRID, d])?
            .mul(gate)?
            .reshape(&[batch * k, GRID, GRID, d])?;
        let h = gated
            .conv2d(p.get("local.c1.w")?, Some(p.get("local.c1.b")?), 1, 1)?
            .relu()
            .conv2d(p.get("local.c2.w")?, Some(p.get("local.c2.b")?), 1, 1)?
            .relu();
        h.reshape(&[batch * k, GRID * GRID, d])?.mean_axis(1)?.reshape(&[batch, k, d])
    }

    /// Two-layer MLP `linear → batch-norm → relu → linear` named `head`
    /// (`"g"` projector or `"q"` predictor) over `[N, in]` rows.
    pub fn mlp_head<'t, T: Scalar>(&self, p: &Binding<'_, 't, T>, head: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = x.linear(p.get(&format!("{head}.l1.w"))?, Some(p.get(&format!("{head}.l1.b"))?))?;
        let (h, _, _) = h.batch_norm_train(p.get(&format!("{head}.bn.g"))?, p.get(&format!("{head}.bn.b"))?, T::lit(BN_EPS))?;
        h.relu()
            .linear(p.get(&format!("{head}.l2.w"))?, Some(p.get(&format!("{head}.l2.b"))?))
    }

    /// Full forward of one network.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Binding<'_, 't, T>,
        images: Var<'t, T>,
        maps: &[T],
        with_prediction: bool,
        with_local: bool,
    ) -> Result<FeatureBundle<'t, T>> {
        let enc = self.encode(p, images)?;
        let batch = enc.global.shape()[0];
        let d = self.cfg.encoder.out_dim();
        let z_global = self.mlp_head(p, "g", enc.global)?;
        let (local, z_local) = if with_local {
            let o = self.local_features(p, enc.grid, maps)?;
            let z = self.mlp_head(p, "g", o.reshape(&[batch * self.cfg.k, d])?)?;
            (Some(o), Some(z))
        } else {
            (None, None)
        };
        let (q_global, q_local) = if with_prediction {
            let qg = self.mlp_head(p, "q", z_global)?;
            let ql = match z_local {
                Some(z) => Some(self.mlp_head(p, "q", z)?),
                None => None,
            };
            (Some(qg), ql)
        } else {
            (None, None)
        };
        Ok(FeatureBundle {
            grid: enc.grid,
            global: enc.global,
            local,
            z_global,
            z_local,
            q_global,
            q_local,
        })
    }
}

/// Outputs of one network for one view.
pub struct FeatureBundle<'t, T: Scalar> {
    pub grid: Var<'t, T>,
    /// `[B, D]`.
    pub global: Var<'t, T>,
    /// `[B, K, D]`.
    pub local: Option<Var<'t, T>>,
    /// `[B, Z]`.
    pub z_global: Var<'t, T>,
    /// `[B·K, Z]`.
    pub z_local: Option<Var<'t, T>>,
    /// Online network only.
    pub q_global: Option<Var<'t, T>>,
    pub q_local: Option<Var<'t, T>>,
}

/// Online parameters θ, target parameters ξ and the current EMA decay.
#[derive(Clone, Debug)]
pub struct DualNetworkState<T: Scalar> {
    pub theta: ParamSet<T>,
    pub xi: ParamSet<T>,
    pub m: f64,
}

impl<T: Scalar> DualNetworkState<T> {
    /// Target starts as an exact copy of the online network.
    pub fn new(theta: ParamSet<T>, m: f64) -> Self {
        let mut xi = theta.clone();
        for (_, a) in xi.iter_mut() {
            a.set_requires_grad(false);
        }
        Self { theta, xi, m }
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&self.theta, &mut self.xi, self.m)
    }
}

/// `ξ ← m·ξ + (1 − m)·θ` elementwise.
pub fn ema_update<T: Scalar>(theta: &ParamSet<T>, xi: &mut ParamSet<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::contract(format!("EMA decay {m} outside [0,1]")));
    }
    if !theta.same_layout(xi) {
        return Err(Error::contract("online and target parameter layouts differ"));
    }
    let (mt, rest) = (T::lit(m), T::lit(1.0 - m));
    for ((_, t), (_, x)) in theta.iter().zip(xi.iter_mut()) {
        for (xv, &tv) in x.data_mut().iter_mut().zip(t.data()) {
            *xv = mt * *xv + rest * tv;
        }
    }
    Ok(())
}
