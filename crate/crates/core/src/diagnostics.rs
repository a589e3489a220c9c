//! Self-checks shared by the CLI and the acceptance suite: gradient checks
//! of every loss term and of the full network, and Sinkhorn against the
//! exact transport solver.

use std::fmt::Write as _;
use std::rc::Rc;

use crate::attention::{default_region_specs, AuRegionSpec};
use crate::error::{Error, Result};
use crate::losses::{correlation_plans, global_loss, local_loss, total_loss, LossWeights};
use crate::model::{init_params, DualNetworkState, EncoderConfig, Model, ModelConfig};
use crate::numeric::{check_gradient, Binding, DiffArray, Tape, Var};
use crate::pipeline::{build_batch, loss_graph, TrainConfig};
use crate::relation::{
    correlation_loss, cost_from_relation, lp_oracle_exact, rational_to_f64, relation_from_labels, sinkhorn,
    SinkhornConfig,
};
use crate::rng::Rng;
use crate::synth::{generate, SynthSpec};

/// Relative-error bound for the individual loss terms.
pub const LOSS_TOL: f64 = 1e-5;
/// Relative-error bound for the loss differentiated through the network.
pub const COMPOSITE_TOL: f64 = 1e-4;
/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Random directions probed in parameter space per composite check.
pub const DIRECTIONS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub seed: u64,
    pub term: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradRow {
    pub fn pass(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// A deliberately small network for finite differences: same topology as
/// the default (two stages, shifted blocks, heads, refiner) at width 4.
pub fn suite_model(k: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            embed_dim: 4,
            heads: vec![1, 2],
            ..EncoderConfig::default()
        },
        k,
        refiner_channels: 4,
        head_hidden: 8,
        z_dim: 4,
    }
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn slice_index(start: usize, len: usize) -> Rc<Vec<usize>> {
    Rc::new((start..start + len).collect())
}

/// Gradient checks of `L_glo`, `L_loc`, `L_corr`, `L_all` on random
/// inputs and of `L_all` through the whole online network (`encoder`) for
/// one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradRow>> {
    let (b, k, z, d) = (2, 3, 4, 5);
    let mut rng = Rng::new(seed).fork(0x64AD);
    let q1g = DiffArray::new(vec![b, z], normals(&mut rng, b * z))?;
    let z2g = normals(&mut rng, b * z);
    let q1k = DiffArray::new(vec![b, k, z], normals(&mut rng, b * k * z))?;
    let z2k = normals(&mut rng, b * k * z);
    let o = DiffArray::new(vec![b, k, d], normals(&mut rng, b * k * d))?;
    let t = normals(&mut rng, b * k * d);
    let (og, tg) = (normals(&mut rng, b * d), normals(&mut rng, b * d));
    let labels: Vec<Vec<u8>> = (0..12).map(|_| (0..k).map(|_| rng.bernoulli(0.4) as u8).collect()).collect();
    let cost = cost_from_relation(&relation_from_labels::<f64>(&labels)?);
    let (plans, _) = correlation_plans(&o.data().to_vec(), &t, &og, &tg, b, k, &cost, &SinkhornConfig::default())?;
    let h = FD_STEP;
    let row = |term, err| GradRow {
        seed,
        term,
        max_rel_error: err,
        tolerance: LOSS_TOL,
    };
    let mut rows = Vec::new();

    let r = check_gradient(
        |tp, x| global_loss(x, tp.constant(&[b, z], z2g.clone())?),
        &q1g,
        h,
    )?;
    rows.push(row("l_glo", r.max_rel_error));

    let wrt_k = check_gradient(
        |tp, x| {
            let g = tp.constant(&[b, z], q1g.data().to_vec())?;
            local_loss(x, g, tp.constant(&[b, z], z2g.clone())?, tp.constant(&[b, k, z], z2k.clone())?)
        },
        &q1k,
        h,
    )?;
    let wrt_g = check_gradient(
        |tp, x| {
            let qk = tp.constant(&[b, k, z], q1k.data().to_vec())?;
            local_loss(qk, x, tp.constant(&[b, z], z2g.clone())?, tp.constant(&[b, k, z], z2k.clone())?)
        },
        &q1g,
        h,
    )?;
    rows.push(row("l_loc", wrt_k.max_rel_error.max(wrt_g.max_rel_error)));

    let r = check_gradient(
        |tp, x| correlation_loss(x, tp.constant(&[b, k, d], t.clone())?, &plans),
        &o,
        h,
    )?;
    rows.push(row("l_corr", r.max_rel_error));

    // one flat input feeding all three terms
    let (ng, nk, no) = (b * z, b * k * z, b * k * d);
    let flat = DiffArray::vector([q1g.data(), q1k.data(), o.data()].concat());
    let r = check_gradient(
        |tp, x| {
            let qg = x.gather(slice_index(0, ng), &[b, z])?;
            let qk = x.gather(slice_index(ng, nk), &[b, k, z])?;
            let ov = x.gather(slice_index(ng + nk, no), &[b, k, d])?;
            let z2 = tp.constant(&[b, z], z2g.clone())?;
            let lg = global_loss(qg, z2)?;
            let ll = local_loss(qk, qg, z2, tp.constant(&[b, k, z], z2k.clone())?)?;
            let lc = correlation_loss(ov, tp.constant(&[b, k, d], t.clone())?, &plans)?;
            total_loss(lg, ll, lc, &LossWeights::default())
        },
        &flat,
        h,
    )?;
    rows.push(row("l_all", r.max_rel_error));

    rows.push(GradRow {
        seed,
        term: "encoder",
        max_rel_error: composite_check(seed)?,
        tolerance: COMPOSITE_TOL,
    });
    Ok(rows)
}

fn suite_batch(seed: u64, cfg: &TrainConfig, regions: &[AuRegionSpec]) -> Result<crate::pipeline::BatchViews> {
    let spec = SynthSpec {
        k: cfg.model.k,
        n_subjects: 2,
        per_subject: 2,
        au_prior: vec![0.4; cfg.model.k],
        pair_coupling: vec![],
        regions: regions.to_vec(),
        test_fraction: 0.0,
        seed,
        ..SynthSpec::default_k8(seed)
    };
    let split = generate(&spec)?;
    build_batch(cfg, &split.train, regions, seed)
}

/// `L_all` of the full two-network step, differentiated with respect to
/// [`DIRECTIONS`] random unit directions through every online parameter.
/// The transport plans are solved once at the base point and held fixed,
/// matching their treatment as constants in the analytic gradient.
pub fn composite_check(seed: u64) -> Result<f64> {
    let k = 3;
    let regions = default_region_specs(8)?[..k].to_vec();
    let cfg = TrainConfig {
        seed,
        batch_size: 4,
        model: suite_model(k),
        ..TrainConfig::default()
    };
    let model = Model::new(cfg.model.clone())?;
    let mut rng = Rng::new(seed).fork(0xC0C0);
    let mut theta = init_params::<f64>(&cfg.model, &mut rng)?;
    // zero-initialized biases put ReLU inputs on their kink wherever a map
    // gates the grid to zero; check at a generic point instead
    for (_, a) in theta.iter_mut() {
        a.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng.normal());
    }
    let mut state = DualNetworkState::new(theta, 0.5);
    // move the target away from the online network
    for (_, a) in state.xi.iter_mut() {
        a.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng.normal());
    }
    let bv = suite_batch(seed, &cfg, &regions)?;
    let batch = bv.ids.len();
    let cost = cost_from_relation(&relation_from_labels::<f64>(&[vec![1, 1, 0], vec![0, 1, 1], vec![1, 0, 0]])?);
    let plans = {
        let tape = Tape::new();
        let on = Binding::new(&tape, &state.theta, false);
        let tg = Binding::new(&tape, &state.xi, false);
        loss_graph(&model, &cfg, &on, &tg, &cost, batch, &bv.views, &bv.maps, None)?.plans
    };
    let names: Vec<String> = state.theta.names().map(str::to_string).collect();
    let total: usize = state.theta.numel();
    let mut dirs = normals(&mut rng, DIRECTIONS * total);
    for dir in dirs.chunks_mut(total) {
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= n);
    }
    let ctx = Composite {
        model: &model,
        cfg: &cfg,
        state: &state,
        names: &names,
        dirs: &dirs,
        cost: &cost,
        bv: &bv,
        plans: &plans,
    };
    let delta = DiffArray::vector(vec![0.0; DIRECTIONS]);
    Ok(check_gradient(|tape, x| ctx.eval(tape, x), &delta, FD_STEP)?.max_rel_error)
}

struct Composite<'a> {
    model: &'a Model,
    cfg: &'a TrainConfig,
    state: &'a DualNetworkState<f64>,
    names: &'a [String],
    dirs: &'a [f64],
    cost: &'a [f64],
    bv: &'a crate::pipeline::BatchViews,
    plans: &'a [f64],
}

impl Composite<'_> {
    /// `L_all` at `θ + Σ_j x_j·dir_j`.
    fn eval<'t>(&self, tape: &'t Tape<f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let on = Binding::new(tape, &self.state.theta, false);
        let tg = Binding::new(tape, &self.state.xi, false);
        let total = self.state.theta.numel();
        let mut offset = 0;
        for name in self.names {
            let base = self.state.theta.require(name)?;
            let n = base.numel();
            let mut proj = Vec::with_capacity(DIRECTIONS * n);
            for dir in self.dirs.chunks(total) {
                proj.extend_from_slice(&dir[offset..offset + n]);
            }
            let step = x
                .reshape(&[1, DIRECTIONS])?
                .matmul(tape.constant(&[DIRECTIONS, n], proj)?)?
                .reshape(base.shape())?;
            on.bind(name, tape.constant(base.shape(), base.data().to_vec())?.add(step)?)?;
            offset += n;
        }
        let batch = self.bv.ids.len();
        let g = loss_graph(
            self.model,
            self.cfg,
            &on,
            &tg,
            self.cost,
            batch,
            &self.bv.views,
            &self.bv.maps,
            Some(self.plans),
        )?;
        Ok(g.l_all)
    }
}

pub fn format_grad_report(rows: &[GradRow]) -> String {
    let mut out = String::from("seed,term,max_rel_error,tolerance,pass\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.3e},{:.0e},{}",
            r.seed,
            r.term,
            r.max_rel_error,
            r.tolerance,
            r.pass()
        );
    }
    out
}

/// Sinkhorn settings for comparisons against the exact optimum: tight
/// tolerance, and enough iterations for near-degenerate instances at
/// small epsilon.
pub fn check_config(epsilon: f64) -> SinkhornConfig {
    SinkhornConfig {
        epsilon,
        max_iter: 1_000_000,
        tol: 1e-9,
    }
}

/// Costs uniform in `[0, 1]`, marginals with every entry at least
/// `0.05 / K`-ish after normalization.
pub fn random_transport_instance(rng: &mut Rng, k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c: Vec<f64> = (0..k * k).map(|_| rng.uniform()).collect();
    let mut dist = || {
        let w: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.05, 1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let a = dist();
    let b = dist();
    (c, a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornTrial {
    pub k: usize,
    pub cost: f64,
    pub optimum: f64,
    pub violation: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SinkhornTrial {
    /// `|cost − optimum| / optimum`.
    pub fn rel_gap(&self) -> f64 {
        (self.cost - self.optimum).abs() / self.optimum.abs().max(1e-300)
    }
}

/// `trials` random instances with `K` drawn from `1..=k_max`, each solved
/// by Sinkhorn and by the exact transport solver.
pub fn sinkhorn_check(k_max: usize, epsilon: f64, trials: usize, seed: u64) -> Result<Vec<SinkhornTrial>> {
    if k_max == 0 {
        return Err(Error::contract("sinkhorn check needs K ≥ 1"));
    }
    let cfg = check_config(epsilon);
    let mut rng = Rng::new(seed).fork(0x5C4E);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let k = 1 + rng.below(k_max);
        let (c, a, b) = random_transport_instance(&mut rng, k);
        let p = sinkhorn(&c, &a, &b, &cfg)?;
        let exact = lp_oracle_exact(&c, &a, &b)?;
        out.push(SinkhornTrial {
            k,
            cost: p.cost(&c),
            optimum: rational_to_f64(&exact.cost),
            violation: p.violation,
            iterations: p.iterations,
            converged: p.converged,
        });
    }
    Ok(out)
}

/// Largest deviation of the Sinkhorn plan from `a bᵀ` over `trials`
/// constant-cost instances.
pub fn constant_cost_check(k_max: usize, epsilon: f64, trials: usize, seed: u64) -> Result<f64> {
    let cfg = check_config(epsilon);
    let mut rng = Rng::new(seed).fork(0xC057);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let k = 1 + rng.below(k_max.max(1));
        let (_, a, b) = random_transport_instance(&mut rng, k);
        let c = vec![rng.uniform(); k * k];
        let p = sinkhorn(&c, &a, &b, &cfg)?;
        for i in 0..k {
            for j in 0..k {
                worst = worst.max((p.pi[i * k + j] - a[i] * b[j]).abs());
            }
        }
    }
    Ok(worst)
}

pub fn format_sinkhorn_report(trials: &[SinkhornTrial], rel_tol: f64, violation_tol: f64) -> String {
    let mut out = String::from("trial,k,cost,optimum,rel_gap,violation,iterations,pass\n");
    let mut passed = 0;
    for (i, t) in trials.iter().enumerate() {
        let ok = t.rel_gap() <= rel_tol && t.violation < violation_tol;
        passed += ok as usize;
        let _ = writeln!(
            out,
            "{i},{},{:.6},{:.6},{:.3e},{:.3e},{},{ok}",
            t.k,
            t.cost,
            t.optimum,
            t.rel_gap(),
            t.violation,
            t.iterations
        );
    }
    let _ = writeln!(out, "# {passed}/{} trials within {rel_tol} of the optimum", trials.len());
    out
}
