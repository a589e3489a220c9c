//! Global, local and total self-supervised losses. Every term is averaged
//! over the batch; target-side inputs are detached here as well as upstream.

use crate::error::{Error, Result};
use crate::numeric::Var;
use crate::relation::{marginal_weights, sinkhorn, SinkhornConfig};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 0.4,
            alpha2: 0.6,
            alpha3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::contract(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// `−cos(z2g, q1g)`; both `[B, Z]`.
pub fn global_loss<'t, T: Scalar>(q1g: Var<'t, T>, z2g: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(z2g.stop_gradient().cosine_sim(q1g)?.mean().neg())
}

/// `−(1/2K) Σ_k [cos(q1k_k, z2g) + cos(z2k_k, q1g)]`.
/// Shapes: `q1k`, `z2k` are `[B, K, Z]`; `q1g`, `z2g` are `[B, Z]`.
pub fn local_loss<'t, T: Scalar>(
    q1k: Var<'t, T>,
    q1g: Var<'t, T>,
    z2g: Var<'t, T>,
    z2k: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let s = q1k.shape();
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::contract(format!("local predictions must be [B,K,Z] with K > 0, got {s:?}")));
    }
    if z2k.shape() != s {
        return Err(Error::dim(format!("local targets {:?} vs predictions {s:?}", z2k.shape())));
    }
    let (b, z) = (s[0], s[2]);
    let tg = z2g.stop_gradient().reshape(&[b, 1, z])?;
    let qg = q1g.reshape(&[b, 1, z])?;
    let first = q1k.cosine_sim(tg)?;
    let second = z2k.stop_gradient().cosine_sim(qg)?;
    Ok(first.add(second)?.mean().scale(T::lit(-0.5)))
}

/// `α₁·lg + α₂·ll + α₃·lc`.
pub fn total_loss<'t, T: Scalar>(lg: Var<'t, T>, ll: Var<'t, T>, lc: Var<'t, T>, w: &LossWeights) -> Result<Var<'t, T>> {
    lg.scale(T::lit(w.alpha1))
        .add(ll.scale(T::lit(w.alpha2)))?
        .add(lc.scale(T::lit(w.alpha3)))
}

fn unit<T: Scalar>(v: &[T]) -> Vec<T> {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(crate::numeric::NORM_FLOOR));
    v.iter().map(|&x| x / n).collect()
}

/// Per-image statistics of the transport solves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlanStats {
    pub unconverged: usize,
    pub uniform_fallbacks: usize,
}

/// Solves one transport problem per image. `o`, `t` are `[B, K, D]` local
/// vectors, `o_g`, `t_g` are `[B, D]`; returns `B` row-major `K × K` plans.
#[allow(clippy::too_many_arguments)]
pub fn correlation_plans<T: Scalar>(
    o: &[T],
    t: &[T],
    o_g: &[T],
    t_g: &[T],
    batch: usize,
    k: usize,
    cost: &[T],
    cfg: &SinkhornConfig,
) -> Result<(Vec<T>, PlanStats)> {
    if batch == 0 || k == 0 || o_g.len() % batch != 0 {
        return Err(Error::dim("correlation_plans: empty batch"));
    }
    let d = o_g.len() / batch;
    if o.len() != batch * k * d || t.len() != o.len() || t_g.len() != o_g.len() || cost.len() != k * k {
        return Err(Error::dim(format!(
            "correlation_plans: B={batch}, K={k}, D={d} inconsistent with inputs"
        )));
    }
    let mut plans = Vec::with_capacity(batch * k * k);
    let mut stats = PlanStats::default();
    for b in 0..batch {
        let rows = |x: &[T]| -> Vec<Vec<T>> { (0..k).map(|i| unit(&x[(b * k + i) * d..(b * k + i + 1) * d])).collect() };
        let w = marginal_weights(
            &rows(o),
            &unit(&t_g[b * d..(b + 1) * d]),
            &rows(t),
            &unit(&o_g[b * d..(b + 1) * d]),
        )?;
        if w.a.iter().all(|v| *v <= T::zero()) || w.b.iter().all(|v| *v <= T::zero()) {
            stats.uniform_fallbacks += 1;
        }
        let plan = sinkhorn(cost, &w.a_norm, &w.b_norm, cfg)?;
        if !plan.converged {
            stats.unconverged += 1;
        }
        plans.extend(plan.pi);
    }
    Ok((plans, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tape;
    use approx::assert_abs_diff_eq;

    #[test]
    fn global_loss_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.variable(&[1, 2], vec![1.0, 1.0]).unwrap();
        let b = tape.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(global_loss(a, b).unwrap().item(), -std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        let c = tape.constant(&[1, 2], vec![2.0, 2.0]).unwrap();
        assert_abs_diff_eq!(global_loss(a, c).unwrap().item(), -1.0, epsilon = 1e-15);
        let d = tape.constant(&[1, 2], vec![-1.0, 1.0]).unwrap();
        assert_eq!(global_loss(a, d).unwrap().item(), 0.0);
    }

    #[test]
    fn local_loss_examples() {
        let tape = Tape::<f64>::new();
        let same = |shape: &[usize]| tape.constant(shape, vec![0.3; shape.iter().product()]).unwrap();
        let l = local_loss(same(&[2, 3, 4]), same(&[2, 4]), same(&[2, 4]), same(&[2, 3, 4])).unwrap();
        assert_abs_diff_eq!(l.item(), -1.0, epsilon = 1e-15);

        let e1 = |b| tape.constant(&[1, b, 2], [1.0, 0.0].repeat(b)).unwrap();
        let e2 = tape.constant(&[1, 2], vec![0.0, 1.0]).unwrap();
        let l = local_loss(e1(2), e2, e2, e1(2)).unwrap();
        assert_eq!(l.item(), 0.0);

        // K=1: cos((1,0),(1,1)) = 1/√2 and cos((3,4),(1,0)) = 3/5
        let q1k = tape.constant(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let z2g = tape.constant(&[1, 2], vec![1.0, 1.0]).unwrap();
        let z2k = tape.constant(&[1, 1, 2], vec![3.0, 4.0]).unwrap();
        let q1g = tape.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        let l = local_loss(q1k, q1g, z2g, z2k).unwrap();
        assert_abs_diff_eq!(l.item(), -0.5 * (std::f64::consts::FRAC_1_SQRT_2 + 0.6), epsilon = 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let tape = Tape::<f64>::new();
        let s = |v| tape.scalar(v);
        let w = LossWeights::default();
        assert_abs_diff_eq!(total_loss(s(-1.0), s(-1.0), s(-1.0), &w).unwrap().item(), -2.0, epsilon = 1e-15);
        assert_eq!(total_loss(s(0.0), s(0.0), s(0.0), &w).unwrap().item(), 0.0);
        let sel = LossWeights { alpha1: 1.0, alpha2: 0.0, alpha3: 0.0 };
        assert_eq!(total_loss(s(0.37), s(5.0), s(-3.0), &sel).unwrap().item(), 0.37);
        assert!(LossWeights { alpha1: -0.1, ..w }.validate().is_err());
        assert!(LossWeights { alpha3: f64::NAN, ..w }.validate().is_err());
    }

    #[test]
    fn stopped_inputs_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let q1g = tape.variable(&[2, 3], vec![0.1, 0.5, -0.2, 0.3, 0.3, 0.9]).unwrap();
        let z2g = tape.variable(&[2, 3], vec![0.4, -0.1, 0.2, 0.0, 1.0, 0.3]).unwrap();
        let q1k = tape.variable(&[2, 2, 3], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let z2k = tape.variable(&[2, 2, 3], (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let l = global_loss(q1g, z2g)
            .unwrap()
            .add(local_loss(q1k, q1g, z2g, z2k).unwrap())
            .unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get_or_zeros(z2g).iter().all(|&v| v == 0.0));
        assert!(g.get_or_zeros(z2k).iter().all(|&v| v == 0.0));
        assert!(g.get_or_zeros(q1g).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn plans_have_unit_mass_per_image() {
        let (b, k, d) = (3, 2, 4);
        let o: Vec<f64> = (0..b * k * d).map(|i| (i as f64 * 0.7).sin()).collect();
        let t: Vec<f64> = (0..b * k * d).map(|i| (i as f64 * 0.3).cos()).collect();
        let og: Vec<f64> = (0..b * d).map(|i| (i as f64).sin()).collect();
        let tg: Vec<f64> = (0..b * d).map(|i| (i as f64).cos()).collect();
        let cost = [0.0, 0.4, 0.4, 0.0];
        let (plans, _) = correlation_plans(&o, &t, &og, &tg, b, k, &cost, &SinkhornConfig::default()).unwrap();
        for p in plans.chunks(k * k) {
            assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-6);
        }
    }
}
