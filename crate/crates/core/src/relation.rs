//! AU relationship matrix, entropic optimal transport between local AU
//! representations, and the correlation loss that the transport plan weights.

use std::fmt::Write as _;
use std::path::Path;

use num_rational::{BigRational, Ratio};
use num_traits::{Num, Signed, Zero};

use crate::error::{Error, Result};
use crate::io;
use crate::numeric::Var;
use crate::scalar::Scalar;

/// Symmetric `K × K` co-occurrence statistic, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix<T> {
    k: usize,
    m: Vec<T>,
}

impl<T: Scalar> RelationMatrix<T> {
    pub fn new(k: usize, m: Vec<T>) -> Result<Self> {
        if k == 0 || m.len() != k * k {
            return Err(Error::dim(format!("relation matrix needs {k}×{k} entries, got {}", m.len())));
        }
        let tol = T::lit(1e-12);
        for i in 0..k {
            if m[i * k + i] != T::one() {
                return Err(Error::contract(format!("relation diagonal entry {i} is not 1")));
            }
            for j in 0..k {
                let v = m[i * k + j];
                if !(v >= T::zero() && v <= T::one()) {
                    return Err(Error::contract(format!("relation entry ({i},{j}) = {v} outside [0,1]")));
                }
                if (v - m[j * k + i]).abs() > tol {
                    return Err(Error::contract(format!("relation matrix asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { k, m })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.m[i * self.k + j]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.m
    }
}

/// Dice coefficient `2·N_ij / (N_i + N_j)` between AU label columns.
pub fn relation_from_labels<T: Scalar>(labels: &[Vec<u8>]) -> Result<RelationMatrix<T>> {
    let k = labels.first().map(Vec::len).ok_or_else(|| Error::contract("no label rows"))?;
    if k == 0 {
        return Err(Error::contract("label rows are empty"));
    }
    let mut count = vec![0u64; k];
    let mut co = vec![0u64; k * k];
    for (n, row) in labels.iter().enumerate() {
        if row.len() != k {
            return Err(Error::dim(format!("label row {n} has {} entries, expected {k}", row.len())));
        }
        if let Some(&bad) = row.iter().find(|&&v| v > 1) {
            return Err(Error::contract(format!("label row {n} holds non-binary value {bad}")));
        }
        for i in 0..k {
            if row[i] == 1 {
                count[i] += 1;
                for j in 0..k {
                    co[i * k + j] += row[j] as u64;
                }
            }
        }
    }
    let mut m = vec![T::zero(); k * k];
    for i in 0..k {
        for j in 0..k {
            m[i * k + j] = if i == j {
                T::one()
            } else if count[i] + count[j] == 0 {
                T::zero()
            } else {
                T::lit(2.0 * co[i * k + j] as f64 / (count[i] + count[j]) as f64)
            };
        }
    }
    RelationMatrix::new(k, m)
}

/// `C = 1 − M`.
pub fn cost_from_relation<T: Scalar>(m: &RelationMatrix<T>) -> Vec<T> {
    m.m.iter().map(|&v| T::one() - v).collect()
}

pub fn format_relation<T: Scalar>(m: &RelationMatrix<T>) -> String {
    let mut out = (0..m.k).map(|k| format!("au_{k}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..m.k {
        let row: Vec<String> = (0..m.k).map(|j| io::fmt_f64(m.get(i, j).to_f64_lossy())).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn parse_relation(text: &str, origin: &str) -> Result<RelationMatrix<f64>> {
    let table = io::parse_csv(text, origin)?;
    let k = table.header.len();
    if table.rows.len() != k {
        return Err(Error::parse(origin, format!("{k} columns but {} rows", table.rows.len())));
    }
    let mut m = Vec::with_capacity(k * k);
    for row in &table.rows {
        for v in row {
            m.push(io::parse_f64(v, origin)?);
        }
    }
    RelationMatrix::new(k, m)
}

pub fn read_relation(path: &Path) -> Result<RelationMatrix<f64>> {
    parse_relation(&io::read_to_string(path)?, &path.display().to_string())
}

pub fn write_relation(path: &Path, m: &RelationMatrix<f64>) -> Result<()> {
    io::write_atomic(path, format_relation(m).as_bytes())
}

/// Raw and normalized transport marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalWeights<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub a_norm: Vec<T>,
    pub b_norm: Vec<T>,
}

fn normalize_or_uniform<T: Scalar>(w: &[T]) -> Vec<T> {
    let s: T = w.iter().copied().sum();
    if s > T::zero() {
        w.iter().map(|&v| v / s).collect()
    } else {
        let u = T::one() / T::from_usize(w.len()).unwrap();
        vec![u; w.len()]
    }
}

fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).map(|(&a, &b)| a * b).sum()
}

/// `a_i = max(⟨o_i, t_g⟩, 0)`, `b_j = max(⟨t_j, o_g⟩, 0)`; inputs are
/// expected to be l2-normalized already.
pub fn marginal_weights<T: Scalar>(o: &[Vec<T>], t_g: &[T], t: &[Vec<T>], o_g: &[T]) -> Result<MarginalWeights<T>> {
    let d = t_g.len();
    if o.is_empty() || o.len() != t.len() {
        return Err(Error::dim(format!("{} online vs {} target local vectors", o.len(), t.len())));
    }
    if o_g.len() != d || o.iter().chain(t).any(|v| v.len() != d) {
        return Err(Error::dim("marginal inputs must share one dimension"));
    }
    let a: Vec<T> = o.iter().map(|oi| dot(oi, t_g).max(T::zero())).collect();
    let b: Vec<T> = t.iter().map(|tj| dot(tj, o_g).max(T::zero())).collect();
    Ok(MarginalWeights {
        a_norm: normalize_or_uniform(&a),
        b_norm: normalize_or_uniform(&b),
        a,
        b,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan<T> {
    pub k: usize,
    /// Row-major `K × K`.
    pub pi: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
    /// `Σ_i |Σ_j π_ij − a_i| + Σ_j |Σ_i π_ij − b_j|` at exit.
    pub violation: T,
}

impl<T: Scalar> TransportPlan<T> {
    pub fn cost(&self, c: &[T]) -> T {
        dot(&self.pi, c)
    }

    pub fn row_sums(&self) -> Vec<T> {
        self.pi.chunks(self.k).map(|r| r.iter().copied().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<T> {
        (0..self.k).map(|j| (0..self.k).map(|i| self.pi[i * self.k + j]).sum()).collect()
    }
}

fn check_distribution<T: Scalar>(name: &str, p: &[T], k: usize) -> Result<()> {
    if p.len() != k {
        return Err(Error::dim(format!("{name} has {} entries, expected {k}", p.len())));
    }
    if p.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
        return Err(Error::contract(format!("{name} has a negative or non-finite entry")));
    }
    let s: T = p.iter().copied().sum();
    if (s - T::one()).abs() > T::lit(1e-9) {
        return Err(Error::contract(format!("{name} sums to {s}, expected 1")));
    }
    Ok(())
}

fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let m = xs.clone().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<T>().ln()
}

fn marginal_violation<T: Scalar>(pi: &[T], a: &[T], b: &[T]) -> T {
    let k = a.len();
    let rows: T = (0..k)
        .map(|i| ((0..k).map(|j| pi[i * k + j]).sum::<T>() - a[i]).abs())
        .sum();
    let cols: T = (0..k)
        .map(|j| ((0..k).map(|i| pi[i * k + j]).sum::<T>() - b[j]).abs())
        .sum();
    rows + cols
}

/// Log-domain Sinkhorn-Knopp. `trace`, when given, receives the marginal
/// violation after every iteration.
pub fn sinkhorn_traced<T: Scalar>(
    c: &[T],
    a: &[T],
    b: &[T],
    cfg: &SinkhornConfig,
    mut trace: Option<&mut Vec<T>>,
) -> Result<TransportPlan<T>> {
    if !(cfg.epsilon > 0.0) || !cfg.epsilon.is_finite() {
        return Err(Error::contract(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    let k = a.len();
    if k == 0 || c.len() != k * k {
        return Err(Error::dim(format!("cost has {} entries for K={k}", c.len())));
    }
    check_distribution("a", a, k)?;
    check_distribution("b", b, k)?;
    let eps = T::lit(cfg.epsilon);
    let tol = T::lit(cfg.tol);
    let kern: Vec<T> = c.iter().map(|&v| -v / eps).collect();
    let log_a: Vec<T> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<T> = b.iter().map(|v| v.ln()).collect();
    let mut u = vec![T::zero(); k];
    let mut v = vec![T::zero(); k];
    let plan = |u: &[T], v: &[T]| -> Vec<T> {
        let mut pi = vec![T::zero(); k * k];
        for i in 0..k {
            for j in 0..k {
                pi[i * k + j] = (u[i] + v[j] + kern[i * k + j]).exp();
            }
        }
        pi
    };
    let mut iterations = 0;
    let mut violation = T::infinity();
    while iterations < cfg.max_iter {
        for i in 0..k {
            let lse = log_sum_exp((0..k).map(|j| v[j] + kern[i * k + j]));
            u[i] = if log_a[i] == T::neg_infinity() { log_a[i] } else { log_a[i] - lse };
        }
        for j in 0..k {
            let lse = log_sum_exp((0..k).map(|i| u[i] + kern[i * k + j]));
            v[j] = if log_b[j] == T::neg_infinity() { log_b[j] } else { log_b[j] - lse };
        }
        iterations += 1;
        violation = marginal_violation(&plan(&u, &v), a, b);
        if let Some(t) = trace.as_deref_mut() {
            t.push(violation);
        }
        if violation < tol {
            break;
        }
    }
    Ok(TransportPlan {
        k,
        pi: plan(&u, &v),
        converged: violation < tol,
        iterations,
        violation,
    })
}

pub fn sinkhorn<T: Scalar>(c: &[T], a: &[T], b: &[T], cfg: &SinkhornConfig) -> Result<TransportPlan<T>> {
    sinkhorn_traced(c, a, b, cfg, None)
}

/// Field for the exact transportation solver.
pub trait LpScalar: Clone + PartialOrd + Num + std::fmt::Debug {
    /// True when the value must be treated as negative (infeasible).
    fn infeasible(&self) -> bool;
}

impl LpScalar for f64 {
    fn infeasible(&self) -> bool {
        *self < -1e-12
    }
}

impl LpScalar for Ratio<i64> {
    fn infeasible(&self) -> bool {
        self.is_negative()
    }
}

impl LpScalar for BigRational {
    fn infeasible(&self) -> bool {
        self.is_negative()
    }
}

/// Largest `K` accepted by [`lp_oracle`].
pub const LP_ORACLE_MAX_K: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ExactPlan<S> {
    pub k: usize,
    pub pi: Vec<S>,
    pub cost: S,
}

/// Solves the tree system of one candidate basis by peeling leaves.
/// Rows are nodes `0..k`, columns `k..2k`.
fn basis_solution<S: LpScalar>(k: usize, cells: &[usize], a: &[S], b: &[S]) -> Option<Vec<S>> {
    let mut residual: Vec<S> = a.iter().chain(b).cloned().collect();
    let mut open = vec![true; cells.len()];
    let mut degree = vec![0usize; 2 * k];
    for &cell in cells {
        degree[cell / k] += 1;
        degree[k + cell % k] += 1;
    }
    if degree.iter().any(|&d| d == 0) {
        return None;
    }
    let mut pi = vec![S::zero(); k * k];
    for _ in 0..cells.len() {
        let (e, node) = (0..cells.len()).filter(|&e| open[e]).find_map(|e| {
            let (r, c) = (cells[e] / k, k + cells[e] % k);
            if degree[r] == 1 {
                Some((e, r))
            } else if degree[c] == 1 {
                Some((e, c))
            } else {
                None
            }
        })?;
        let (r, c) = (cells[e] / k, k + cells[e] % k);
        let value = residual[node].clone();
        if value.infeasible() {
            return None;
        }
        residual[r] = residual[r].clone() - value.clone();
        residual[c] = residual[c].clone() - value.clone();
        degree[r] -= 1;
        degree[c] -= 1;
        open[e] = false;
        pi[cells[e]] = value;
    }
    // every node must be exhausted; otherwise the cells do not span
    if residual.iter().any(|v| v.infeasible() || (S::zero() - v.clone()).infeasible()) {
        return None;
    }
    Some(pi)
}

/// Calls `f` with every increasing `r`-subset of `0..n`.
fn combinations(n: usize, r: usize, mut f: impl FnMut(&[usize])) {
    if r > n {
        return;
    }
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        f(&idx);
        let Some(i) = (0..r).rev().find(|&i| idx[i] != i + n - r) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Exact optimal transport by enumerating every spanning-tree basis of the
/// `K × K` transportation polytope. Refuses `K >` [`LP_ORACLE_MAX_K`].
pub fn lp_oracle<S: LpScalar>(c: &[S], a: &[S], b: &[S]) -> Result<ExactPlan<S>> {
    let k = a.len();
    if k > LP_ORACLE_MAX_K {
        return Err(Error::contract(format!(
            "lp_oracle enumerates bases and refuses K={k} > {LP_ORACLE_MAX_K}"
        )));
    }
    if k == 0 || b.len() != k || c.len() != k * k {
        return Err(Error::dim(format!("lp_oracle: K={k}, |b|={}, |c|={}", b.len(), c.len())));
    }
    if a.iter().chain(b).any(|v| v.infeasible()) {
        return Err(Error::contract("marginals must be non-negative"));
    }
    let sa = a.iter().cloned().fold(S::zero(), |x, y| x + y);
    let sb = b.iter().cloned().fold(S::zero(), |x, y| x + y);
    let gap = sa - sb;
    if gap.infeasible() || (S::zero() - gap).infeasible() {
        return Err(Error::contract("marginals must carry equal mass"));
    }
    let mut best: Option<ExactPlan<S>> = None;
    combinations(k * k, 2 * k - 1, |cells| {
        if let Some(pi) = basis_solution(k, cells, a, b) {
            let cost = pi.iter().zip(c).fold(S::zero(), |s, (p, w)| s + p.clone() * w.clone());
            if best.as_ref().map_or(true, |b| cost < b.cost) {
                best = Some(ExactPlan { k, pi, cost });
            }
        }
    });
    best.ok_or_else(|| Error::contract("transportation problem has no basic feasible solution"))
}

/// Converts `f64` inputs to exact rationals and solves exactly.
pub fn lp_oracle_exact(c: &[f64], a: &[f64], b: &[f64]) -> Result<ExactPlan<BigRational>> {
    let conv = |xs: &[f64]| -> Result<Vec<BigRational>> {
        xs.iter()
            .map(|&x| BigRational::from_float(x).ok_or_else(|| Error::contract(format!("{x} is not finite"))))
            .collect()
    };
    let (c, mut a, mut b) = (conv(c)?, conv(a)?, conv(b)?);
    // balance float rounding by normalizing both sides to mass 1
    for side in [&mut a, &mut b] {
        let s = side.iter().cloned().fold(BigRational::zero(), |x, y| x + y);
        if s.is_zero() {
            return Err(Error::contract("marginals carry no mass"));
        }
        for v in side.iter_mut() {
            *v = v.clone() / s.clone();
        }
    }
    lp_oracle(&c, &a, &b)
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    use num_traits::ToPrimitive;
    r.to_f64().unwrap_or(f64::NAN)
}

/// `−Σ_ij cos(o_i, t_j)·π_ij`, averaged over the batch. `o` and `t` are
/// `[B, K, D]`; `pi` holds `B` row-major `K × K` plans used as constants.
pub fn correlation_loss<'t, T: Scalar>(o: Var<'t, T>, t: Var<'t, T>, pi: &[T]) -> Result<Var<'t, T>> {
    let (so, st) = (o.shape(), t.shape());
    if so.len() != 3 || so != st {
        return Err(Error::dim(format!("correlation_loss: {so:?} vs {st:?}")));
    }
    let (batch, k) = (so[0], so[1]);
    if pi.len() != batch * k * k {
        return Err(Error::dim(format!("plan has {} entries, expected {}", pi.len(), batch * k * k)));
    }
    let cos = o.l2_normalize().bmm(t.l2_normalize(), true)?;
    let w = o.tape().constant(&[batch, k, k], pi.to_vec())?;
    Ok(cos.mul(w)?.sum().scale(-T::one() / T::from_usize(batch).unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tape;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dice_examples() {
        let m: RelationMatrix<f64> = relation_from_labels(&[vec![1, 1], vec![1, 0]]).unwrap();
        assert_eq!(m.get(0, 1), 2.0 / 3.0);
        assert_eq!(m.get(1, 0), 2.0 / 3.0);
        let m: RelationMatrix<f64> = relation_from_labels(&[vec![1, 1, 0], vec![0, 0, 0], vec![1, 1, 0]]).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(0, 2), 0.0);
        assert_eq!(m.get(2, 2), 1.0);
        let m: RelationMatrix<f64> = relation_from_labels(&[vec![1, 0], vec![0, 1]]).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
    }

    #[test]
    fn non_binary_labels_rejected() {
        assert!(matches!(
            relation_from_labels::<f64>(&[vec![0, 2]]),
            Err(Error::Contract(_))
        ));
        assert!(relation_from_labels::<f64>(&[]).is_err());
    }

    #[test]
    fn cost_is_complement() {
        let m = RelationMatrix::new(2, vec![1.0, 0.35, 0.35, 1.0]).unwrap();
        let c = cost_from_relation(&m);
        assert_eq!(c, vec![0.0, 0.65, 0.65, 0.0]);
    }

    #[test]
    fn relation_csv_round_trips() {
        let m: RelationMatrix<f64> =
            relation_from_labels(&[vec![1, 1, 0], vec![1, 0, 1], vec![0, 1, 1], vec![1, 1, 1]]).unwrap();
        let text = format_relation(&m);
        assert!(text.starts_with("au_0,au_1,au_2\n"));
        assert_eq!(parse_relation(&text, "mem").unwrap(), m);
        assert!(parse_relation("au_0,au_1\n1,0.5\n0.4,1\n", "mem").is_err());
    }

    #[test]
    fn marginal_clamp_and_normalize() {
        let t_g = vec![1.0, 0.0];
        let o = vec![vec![0.7, 0.5], vec![-0.3, 0.1], vec![0.0, 1.0]];
        let t = vec![vec![0.5, 0.0]; 3];
        let w = marginal_weights(&o, &t_g, &t, &[1.0, 0.0]).unwrap();
        assert_eq!(w.a, vec![0.7, 0.0, 0.0]);
        assert_eq!(w.a_norm, vec![1.0, 0.0, 0.0]);
        assert_eq!(w.b_norm, vec![1.0 / 3.0; 3]);
        let neg = marginal_weights(&o, &[-1.0, 0.0], &t, &[0.0, -1.0]).unwrap();
        assert_eq!(neg.b, vec![0.0; 3]);
        assert_eq!(neg.b_norm, vec![1.0 / 3.0; 3]);
        let half = normalize_or_uniform(&[0.5, 0.0, 0.5]);
        assert_eq!(half, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn constant_cost_gives_independent_coupling() {
        let a = [0.2, 0.3, 0.5];
        let b = [0.6, 0.1, 0.3];
        let p = sinkhorn(&[0.4; 9], &a, &b, &SinkhornConfig::default()).unwrap();
        assert!(p.converged);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(p.pi[i * 3 + j], a[i] * b[j], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn two_by_two_identity_plan() {
        let cfg = SinkhornConfig { epsilon: 0.01, ..Default::default() };
        let p = sinkhorn(&[0.0, 1.0, 1.0, 0.0], &[0.5, 0.5], &[0.5, 0.5], &cfg).unwrap();
        let expect = [0.5, 0.0, 0.0, 0.5];
        for (x, e) in p.pi.iter().zip(expect) {
            assert!((x - e).abs() < 1e-3);
        }
    }

    #[test]
    fn epsilon_must_be_positive() {
        for eps in [0.0, -1.0, f64::NAN] {
            let cfg = SinkhornConfig { epsilon: eps, ..Default::default() };
            assert!(matches!(sinkhorn(&[0.0; 4], &[0.5; 2], &[0.5; 2], &cfg), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let cfg = SinkhornConfig { epsilon: 0.001, max_iter: 1, tol: 1e-15 };
        let p = sinkhorn(&[0.0, 0.3, 0.9, 0.1], &[0.9, 0.1], &[0.2, 0.8], &cfg).unwrap();
        assert!(!p.converged);
        assert_eq!(p.iterations, 1);
        assert!(p.pi.iter().all(|v: &f64| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn oracle_point_masses() {
        let p = lp_oracle(&[0.3, 0.9, 0.1, 0.2], &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(p.pi, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.cost, 0.3);
    }

    #[test]
    fn oracle_identity_cost_diagonal_plan() {
        let k = 4;
        let c: Vec<Ratio<i64>> = (0..k * k)
            .map(|i| Ratio::from_integer((i / k != i % k) as i64))
            .collect();
        let u = vec![Ratio::new(1, 4); k];
        let p = lp_oracle(&c, &u, &u).unwrap();
        assert_eq!(p.cost, Ratio::from_integer(0));
        for i in 0..k {
            assert_eq!(p.pi[i * k + i], Ratio::new(1, 4));
        }
    }

    #[test]
    fn oracle_refuses_large_k() {
        let a = vec![0.2; 5];
        assert!(matches!(lp_oracle(&[0.0; 25], &a, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn correlation_loss_examples() {
        let tape = Tape::<f64>::new();
        let v = tape.constant(&[1, 2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        let l = correlation_loss(v, v, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_abs_diff_eq!(l.item(), -1.0, epsilon = 1e-15);

        let o = tape.constant(&[1, 2, 2], vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let t = tape.constant(&[1, 2, 2], vec![0.0, 3.0, 0.0, -1.0]).unwrap();
        let l = correlation_loss(o, t, &[0.25; 4]).unwrap();
        assert_eq!(l.item(), 0.0);

        // o1=(3,4), t1=(1,0): cos 3/5; o2=(1,1), t2=(1,0): cos 1/√2
        let o = tape.constant(&[1, 2, 2], vec![3.0, 4.0, 1.0, 1.0]).unwrap();
        let t = tape.constant(&[1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let l = correlation_loss(o, t, &[0.5, 0.0, 0.0, 0.5]).unwrap();
        let expect = -0.5 * (0.6 + 1.0 / 2f64.sqrt());
        assert_abs_diff_eq!(l.item(), expect, epsilon = 1e-15);
    }
}
