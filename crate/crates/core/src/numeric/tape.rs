//! Reverse-mode differentiation over an explicitly recorded operation tape.
//!
//! Every operation appends a node holding its forward value and the ids of its
//! inputs. [`Tape::backward`] walks the nodes in reverse creation order, so a
//! gradient is complete before it is propagated further.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use super::array::DiffArray;
use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sentinel in gather index maps: the output element is a constant zero.
pub const PAD: usize = usize::MAX;

/// Denominator floor for vector norms.
pub const NORM_FLOOR: f64 = 1e-12;

const CONV_CHUNK_ENTRIES: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Bcast {
    Same,
    Scalar,
    /// Operand shape is a suffix of the output shape: `i % n`.
    Suffix(usize),
    Map(Rc<Vec<usize>>),
}

impl Bcast {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Suffix(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: BinOp,
        a: usize,
        b: usize,
        ia: Bcast,
        ib: Bcast,
    },
    Neg(usize),
    Scale(usize, T),
    Offset(usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sum(usize),
    SumAxis {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
        scale: T,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Reshape(usize),
    Gather {
        x: usize,
        index: Rc<Vec<usize>>,
    },
    Concat {
        parts: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    L2Normalize {
        x: usize,
        dim: usize,
        norms: Vec<T>,
    },
    Norm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// true: normalize each row over its features (layer norm);
        /// false: normalize each feature over the rows (batch norm).
        per_row: bool,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    WindowAttention {
        q: usize,
        k: usize,
        v: usize,
        bias: usize,
        geom: AttnGeom,
        probs: Vec<T>,
    },
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    windows: usize,
    n: usize,
    heads: usize,
    hd: usize,
    periods: usize,
}

impl AttnGeom {
    fn c(&self) -> usize {
        self.heads * self.hd
    }

    /// Offset of row `i` of head `h` in window `w` of a `[W, n, C]` tensor.
    fn row(&self, w: usize, i: usize, h: usize) -> usize {
        (w * self.n + i) * self.c() + h * self.hd
    }

    fn bias_at(&self, w: usize, h: usize) -> usize {
        ((w % self.periods) * self.heads + h) * self.n * self.n
    }

    fn probs_at(&self, w: usize, h: usize) -> usize {
        (w * self.heads + h) * self.n * self.n
    }
}

/// Transposed `[hd, n]` copies of one head's slices, so inner loops run
/// over the token axis.
struct HeadBuffers<T> {
    t: [Vec<T>; 4],
    out: [Vec<T>; 3],
}

impl<T: Scalar> HeadBuffers<T> {
    fn new(a: &AttnGeom) -> Self {
        let z = || vec![T::zero(); a.hd * a.n];
        Self {
            t: [z(), z(), z(), z()],
            out: [z(), z(), z()],
        }
    }

    fn load(&mut self, a: &AttnGeom, w: usize, h: usize, src: [&[T]; 4]) {
        for (buf, s) in self.t.iter_mut().zip(src) {
            if s.is_empty() {
                continue;
            }
            for i in 0..a.n {
                let r = a.row(w, i, h);
                for kk in 0..a.hd {
                    buf[kk * a.n + i] = s[r + kk];
                }
            }
        }
    }

    fn clear_out(&mut self) {
        for b in &mut self.out {
            b.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Adds the transposed outputs back into `[W, n, C]` gradients.
    fn store(&self, a: &AttnGeom, w: usize, h: usize, dst: [&mut Vec<T>; 3]) {
        for (buf, d) in self.out.iter().zip(dst) {
            if d.is_empty() {
                continue;
            }
            for i in 0..a.n {
                let r = a.row(w, i, h);
                for kk in 0..a.hd {
                    d[r + kk] = d[r + kk] + buf[kk * a.n + i];
                }
            }
        }
    }
}

/// Geometry of an NHWC convolution with square stride and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Columns of the patch matrix: `kh·kw·cin`, matching the weight layout.
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Patch-matrix rows (output pixels) of images `b0..b1`.
    fn rows(&self, b0: usize, b1: usize) -> usize {
        (b1 - b0) * self.out_h() * self.out_w()
    }

    /// Image ranges whose patch matrix stays around a million entries.
    fn chunks(&self) -> Vec<(usize, usize)> {
        let per = (self.rows(0, 1) * self.patch_len()).max(1);
        let step = (CONV_CHUNK_ENTRIES / per).max(1);
        (0..self.batch).step_by(step).map(|b0| (b0, (b0 + step).min(self.batch))).collect()
    }

    /// Visits `(row, column block, input offset)` for every patch entry that
    /// lies inside the image; each block spans `cin` channels.
    fn for_each_patch(&self, b0: usize, b1: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for b in b0..b1 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b - b0) * oh + oy) * ow + ox;
                    for dy in 0..self.kh {
                        let iy = (oy * self.stride + dy) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for dx in 0..self.kw {
                            let ix = (ox * self.stride + dx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            f(row, (dy * self.kw + dx) * self.cin, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], b0: usize, b1: usize, cols: &mut Vec<T>) {
        let (kc, cin) = (self.patch_len(), self.cin);
        cols.clear();
        cols.resize(self.rows(b0, b1) * kc, T::zero());
        self.for_each_patch(b0, b1, |row, col, src| {
            cols[row * kc + col..row * kc + col + cin].copy_from_slice(&x[src..src + cin]);
        });
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], b0: usize, b1: usize, gx: &mut [T]) {
        let (kc, cin) = (self.patch_len(), self.cin);
        self.for_each_patch(b0, b1, |row, col, src| {
            axpy(T::one(), &cols[row * kc + col..row * kc + col + cin], &mut gx[src..src + cin]);
        });
    }
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    degenerate_norms: Cell<usize>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); v.numel()],
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(format!("{what}: {a:?} vs {b:?}"))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn bcast_for(input: &[usize], out: &[usize]) -> Bcast {
    let n_in: usize = input.iter().product();
    let n_out: usize = out.iter().product();
    if n_in == n_out {
        return Bcast::Same;
    }
    if n_in == 1 {
        return Bcast::Scalar;
    }
    // strip leading ones then test for a suffix match
    let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
        return Bcast::Suffix(n_in);
    }
    let offset = out.len() - input.len();
    let mut in_strides = vec![0usize; out.len()];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        in_strides[i + offset] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let mut map = vec![0usize; n_out];
    let mut counter = vec![0usize; out.len()];
    let mut cur = 0usize;
    for slot in map.iter_mut() {
        *slot = cur;
        for ax in (0..out.len()).rev() {
            counter[ax] += 1;
            cur += in_strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            cur -= in_strides[ax] * out[ax];
            counter[ax] = 0;
        }
    }
    Bcast::Map(Rc::new(map))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// GELU (tanh approximation) and its derivative, written through
/// `0.5 (1 + tanh u) = σ(2u)` so the negative tail does not cancel.
#[inline]
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let two = T::lit(2.0);
    let u = c * (x + k * x * x * x);
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    // σ(2u) and σ(−2u) from one exponential
    let e = (-(two * u).abs()).exp();
    let (hi, lo) = (T::one() / (T::one() + e), e / (T::one() + e));
    let (s, s_neg) = if u >= T::zero() { (hi, lo) } else { (lo, hi) };
    (x * s, s + two * x * s * s_neg * du)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            degenerate_norms: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of vectors whose norm fell under the floor during this pass.
    pub fn degenerate_norms(&self) -> usize {
        self.degenerate_norms.get()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Records an array; gradients are tracked iff `array.requires_grad()`.
    pub fn leaf(&self, array: &DiffArray<T>) -> Var<'_, T> {
        self.push(
            array.shape().to_vec(),
            array.data().to_vec(),
            Op::Leaf,
            array.requires_grad(),
        )
    }

    pub fn variable(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        let a = DiffArray::new(shape.to_vec(), data)?;
        Ok(self.push(a.shape().to_vec(), a.into_data(), Op::Leaf, true))
    }

    pub fn constant(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        let a = DiffArray::new(shape.to_vec(), data)?;
        Ok(self.push(a.shape().to_vec(), a.into_data(), Op::Leaf, false))
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero arrays"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {base:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err("concat", &base, &s));
            }
            total += s[axis];
            widths.push(s[axis] * s[axis + 1..].iter().product::<usize>());
        }
        let outer: usize = base[..axis].iter().product();
        let mut data = Vec::with_capacity(outer * widths.iter().sum::<usize>());
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.id].data[o * w..(o + 1) * w]);
                }
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                parts: ids,
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Runs the backward pass from a single-element output.
    pub fn backward(&self, out: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[out.id].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[out.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[out.id] = Some(vec![T::one()]);
        for id in (0..=out.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].data.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

/// Calls `f(i, ia(i), ib(i))` for every output element `i < n`.
#[inline]
fn visit_pairs(n: usize, ia: &Bcast, ib: &Bcast, mut f: impl FnMut(usize, usize, usize)) {
    let cyclic = |m: usize, f: &mut dyn FnMut(usize, usize)| {
        let mut j = 0;
        for i in 0..n {
            f(i, j);
            j += 1;
            if j == m {
                j = 0;
            }
        }
    };
    match (ia, ib) {
        (Bcast::Same, Bcast::Same) => (0..n).for_each(|i| f(i, i, i)),
        (Bcast::Same, Bcast::Scalar) => (0..n).for_each(|i| f(i, i, 0)),
        (Bcast::Same, Bcast::Suffix(m)) => cyclic(*m, &mut |i, j| f(i, i, j)),
        (Bcast::Suffix(m), Bcast::Same) => cyclic(*m, &mut |i, j| f(i, j, i)),
        _ => (0..n).for_each(|i| f(i, ia.at(i), ib.at(i))),
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, ia, ib } => {
            let (a, b) = (*a, *b);
            let av = &nodes[a].data;
            let bv = &nodes[b].data;
            if matches!(kind, BinOp::Add | BinOp::Sub) && matches!(ia, Bcast::Same) && !matches!(ib, Bcast::Map(_)) {
                if let Some(ga) = acc(grads, nodes, a) {
                    axpy(T::one(), g, ga);
                }
                let sign = if *kind == BinOp::Add { T::one() } else { -T::one() };
                if let Some(gb) = acc(grads, nodes, b) {
                    match ib {
                        Bcast::Same => axpy(sign, g, gb),
                        Bcast::Suffix(m) => g.chunks(*m).for_each(|ch| axpy(sign, ch, gb)),
                        _ => gb[0] = gb[0] + sign * g.iter().copied().sum::<T>(),
                    }
                }
                return;
            }
            if let Some(ga) = acc(grads, nodes, a) {
                visit_pairs(g.len(), ia, ib, |i, ja, jb| {
                    let gi = g[i];
                    let d = match kind {
                        BinOp::Add | BinOp::Sub => gi,
                        BinOp::Mul => gi * bv[jb],
                        BinOp::Div => gi / bv[jb],
                    };
                    ga[ja] = ga[ja] + d;
                });
            }
            if let Some(gb) = acc(grads, nodes, b) {
                visit_pairs(g.len(), ia, ib, |i, ja, jb| {
                    let gi = g[i];
                    let d = match kind {
                        BinOp::Add => gi,
                        BinOp::Sub => -gi,
                        BinOp::Mul => gi * av[ja],
                        BinOp::Div => {
                            let bj = bv[jb];
                            -gi * av[ja] / (bj * bj)
                        }
                    };
                    gb[jb] = gb[jb] + d;
                });
            }
        }
        Op::Reshape(x) => {
            if nodes[*x].requires_grad {
                match &mut grads[*x] {
                    Some(gx) => axpy(T::one(), g, gx),
                    slot => *slot = Some(g.to_vec()),
                }
            }
        }
        Op::Neg(x) | Op::Scale(x, _) | Op::Offset(x) => {
            let factor = match &node.op {
                Op::Neg(_) => -T::one(),
                Op::Scale(_, c) => *c,
                _ => T::one(),
            };
            if let Some(gx) = acc(grads, nodes, *x) {
                axpy(factor, g, gx);
            }
        }
        Op::Relu(x) => {
            let xv = &nodes[*x].data;
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    if xv[i] > T::zero() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xv = &nodes[*x].data;
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * gelu_parts(xv[i]).1;
                }
            }
        }
        Op::Exp(x) => {
            let y = &node.data;
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * y[i];
                }
            }
        }
        Op::Log(x) => {
            let xv = &nodes[*x].data;
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] / xv[i];
                }
            }
        }
        Op::Sqrt(x) => {
            let y = &node.data;
            if let Some(gx) = acc(grads, nodes, *x) {
                let half = T::lit(0.5);
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * half / y[i];
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for v in gx.iter_mut() {
                    *v = *v + g[0];
                }
            }
        }
        Op::SumAxis {
            x,
            outer,
            len,
            inner,
            scale,
        } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..*outer {
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        for j in 0..*inner {
                            gx[base + j] = gx[base + j] + *scale * g[o * inner + j];
                        }
                    }
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = G · Bᵀ with B stored k×n: treat B as "n-major" rows
                gemm_nt(g, bv, ga, *m, *n, *k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gemm_tn(av, g, gb, *m, *k, *n);
            }
        }
        Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            if let Some(ga) = acc(grads, nodes, *a) {
                for t in 0..*batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let bt = &bv[t * k * n..(t + 1) * k * n];
                    let dst = &mut ga[t * m * k..(t + 1) * m * k];
                    if *trans_b {
                        // C = A Bᵀ, B is n×k: dA = G B
                        gemm_nn(gt, bt, dst, m, n, k);
                    } else {
                        gemm_nt(gt, bt, dst, m, n, k);
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for t in 0..*batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let at = &av[t * m * k..(t + 1) * m * k];
                    let dst = &mut gb[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        // dB (n×k) = Gᵀ A
                        gemm_tn(gt, at, dst, m, n, k);
                    } else {
                        gemm_tn(at, gt, dst, m, k, n);
                    }
                }
            }
        }
        Op::Gather { x, index } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (i, &j) in index.iter().enumerate() {
                    if j != PAD {
                        gx[j] = gx[j] + g[i];
                    }
                }
            }
        }
        Op::Concat {
            parts,
            outer,
            widths,
        } => {
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                if let Some(gp) = acc(grads, nodes, p) {
                    for o in 0..*outer {
                        let src = &g[o * total + offset..o * total + offset + w];
                        axpy(T::one(), src, &mut gp[o * w..(o + 1) * w]);
                    }
                }
                offset += w;
            }
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = &node.data;
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..*outer {
                    for j in 0..*inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let mut s = T::zero();
                        for l in 0..*len {
                            s = s + g[at(l)] * y[at(l)];
                        }
                        for l in 0..*len {
                            let i = at(l);
                            gx[i] = gx[i] + y[i] * (g[i] - s);
                        }
                    }
                }
            }
        }
        Op::L2Normalize { x, dim, norms } => {
            let y = &node.data;
            let floor = T::lit(NORM_FLOOR);
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, &nrm) in norms.iter().enumerate() {
                    let sl = r * dim..(r + 1) * dim;
                    let (gr, yr) = (&g[sl.clone()], &y[sl.clone()]);
                    if nrm > floor {
                        let proj = dot(gr, yr);
                        for (i, k) in sl.enumerate() {
                            gx[k] = gx[k] + (gr[i] - yr[i] * proj) / nrm;
                        }
                    } else {
                        for (i, k) in sl.enumerate() {
                            gx[k] = gx[k] + gr[i] / floor;
                        }
                    }
                }
            }
        }
        Op::Norm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            per_row,
            rows,
            cols,
        } => {
            let (rows, cols) = (*rows, *cols);
            let gam = &nodes[*gamma].data;
            if let Some(gg) = acc(grads, nodes, *gamma) {
                for r in 0..rows {
                    for c in 0..cols {
                        gg[c] = gg[c] + g[r * cols + c] * xhat[r * cols + c];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *beta) {
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] = gb[c] + g[r * cols + c];
                    }
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                if *per_row {
                    let nf = T::from_usize(cols).unwrap();
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..cols {
                            let d = g[r * cols + c] * gam[c];
                            m1 = m1 + d;
                            m2 = m2 + d * xhat[r * cols + c];
                        }
                        m1 = m1 / nf;
                        m2 = m2 / nf;
                        for c in 0..cols {
                            let i = r * cols + c;
                            let d = g[i] * gam[c];
                            gx[i] = gx[i] + inv_std[r] * (d - m1 - xhat[i] * m2);
                        }
                    }
                } else {
                    let nf = T::from_usize(rows).unwrap();
                    let mut m1 = vec![T::zero(); cols];
                    let mut m2 = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            let d = g[i] * gam[c];
                            m1[c] = m1[c] + d;
                            m2[c] = m2[c] + d * xhat[i];
                        }
                    }
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            let d = g[i] * gam[c];
                            gx[i] = gx[i] + inv_std[c] * (d - m1[c] / nf - xhat[i] * m2[c] / nf);
                        }
                    }
                }
            }
        }
        Op::WindowAttention {
            q,
            k,
            v,
            bias,
            geom,
            probs,
        } => {
            let a = geom;
            let n = a.n;
            let (qv, kv, vv) = (&nodes[*q].data, &nodes[*k].data, &nodes[*v].data);
            let want = |id: usize| nodes[id].requires_grad;
            let zeros = |id: usize| if want(id) { vec![T::zero(); nodes[id].data.len()] } else { Vec::new() };
            let (mut dq, mut dk, mut dv, mut db) = (zeros(*q), zeros(*k), zeros(*v), zeros(*bias));
            let mut hb = HeadBuffers::new(a);
            let mut da = vec![T::zero(); n * n];
            for w in 0..a.windows {
                for h in 0..a.heads {
                    let p = &probs[a.probs_at(w, h)..a.probs_at(w, h) + n * n];
                    hb.load(a, w, h, [qv, kv, vv, g]);
                    hb.clear_out();
                    let HeadBuffers {
                        t: [qt, kt, vt, gt],
                        out: [oq, ok, ov],
                    } = &mut hb;
                    // dA = G·Vᵀ
                    da.iter_mut().for_each(|x| *x = T::zero());
                    gemm_tn(gt, vt, &mut da, a.hd, n, n);
                    for i in 0..n {
                        let (pr, dr) = (&p[i * n..(i + 1) * n], &mut da[i * n..(i + 1) * n]);
                        let r = dot(pr, dr);
                        for (d, &pj) in dr.iter_mut().zip(pr) {
                            *d = pj * (*d - r);
                        }
                    }
                    let ds = &da;
                    if !db.is_empty() {
                        let bb = a.bias_at(w, h);
                        axpy(T::one(), ds, &mut db[bb..bb + n * n]);
                    }
                    if !dv.is_empty() {
                        // dVᵀ = Gᵀ·P
                        gemm_nn(gt, p, ov, a.hd, n, n);
                    }
                    if !dq.is_empty() {
                        // dQᵀ = Kᵀ·dSᵀ
                        gemm_nt(kt, ds, oq, a.hd, n, n);
                    }
                    if !dk.is_empty() {
                        // dKᵀ = Qᵀ·dS
                        gemm_nn(qt, ds, ok, a.hd, n, n);
                    }
                    hb.store(a, w, h, [&mut dq, &mut dk, &mut dv]);
                }
            }
            for (id, d) in [(*q, dq), (*k, dk), (*v, dv), (*bias, db)] {
                if let Some(gx) = acc(grads, nodes, id) {
                    axpy(T::one(), &d, gx);
                }
            }
        }
        Op::Conv2d { x, w, geom } => {
            let (xv, wv) = (&nodes[*x].data, &nodes[*w].data);
            let want_x = nodes[*x].requires_grad;
            let want_w = nodes[*w].requires_grad;
            let (kc, cout) = (geom.patch_len(), geom.cout);
            let mut gw_local = if want_w { vec![T::zero(); wv.len()] } else { Vec::new() };
            let mut gx_local = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
            let mut cols = Vec::new();
            let mut dcols = Vec::new();
            for (b0, b1) in geom.chunks() {
                let rows = geom.rows(b0, b1);
                let gc = &g[geom.rows(0, b0) * cout..geom.rows(0, b1) * cout];
                if want_w {
                    geom.im2col(xv, b0, b1, &mut cols);
                    gemm_tn(&cols, gc, &mut gw_local, rows, kc, cout);
                }
                if want_x {
                    dcols.clear();
                    dcols.resize(rows * kc, T::zero());
                    gemm_nt(gc, wv, &mut dcols, rows, cout, kc);
                    geom.col2im_add(&dcols, b0, b1, &mut gx_local);
                }
            }
            for (id, d) in [(*x, gx_local), (*w, gw_local)] {
                if let Some(gd) = acc(grads, nodes, id) {
                    axpy(T::one(), &d, gd);
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn node(&self) -> Ref<'_, Node<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    pub fn values(&self) -> Vec<T> {
        self.node().data.clone()
    }

    /// Borrowed view of the forward value; do not record ops while it is held.
    pub fn with_values<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.node().data)
    }

    pub fn to_array(&self) -> DiffArray<T> {
        let n = self.node();
        DiffArray::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    /// Value of a single-element array.
    pub fn item(&self) -> T {
        let n = self.node();
        assert_eq!(n.data.len(), 1, "item() on shape {:?}", n.shape);
        n.data[0]
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let (shape, data, rg) = {
            let n = self.node();
            (n.shape.clone(), n.data.iter().map(|&v| f(v)).collect(), n.requires_grad)
        };
        self.tape.push(shape, data, op, rg)
    }

    fn binary(&self, other: Var<'t, T>, kind: BinOp) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err("broadcast", &sa, &sb))?;
        let ia = bcast_for(&sa, &out);
        let ib = bcast_for(&sb, &out);
        let n: usize = out.iter().product();
        let data = {
            let nodes = self.tape.nodes.borrow();
            let (av, bv) = (&nodes[self.id].data, &nodes[other.id].data);
            let f = |x: T, y: T| match kind {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
            };
            match (&ia, &ib) {
                (Bcast::Same, Bcast::Same) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
                (Bcast::Same, Bcast::Suffix(m)) => {
                    av.chunks(*m).flat_map(|ch| ch.iter().zip(bv).map(|(&x, &y)| f(x, y))).collect()
                }
                (Bcast::Same, Bcast::Scalar) => av.iter().map(|&x| f(x, bv[0])).collect(),
                _ => (0..n).map(|i| f(av[ia.at(i)], bv[ib.at(i)])).collect(),
            }
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(
            out,
            data,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                ia,
                ib,
            },
            rg,
        ))
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Div)
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.unary(Op::Neg(self.id), |v| -v)
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        self.unary(Op::Offset(self.id), |v| v + c)
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn gelu(&self) -> Var<'t, T> {
        self.unary(Op::Gelu(self.id), |v| gelu_parts(v).0)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), T::exp)
    }

    pub fn ln(&self) -> Var<'t, T> {
        self.unary(Op::Log(self.id), T::ln)
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        self.unary(Op::Sqrt(self.id), T::sqrt)
    }

    /// Identity forward; blocks every gradient flowing through it.
    pub fn stop_gradient(&self) -> Var<'t, T> {
        let (shape, data) = {
            let n = self.node();
            (n.shape.clone(), n.data.clone())
        };
        self.tape.push(shape, data, Op::Leaf, false)
    }

    pub fn sum(&self) -> Var<'t, T> {
        let (s, rg) = {
            let n = self.node();
            (n.data.iter().copied().sum::<T>(), n.requires_grad)
        };
        self.tape.push(vec![1], vec![s], Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::from_usize(self.numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let scale = if mean {
            T::one() / T::from_usize(len).unwrap()
        } else {
            T::one()
        };
        let (data, rg) = {
            let n = self.node();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &n.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                    axpy(T::one(), src, &mut out[o * inner..(o + 1) * inner]);
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v = *v * scale);
            }
            (out, n.requires_grad)
        };
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.tape.push(
            out_shape,
            data,
            Op::SumAxis {
                x: self.id,
                outer,
                len,
                inner,
                scale,
            },
            rg,
        ))
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, true)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let n: usize = shape.iter().product();
        let (data, rg) = {
            let node = self.node();
            if node.data.len() != n {
                return Err(shape_err("reshape", &node.shape, shape));
            }
            (node.data.clone(), node.requires_grad)
        };
        Ok(self.tape.push(shape.to_vec(), data, Op::Reshape(self.id), rg))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        {
            let nodes = self.tape.nodes.borrow();
            gemm_nn(&nodes[self.id].data, &nodes[other.id].data, &mut out, m, k, n);
        }
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Batched product over the leading axis: `[b,m,k]·[b,k,n]`, or
    /// `[b,m,k]·[b,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&self, other: Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let nodes = self.tape.nodes.borrow();
            let (av, bv) = (&nodes[self.id].data, &nodes[other.id].data);
            for t in 0..batch {
                let at = &av[t * m * k..(t + 1) * m * k];
                let bt = &bv[t * k * n..(t + 1) * k * n];
                let ot = &mut out[t * m * n..(t + 1) * m * n];
                if trans_b {
                    gemm_nt(at, bt, ot, m, k, n);
                } else {
                    gemm_nn(at, bt, ot, m, k, n);
                }
            }
        }
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// `x[..., k] · w[k, n] (+ bias[n])`, preserving leading axes.
    pub fn linear(&self, w: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let s = self.shape();
        let ws = w.shape();
        let k = *s.last().unwrap();
        if ws.len() != 2 || ws[0] != k {
            return Err(shape_err("linear", &s, &ws));
        }
        let rows = self.numel() / k;
        let y = self.reshape(&[rows, k])?.matmul(w)?;
        let y = match bias {
            Some(b) => y.add(b)?,
            None => y,
        };
        let mut out = s.clone();
        *out.last_mut().unwrap() = ws[1];
        y.reshape(&out)
    }

    /// `out[i] = x[index[i]]`, with [`PAD`] producing zero.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t, T>> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim(format!(
                "gather shape {shape:?} does not hold {} entries",
                index.len()
            )));
        }
        let (data, rg) = {
            let n = self.node();
            let mut out = Vec::with_capacity(index.len());
            for &j in index.iter() {
                if j == PAD {
                    out.push(T::zero());
                } else if j < n.data.len() {
                    out.push(n.data[j]);
                } else {
                    return Err(Error::dim(format!(
                        "gather index {j} out of range {}",
                        n.data.len()
                    )));
                }
            }
            (out, n.requires_grad)
        };
        Ok(self
            .tape
            .push(shape.to_vec(), data, Op::Gather { x: self.id, index }, rg))
    }

    /// Reorders axes; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let s = self.shape();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("bad permutation {perm:?} for {s:?}")));
        }
        let mut strides = vec![1; s.len()];
        for i in (0..s.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * s[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let n = self.numel();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; s.len()];
        for _ in 0..n {
            index.push(counter.iter().zip(perm).map(|(&c, &p)| c * strides[p]).sum());
            for ax in (0..s.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.gather(Rc::new(index), &out_shape)
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let (data, rg) = {
            let n = self.node();
            let mut out = vec![T::zero(); n.data.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + j;
                    let mut mx = T::neg_infinity();
                    for l in 0..len {
                        mx = mx.max(n.data[at(l)]);
                    }
                    let mut s = T::zero();
                    for l in 0..len {
                        let e = (n.data[at(l)] - mx).exp();
                        out[at(l)] = e;
                        s = s + e;
                    }
                    for l in 0..len {
                        out[at(l)] = out[at(l)] / s;
                    }
                }
            }
            (out, n.requires_grad)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Scales each vector along the last axis to unit length, with the norm
    /// floored at [`NORM_FLOOR`].
    pub fn l2_normalize(&self) -> Var<'t, T> {
        let shape = self.shape();
        let dim = *shape.last().unwrap();
        let floor = T::lit(NORM_FLOOR);
        let (data, norms, rg, degenerate) = {
            let n = self.node();
            let rows = n.data.len() / dim;
            let mut out = vec![T::zero(); n.data.len()];
            let mut norms = Vec::with_capacity(rows);
            let mut degenerate = 0;
            for r in 0..rows {
                let v = &n.data[r * dim..(r + 1) * dim];
                let nrm = dot(v, v).sqrt();
                if nrm <= floor {
                    degenerate += 1;
                }
                let d = nrm.max(floor);
                for (o, &x) in out[r * dim..(r + 1) * dim].iter_mut().zip(v) {
                    *o = x / d;
                }
                norms.push(nrm);
            }
            (out, norms, n.requires_grad, degenerate)
        };
        let tape = self.tape;
        tape.degenerate_norms.set(tape.degenerate_norms.get() + degenerate);
        tape.push(
            shape,
            data,
            Op::L2Normalize {
                x: self.id,
                dim,
                norms,
            },
            rg,
        )
    }

    /// Cosine similarity along the last axis; the result drops that axis.
    pub fn cosine_sim(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.last() != sb.last() {
            return Err(shape_err("cosine_sim", &sa, &sb));
        }
        let prod = self.l2_normalize().mul(other.l2_normalize())?;
        let last = prod.shape().len() - 1;
        prod.sum_axis(last)
    }

    fn norm_impl(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: T,
        per_row: bool,
    ) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
        let shape = self.shape();
        let cols = *shape.last().unwrap();
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(shape_err("norm affine", &shape, &gamma.shape()));
        }
        let rows = self.numel() / cols;
        let (data, xhat, inv_std, means, vars) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].data;
            let (gv, bv) = (&nodes[gamma.id].data, &nodes[beta.id].data);
            let mut xhat = vec![T::zero(); x.len()];
            let groups = if per_row { rows } else { cols };
            let (gsize, gstride, estride) = if per_row { (cols, cols, 1) } else { (rows, 1, cols) };
            let nf = T::from_usize(gsize).unwrap();
            let mut inv_std = vec![T::zero(); groups];
            let mut means = vec![T::zero(); groups];
            let mut vars = vec![T::zero(); groups];
            for gi in 0..groups {
                let at = |e: usize| gi * gstride + e * estride;
                let mut mu = T::zero();
                for e in 0..gsize {
                    mu = mu + x[at(e)];
                }
                mu = mu / nf;
                let mut var = T::zero();
                for e in 0..gsize {
                    let d = x[at(e)] - mu;
                    var = var + d * d;
                }
                var = var / nf;
                let is = T::one() / (var + eps).sqrt();
                for e in 0..gsize {
                    xhat[at(e)] = (x[at(e)] - mu) * is;
                }
                inv_std[gi] = is;
                means[gi] = mu;
                vars[gi] = var;
            }
            let mut out = vec![T::zero(); x.len()];
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] = xhat[r * cols + c] * gv[c] + bv[c];
                }
            }
            (out, xhat, inv_std, means, vars)
        };
        let rg = self.tape.rg(&[self.id, gamma.id, beta.id]);
        let v = self.tape.push(
            shape,
            data,
            Op::Norm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                per_row,
                rows,
                cols,
            },
            rg,
        );
        Ok((v, means, vars))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        Ok(self.norm_impl(gamma, beta, eps, true)?.0)
    }

    /// Training-mode batch normalization: each feature (last axis) is
    /// normalized with the statistics of all rows. Returns the output plus
    /// the batch means and biased variances.
    pub fn batch_norm_train(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: T,
    ) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
        self.norm_impl(gamma, beta, eps, false)
    }

    /// Evaluation-mode batch normalization with frozen statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var<'t, T>> {
        let c = mean.len();
        let scale: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let shift: Vec<T> = mean.iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
        let scale = self.tape.constant(&[c], scale)?;
        let shift = self.tape.constant(&[c], shift)?;
        self.mul(scale)?.add(shift)?.mul(gamma)?.add(beta)
    }

    /// NHWC convolution; `w` is `[kh, kw, cin, cout]`.
    pub fn conv2d(&self, w: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        let ws = w.shape();
        if s.len() != 4 || ws.len() != 4 || ws[2] != s[3] || stride == 0 {
            return Err(shape_err("conv2d", &s, &ws));
        }
        if s[1] + 2 * pad < ws[0] || s[2] + 2 * pad < ws[1] {
            return Err(shape_err("conv2d kernel larger than input", &s, &ws));
        }
        let geom = ConvGeom {
            batch: s[0],
            h: s[1],
            w: s[2],
            cin: s[3],
            kh: ws[0],
            kw: ws[1],
            cout: ws[3],
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![T::zero(); geom.batch * oh * ow * geom.cout];
        {
            let nodes = self.tape.nodes.borrow();
            let (xv, wv) = (&nodes[self.id].data, &nodes[w.id].data);
            let cout = geom.cout;
            let mut cols = Vec::new();
            for (b0, b1) in geom.chunks() {
                geom.im2col(xv, b0, b1, &mut cols);
                let dst = &mut out[geom.rows(0, b0) * cout..geom.rows(0, b1) * cout];
                gemm_nn(&cols, wv, dst, geom.rows(b0, b1), geom.patch_len(), cout);
            }
        }
        let rg = self.tape.rg(&[self.id, w.id]);
        let y = self.tape.push(
            vec![geom.batch, oh, ow, geom.cout],
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                geom,
            },
            rg,
        );
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    /// Multi-head attention inside independent windows. `self` (queries,
    /// already scaled), `k` and `v` are `[W, n, C]` with `C = heads·hd`;
    /// `bias` is `[P, heads, n, n]` and window `w` adds `bias[w mod P]` to its
    /// logits before the row softmax.
    pub fn window_attention(&self, k: Var<'t, T>, v: Var<'t, T>, bias: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        let bs = bias.shape();
        let ok = s.len() == 3
            && k.shape() == s
            && v.shape() == s
            && heads > 0
            && s[2] % heads == 0
            && bs.len() == 4
            && bs[0] > 0
            && s[0] % bs[0] == 0
            && bs[1..] == [heads, s[1], s[1]];
        if !ok {
            return Err(shape_err("window_attention", &s, &bs));
        }
        let a = AttnGeom {
            windows: s[0],
            n: s[1],
            heads,
            hd: s[2] / heads,
            periods: bs[0],
        };
        let n = a.n;
        let mut out = vec![T::zero(); self.numel()];
        let mut probs = vec![T::zero(); a.windows * heads * n * n];
        {
            let nodes = self.tape.nodes.borrow();
            let (qv, kv, vv, bv) = (
                &nodes[self.id].data,
                &nodes[k.id].data,
                &nodes[v.id].data,
                &nodes[bias.id].data,
            );
            let mut hb = HeadBuffers::new(&a);
            for w in 0..a.windows {
                for h in 0..heads {
                    let pb = a.probs_at(w, h);
                    let bb = a.bias_at(w, h);
                    let p = &mut probs[pb..pb + n * n];
                    p.copy_from_slice(&bv[bb..bb + n * n]);
                    hb.load(&a, w, h, [qv, kv, vv, &[]]);
                    hb.clear_out();
                    let HeadBuffers {
                        t: [qt, kt, vt, _],
                        out: [ot, _, _],
                    } = &mut hb;
                    // S = Q·Kᵀ + bias
                    gemm_tn(qt, kt, p, a.hd, n, n);
                    for row in p.chunks_mut(n) {
                        let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                        let mut z = T::zero();
                        for x in row.iter_mut() {
                            *x = (*x - mx).exp();
                            z = z + *x;
                        }
                        row.iter_mut().for_each(|x| *x = *x / z);
                    }
                    // Oᵀ = Vᵀ·Pᵀ
                    gemm_nt(vt, p, ot, a.hd, n, n);
                    for kk in 0..a.hd {
                        for i in 0..n {
                            out[a.row(w, i, h) + kk] = ot[kk * n + i];
                        }
                    }
                }
            }
        }
        let rg = self.tape.rg(&[self.id, k.id, v.id, bias.id]);
        Ok(self.tape.push(
            s,
            out,
            Op::WindowAttention {
                q: self.id,
                k: k.id,
                v: v.id,
                bias: bias.id,
                geom: a,
                probs,
            },
            rg,
        ))
    }
}
