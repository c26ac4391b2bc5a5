//! A small reverse-mode neural toolkit: dense and 3D convolution kernels,
//! activations, a tape for batched graphs, squeeze-excite attention and Adam.
//!
//! Everything is generic over the float type so the same graph code runs in
//! f32 for training and f64 for finite-difference checks.

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use std::collections::HashMap;
use std::fmt::Debug;
use thiserror::Error;

use crate::rng::uniform;

pub trait Scalar: Float + FromPrimitive + Send + Sync + Debug + Default + 'static {}
impl<T: Float + FromPrimitive + Send + Sync + Debug + Default + 'static> Scalar for T {}

#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).unwrap()
}

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> NnError {
    NnError::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("tensor", &[n], &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from(*v).unwrap()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId, NnError> {
        if self.lookup.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.lookup.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NnError> {
        self.lookup
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zero buffers shaped like every parameter.
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .map(|t| vec![T::zero(); t.len()])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Uniform He initialisation: U(−√(6/fan_in), √(6/fan_in)).
pub fn he_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| lit((2.0 * uniform(rng) - 1.0) * bound))
        .collect();
    Tensor { shape, data }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

/// `y = x · Wᵀ + b` for a `rows × inp` input and `out × inp` weights.
pub fn dense_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    w: &[T],
    b: &[T],
    out: usize,
) -> Result<Vec<T>, NnError> {
    if rows == 0 || out == 0 || b.len() != out || w.len() % out != 0 {
        return Err(shape_err("dense", &[out], &[b.len()]));
    }
    let inp = w.len() / out;
    if x.len() != rows * inp {
        return Err(shape_err("dense", &[rows, inp], &[x.len()]));
    }
    let mut y = vec![T::zero(); rows * out];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            y[r * out + o] = b[o] + dot(xr, &w[o * inp..(o + 1) * inp]);
        }
    }
    Ok(y)
}

/// Gradients `(dx, dw, db)` of a dense layer given `dy`.
pub fn dense_backward<T: Scalar>(
    x: &[T],
    rows: usize,
    w: &[T],
    out: usize,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inp = w.len() / out;
    let mut dx = vec![T::zero(); rows * inp];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); out];
    dense_accumulate(x, rows, w, out, dy, Some(&mut dx), &mut dw, &mut db);
    (dx, dw, db)
}

#[allow(clippy::too_many_arguments)]
fn dense_accumulate<T: Scalar>(
    x: &[T],
    rows: usize,
    w: &[T],
    out: usize,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    let inp = w.len() / out;
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            let g = dy[r * out + o];
            if g == T::zero() {
                continue;
            }
            db[o] = db[o] + g;
            axpy(g, xr, &mut dw[o * inp..(o + 1) * inp]);
            if let Some(dx) = dx.as_deref_mut() {
                axpy(
                    g,
                    &w[o * inp..(o + 1) * inp],
                    &mut dx[r * inp..(r + 1) * inp],
                );
            }
        }
    }
}

pub fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect()
}

pub fn relu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub fn sigmoid_backward<T: Scalar>(y: &[T], dy: &[T]) -> Vec<T> {
    y.iter()
        .zip(dy)
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect()
}

/// Shape of a 3D convolution: channels, spatial dims (axis 0 fastest) and
/// odd cubic kernel size; zero padding keeps the spatial size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dims: [usize; 3],
    pub kernel: usize,
}

impl Conv3dShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(3)
    }

    fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    fn check(&self, x: &[impl Copy], w: &[impl Copy]) -> Result<(), NnError> {
        if self.kernel % 2 == 0 {
            return Err(shape_err(
                "conv3d kernel",
                &[self.kernel + 1],
                &[self.kernel],
            ));
        }
        if x.len() != self.in_channels * self.voxels() {
            return Err(shape_err(
                "conv3d input",
                &[self.in_channels * self.voxels()],
                &[x.len()],
            ));
        }
        if w.len() != self.weight_len() {
            return Err(shape_err("conv3d weight", &[self.weight_len()], &[w.len()]));
        }
        Ok(())
    }

    /// Calls `f(out_index, in_index, weight_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [n0, n1, n2] = self.dims;
        let k = self.kernel;
        let r = (k / 2) as isize;
        let vox = self.voxels();
        for co in 0..self.out_channels {
            for ci in 0..self.in_channels {
                let wbase = (co * self.in_channels + ci) * k * k * k;
                for z in 0..n2 {
                    for y in 0..n1 {
                        for x in 0..n0 {
                            let out = co * vox + x + n0 * (y + n1 * z);
                            for dz in 0..k {
                                let zz = z as isize + dz as isize - r;
                                if zz < 0 || zz >= n2 as isize {
                                    continue;
                                }
                                for dy in 0..k {
                                    let yy = y as isize + dy as isize - r;
                                    if yy < 0 || yy >= n1 as isize {
                                        continue;
                                    }
                                    for dx in 0..k {
                                        let xx = x as isize + dx as isize - r;
                                        if xx < 0 || xx >= n0 as isize {
                                            continue;
                                        }
                                        let inp = ci * vox
                                            + xx as usize
                                            + n0 * (yy as usize + n1 * zz as usize);
                                        f(out, inp, wbase + dx + k * (dy + k * dz));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding; weights `[out][in][k][k][k]`.
pub fn conv3d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    shape: &Conv3dShape,
) -> Result<Vec<T>, NnError> {
    shape.check(x, w)?;
    let vox = shape.voxels();
    let mut y = vec![T::zero(); shape.out_channels * vox];
    if let Some(b) = bias {
        if b.len() != shape.out_channels {
            return Err(shape_err("conv3d bias", &[shape.out_channels], &[b.len()]));
        }
        for (co, chunk) in y.chunks_mut(vox).enumerate() {
            chunk.fill(b[co]);
        }
    }
    shape.for_each_tap(|o, i, k| y[o] = y[o] + w[k] * x[i]);
    Ok(y)
}

/// Gradients `(dx, dw, db)` of [`conv3d_forward`].
pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    shape: &Conv3dShape,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), NnError> {
    shape.check(x, w)?;
    let vox = shape.voxels();
    if dy.len() != shape.out_channels * vox {
        return Err(shape_err(
            "conv3d output grad",
            &[shape.out_channels * vox],
            &[dy.len()],
        ));
    }
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    shape.for_each_tap(|o, i, k| {
        dx[i] = dx[i] + w[k] * dy[o];
        dw[k] = dw[k] + dy[o] * x[i];
    });
    let db = dy
        .chunks(vox)
        .map(|c| c.iter().fold(T::zero(), |a, &b| a + b))
        .collect();
    Ok((dx, dw, db))
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense {
        x: Var,
        w: ParamId,
        b: ParamId,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    ScaleByCol {
        x: Var,
        s: Var,
        col: usize,
    },
    MeanCols(Var),
    SquaredError {
        pred: Var,
        target: Vec<f64>,
        denom: f64,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op,
}

/// Records a batched computation (every node is `rows × cols`, row-major)
/// over a borrowed parameter set, then back-propagates through it.
pub struct Tape<'p, T> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct TapeGrads<T> {
    pub params: Vec<Vec<T>>,
    nodes: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> TapeGrads<T> {
    /// Gradient with respect to a node (zeros if it did not influence the output).
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].as_deref()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value in {op:?}"
        );
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var, NnError> {
        if data.len() != rows * cols {
            return Err(shape_err("input", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![T::zero(); rows * cols], Op::Leaf)
    }

    pub fn dense(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var, NnError> {
        let (rows, cols) = self.shape(x);
        let wt = self.params.get(w);
        let bt = self.params.get(b);
        if wt.shape().len() != 2 || wt.shape()[1] != cols {
            return Err(shape_err("dense", &[bt.len(), cols], wt.shape()));
        }
        let out = wt.shape()[0];
        let y = dense_forward(&self.nodes[x.0].value, rows, wt.data(), bt.data(), out)?;
        Ok(self.push(rows, out, y, Op::Dense { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let y = relu(&self.nodes[x.0].value);
        self.push(r, c, y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let y = sigmoid(&self.nodes[x.0].value);
        self.push(r, c, y, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        let y = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(sa.0, sa.1, y, Op::Add(a, b)))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(shape_err("concat", &[rows], &[r]));
            }
            cols += c;
        }
        let mut y = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let n = &self.nodes[p.0];
                y.extend_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
            }
        }
        Ok(self.push(rows, cols, y, Op::Concat(parts.to_vec())))
    }

    /// Multiplies each row of `x` by column `col` of `s`.
    pub fn scale_by_col(&mut self, x: Var, s: Var, col: usize) -> Result<Var, NnError> {
        let (rows, cols) = self.shape(x);
        let (sr, sc) = self.shape(s);
        if sr != rows || col >= sc {
            return Err(shape_err("scale_by_col", &[rows, col + 1], &[sr, sc]));
        }
        let sv = &self.nodes[s.0].value;
        let y = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[(i / cols) * sc + col])
            .collect();
        Ok(self.push(rows, cols, y, Op::ScaleByCol { x, s, col }))
    }

    /// Row means, giving a `rows × 1` node.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let inv = lit::<T>(1.0 / cols as f64);
        let v = &self.nodes[x.0].value;
        let y = (0..rows)
            .map(|r| {
                v[r * cols..(r + 1) * cols]
                    .iter()
                    .fold(T::zero(), |a, &b| a + b)
                    * inv
            })
            .collect();
        self.push(rows, 1, y, Op::MeanCols(x))
    }

    /// `Σ (pred − target)² / denom` as a 1×1 node.
    pub fn squared_error(&mut self, pred: Var, target: &[f64], denom: f64) -> Result<Var, NnError> {
        let (r, c) = self.shape(pred);
        if target.len() != r * c {
            return Err(shape_err("squared_error", &[r, c], &[target.len()]));
        }
        let s = self.nodes[pred.0]
            .value
            .iter()
            .zip(target)
            .fold(0.0, |a, (&p, &t)| {
                let d = p.to_f64().unwrap() - t;
                a + d * d
            });
        let loss = lit::<T>(s / denom);
        if !loss.is_finite() {
            return Err(NnError::NonFinite("squared_error"));
        }
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::SquaredError {
                pred,
                target: target.to_vec(),
                denom,
            },
        ))
    }

    /// Reverse pass seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> TapeGrads<T> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut pgrads = self.params.zero_grads();
        grads[output.0] = Some(vec![T::one(); self.nodes[output.0].value.len()]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Dense { x, w, b } => {
                    let wt = self.params.get(*w);
                    let xn = &self.nodes[x.0];
                    let mut dx = vec![T::zero(); xn.value.len()];
                    let (pw, pb) = two_mut(&mut pgrads, w.0, b.0);
                    dense_accumulate(
                        &xn.value,
                        xn.rows,
                        wt.data(),
                        node.cols,
                        &g,
                        Some(&mut dx),
                        pw,
                        pb,
                    );
                    accumulate(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let dx = relu_backward(&self.nodes[x.0].value, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = sigmoid_backward(&node.value, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].cols;
                        let mut dp = Vec::with_capacity(node.rows * pc);
                        for r in 0..node.rows {
                            dp.extend_from_slice(
                                &g[r * node.cols + offset..r * node.cols + offset + pc],
                            );
                        }
                        accumulate(&mut grads, p, dp);
                        offset += pc;
                    }
                }
                Op::ScaleByCol { x, s, col } => {
                    let xv = &self.nodes[x.0].value;
                    let sn = &self.nodes[s.0];
                    let cols = node.cols;
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut ds = vec![T::zero(); sn.value.len()];
                    for i in 0..xv.len() {
                        let si = (i / cols) * sn.cols + col;
                        dx[i] = g[i] * sn.value[si];
                        ds[si] = ds[si] + g[i] * xv[i];
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *s, ds);
                }
                Op::MeanCols(x) => {
                    let cols = self.nodes[x.0].cols;
                    let inv = lit::<T>(1.0 / cols as f64);
                    let dx = (0..node.rows * cols).map(|i| g[i / cols] * inv).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::SquaredError {
                    pred,
                    target,
                    denom,
                } => {
                    let k = lit::<T>(2.0 / denom) * g[0];
                    let dp = self.nodes[pred.0]
                        .value
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| k * (p - lit(t)))
                        .collect();
                    accumulate(&mut grads, *pred, dp);
                }
            }
            grads[idx] = Some(g);
        }
        TapeGrads {
            params: pgrads,
            nodes: grads,
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a = *a + b),
        slot => *slot = Some(d),
    }
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// Length of the attention input vector.
pub const ATTENTION_INPUTS: usize = 8;
/// Bottleneck width of the learned squeeze-excite block.
pub const ATTENTION_HIDDEN: usize = 4;
/// One weight per feature type (density, phase, transmittance).
pub const ATTENTION_OUTPUTS: usize = 3;

/// Parameter handles of a learned squeeze-excite block 8 → 4 → 3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqueezeExcite {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SqueezeExcite {
    pub fn register<T: Scalar>(
        params: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            w1: params.add(
                &format!("{prefix}.w1"),
                he_uniform(
                    vec![ATTENTION_HIDDEN, ATTENTION_INPUTS],
                    ATTENTION_INPUTS,
                    rng,
                ),
            )?,
            b1: params.add(
                &format!("{prefix}.b1"),
                Tensor::zeros(vec![ATTENTION_HIDDEN]),
            )?,
            w2: params.add(
                &format!("{prefix}.w2"),
                he_uniform(
                    vec![ATTENTION_OUTPUTS, ATTENTION_HIDDEN],
                    ATTENTION_HIDDEN,
                    rng,
                ),
            )?,
            b2: params.add(
                &format!("{prefix}.b2"),
                Tensor::zeros(vec![ATTENTION_OUTPUTS]),
            )?,
        })
    }

    pub fn lookup<T: Scalar>(params: &ParamSet<T>, prefix: &str) -> Result<Self, NnError> {
        Ok(Self {
            w1: params.id(&format!("{prefix}.w1"))?,
            b1: params.id(&format!("{prefix}.b1"))?,
            w2: params.id(&format!("{prefix}.w2"))?,
            b2: params.id(&format!("{prefix}.b2"))?,
        })
    }
}

/// How the attention weights are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionMode {
    /// `sigmoid(mean(relu(v)))`, one weight shared by all feature types.
    Literal,
    /// Squeeze-excite bottleneck: `sigmoid(W2 relu(W1 v + b1) + b2)`.
    Learned(SqueezeExcite),
}

/// Attention weights on the tape: `rows × 3` for learned mode, `rows × 1` for literal.
pub fn attention_weight<T: Scalar>(
    tape: &mut Tape<'_, T>,
    v: Var,
    mode: &AttentionMode,
) -> Result<Var, NnError> {
    let (_, cols) = tape.shape(v);
    if cols != ATTENTION_INPUTS {
        return Err(shape_err("attention input", &[ATTENTION_INPUTS], &[cols]));
    }
    match mode {
        AttentionMode::Literal => {
            let r = tape.relu(v);
            let m = tape.mean_cols(r);
            Ok(tape.sigmoid(m))
        }
        AttentionMode::Learned(se) => {
            let h = tape.dense(v, se.w1, se.b1)?;
            let h = tape.relu(h);
            let o = tape.dense(h, se.w2, se.b2)?;
            Ok(tape.sigmoid(o))
        }
    }
}

/// Plain evaluation of the literal attention weight for one vector.
pub fn attention_literal<T: Scalar>(v: &[T]) -> T {
    let n = lit::<T>(v.len() as f64);
    let m = relu(v).into_iter().fold(T::zero(), |a, b| a + b) / n;
    sigmoid_scalar(m)
}

/// Reweights one block per feature type: `out[τ] = w[τ] · blocks[τ]`.
pub fn attention_apply<T: Scalar>(blocks: &[Vec<T>], w: &[T]) -> Result<Vec<Vec<T>>, NnError> {
    if blocks.len() != w.len() {
        return Err(shape_err("attention_apply", &[blocks.len()], &[w.len()]));
    }
    Ok(blocks
        .iter()
        .zip(w)
        .map(|(b, &wt)| b.iter().map(|&v| v * wt).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments mirroring a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zero_grads(),
            v: params.zero_grads(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn adam_step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Vec<T>],
        lr: f64,
    ) -> Result<(), NnError> {
        if grads.len() != params.len() {
            return Err(shape_err("adam", &[params.len()], &[grads.len()]));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != params.tensors[i].len() {
                return Err(shape_err("adam", &[params.tensors[i].len()], &[g.len()]));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step = lit::<T>(lr / bc1);
        let inv_bc2 = lit::<T>(1.0 / bc2);
        let eps = lit::<T>(c.eps);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensors[i].data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                p[k] = p[k] - step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn dense_identity_and_shape_errors() {
        let x = vec![1.0, -2.0, 3.0];
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(dense_forward(&x, 1, &w, &[0.0; 3], 3).unwrap(), x);
        assert!(dense_forward(&x, 2, &w, &[0.0; 3], 3).is_err());
        assert!(dense_forward(&x, 1, &w, &[0.0; 2], 3).is_err());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        assert_eq!(relu(&[-1.5, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!(sigmoid_scalar(-800.0f64) >= 0.0 && sigmoid_scalar(800.0f64) <= 1.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let shape = Conv3dShape {
            in_channels: 1,
            out_channels: 1,
            dims: [3, 4, 2],
            kernel: 3,
        };
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        let x: Vec<f64> = (0..24).map(|i| i as f64).collect();
        assert_eq!(conv3d_forward(&x, &w, None, &shape).unwrap(), x);
        let ones = vec![1.0; 27];
        let y = conv3d_forward(&vec![1.0; 24], &ones, Some(&[0.5]), &shape).unwrap();
        // Corner voxel sees 2·2·2 in-bounds taps.
        assert_eq!(y[0], 8.5);
        assert!(conv3d_forward(&x, &w[..26], None, &shape).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = ParamSet::<f64>::new();
        p.add("a", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        let before = p.clone();
        let mut st = TrainState::new(&p, AdamConfig::default());
        st.adam_step(&mut p, &[vec![0.0, 0.0]], 1e-3).unwrap();
        assert_eq!(p, before);
        assert!(st.adam_step(&mut p, &[vec![0.0]], 1e-3).is_err());
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = ParamSet::<f64>::new();
        p.add("a", Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let mut st = TrainState::new(&p, AdamConfig::default());
        let g = [0.3, -2.0, 1e-3];
        st.adam_step(&mut p, &[g.to_vec()], 1e-3).unwrap();
        for (k, gk) in g.iter().enumerate() {
            // m̂ = g, v̂ = g², update = lr·g/(|g| + eps).
            let expect = -1e-3 * gk / (gk.abs() + 1e-8);
            assert!((p.get(ParamId(0)).data()[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_descends_a_parabola() {
        let mut p = ParamSet::<f64>::new();
        p.add("x", Tensor::new(vec![1], vec![3.0]).unwrap())
            .unwrap();
        let mut st = TrainState::new(&p, AdamConfig::default());
        let mut prev = f64::INFINITY;
        for step in 0..2000 {
            let x = p.get(ParamId(0)).data()[0];
            let f = x * x;
            if step > 10 {
                assert!(f <= prev, "step {step}: {f} > {prev}");
            }
            prev = f;
            st.adam_step(&mut p, &[vec![2.0 * x]], 1e-2).unwrap();
        }
        assert!(prev < 1e-2);
    }

    #[test]
    fn literal_attention() {
        assert_eq!(attention_literal(&[0.0f64; 8]), 0.5);
        let w = attention_literal(&[1.0, -3.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0f64]);
        assert!((w - sigmoid_scalar(0.5)).abs() < 1e-15);
        let blocks = vec![vec![1.0, 2.0], vec![3.0], vec![4.0, 5.0]];
        assert_eq!(attention_apply(&blocks, &[1.0, 1.0, 1.0]).unwrap(), blocks);
        assert_eq!(
            attention_apply(&blocks, &[0.0; 3]).unwrap(),
            vec![vec![0.0, 0.0], vec![0.0], vec![0.0, 0.0]]
        );
        assert!(attention_apply(&blocks, &[1.0]).is_err());
    }

    #[test]
    fn tape_dense_gradients_match_finite_differences() {
        let mut rng = stream_rng(3, 0);
        let mut p = ParamSet::<f64>::new();
        let w = p.add("w", he_uniform(vec![4, 5], 5, &mut rng)).unwrap();
        let b = p.add("b", he_uniform(vec![4], 5, &mut rng)).unwrap();
        let x: Vec<f64> = (0..10).map(|_| uniform(&mut rng) - 0.5).collect();
        let target: Vec<f64> = (0..8).map(|_| uniform(&mut rng)).collect();
        let loss = |p: &ParamSet<f64>, x: &[f64]| {
            let mut t = Tape::new(p);
            let xi = t.input(2, 5, x.to_vec()).unwrap();
            let y = t.dense(xi, w, b).unwrap();
            let y = t.sigmoid(y);
            let l = t.squared_error(y, &target, 8.0).unwrap();
            t.value(l)[0]
        };
        let mut t = Tape::new(&p);
        let xi = t.input(2, 5, x.clone()).unwrap();
        let y = t.dense(xi, w, b).unwrap();
        let y = t.sigmoid(y);
        let l = t.squared_error(y, &target, 8.0).unwrap();
        let g = t.backward(l);
        let h = 1e-5;
        for (pi, id) in [w, b].into_iter().enumerate() {
            for k in 0..p.get(id).len() {
                let mut q = p.clone();
                q.get_mut(id).data_mut()[k] += h;
                let up = loss(&q, &x);
                q.get_mut(id).data_mut()[k] -= 2.0 * h;
                let dn = loss(&q, &x);
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    rel_err(fd, g.params[pi][k]) < 1e-4,
                    "param {pi}[{k}]: {fd} vs {}",
                    g.params[pi][k]
                );
            }
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += h;
            let up = loss(&p, &xp);
            xp[k] -= 2.0 * h;
            let dn = loss(&p, &xp);
            assert!(rel_err((up - dn) / (2.0 * h), g.wrt(xi).unwrap()[k]) < 1e-4);
        }
    }
}
