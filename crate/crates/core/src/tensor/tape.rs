use std::cell::{Cell, RefCell};

use crate::error::{GhnError, Result};
use crate::real::{lit, Real};

use super::data::{strides_of, TensorData};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Zero-padding behaviour of `conv2d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Reduction kinds supported by `reduce`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

type BackFn<F> = Box<dyn Fn(&TensorData<F>) -> Vec<TensorData<F>>>;

struct Node<F: Real> {
    value: TensorData<F>,
    parents: Vec<usize>,
    back: Option<BackFn<F>>,
}

/// Reverse-mode differentiation tape. Operations append nodes in topological
/// order; `backward` sweeps them in reverse, accumulating gradients across
/// fan-out by addition.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    check_finite: Cell<bool>,
}

/// Gradients produced by one backward sweep, indexed by tape node.
pub struct Gradients<F: Real> {
    grads: Vec<Option<TensorData<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&TensorData<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: Cell::new(cfg!(debug_assertions)),
        }
    }

    /// Enable or disable the post-op finiteness scan (on by default in debug
    /// builds, off in release).
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Record an input node. Leaves have no backward function; their gradients
    /// are read directly from the sweep result.
    pub fn leaf(&self, value: TensorData<F>) -> Var {
        self.push(value, vec![], None)
    }

    pub fn value(&self, v: Var) -> TensorData<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, value: TensorData<F>, parents: Vec<usize>, back: Option<BackFn<F>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            back,
        });
        Var(nodes.len() - 1)
    }

    fn push_checked(
        &self,
        context: &'static str,
        value: TensorData<F>,
        parents: Vec<usize>,
        back: Option<BackFn<F>>,
    ) -> Result<Var> {
        if self.check_finite.get() && !value.all_finite() {
            return Err(GhnError::NonFinite { context });
        }
        Ok(self.push(value, parents, back))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(
        &self,
        context: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        dfa: impl Fn(F, F) -> F + 'static,
        dfb: impl Fn(F, F) -> F + 'static,
    ) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (out_shape, a_scalar, b_scalar) = broadcast_shapes(context, &av, &bv)?;
        let len: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let x = av.values()[if a_scalar { 0 } else { i }];
            let y = bv.values()[if b_scalar { 0 } else { i }];
            out.push(f(x, y));
        }
        let value = TensorData::new(out_shape, out)?;
        let (ac, bc) = (av.clone(), bv.clone());
        let back: BackFn<F> = Box::new(move |g| {
            let mut ga = vec![F::zero(); ac.len()];
            let mut gb = vec![F::zero(); bc.len()];
            for i in 0..g.len() {
                let x = ac.values()[if a_scalar { 0 } else { i }];
                let y = bc.values()[if b_scalar { 0 } else { i }];
                let gi = g.values()[i];
                ga[if a_scalar { 0 } else { i }] += gi * dfa(x, y);
                gb[if b_scalar { 0 } else { i }] += gi * dfb(x, y);
            }
            vec![
                TensorData::new(ac.shape().to_vec(), ga).unwrap(),
                TensorData::new(bc.shape().to_vec(), gb).unwrap(),
            ]
        });
        self.push_checked(context, value, vec![a.0, b.0], Some(back))
    }

    fn unary(
        &self,
        context: &'static str,
        a: Var,
        f: impl Fn(F) -> F,
        // derivative as a function of (input, output)
        df: impl Fn(F, F) -> F + 'static,
    ) -> Result<Var> {
        let av = self.value(a);
        let out: Vec<F> = av.values().iter().map(|&x| f(x)).collect();
        let value = TensorData::new(av.shape().to_vec(), out)?;
        let (ac, oc) = (av.clone(), value.clone());
        let back: BackFn<F> = Box::new(move |g| {
            let ga: Vec<F> = g
                .values()
                .iter()
                .zip(ac.values().iter().zip(oc.values()))
                .map(|(&gi, (&x, &y))| gi * df(x, y))
                .collect();
            vec![TensorData::new(ac.shape().to_vec(), ga).unwrap()]
        });
        self.push_checked(context, value, vec![a.0], Some(back))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _| F::one(), |_, _| F::one())
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "sub",
            a,
            b,
            |x, y| x - y,
            |_, _| F::one(),
            |_, _| -F::one(),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn scale(&self, a: Var, c: F) -> Result<Var> {
        self.unary("scale", a, |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, |_, _| F::one())
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, |_, _| -F::one())
    }

    /// The 0.5-shifted logistic `1 / (1 + exp(0.5 - x))`; the membership
    /// function of the fuzzy XOR connective.
    pub fn logistic(&self, a: Var) -> Result<Var> {
        let half = lit::<F>(0.5);
        self.unary(
            "logistic",
            a,
            move |x| F::one() / (F::one() + (half - x).exp()),
            |_, y| y * (F::one() - y),
        )
    }

    /// The plain logistic `1 / (1 + exp(-x))`, used by the soft threshold gate.
    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |x| F::one() / (F::one() + (-x).exp()),
            |_, y| y * (F::one() - y),
        )
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(
            "abs",
            a,
            |x| x.abs(),
            |x, _| {
                if x >= F::zero() {
                    F::one()
                } else {
                    -F::one()
                }
            },
        )
    }

    /// Elementwise `max(0, x)` with subgradient 0 at the kink.
    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(
            "relu",
            a,
            |x| x.max(F::zero()),
            |x, _| {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    /// Elementwise `x^(-1/2)`; inputs must be strictly positive.
    pub fn rsqrt(&self, a: Var) -> Result<Var> {
        let half = lit::<F>(0.5);
        self.unary(
            "rsqrt",
            a,
            |x| F::one() / x.sqrt(),
            move |x, y| -half * y / x,
        )
    }

    // ---- structured broadcasts --------------------------------------------

    /// Add a vector `v` of length `c` to every trailing-axis slice of `x`
    /// (shape `[..., c]`).
    pub fn add_channel(&self, x: Var, v: Var) -> Result<Var> {
        self.channel_op("add_channel", x, v, false)
    }

    /// Multiply every trailing-axis slice of `x` by a vector of length `c`.
    pub fn mul_channel(&self, x: Var, v: Var) -> Result<Var> {
        self.channel_op("mul_channel", x, v, true)
    }

    fn channel_op(&self, context: &'static str, x: Var, v: Var, multiply: bool) -> Result<Var> {
        let xv = self.value(x);
        let vv = self.value(v);
        let c = *xv.shape().last().ok_or_else(|| GhnError::ShapeMismatch {
            context,
            message: "tensor must have rank >= 1".into(),
        })?;
        if vv.shape() != [c] {
            return Err(GhnError::ShapeMismatch {
                context,
                message: format!(
                    "vector shape {:?} does not match channel extent {}",
                    vv.shape(),
                    c
                ),
            });
        }
        let mut out = Vec::with_capacity(xv.len());
        for (i, &val) in xv.values().iter().enumerate() {
            let w = vv.values()[i % c];
            out.push(if multiply { val * w } else { val + w });
        }
        let value = TensorData::new(xv.shape().to_vec(), out)?;
        let (xc, vc) = (xv.clone(), vv.clone());
        let back: BackFn<F> = Box::new(move |g| {
            let mut gx = vec![F::zero(); xc.len()];
            let mut gv = vec![F::zero(); c];
            for (i, &gi) in g.values().iter().enumerate() {
                if multiply {
                    gx[i] = gi * vc.values()[i % c];
                    gv[i % c] += gi * xc.values()[i];
                } else {
                    gx[i] = gi;
                    gv[i % c] += gi;
                }
            }
            vec![
                TensorData::new(xc.shape().to_vec(), gx).unwrap(),
                TensorData::new(vec![c], gv).unwrap(),
            ]
        });
        self.push_checked(context, value, vec![x.0, v.0], Some(back))
    }

    /// Add a per-row vector `v` of length `n` to a matrix `[n, f]`.
    pub fn add_col_vector(&self, m: Var, v: Var) -> Result<Var> {
        let mv = self.value(m);
        let vv = self.value(v);
        if mv.shape().len() != 2 || vv.shape() != [mv.shape()[0]] {
            return Err(GhnError::ShapeMismatch {
                context: "add_col_vector",
                message: format!("matrix {:?} vs vector {:?}", mv.shape(), vv.shape()),
            });
        }
        let (n, f) = (mv.shape()[0], mv.shape()[1]);
        let mut out = Vec::with_capacity(n * f);
        for i in 0..n {
            for j in 0..f {
                out.push(mv.values()[i * f + j] + vv.values()[i]);
            }
        }
        let value = TensorData::new(vec![n, f], out)?;
        let back: BackFn<F> = Box::new(move |g| {
            let gm = g.clone();
            let mut gv = vec![F::zero(); n];
            for i in 0..n {
                for j in 0..f {
                    gv[i] += g.values()[i * f + j];
                }
            }
            vec![gm, TensorData::new(vec![n], gv).unwrap()]
        });
        self.push_checked("add_col_vector", value, vec![m.0, v.0], Some(back))
    }

    /// Repeat a `[..., 1]` tensor `c` times along its last axis.
    pub fn broadcast_channels(&self, x: Var, c: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().last() != Some(&1) {
            return Err(GhnError::ShapeMismatch {
                context: "broadcast_channels",
                message: format!("last axis of {:?} must be 1", xv.shape()),
            });
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        let mut out = Vec::with_capacity(xv.len() * c);
        for &v in xv.values() {
            out.extend(std::iter::repeat(v).take(c));
        }
        let value = TensorData::new(shape, out)?;
        let in_shape = xv.shape().to_vec();
        let back: BackFn<F> = Box::new(move |g| {
            let rows = g.len() / c;
            let mut gx = vec![F::zero(); rows];
            for (i, &gi) in g.values().iter().enumerate() {
                gx[i / c] += gi;
            }
            vec![TensorData::new(in_shape.clone(), gx).unwrap()]
        });
        self.push_checked("broadcast_channels", value, vec![x.0], Some(back))
    }

    /// View a node's value under a different shape (same element count).
    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let value = xv.reshaped(shape)?;
        let in_shape = xv.shape().to_vec();
        let back: BackFn<F> =
            Box::new(move |g| vec![g.reshaped(in_shape.clone()).unwrap()]);
        self.push_checked("reshape", value, vec![x.0], Some(back))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(GhnError::ShapeMismatch {
                context: "matmul",
                message: format!("{:?} x {:?}", av.shape(), bv.shape()),
            });
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = matmul_raw(av.values(), bv.values(), n, k, m);
        let value = TensorData::new(vec![n, m], out)?;
        let (ac, bc) = (av.clone(), bv.clone());
        let back: BackFn<F> = Box::new(move |g| {
            // dA = G Bᵀ, dB = Aᵀ G
            let ga = matmul_abt(g.values(), bc.values(), n, m, k);
            let gb = matmul_atb(ac.values(), g.values(), n, k, m);
            vec![
                TensorData::new(vec![n, k], ga).unwrap(),
                TensorData::new(vec![k, m], gb).unwrap(),
            ]
        });
        self.push_checked("matmul", value, vec![a.0, b.0], Some(back))
    }

    /// 2-D cross-correlation over channels-last inputs `[n, h, w, c_in]` with
    /// kernel `[kh, kw, c_in, c_out]`, via im2col + matmul.
    pub fn conv2d(&self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(k);
        let geom = ConvGeom::resolve(xv.shape(), kv.shape(), stride, padding)?;
        let cols = im2col(xv.values(), &geom);
        let rows = geom.n * geom.oh * geom.ow;
        let patch = geom.patch_len();
        let out = matmul_raw(&cols, kv.values(), rows, patch, geom.cout);
        let value = TensorData::new(vec![geom.n, geom.oh, geom.ow, geom.cout], out)?;
        let kc = kv.clone();
        let back: BackFn<F> = Box::new(move |g| {
            let gk = matmul_atb(&cols, g.values(), rows, patch, geom.cout);
            let gcols = matmul_abt(g.values(), kc.values(), rows, geom.cout, patch);
            let gx = col2im(&gcols, &geom);
            vec![
                TensorData::new(vec![geom.n, geom.h, geom.w, geom.cin], gx).unwrap(),
                TensorData::new(kc.shape().to_vec(), gk).unwrap(),
            ]
        });
        self.push_checked("conv2d", value, vec![x.0, k.0], Some(back))
    }

    /// Per-channel spatial max pooling; gradient routes to the first arg-max
    /// element of each window.
    pub fn maxpool2d(&self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 4 {
            return Err(GhnError::ShapeMismatch {
                context: "maxpool2d",
                message: format!("expected rank-4 input, got {:?}", xv.shape()),
            });
        }
        if window == 0 || stride == 0 {
            return Err(GhnError::InvalidArgument(
                "maxpool2d window and stride must be >= 1".into(),
            ));
        }
        let (n, h, w, c) = (
            xv.shape()[0],
            xv.shape()[1],
            xv.shape()[2],
            xv.shape()[3],
        );
        if window > h || window > w {
            return Err(GhnError::ShapeMismatch {
                context: "maxpool2d",
                message: format!("window {window} larger than input {h}x{w}"),
            });
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0usize;
                        for dy in 0..window {
                            for dx in 0..window {
                                let iy = oy * stride + dy;
                                let ix = ox * stride + dx;
                                let idx = ((b * h + iy) * w + ix) * c + ch;
                                let v = xv.values()[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let value = TensorData::new(vec![n, oh, ow, c], out)?;
        let in_shape = xv.shape().to_vec();
        let in_len = xv.len();
        let back: BackFn<F> = Box::new(move |g| {
            let mut gx = vec![F::zero(); in_len];
            for (i, &gi) in g.values().iter().enumerate() {
                gx[argmax[i]] += gi;
            }
            vec![TensorData::new(in_shape.clone(), gx).unwrap()]
        });
        self.push_checked("maxpool2d", value, vec![x.0], Some(back))
    }

    // ---- reductions --------------------------------------------------------

    /// Reduce over the given axes (removed from the output shape). An empty
    /// axis list is the identity.
    pub fn reduce(&self, op: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.shape().len();
        let mut axes: Vec<usize> = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= rank) {
            return Err(GhnError::InvalidArgument(format!(
                "reduce axis out of range for rank {rank}: {axes:?}"
            )));
        }
        if axes.is_empty() {
            // identity node
            let value = xv.clone();
            let back: BackFn<F> = Box::new(move |g| vec![g.clone()]);
            return self.push_checked("reduce", value, vec![x.0], Some(back));
        }
        let in_shape = xv.shape().to_vec();
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &e)| e)
            .collect();
        let out_len: usize = out_shape.iter().product();
        let in_strides = strides_of(&in_shape);
        let out_strides = strides_of(&out_shape);
        // map each input flat index to its output cell
        let project = {
            let in_shape = in_shape.clone();
            let axes = axes.clone();
            move |flat: usize| -> usize {
                let mut out_idx = 0;
                let mut kept = 0;
                for axis in 0..in_shape.len() {
                    let coord = (flat / in_strides[axis]) % in_shape[axis];
                    if !axes.contains(&axis) {
                        out_idx += coord * out_strides[kept];
                        kept += 1;
                    }
                }
                out_idx
            }
        };
        let count = xv.len() / out_len.max(1);
        let mut acc = vec![
            match op {
                ReduceOp::Max => F::neg_infinity(),
                _ => F::zero(),
            };
            out_len
        ];
        let mut argmax = vec![0usize; if matches!(op, ReduceOp::Max) { out_len } else { 0 }];
        for (flat, &v) in xv.values().iter().enumerate() {
            let o = project(flat);
            match op {
                ReduceOp::Sum | ReduceOp::Mean => acc[o] += v,
                ReduceOp::Max => {
                    if v > acc[o] {
                        acc[o] = v;
                        argmax[o] = flat;
                    }
                }
            }
        }
        if matches!(op, ReduceOp::Mean) {
            let inv = F::one() / lit::<F>(count as f64);
            for v in acc.iter_mut() {
                *v *= inv;
            }
        }
        let value = TensorData::new(out_shape, acc)?;
        let in_len = xv.len();
        let back: BackFn<F> = Box::new(move |g| {
            let mut gx = vec![F::zero(); in_len];
            match op {
                ReduceOp::Sum => {
                    for (flat, slot) in gx.iter_mut().enumerate() {
                        *slot = g.values()[project(flat)];
                    }
                }
                ReduceOp::Mean => {
                    let inv = F::one() / lit::<F>(count as f64);
                    for (flat, slot) in gx.iter_mut().enumerate() {
                        *slot = g.values()[project(flat)] * inv;
                    }
                }
                ReduceOp::Max => {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g.values()[o];
                    }
                }
            }
            vec![TensorData::new(in_shape.clone(), gx).unwrap()]
        });
        self.push_checked("reduce", value, vec![x.0], Some(back))
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        let axes: Vec<usize> = (0..rank).collect();
        self.reduce(ReduceOp::Sum, x, &axes)
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        let axes: Vec<usize> = (0..rank).collect();
        self.reduce(ReduceOp::Mean, x, &axes)
    }

    // ---- loss --------------------------------------------------------------

    /// Mean softmax cross-entropy over a batch of logits `[n, classes]`.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 {
            return Err(GhnError::ShapeMismatch {
                context: "softmax_cross_entropy",
                message: format!("expected [n, classes] logits, got {:?}", lv.shape()),
            });
        }
        let (n, classes) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != n {
            return Err(GhnError::ShapeMismatch {
                context: "softmax_cross_entropy",
                message: format!("{} labels for {} rows", labels.len(), n),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(GhnError::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![F::zero(); n * classes];
        let mut loss = F::zero();
        for i in 0..n {
            let row = &lv.values()[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (j, &z) in row.iter().enumerate() {
                let e = (z - max).exp();
                probs[i * classes + j] = e;
                denom += e;
            }
            for j in 0..classes {
                probs[i * classes + j] /= denom;
            }
            // log-sum-exp form: stays finite even when the label's softmax
            // probability underflows
            loss += denom.ln() - (row[labels[i]] - max);
        }
        loss /= lit::<F>(n as f64);
        let value = TensorData::scalar(loss);
        let labels = labels.to_vec();
        let back: BackFn<F> = Box::new(move |g| {
            let scale = g.values()[0] / lit::<F>(n as f64);
            let mut gl = probs.clone();
            for (i, &label) in labels.iter().enumerate() {
                gl[i * classes + label] -= F::one();
            }
            for v in gl.iter_mut() {
                *v *= scale;
            }
            vec![TensorData::new(vec![n, classes], gl).unwrap()]
        });
        self.push_checked("softmax_cross_entropy", value, vec![logits.0], Some(back))
    }

    // ---- double-threshold support -----------------------------------------

    /// Hard double-threshold: values within `half_width` of 0.5 snap to 0.5.
    /// `half_width` is a constant, either a scalar or one value per trailing
    /// channel. Gradient passes through outside the band only.
    pub fn hard_band(&self, h: Var, half_width: TensorData<F>) -> Result<Var> {
        let hv = self.value(h);
        let c = *hv.shape().last().unwrap_or(&1);
        let per_channel = half_width.len() == c && c > 1;
        if !per_channel && half_width.len() != 1 {
            return Err(GhnError::ShapeMismatch {
                context: "hard_band",
                message: format!(
                    "half_width must be scalar or length {c}, got {}",
                    half_width.len()
                ),
            });
        }
        let half = lit::<F>(0.5);
        let width_at = move |i: usize, hw: &TensorData<F>| -> F {
            hw.values()[if per_channel { i % c } else { 0 }]
        };
        let hwc = half_width.clone();
        let out: Vec<F> = hv
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if (v - half).abs() <= width_at(i, &hwc) {
                    half
                } else {
                    v
                }
            })
            .collect();
        let value = TensorData::new(hv.shape().to_vec(), out)?;
        let hc = hv.clone();
        let back: BackFn<F> = Box::new(move |g| {
            let gh: Vec<F> = g
                .values()
                .iter()
                .enumerate()
                .map(|(i, &gi)| {
                    if (hc.values()[i] - half).abs() <= width_at(i, &half_width) {
                        F::zero()
                    } else {
                        gi
                    }
                })
                .collect();
            vec![TensorData::new(hc.shape().to_vec(), gh).unwrap()]
        });
        self.push_checked("hard_band", value, vec![h.0], Some(back))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        if loss.0 >= nodes.len() {
            return Err(GhnError::InvalidArgument(
                "loss node is not on this tape".into(),
            ));
        }
        if !nodes[loss.0].value.is_scalar() {
            return Err(GhnError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            if let Some(back) = &node.back {
                let g_tensor = TensorData::new(node.value.shape().to_vec(), g.clone())?;
                let parent_grads = back(&g_tensor);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, &b) in acc.iter_mut().zip(pg.values()) {
                                *a += b;
                            }
                        }
                        None => grads[p] = Some(pg.to_vec()),
                    }
                }
            }
            grads[i] = Some(g);
        }
        let wrapped = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| TensorData::new(nodes[i].value.shape().to_vec(), g).unwrap())
            })
            .collect();
        Ok(Gradients { grads: wrapped })
    }
}

fn broadcast_shapes<F: Real>(
    context: &'static str,
    a: &TensorData<F>,
    b: &TensorData<F>,
) -> Result<(Vec<usize>, bool, bool)> {
    let a_scalar = a.is_scalar();
    let b_scalar = b.is_scalar();
    if a.shape() == b.shape() {
        Ok((a.shape().to_vec(), false, false))
    } else if a_scalar {
        Ok((b.shape().to_vec(), true, false))
    } else if b_scalar {
        Ok((a.shape().to_vec(), false, true))
    } else {
        Err(GhnError::ShapeMismatch {
            context,
            message: format!("{:?} vs {:?}", a.shape(), b.shape()),
        })
    }
}

fn matmul_raw<F: Real>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * m];
    for i in 0..n {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// `A Bᵀ` with A `[n, m]`, B `[k, m]`, output `[n, k]`.
fn matmul_abt<F: Real>(a: &[F], b: &[F], n: usize, m: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            let mut acc = F::zero();
            for p in 0..m {
                acc += arow[p] * brow[p];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// `Aᵀ B` with A `[n, k]`, B `[n, m]`, output `[k, m]`.
fn matmul_atb<F: Real>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = arow[p];
            if aip == F::zero() {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// Resolved convolution geometry, shared by forward, backward, and the
/// patch-mean path of GHN conv layers.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn resolve(
        xshape: &[usize],
        kshape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<ConvGeom> {
        if xshape.len() != 4 || kshape.len() != 4 {
            return Err(GhnError::ShapeMismatch {
                context: "conv2d",
                message: format!("input {xshape:?}, kernel {kshape:?}"),
            });
        }
        if stride == 0 {
            return Err(GhnError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (n, h, w, cin) = (xshape[0], xshape[1], xshape[2], xshape[3]);
        let (kh, kw, kcin, cout) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kcin != cin {
            return Err(GhnError::ShapeMismatch {
                context: "conv2d",
                message: format!("input channels {cin} vs kernel channels {kcin}"),
            });
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(GhnError::ShapeMismatch {
                        context: "conv2d",
                        message: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                    });
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

fn im2col<F: Real>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let patch = g.patch_len();
    let mut cols = vec![F::zero(); g.n * g.oh * g.ow * patch];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * patch;
                for dy in 0..g.kh {
                    let iy = (oy * g.stride + dy) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for dx in 0..g.kw {
                        let ix = (ox * g.stride + dx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = row + (dy * g.kw + dx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Real>(cols: &[F], g: &ConvGeom) -> Vec<F> {
    let patch = g.patch_len();
    let mut x = vec![F::zero(); g.n * g.h * g.w * g.cin];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * patch;
                for dy in 0..g.kh {
                    let iy = (oy * g.stride + dy) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for dx in 0..g.kw {
                        let ix = (ox * g.stride + dx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let src = row + (dy * g.kw + dx) * g.cin;
                        for ci in 0..g.cin {
                            x[dst + ci] += cols[src + ci];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(shape: &[usize], data: &[f32]) -> TensorData<f32> {
        TensorData::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_ones() {
        let tape = Tape::<f32>::new();
        let eye = tape.leaf(t32(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c).values(), tape.value(b).values());

        let ones_row = tape.leaf(TensorData::full(&[1, 5], 1.0f32));
        let ones_col = tape.leaf(TensorData::full(&[5, 1], 1.0f32));
        let k = tape.matmul(ones_row, ones_col).unwrap();
        assert_eq!(tape.value(k).values(), &[5.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(TensorData::zeros(&[2, 3]));
        let b = tape.leaf(TensorData::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2, 2], &[0.5, 1.0, -1.0, 2.0]));
        let z = tape.leaf(TensorData::zeros(&[2, 2]));
        let same = tape.add(x, z).unwrap();
        assert_eq!(tape.value(same).values(), tape.value(x).values());
        let l = tape.logistic(x).unwrap();
        assert!((tape.value(l).values()[0] - 0.5).abs() < 1e-12);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).values(), &[0.5, 1.0, 0.0, 2.0]);
        // scalar broadcast
        let s = tape.leaf(TensorData::scalar(2.0));
        let scaled = tape.mul(x, s).unwrap();
        assert_eq!(tape.value(scaled).values(), &[1.0, 2.0, -2.0, 4.0]);
        // incompatible shapes
        let bad = tape.leaf(TensorData::zeros(&[3]));
        assert!(tape.add(x, bad).is_err());
    }

    fn t64(shape: &[usize], data: &[f64]) -> TensorData<f64> {
        TensorData::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(TensorData::from_fn(&[1, 3, 3, 1], |i| i as f32));
        let k = tape.leaf(t32(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).values(), tape.value(x).values());
    }

    #[test]
    fn conv_ones_kernel_valid() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(TensorData::full(&[1, 5, 5, 1], 1.0f32));
        let k = tape.leaf(TensorData::full(&[3, 3, 1, 1], 1.0f32));
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), vec![1, 3, 3, 1]);
        for &v in tape.value(y).values() {
            assert_eq!(v, 9.0);
        }
    }

    #[test]
    fn maxpool_basics() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).values(), &[4.0]);
        let c = tape.leaf(TensorData::full(&[1, 4, 4, 2], 0.7f32));
        let yc = tape.maxpool2d(c, 2, 2).unwrap();
        for &v in tape.value(yc).values() {
            assert_eq!(v, 0.7);
        }
        let small = tape.leaf(TensorData::zeros(&[1, 1, 1, 1]));
        assert!(tape.maxpool2d(small, 2, 1).is_err());
    }

    #[test]
    fn maxpool_gradient_mass_conserved() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(TensorData::from_fn(&[1, 4, 4, 2], |i| {
            ((i * 37 + 11) % 17) as f64 / 17.0
        }));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        let mass: f64 = gx.values().iter().sum();
        // upstream gradient is all ones over 8 output cells
        assert!((mass - 8.0).abs() < 1e-12);
    }

    #[test]
    fn reduce_semantics() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[0.0, 1.0]));
        let m = tape.reduce(ReduceOp::Mean, x, &[0]).unwrap();
        assert_eq!(tape.value(m).values(), &[0.5]);
        // empty axis list is the identity
        let id = tape.reduce(ReduceOp::Sum, x, &[]).unwrap();
        assert_eq!(tape.value(id).values(), tape.value(x).values());
        // axis out of range
        assert!(tape.reduce(ReduceOp::Sum, x, &[3]).is_err());

        let mat = tape.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = tape.reduce(ReduceOp::Sum, mat, &[1]).unwrap();
        assert_eq!(tape.value(rows).values(), &[6.0, 15.0]);
        let cols = tape.reduce(ReduceOp::Max, mat, &[0]).unwrap();
        assert_eq!(tape.value(cols).values(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn mean_backward_distributes() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean_all(x).unwrap();
        let grads = tape.backward(m).unwrap();
        for &g in grads.get(x).unwrap().values() {
            assert!((g - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(TensorData::zeros(&[3, 10]));
        let loss = tape.softmax_cross_entropy(logits, &[0, 5, 9]).unwrap();
        let v = tape.value(loss).values()[0];
        assert!((v - (10.0f64).ln()).abs() < 1e-12);
        // dominant logit at the true class drives loss to zero
        let mut data = vec![0.0; 10];
        data[3] = 50.0;
        let strong = tape.leaf(t64(&[1, 10], &data));
        let l2 = tape.softmax_cross_entropy(strong, &[3]).unwrap();
        assert!(tape.value(l2).values()[0] < 1e-12);
        // out-of-range label
        assert!(tape.softmax_cross_entropy(logits, &[0, 5, 10]).is_err());
    }

    #[test]
    fn backward_sum_and_fanout() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum_all(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[1.0, 1.0, 1.0]);

        // diamond: y = a*x + a*x  =>  dy/da = 2x
        let tape = Tape::<f64>::new();
        let a = tape.leaf(TensorData::scalar(3.0));
        let x = tape.leaf(TensorData::scalar(5.0));
        let p1 = tape.mul(a, x).unwrap();
        let p2 = tape.mul(a, x).unwrap();
        let y = tape.add(p1, p2).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().values(), &[10.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn channel_ops() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let v = tape.leaf(t64(&[3], &[10.0, 20.0, 30.0]));
        let y = tape.add_channel(x, v).unwrap();
        assert_eq!(
            tape.value(y).values(),
            &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]
        );
        let z = tape.mul_channel(x, v).unwrap();
        assert_eq!(
            tape.value(z).values(),
            &[10.0, 40.0, 90.0, 40.0, 100.0, 180.0]
        );
        let col = tape.leaf(t64(&[2], &[100.0, 200.0]));
        let w = tape.add_col_vector(x, col).unwrap();
        assert_eq!(
            tape.value(w).values(),
            &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]
        );
        let narrow = tape.leaf(t64(&[2, 1], &[1.0, 2.0]));
        let wide = tape.broadcast_channels(narrow, 3).unwrap();
        assert_eq!(tape.value(wide).values(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn hard_band_snaps_inside() {
        let tape = Tape::<f64>::new();
        let h = tape.leaf(t64(&[4], &[0.6, 0.9, 0.1, 0.5]));
        let y = tape
            .hard_band(h, TensorData::scalar(0.3))
            .unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, 0.9, 0.1, 0.5]);
    }

    #[test]
    fn finiteness_check_catches_nan() {
        let tape = Tape::<f64>::new();
        tape.set_check_finite(true);
        let x = tape.leaf(t64(&[1], &[-1.0]));
        // rsqrt of a negative number is NaN
        assert!(tape.rsqrt(x).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape = Tape::<f32>::new();
            let x = tape.leaf(TensorData::from_fn(&[2, 4, 4, 3], |i| {
                ((i * 131 + 7) % 101) as f32 / 101.0
            }));
            let k = tape.leaf(TensorData::from_fn(&[3, 3, 3, 2], |i| {
                ((i * 17 + 3) % 23) as f32 / 23.0 - 0.5
            }));
            let y = tape.conv2d(x, k, 1, Padding::Same).unwrap();
            let loss = tape.mean_all(y).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(y).to_vec(),
                grads.get(k).unwrap().to_vec(),
            )
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert_eq!(y1, y2);
        assert_eq!(g1, g2);
    }
}
