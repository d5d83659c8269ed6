use super::{split_axis, AutodiffError, OpKind, Tensor};
use crate::scalar::{gemm, Real};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a tensor registered on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attributes for the generic [`Tape::forward_op`] entry point. Each op reads
/// only the fields it needs.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs<R: Real = f64> {
    pub axis: Option<usize>,
    pub stride: Vec<usize>,
    pub eps: Option<R>,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub value: Option<R>,
    pub start: usize,
    pub len: usize,
    pub count: usize,
    pub shape: Vec<usize>,
}

enum Back<R: Real> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, R),
    AddScalar(Var),
    Conv1d(Box<Conv1dCache<R>>),
    Conv2d(Box<Conv2dCache<R>>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<R>, rstd: Vec<R> },
    Softmax(Var),
    Log(Var),
    LogClamped(Var, R),
    Exp(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Gather { table: Var, ids: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reduce { x: Var, axis: Option<usize>, mean: bool },
    MaskedFill { x: Var, mask: Vec<bool> },
    Select { mask: Vec<bool>, a: Var, b: Var },
    Expand(Var),
    Reshape(Var),
}

struct Conv1dCache<R> {
    x: Var,
    w: Var,
    b: Option<Var>,
    col: Vec<R>,
    t_in: usize,
    t_out: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

struct Conv2dCache<R> {
    x: Var,
    w: Var,
    b: Option<Var>,
    col: Vec<R>,
    cin: usize,
    h: usize,
    w_in: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

struct Node<R: Real> {
    value: Tensor<R>,
    kind: Option<OpKind>,
    back: Back<R>,
    needs_grad: bool,
    trainable: bool,
}

/// Execution record of primitive ops.
///
/// Nodes are appended in execution order, so that order is already
/// topological and [`backward`](Tape::backward) simply walks it in reverse.
/// A tape is meant to be confined to one worker and discarded after its
/// reverse pass.
pub struct Tape<R: Real = f64> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    fault: Option<OpKind>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_A: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_C: f64 = 0.797_884_560_802_865_4;

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), fault: None }
    }

    /// Perturbs the reverse rule of `kind` by 1%. Used only to check that
    /// gradient verification catches a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push_leaf(value, true)
    }

    /// Registers a frozen input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<R>, trainable: bool) -> Var {
        self.nodes.push(Node { value, kind: None, back: Back::Leaf, needs_grad: trainable, trainable });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient after [`backward`](Tape::backward), if one reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<R>> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.grad(v).map(|g| Tensor::new(shape, g.to_vec()).expect("grad shape"))
    }

    fn push(&mut self, kind: OpKind, value: Tensor<R>, back: Back<R>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: kind });
        }
        Ok(self.push_unchecked(kind, value, back, inputs))
    }

    fn push_unchecked(&mut self, kind: OpKind, value: Tensor<R>, back: Back<R>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, kind: Some(kind), back, needs_grad, trainable: false });
        Var(self.nodes.len() - 1)
    }

    fn shape_vec(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    /// Dispatches any op kind by name. Ops with non-tensor arguments read
    /// them from `attrs`.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs<R>) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::invalid(kind, format!("expects {n} inputs, got {}", inputs.len())))
            }
        };
        let axis = || attrs.axis.ok_or_else(|| AutodiffError::invalid(kind, "missing axis attribute"));
        match kind {
            OpKind::Matmul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Div => arity(2).and_then(|_| self.div(inputs[0], inputs[1])),
            OpKind::Conv1d => {
                let stride = attrs.stride.first().copied().unwrap_or(1);
                match inputs.len() {
                    2 => self.conv1d(inputs[0], inputs[1], None, stride),
                    3 => self.conv1d(inputs[0], inputs[1], Some(inputs[2]), stride),
                    _ => arity(3).map(|_| unreachable!()),
                }
            }
            OpKind::Conv2d => {
                let stride = match attrs.stride[..] {
                    [] => (1, 1),
                    [s] => (s, s),
                    [a, b, ..] => (a, b),
                };
                match inputs.len() {
                    2 => self.conv2d(inputs[0], inputs[1], None, stride),
                    3 => self.conv2d(inputs[0], inputs[1], Some(inputs[2]), stride),
                    _ => arity(3).map(|_| unreachable!()),
                }
            }
            OpKind::LayerNorm => {
                arity(3)?;
                let eps = attrs.eps.unwrap_or_else(|| R::lit(1e-5));
                self.layernorm(inputs[0], inputs[1], inputs[2], eps)
            }
            OpKind::Softmax => arity(1).and_then(|_| self.softmax(inputs[0])),
            OpKind::Log => arity(1).and_then(|_| self.log(inputs[0])),
            OpKind::LogClamped => {
                arity(1)?;
                let floor = attrs.value.unwrap_or_else(|| R::lit(1e-12));
                self.log_clamped(inputs[0], floor)
            }
            OpKind::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            OpKind::Gelu => arity(1).and_then(|_| self.gelu(inputs[0])),
            OpKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            OpKind::Sigmoid => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            OpKind::Square => arity(1).and_then(|_| self.square(inputs[0])),
            OpKind::Gather => arity(1).and_then(|_| self.gather(inputs[0], &attrs.ids)),
            OpKind::Concat => self.concat(inputs, axis()?),
            OpKind::Slice => arity(1).and_then(|_| self.slice(inputs[0], axis()?, attrs.start, attrs.len)),
            OpKind::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::Mean => arity(1).and_then(|_| self.reduce(inputs[0], attrs.axis, true)),
            OpKind::Sum => arity(1).and_then(|_| self.reduce(inputs[0], attrs.axis, false)),
            OpKind::MaskedFill => {
                arity(1)?;
                let value = attrs.value.unwrap_or_else(R::zero);
                self.masked_fill(inputs[0], &attrs.mask, value)
            }
            OpKind::Scale => arity(1).and_then(|_| self.scale(inputs[0], attrs.value.unwrap_or_else(R::one))),
            OpKind::AddScalar => {
                arity(1).and_then(|_| self.add_scalar(inputs[0], attrs.value.unwrap_or_else(R::zero)))
            }
            OpKind::Expand => arity(1).and_then(|_| self.expand(inputs[0], attrs.count)),
            OpKind::Reshape => arity(1).and_then(|_| self.reshape(inputs[0], &attrs.shape)),
            OpKind::Select => arity(2).and_then(|_| self.select(&attrs.mask, inputs[0], inputs[1])),
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `(m×k) · (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(AutodiffError::mismatch(OpKind::Matmul, sa, sb)),
        };
        let mut out = vec![R::zero(); m * n];
        gemm(false, false, m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let value = Tensor::new([m, n], out)?;
        self.push(OpKind::Matmul, value, Back::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self
            .value(x)
            .dims2()
            .ok_or_else(|| AutodiffError::invalid(OpKind::Transpose, "needs a rank-2 input"))?;
        let src = self.value(x).data();
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new([c, r], out)?;
        self.push(OpKind::Transpose, value, Back::Transpose(x), &[x])
    }

    // ---- elementwise binary ----------------------------------------------

    fn binary(&mut self, kind: OpKind, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.is_scalar() {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(AutodiffError::mismatch(kind, ta.shape(), tb.shape()));
        };
        let back = match kind {
            OpKind::Add => Back::Add(a, b),
            OpKind::Sub => Back::Sub(a, b),
            OpKind::Mul => Back::Mul(a, b),
            OpKind::Div => Back::Div(a, b),
            _ => unreachable!("not a binary op"),
        };
        self.push(kind, value, back, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Div, a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: R) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(OpKind::Scale, value, Back::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: R) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push(OpKind::AddScalar, value, Back::AddScalar(x), &[x])
    }

    // ---- elementwise unary -----------------------------------------------

    fn unary(&mut self, kind: OpKind, x: Var, f: impl Fn(R) -> R, back: Back<R>) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(kind, value, back, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Log, x, |v| v.ln(), Back::Log(x))
    }

    /// `log(max(x, floor))`; no gradient where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: R) -> Result<Var> {
        self.unary(OpKind::LogClamped, x, |v| v.max(floor).ln(), Back::LogClamped(x, floor))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Exp, x, |v| v.exp(), Back::Exp(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (a, c) = (R::lit(GELU_A), R::lit(GELU_C));
        let half = R::lit(0.5);
        self.unary(OpKind::Gelu, x, |v| half * v * (R::one() + (c * (v + a * v * v * v)).tanh()), Back::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Relu, x, |v| if v > R::zero() { v } else { R::zero() }, Back::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Sigmoid, x, sigmoid, Back::Sigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Square, x, |v| v * v, Back::Square(x))
    }

    // ---- normalisation ---------------------------------------------------

    /// Softmax over the last axis. Entries equal to `-inf` get weight zero;
    /// a row with no finite entry is rejected.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| AutodiffError::invalid(OpKind::Softmax, "scalar input"))?;
        if t.data().iter().any(|v| v.is_nan() || *v == R::infinity()) {
            return Err(AutodiffError::NonFinite { op: OpKind::Softmax });
        }
        let mut out = vec![R::zero(); t.numel()];
        for (row, dst) in t.data().chunks(d.max(1)).zip(out.chunks_mut(d.max(1))) {
            let m = row.iter().fold(R::neg_infinity(), |m, &v| m.max(v));
            if m == R::neg_infinity() {
                return Err(AutodiffError::invalid(OpKind::Softmax, "row has no unmasked entry"));
            }
            let mut s = R::zero();
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - m).exp();
                s += *o;
            }
            dst.iter_mut().for_each(|o| *o /= s);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(OpKind::Softmax, value, Back::Softmax(x), &[x])
    }

    /// Normalises the last axis, then applies `gamma`/`beta` (both of that
    /// width).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: R) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| AutodiffError::invalid(OpKind::LayerNorm, "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(AutodiffError::mismatch(OpKind::LayerNorm, t.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.numel() / d;
        let mut xhat = vec![R::zero(); t.numel()];
        let mut rstd = vec![R::zero(); rows];
        let mut out = vec![R::zero(); t.numel()];
        let inv_d = R::one() / R::from_count(d);
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<R>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
            let rs = R::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(OpKind::LayerNorm, value, Back::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    // ---- convolution -----------------------------------------------------

    /// 1-D convolution over rows. `x` is `(T, C_in)`, `w` is
    /// `(K, C_in, C_out)`, optional `bias` is `(C_out)`. Output is
    /// `(ceil(T/stride), C_out)`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let op = OpKind::Conv1d;
        if stride == 0 {
            return Err(AutodiffError::invalid(op, "stride must be positive"));
        }
        let (t_in, cin) = self.value(x).dims2().ok_or_else(|| AutodiffError::invalid(op, "input must be (T, C)"))?;
        let (k, cout) = match *self.shape(w) {
            [k, c, o] if c == cin && k > 0 => (k, o),
            _ => return Err(AutodiffError::mismatch(op, self.shape(x), self.shape(w))),
        };
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(AutodiffError::mismatch(op, self.shape(w), self.shape(b)));
            }
        }
        if t_in == 0 {
            return Err(AutodiffError::invalid(op, "empty input"));
        }
        let t_out = t_in.div_ceil(stride);
        let pad = ((t_out - 1) * stride + k).saturating_sub(t_in) / 2;
        let kc = k * cin;
        let xs = self.value(x).data();
        let mut col = vec![R::zero(); t_out * kc];
        for t in 0..t_out {
            for kk in 0..k {
                let src = (t * stride + kk) as isize - pad as isize;
                if src >= 0 && (src as usize) < t_in {
                    let src = src as usize;
                    col[t * kc + kk * cin..t * kc + (kk + 1) * cin].copy_from_slice(&xs[src * cin..(src + 1) * cin]);
                }
            }
        }
        let mut out = vec![R::zero(); t_out * cout];
        gemm(false, false, t_out, kc, cout, &col, self.value(w).data(), &mut out, false);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.iter_mut().zip(bv).for_each(|(o, &v)| *o += v);
            }
        }
        let value = Tensor::new([t_out, cout], out)?;
        let cache = Conv1dCache { x, w, b: bias, col, t_in, t_out, cin, cout, k, stride, pad };
        let inputs: Vec<Var> = [x, w].into_iter().chain(bias).collect();
        self.push(op, value, Back::Conv1d(Box::new(cache)), &inputs)
    }

    /// 2-D convolution. `x` is `(C_in, H, W)`, `w` is `(C_out, C_in, KH, KW)`,
    /// optional `bias` is `(C_out)`. Output is
    /// `(C_out, ceil(H/sh), ceil(W/sw))`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: (usize, usize)) -> Result<Var> {
        let op = OpKind::Conv2d;
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(AutodiffError::invalid(op, "stride must be positive"));
        }
        let (cin, h, w_in) = match *self.shape(x) {
            [c, h, w] if h > 0 && w > 0 => (c, h, w),
            _ => return Err(AutodiffError::invalid(op, format!("input must be (C, H, W), got {:?}", self.shape(x)))),
        };
        let (cout, kh, kw) = match *self.shape(w) {
            [o, c, kh, kw] if c == cin && kh > 0 && kw > 0 => (o, kh, kw),
            _ => return Err(AutodiffError::mismatch(op, self.shape(x), self.shape(w))),
        };
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(AutodiffError::mismatch(op, self.shape(w), self.shape(b)));
            }
        }
        let (ho, wo) = (h.div_ceil(sh), w_in.div_ceil(sw));
        let ph = ((ho - 1) * sh + kh).saturating_sub(h) / 2;
        let pw = ((wo - 1) * sw + kw).saturating_sub(w_in) / 2;
        let ckk = cin * kh * kw;
        let hw = ho * wo;
        let xs = self.value(x).data();
        let mut col = vec![R::zero(); ckk * hw];
        for c in 0..cin {
            for i in 0..kh {
                for j in 0..kw {
                    let r = (c * kh + i) * kw + j;
                    for oh in 0..ho {
                        let ih = (oh * sh + i) as isize - ph as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * sw + j) as isize - pw as isize;
                            if iw >= 0 && (iw as usize) < w_in {
                                col[r * hw + oh * wo + ow] = xs[(c * h + ih as usize) * w_in + iw as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![R::zero(); cout * hw];
        gemm(false, false, cout, ckk, hw, self.value(w).data(), &col, &mut out, false);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (row, &v) in out.chunks_mut(hw).zip(bv) {
                row.iter_mut().for_each(|o| *o += v);
            }
        }
        let value = Tensor::new([cout, ho, wo], out)?;
        let cache = Conv2dCache { x, w, b: bias, col, cin, h, w_in, cout, kh, kw, ho, wo, sh, sw, ph, pw };
        let inputs: Vec<Var> = [x, w].into_iter().chain(bias).collect();
        self.push(op, value, Back::Conv2d(Box::new(cache)), &inputs)
    }

    // ---- indexing and layout ---------------------------------------------

    /// Rows of a `(V, D)` table selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self
            .value(table)
            .dims2()
            .ok_or_else(|| AutodiffError::invalid(OpKind::Gather, "table must be rank 2"))?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::invalid(OpKind::Gather, format!("id {bad} out of range for {v} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new([ids.len(), d], out)?;
        self.push(OpKind::Gather, value, Back::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let op = OpKind::Concat;
        let first = *inputs.first().ok_or_else(|| AutodiffError::invalid(op, "no inputs"))?;
        let base = self.shape_vec(first);
        if axis >= base.len() {
            return Err(AutodiffError::invalid(op, format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::mismatch(op, &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let dim = self.shape(v)[axis];
                let block = dim * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(op, value, Back::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let op = OpKind::Slice;
        let shape = self.shape_vec(x);
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(AutodiffError::invalid(op, format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let value = Tensor::new(oshape, out)?;
        self.push(op, value, Back::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .clone()
            .reshape(shape.to_vec())
            .map_err(|_| AutodiffError::mismatch(OpKind::Reshape, self.shape(x), shape))?;
        self.push(OpKind::Reshape, value, Back::Reshape(x), &[x])
    }

    /// Repeats `x` `count` times along a new leading axis.
    pub fn expand(&mut self, x: Var, count: usize) -> Result<Var> {
        let t = self.value(x);
        let mut shape = vec![count];
        shape.extend_from_slice(t.shape());
        let mut out = Vec::with_capacity(count * t.numel());
        for _ in 0..count {
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(shape, out)?;
        self.push(OpKind::Expand, value, Back::Expand(x), &[x])
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let kind = if mean { OpKind::Mean } else { OpKind::Sum };
        let t = self.value(x);
        let value = match axis {
            None => {
                let s: R = t.data().iter().copied().sum();
                let n = R::from_count(t.numel().max(1));
                Tensor::scalar(if mean { s / n } else { s })
            }
            Some(a) => {
                if a >= t.rank() {
                    return Err(AutodiffError::invalid(kind, format!("axis {a} out of range for rank {}", t.rank())));
                }
                let (outer, dim, inner) = split_axis(t.shape(), a);
                let mut out = vec![R::zero(); outer * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        let src = &t.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(acc, &v)| *acc += v);
                    }
                }
                if mean {
                    let n = R::from_count(dim.max(1));
                    out.iter_mut().for_each(|v| *v /= n);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(a);
                Tensor::new(shape, out)?
            }
        };
        self.push(kind, value, Back::Reduce { x, axis, mean }, &[x])
    }

    // ---- masking ---------------------------------------------------------

    /// Replaces entries where `mask` is set by `value`. `value` may be
    /// `-inf` (attention masking); only unmasked entries must stay finite.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: R) -> Result<Var> {
        let op = OpKind::MaskedFill;
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(AutodiffError::mismatch(op, t.shape(), &[mask.len()]));
        }
        if value.is_nan() || value == R::infinity() {
            return Err(AutodiffError::NonFinite { op });
        }
        let data: Vec<R> = t.data().iter().zip(mask).map(|(&v, &m)| if m { value } else { v }).collect();
        if data.iter().zip(mask).any(|(v, &m)| !m && !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op });
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_unchecked(op, value, Back::MaskedFill { x, mask: mask.to_vec() }, &[x]))
    }

    /// Elementwise `mask ? a : b`.
    pub fn select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let op = OpKind::Select;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::mismatch(op, ta.shape(), tb.shape()));
        }
        if mask.len() != ta.numel() {
            return Err(AutodiffError::mismatch(op, ta.shape(), &[mask.len()]));
        }
        let data = mask.iter().zip(ta.data().iter().zip(tb.data())).map(|(&m, (&x, &y))| if m { x } else { y }).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, value, Back::Select { mask: mask.to_vec(), a, b }, &[a, b])
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse pass from a one-element `loss`. Afterwards every trainable
    /// leaf holds a gradient (zeros if the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape.to_vec()));
        }
        let Tape { nodes, grads, fault } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.back, Back::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if node.kind.is_some() && node.kind == *fault {
                let bump = R::lit(1.01);
                g.iter_mut().for_each(|v| *v *= bump);
            }
            propagate(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        for (node, grad) in nodes.iter().zip(grads.iter_mut()) {
            if node.trainable && grad.is_none() {
                *grad = Some(vec![R::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }
}

fn sigmoid<R: Real>(v: R) -> R {
    if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    }
}

/// Zero-initialised gradient slot for `v`, or `None` if `v` needs no gradient.
fn slot<'a, R: Real>(nodes: &[Node<R>], grads: &'a mut [Option<Vec<R>>], v: Var) -> Option<&'a mut Vec<R>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); node.value.numel()]))
}

/// Adds `contrib(i)` into the gradient of `v`, summing everything when `v` is
/// a broadcast scalar.
fn accumulate<R: Real>(
    nodes: &[Node<R>],
    grads: &mut [Option<Vec<R>>],
    v: Var,
    n: usize,
    contrib: impl Fn(usize) -> R,
) {
    let scalar = nodes[v.0].value.is_scalar() && n != 1;
    if let Some(dst) = slot(nodes, grads, v) {
        if scalar {
            dst[0] += (0..n).map(&contrib).sum::<R>();
        } else {
            dst.iter_mut().enumerate().for_each(|(i, d)| *d += contrib(i));
        }
    }
}

fn propagate<R: Real>(nodes: &[Node<R>], grads: &mut [Option<Vec<R>>], i: usize, g: &[R]) {
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    // Index into an operand that may be a broadcast scalar.
    let at = |v: Var, k: usize| {
        let t = &nodes[v.0].value;
        if t.is_scalar() {
            t.data()[0]
        } else {
            t.data()[k]
        }
    };
    let n = g.len();
    match &nodes[i].back {
        Back::Leaf => {}
        Back::Matmul(a, b) => {
            let (m, k) = val(*a).dims2().expect("matmul lhs");
            let nn = val(*b).shape()[1];
            if let Some(da) = slot(nodes, grads, *a) {
                gemm(false, true, m, nn, k, g, val(*b).data(), da, true);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                gemm(true, false, k, m, nn, val(*a).data(), g, db, true);
            }
        }
        Back::Add(a, b) => {
            accumulate(nodes, grads, *a, n, |k| g[k]);
            accumulate(nodes, grads, *b, n, |k| g[k]);
        }
        Back::Sub(a, b) => {
            accumulate(nodes, grads, *a, n, |k| g[k]);
            accumulate(nodes, grads, *b, n, |k| -g[k]);
        }
        Back::Mul(a, b) => {
            accumulate(nodes, grads, *a, n, |k| g[k] * at(*b, k));
            accumulate(nodes, grads, *b, n, |k| g[k] * at(*a, k));
        }
        Back::Div(a, b) => {
            accumulate(nodes, grads, *a, n, |k| g[k] / at(*b, k));
            accumulate(nodes, grads, *b, n, |k| {
                let bv = at(*b, k);
                -g[k] * at(*a, k) / (bv * bv)
            });
        }
        Back::Scale(x, c) => accumulate(nodes, grads, *x, n, |k| g[k] * *c),
        Back::AddScalar(x) => accumulate(nodes, grads, *x, n, |k| g[k]),
        Back::Log(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, n, |k| g[k] / xv[k]);
        }
        Back::LogClamped(x, floor) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, n, |k| if xv[k] < *floor { R::zero() } else { g[k] / xv[k] });
        }
        Back::Exp(x) => {
            let y = out.data();
            accumulate(nodes, grads, *x, n, |k| g[k] * y[k]);
        }
        Back::Gelu(x) => {
            let xv = val(*x).data();
            let (a, c, half) = (R::lit(GELU_A), R::lit(GELU_C), R::lit(0.5));
            let three = R::lit(3.0);
            accumulate(nodes, grads, *x, n, |k| {
                let v = xv[k];
                let t = (c * (v + a * v * v * v)).tanh();
                let d = half * (R::one() + t) + half * v * (R::one() - t * t) * c * (R::one() + three * a * v * v);
                g[k] * d
            });
        }
        Back::Relu(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, n, |k| if xv[k] > R::zero() { g[k] } else { R::zero() });
        }
        Back::Sigmoid(x) => {
            let y = out.data();
            accumulate(nodes, grads, *x, n, |k| g[k] * y[k] * (R::one() - y[k]));
        }
        Back::Square(x) => {
            let xv = val(*x).data();
            let two = R::lit(2.0);
            accumulate(nodes, grads, *x, n, |k| g[k] * two * xv[k]);
        }
        Back::Softmax(x) => {
            let d = *out.shape().last().expect("softmax rank");
            let y = out.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for r in 0..n / d {
                    let (ys, gs) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: R = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
        }
        Back::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = *out.shape().last().expect("layernorm rank");
            let rows = n / d;
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
            }
            let gam = val(*gamma).data().to_vec();
            if let Some(dx) = slot(nodes, grads, *x) {
                let inv_d = R::one() / R::from_count(d);
                for r in 0..rows {
                    let base = r * d;
                    let mut mean_dh = R::zero();
                    let mut mean_dh_h = R::zero();
                    for j in 0..d {
                        let dh = g[base + j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[base + j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for j in 0..d {
                        let dh = g[base + j] * gam[j];
                        dx[base + j] += rstd[r] * (dh - mean_dh - xhat[base + j] * mean_dh_h);
                    }
                }
            }
        }
        Back::Conv1d(c) => {
            let kc = c.k * c.cin;
            if let Some(dw) = slot(nodes, grads, c.w) {
                gemm(true, false, kc, c.t_out, c.cout, &c.col, g, dw, true);
            }
            if let Some(b) = c.b {
                if let Some(db) = slot(nodes, grads, b) {
                    for row in g.chunks(c.cout) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            let wdata = val(c.w).data().to_vec();
            if let Some(dx) = slot(nodes, grads, c.x) {
                let mut dcol = vec![R::zero(); c.t_out * kc];
                gemm(false, true, c.t_out, c.cout, kc, g, &wdata, &mut dcol, false);
                for t in 0..c.t_out {
                    for kk in 0..c.k {
                        let src = (t * c.stride + kk) as isize - c.pad as isize;
                        if src >= 0 && (src as usize) < c.t_in {
                            let src = src as usize;
                            let from = &dcol[t * kc + kk * c.cin..t * kc + (kk + 1) * c.cin];
                            dx[src * c.cin..(src + 1) * c.cin].iter_mut().zip(from).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
        }
        Back::Conv2d(c) => {
            let ckk = c.cin * c.kh * c.kw;
            let hw = c.ho * c.wo;
            if let Some(dw) = slot(nodes, grads, c.w) {
                gemm(false, true, c.cout, hw, ckk, g, &c.col, dw, true);
            }
            if let Some(b) = c.b {
                if let Some(db) = slot(nodes, grads, b) {
                    for (d, row) in db.iter_mut().zip(g.chunks(hw)) {
                        *d += row.iter().copied().sum::<R>();
                    }
                }
            }
            let wdata = val(c.w).data().to_vec();
            if let Some(dx) = slot(nodes, grads, c.x) {
                let mut dcol = vec![R::zero(); ckk * hw];
                gemm(true, false, ckk, c.cout, hw, &wdata, g, &mut dcol, false);
                for ch in 0..c.cin {
                    for i in 0..c.kh {
                        for j in 0..c.kw {
                            let r = (ch * c.kh + i) * c.kw + j;
                            for oh in 0..c.ho {
                                let ih = (oh * c.sh + i) as isize - c.ph as isize;
                                if ih < 0 || ih as usize >= c.h {
                                    continue;
                                }
                                for ow in 0..c.wo {
                                    let iw = (ow * c.sw + j) as isize - c.pw as isize;
                                    if iw >= 0 && (iw as usize) < c.w_in {
                                        dx[(ch * c.h + ih as usize) * c.w_in + iw as usize] += dcol[r * hw + oh * c.wo + ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Back::Gather { table, ids } => {
            let d = val(*table).shape()[1];
            if let Some(dt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Back::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &v in inputs {
                let dim = val(v).shape()[*axis];
                if let Some(dv) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + dim) * inner];
                        dv[o * dim * inner..(o + 1) * dim * inner].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
                offset += dim;
            }
        }
        Back::Slice { x, axis, start } => {
            let (outer, dim, inner) = split_axis(val(*x).shape(), *axis);
            let len = out.shape()[*axis];
            if let Some(dx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    dx[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
        Back::Transpose(x) => {
            let (r, c) = val(*x).dims2().expect("transpose rank");
            if let Some(dx) = slot(nodes, grads, *x) {
                for a in 0..r {
                    for b in 0..c {
                        dx[a * c + b] += g[b * r + a];
                    }
                }
            }
        }
        Back::Reduce { x, axis, mean } => {
            let shape = val(*x).shape().to_vec();
            let numel = val(*x).numel();
            match axis {
                None => {
                    let scale = if *mean { R::one() / R::from_count(numel.max(1)) } else { R::one() };
                    let gv = g[0] * scale;
                    if let Some(dx) = slot(nodes, grads, *x) {
                        dx.iter_mut().for_each(|d| *d += gv);
                    }
                }
                Some(a) => {
                    let (outer, dim, inner) = split_axis(&shape, *a);
                    let scale = if *mean { R::one() / R::from_count(dim.max(1)) } else { R::one() };
                    if let Some(dx) = slot(nodes, grads, *x) {
                        for o in 0..outer {
                            for d in 0..dim {
                                let dst = &mut dx[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                                dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(a, &b)| *a += b * scale);
                            }
                        }
                    }
                }
            }
        }
        Back::MaskedFill { x, mask } => {
            accumulate(nodes, grads, *x, n, |k| if mask[k] { R::zero() } else { g[k] });
        }
        Back::Select { mask, a, b } => {
            accumulate(nodes, grads, *a, n, |k| if mask[k] { g[k] } else { R::zero() });
            accumulate(nodes, grads, *b, n, |k| if mask[k] { R::zero() } else { g[k] });
        }
        Back::Expand(x) => {
            let inner = val(*x).numel();
            if let Some(dx) = slot(nodes, grads, *x) {
                for chunk in g.chunks(inner.max(1)) {
                    dx.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Back::Reshape(x) => accumulate(nodes, grads, *x, n, |k| g[k]),
    }
}
