use super::gemm;
use super::tape::{GradSink, Op, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Pointwise activations and transcendental functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Relu,
    /// Negative slope 0.01.
    LeakyRelu,
    Sigmoid,
    Softplus,
    Exp,
    Abs,
}

pub const LEAKY_SLOPE: f64 = 0.01;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Silu => "silu",
            Unary::Relu => "relu",
            Unary::LeakyRelu => "leaky_relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Abs => "abs",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Silu => x * sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Unary::Exp => x.exp(),
            Unary::Abs => x.abs(),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    Ok(())
}

/// (outer, axis, inner) extents of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        check_same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape
            .push(name, Tensor::new(a.shape().to_vec(), data)?, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let x = self.value();
        let data = x.data().iter().map(|v| v * c).collect();
        self.tape.push(
            "scale",
            Tensor::new(x.shape().to_vec(), data)?,
            Op::Scale(self.id, c),
        )
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let x = self.value();
        let data = x.data().iter().map(|v| v + c).collect();
        self.tape
            .push("add_scalar", Tensor::new(x.shape().to_vec(), data)?, Op::Shift(self.id))
    }

    /// Multiplies every entry by a one-element tensor `scalar`.
    pub fn scale_by(self, scalar: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&scalar);
        let s = scalar.value();
        if s.numel() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("scalar operand has shape {:?}", s.shape()),
            ));
        }
        let s = s.data()[0];
        let x = self.value();
        let data = x.data().iter().map(|v| s * v).collect();
        self.tape.push(
            "scale_by",
            Tensor::new(x.shape().to_vec(), data)?,
            Op::ScaleBy {
                scalar: scalar.id,
                x: self.id,
            },
        )
    }

    /// Adds a per-channel bias along the last axis.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        let c = *x.shape().last().unwrap_or(&0);
        if b.shape() != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match last axis of {:?}", b.shape(), x.shape()),
            ));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            row.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
        }
        self.tape.push(
            "add_bias",
            Tensor::new(x.shape().to_vec(), data)?,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
        )
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::shape(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape()),
            ));
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} · {:?}", a.shape(), b.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        self.tape.push(
            "matmul",
            Tensor::new([m, n], out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("narrow", x.shape(), axis)?;
        if start + len > x.shape()[axis] || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} outside axis {axis} of {:?}", start + len, x.shape()),
            ));
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let mut out = vec![0.0; shape.iter().product()];
        narrow_forward_into(x.shape(), &shape, axis, start, x.data(), &mut out);
        self.tape.push(
            "narrow",
            Tensor::new(shape, out)?,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let values: Vec<_> = parts.iter().map(|p| {
            first.same_tape(p);
            p.value()
        }).collect();
        let base = values[0].shape();
        check_axis("concat", base, axis)?;
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        let mut out = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for v in &values {
            narrow_backward(&shape, v.shape(), axis, offset, v.data(), &mut out);
            offset += v.shape()[axis];
        }
        first.tape.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let t = Tensor::clone(&x).reshaped(shape.to_vec())?;
        self.tape.push("reshape", t, Op::Reshape(self.id))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of {rank} axes"),
            ));
        }
        let (shape, data) = permute_forward(x.shape(), perm, x.data());
        self.tape.push(
            "permute",
            Tensor::new(shape, data)?,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        )
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(self) -> Result<Var<'t>> {
        self.permute(&[1, 0])
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.data().iter().sum();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum over `axis`, which is removed from the shape (rank-1 input gives
    /// a one-element tensor).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("sum_axis", x.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x.data()[(o * len + a) * inner..][..inner];
                out[o * inner..][..inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.tape
            .push("sum_axis", Tensor::new(shape, out)?, Op::SumAxis { x: self.id, axis })
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis("mean_axis", &shape, axis)?;
        self.sum_axis(axis)?.scale(1.0 / shape[axis] as f64)
    }

    pub fn unary(self, kind: Unary) -> Result<Var<'t>> {
        let x = self.value();
        let data = x.data().iter().map(|&v| kind.apply(v)).collect();
        self.tape.push(
            kind.name(),
            Tensor::new(x.shape().to_vec(), data)?,
            Op::Unary { x: self.id, kind },
        )
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.unary(Unary::Silu)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Unary::Relu)
    }

    pub fn leaky_relu(self) -> Result<Var<'t>> {
        self.unary(Unary::LeakyRelu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(Unary::Softplus)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Unary::Exp)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(Unary::Abs)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| Error::shape("softmax", "rank 0"))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        self.tape
            .push("softmax", Tensor::new(x.shape().to_vec(), out)?, Op::Softmax(self.id))
    }

    /// Normalises each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let c = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        if g.shape() != [c] || b.shape() != [c] {
            return Err(Error::Config(format!(
                "layer_norm over {c} channels given gamma {:?} and beta {:?}",
                g.shape(),
                b.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = x.numel() / c.max(1);
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * c..][..c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = g.data()[j] * h + b.data()[j];
            }
        }
        self.tape.push(
            "layer_norm",
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        )
    }

    /// Mean over rows of `-ln(max(softmax(logits)[target], 1e-12))` for
    /// `[P, K]` logits.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let &[p, k] = x.shape() else {
            return Err(Error::shape("cross_entropy", format!("logits {:?} not [P, K]", x.shape())));
        };
        if targets.len() != p {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {p} rows", targets.len()),
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Input(format!("class index {t} out of range for {k} classes")));
        }
        let mut probs = x.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_exact_mut(k).zip(targets) {
            softmax_in_place(row);
            loss -= row[t].max(CE_CLAMP).ln();
        }
        loss /= p as f64;
        self.tape.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        )
    }
}

pub(crate) const CE_CLAMP: f64 = 1e-12;

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    a_id: usize,
    b_id: usize,
    g: &[f64],
    sink: &mut GradSink,
) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if let Some(ga) = sink.slot(a_id) {
        // dA = G · Bᵀ
        gemm(m, n, k, g, false, b.data(), true, ga, 1.0);
    }
    if let Some(gb) = sink.slot(b_id) {
        // dB = Aᵀ · G
        gemm(k, m, n, a.data(), true, g, false, gb, 1.0);
    }
}

/// Copies the `[start, start + out_shape[axis])` window of `src` (shaped
/// `src_shape`) into `dst` (shaped `out_shape`), accumulating.
pub(crate) fn narrow_forward_into(
    src_shape: &[usize],
    out_shape: &[usize],
    axis: usize,
    start: usize,
    src: &[f64],
    dst: &mut [f64],
) {
    let (outer, src_len, inner) = split_at_axis(src_shape, axis);
    let len = out_shape[axis];
    for o in 0..outer {
        let s = &src[(o * src_len + start) * inner..][..len * inner];
        let d = &mut dst[o * len * inner..][..len * inner];
        d.iter_mut().zip(s).for_each(|(d, s)| *d += s);
    }
}

/// Scatters `g` (shaped `out_shape`, a window of `full_shape` at `start`)
/// back into `dst` (shaped `full_shape`), accumulating.
pub(crate) fn narrow_backward(
    full_shape: &[usize],
    out_shape: &[usize],
    axis: usize,
    start: usize,
    g: &[f64],
    dst: &mut [f64],
) {
    let (outer, full_len, inner) = split_at_axis(full_shape, axis);
    let len = out_shape[axis];
    for o in 0..outer {
        let s = &g[o * len * inner..][..len * inner];
        let d = &mut dst[(o * full_len + start) * inner..][..len * inner];
        d.iter_mut().zip(s).for_each(|(d, s)| *d += s);
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output flat index, the corresponding input flat index.
fn permute_index_map(in_shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

fn permute_forward(in_shape: &[usize], perm: &[usize], data: &[f64]) -> (Vec<usize>, Vec<f64>) {
    if let (&[rows, cols], &[1, 0]) = (in_shape, perm) {
        let mut out = vec![0.0; data.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = data[r * cols + c];
            }
        }
        return (vec![cols, rows], out);
    }
    let (shape, map) = permute_index_map(in_shape, perm);
    (shape, map.iter().map(|&i| data[i]).collect())
}

pub(crate) fn permute_backward(in_shape: &[usize], perm: &[usize], g: &[f64], gx: &mut [f64]) {
    if let (&[rows, cols], &[1, 0]) = (in_shape, perm) {
        for r in 0..rows {
            for c in 0..cols {
                gx[r * cols + c] += g[c * rows + r];
            }
        }
        return;
    }
    let (_, map) = permute_index_map(in_shape, perm);
    for (o, &i) in map.iter().enumerate() {
        gx[i] += g[o];
    }
}

pub(crate) fn sum_axis_backward(in_shape: &[usize], axis: usize, g: &[f64], gx: &mut [f64]) {
    let (outer, len, inner) = split_at_axis(in_shape, axis);
    for o in 0..outer {
        let src = &g[o * inner..][..inner];
        for a in 0..len {
            gx[(o * len + a) * inner..][..inner]
                .iter_mut()
                .zip(src)
                .for_each(|(d, s)| *d += s);
        }
    }
}

pub(crate) fn unary_backward(kind: Unary, x: &[f64], y: &[f64], g: &[f64], gx: &mut [f64]) {
    for i in 0..gx.len() {
        gx[i] += g[i] * kind.derivative(x[i], y[i]);
    }
}

pub(crate) fn softmax_backward(y: &Tensor, g: &[f64], gx: &mut [f64]) {
    let c = *y.shape().last().expect("softmax rank");
    for ((yr, gr), dr) in y
        .data()
        .chunks_exact(c)
        .zip(g.chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
        for j in 0..c {
            dr[j] += yr[j] * (gr[j] - dot);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    gamma: &Tensor,
    xhat: &[f64],
    rstd: &[f64],
    x_id: usize,
    gamma_id: usize,
    beta_id: usize,
    g: &[f64],
    sink: &mut GradSink,
) {
    let c = gamma.numel();
    if let Some(gg) = sink.slot(gamma_id) {
        for (hr, gr) in xhat.chunks_exact(c).zip(g.chunks_exact(c)) {
            for j in 0..c {
                gg[j] += gr[j] * hr[j];
            }
        }
    }
    if let Some(gb) = sink.slot(beta_id) {
        for gr in g.chunks_exact(c) {
            gb.iter_mut().zip(gr).for_each(|(s, g)| *s += g);
        }
    }
    if let Some(gx) = sink.slot(x_id) {
        let gm = gamma.data();
        let inv_c = 1.0 / c as f64;
        for (r, ((hr, gr), dr)) in xhat
            .chunks_exact(c)
            .zip(g.chunks_exact(c))
            .zip(gx.chunks_exact_mut(c))
            .enumerate()
        {
            let mut mean_dy = 0.0;
            let mut mean_dy_h = 0.0;
            for j in 0..c {
                let dy = gr[j] * gm[j];
                mean_dy += dy;
                mean_dy_h += dy * hr[j];
            }
            mean_dy *= inv_c;
            mean_dy_h *= inv_c;
            for j in 0..c {
                let dy = gr[j] * gm[j];
                dr[j] += rstd[r] * (dy - mean_dy - hr[j] * mean_dy_h);
            }
        }
    }
}

pub(crate) fn cross_entropy_backward(targets: &[usize], probs: &[f64], g: f64, gl: &mut [f64]) {
    let k = probs.len() / targets.len();
    let scale = g / targets.len() as f64;
    for ((pr, dr), &t) in probs.chunks_exact(k).zip(gl.chunks_exact_mut(k)).zip(targets) {
        if pr[t] <= CE_CLAMP {
            continue;
        }
        for j in 0..k {
            let onehot = if j == t { 1.0 } else { 0.0 };
            dr[j] += scale * (pr[j] - onehot);
        }
    }
}
