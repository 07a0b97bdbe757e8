//! Named parameter storage and the basic layers built on it.
//!
//! Modules hold [`ParamId`]s, not tensors. A forward pass binds the whole
//! store onto a tape once ([`ParamStore::bind`]) and modules look their
//! variables up in the resulting [`Bound`].

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, uniquely named parameter table. Insertion order is the canonical
/// order for checkpoints and optimiser state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let id = self.params.len();
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
        self.params.push(Param { name, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Records every parameter on `tape`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        Bound { tape, vars }
    }
}

/// Parameters of one store recorded on one tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps caller-recorded variables, one per store entry in store order.
    /// Used to differentiate with respect to parameters supplied as inputs.
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var<'t>>) -> Self {
        Self { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Gradients after a backward sweep, in store order. Parameters the loss
    /// does not depend on get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| self.tape.grad(v).unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}

/// Uniform `±1/√fan_in` initialisation.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -bound, bound, rng)
}

/// Affine map on the last axis of `[L, in]`; weight stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform(&[in_dim, out_dim], in_dim, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p.var(self.weight))?;
        match self.bias {
            Some(b) => y.add_bias(p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

/// Dense `k × k` convolution with "same" padding and a bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Self {
            weight: store.add(
                format!("{name}.weight"),
                init_uniform(&[c_out, c_in, kernel, kernel], fan_in, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([c_out])),
            kernel,
            stride: 1,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p.var(self.weight), Some(p.var(self.bias)), self.stride, self.kernel / 2)
    }
}

/// Per-channel `k × k` convolution followed by a `1 × 1` channel mix.
#[derive(Clone, Debug)]
pub struct SeparableConv2d {
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise: Conv2d,
    pub kernel: usize,
}

impl SeparableConv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            depthwise: store.add(
                format!("{name}.depthwise.weight"),
                init_uniform(&[c_in, kernel, kernel], kernel * kernel, rng),
            ),
            depthwise_bias: store.add(format!("{name}.depthwise.bias"), Tensor::zeros([c_in])),
            pointwise: Conv2d::new(store, &format!("{name}.pointwise"), c_in, c_out, 1, rng),
            kernel,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.depthwise_conv2d(p.var(self.depthwise), Some(p.var(self.depthwise_bias)), 1, self.kernel / 2)?;
        self.pointwise.forward(p, y)
    }
}

/// Either convolution flavour behind one interface.
#[derive(Clone, Debug)]
pub enum SpatialConv {
    Dense(Conv2d),
    Separable(SeparableConv2d),
}

impl SpatialConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        separable: bool,
        rng: &mut R,
    ) -> Self {
        if separable {
            SpatialConv::Separable(SeparableConv2d::new(store, name, c_in, c_out, kernel, rng))
        } else {
            SpatialConv::Dense(Conv2d::new(store, name, c_in, c_out, kernel, rng))
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            SpatialConv::Dense(c) => c.forward(p, x),
            SpatialConv::Separable(c) => c.forward(p, x),
        }
    }
}

/// Causal depthwise convolution along the token axis of `[L, C]`, plus bias.
#[derive(Clone, Debug)]
pub struct CausalConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl CausalConv1d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), init_uniform(&[channels, kernel], kernel, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([channels])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv1d_depthwise(p.var(self.weight), true)?.add_bias(p.var(self.bias))
    }
}

/// `[C, H, W]` feature map to `[H·W, C]` tokens (row-major over the grid).
pub fn to_tokens(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    let &[c, h, w] = shape.as_slice() else {
        return Err(Error::shape("to_tokens", format!("expected [C, H, W], got {shape:?}")));
    };
    x.reshape(&[c, h * w])?.transpose()
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(x: Var<'_>, h: usize, w: usize) -> Result<Var<'_>> {
    let shape = x.shape();
    let &[l, c] = shape.as_slice() else {
        return Err(Error::shape("from_tokens", format!("expected [L, C], got {shape:?}")));
    };
    if l != h * w {
        return Err(Error::shape("from_tokens", format!("{l} tokens for a {h}x{w} grid")));
    }
    x.transpose()?.reshape(&[c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_names_are_unique_and_ordered() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros([2]));
        let b = s.add("b", Tensor::zeros([3, 2]));
        assert_eq!(s.lookup("b"), Some(b));
        assert_eq!(s.name(a), "a");
        assert_eq!(s.num_scalars(), 8);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_name_panics() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::zeros([1]));
        s.add("x", Tensor::zeros([1]));
    }

    #[test]
    fn token_round_trip() {
        let tape = Tape::new();
        let data = Tensor::from_fn([3, 2, 4], |i| i as f64);
        let x = tape.constant(data.clone());
        let t = to_tokens(x).unwrap();
        assert_eq!(t.shape(), vec![8, 3]);
        // token 5 = (row 1, col 1), channel 2
        assert_eq!(t.value().data()[5 * 3 + 2], data.data()[2 * 8 + 5]);
        assert_eq!(*from_tokens(t, 2, 4).unwrap().value(), data);
    }

    #[test]
    fn init_is_bounded_by_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = init_uniform(&[64, 16], 64, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.125));
    }

    #[test]
    fn separable_conv_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let conv = SeparableConv2d::new(&mut s, "sep", 4, 6, 3, &mut rng);
        assert_eq!(s.num_scalars(), 4 * 9 + 4 + 4 * 6 + 6);
        let tape = Tape::new();
        let p = s.bind(&tape, false);
        let y = conv.forward(&p, tape.constant(Tensor::zeros([4, 5, 5]))).unwrap();
        assert_eq!(y.shape(), vec![6, 5, 5]);
    }
}
