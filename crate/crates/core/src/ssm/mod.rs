//! Diagonal selective state-space layer.

pub mod kernel;

use rand::Rng;

pub use kernel::{
    scan_convolution_oracle, selective_scan_chunked, selective_scan_reference, zoh, zoh_branches, zoh_discretize,
    ScanInputs, Zoh, TAYLOR_THRESHOLD,
};

use crate::error::{Error, Result};
use crate::nn::{init_uniform, Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Range of the initial time step, sampled log-uniformly per channel.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

/// `x` with `softplus(x) = y`, for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Parameters of one selective SSM over `channels` inner features.
///
/// `A = −exp(a_log)` is strictly negative, and `Δ = softplus(dt_proj(x))` is
/// strictly positive, so every `exp(ΔA)` lies in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub channels: usize,
    pub state_size: usize,
    /// `[channels, state_size]`
    pub a_log: ParamId,
    pub dt_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    /// `[channels]`, present when the skip path is enabled.
    pub d: Option<ParamId>,
}

impl SsmParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        state_size: usize,
        skip: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || state_size == 0 {
            return Err(Error::Config(format!(
                "SSM needs channels ≥ 1 and state size ≥ 1, got {channels} and {state_size}"
            )));
        }
        let a_log = Tensor::from_fn([channels, state_size], |i| ((i % state_size) as f64 + 1.0).ln());
        let a_log = store.add(format!("{name}.a_log"), a_log);
        let dt_proj = Linear {
            weight: store.add(
                format!("{name}.dt_proj.weight"),
                init_uniform(&[channels, channels], channels, rng),
            ),
            bias: Some(store.add(format!("{name}.dt_proj.bias"), {
                let (lo, hi) = (DT_INIT_RANGE.0.ln(), DT_INIT_RANGE.1.ln());
                Tensor::from_fn([channels], |_| inverse_softplus(rng.gen_range(lo..hi).exp()))
            })),
            in_dim: channels,
            out_dim: channels,
        };
        let b_proj = Linear::new(store, &format!("{name}.b_proj"), channels, state_size, false, rng);
        let c_proj = Linear::new(store, &format!("{name}.c_proj"), channels, state_size, false, rng);
        let d = skip.then(|| store.add(format!("{name}.d"), Tensor::full([channels], 1.0)));
        Ok(Self {
            channels,
            state_size,
            a_log,
            dt_proj,
            b_proj,
            c_proj,
            d,
        })
    }

    /// `x: [L, channels] → [L, channels]`, with `h_0 = 0`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.channels {
            return Err(Error::shape(
                "ssm",
                format!("input {shape:?} for {} channels", self.channels),
            ));
        }
        let delta = self.dt_proj.forward(p, x)?.softplus()?;
        let b = self.b_proj.forward(p, x)?;
        let c = self.c_proj.forward(p, x)?;
        let a = p.var(self.a_log).exp()?.scale(-1.0)?;
        x.selective_scan(delta, a, b, c, self.d.map(|d| p.var(d)))
    }
}
