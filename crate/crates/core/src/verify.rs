//! Finite-difference gradient suites, grouped by scope.
//!
//! Each component is a scalar function of a few tensors; the analytic
//! gradient from the tape is compared with central differences in double
//! precision. Inputs are drawn away from zero so that ReLU, LeakyReLU and
//! `|·|` kinks are not straddled by the difference stencil.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Aglgf, AglgfGate, BlockConfig, ConvMamba, Ggf, Lgf, Srcm};
use crate::error::{Error, Result};
use crate::model::{CdMamba, ModelConfig};
use crate::nn::{Bound, ParamStore};
use crate::ssm::SsmParams;
use crate::tensor::{grad_check_scaled, ResizeScale, Tape, Tensor, Unary, Var};
use crate::train::{change_probability, ce_loss, dice_loss, pixel_logits, total_loss, LossConfig};


/// Relative-error denominators never drop below this fraction of the
/// component's largest gradient entry.
pub const GRADIENT_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Ssm,
    Blocks,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Primitives, Scope::Ssm, Scope::Blocks, Scope::Model];

    /// Central-difference step. Composite functions use a wider step so that
    /// rounding noise stays below the tolerance on small gradient entries.
    pub fn step(self) -> f64 {
        match self {
            Scope::Primitives => 1e-6,
            Scope::Ssm | Scope::Blocks | Scope::Model => 1e-5,
        }
    }

    /// Largest accepted relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Primitives => 1e-6,
            Scope::Ssm | Scope::Blocks => 1e-4,
            Scope::Model => 1e-3,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Primitives => "primitives",
            Scope::Ssm => "ssm",
            Scope::Blocks => "blocks",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck scope `{s}` (primitives, ssm, blocks, model)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentResult {
    pub name: String,
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst entry.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub tolerance: f64,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct ScopeReport {
    pub scope: Scope,
    pub components: Vec<ComponentResult>,
    pub elapsed: Duration,
}

impl ScopeReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentResult::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for ScopeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.components {
            writeln!(
                f,
                "  {:<6} {:<28} max rel err {:.3e} at input {} entry {} (tol {:.0e}, {} coords)",
                if c.passed() { "ok" } else { "FAILED" },
                c.name,
                c.max_rel_error,
                c.worst.0,
                c.worst.1,
                c.tolerance,
                c.coordinates
            )?;
        }
        write!(
            f,
            "{}: {} in {:.1}s, worst {:.3e}",
            self.scope,
            if self.passed() { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64(),
            self.max_rel_error()
        )
    }
}

/// Uniform in `±[0.1, 1]`.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

/// Fixed non-uniform weighting, so the scalar sees every output entry.
fn weighted_sum(y: Var<'_>) -> Result<Var<'_>> {
    let w = Tensor::from_fn(y.shape(), |i| (0.37 * i as f64 + 0.2).cos());
    y.mul(y.tape.constant(w))?.sum()
}

type Component = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

struct Case {
    name: String,
    inputs: Vec<Tensor>,
    /// Coordinates per input; `None` checks every entry.
    coords: Option<Vec<Vec<usize>>>,
    f: Component,
}

impl Case {
    fn full(name: &str, inputs: Vec<Tensor>, f: Component) -> Self {
        Self {
            name: name.into(),
            inputs,
            coords: None,
            f,
        }
    }

    fn run(self, scope: Scope) -> Result<ComponentResult> {
        let coords = self
            .coords
            .unwrap_or_else(|| self.inputs.iter().map(|t| (0..t.numel()).collect()).collect());
        let rep = grad_check_scaled(|t, v| (self.f)(t, v), &self.inputs, &coords, scope.step(), GRADIENT_FLOOR)?;
        Ok(ComponentResult {
            name: self.name,
            max_rel_error: rep.max_rel_error,
            worst: rep.worst,
            coordinates: rep.coordinates,
            tolerance: scope.tolerance(),
        })
    }
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut r = |shape: &[usize]| off_zero(shape, rng);
    let a = r(&[3, 4]);
    let b = r(&[3, 4]);
    let positive = Tensor::from_fn([3, 4], |i| 1.5 + 0.1 * i as f64);
    let mut cases = vec![
        Case::full("add", vec![a.clone(), b.clone()], Box::new(|_, v| weighted_sum(v[0].add(v[1])?))),
        Case::full("sub", vec![a.clone(), b.clone()], Box::new(|_, v| weighted_sum(v[0].sub(v[1])?))),
        Case::full("mul", vec![a.clone(), b.clone()], Box::new(|_, v| weighted_sum(v[0].mul(v[1])?))),
        Case::full("div", vec![a.clone(), positive], Box::new(|_, v| weighted_sum(v[0].div(v[1])?))),
        Case::full("scale_by", vec![r(&[1]), a.clone()], Box::new(|_, v| weighted_sum(v[1].scale_by(v[0])?))),
        Case::full("add_bias", vec![a.clone(), r(&[4])], Box::new(|_, v| weighted_sum(v[0].add_bias(v[1])?))),
        Case::full("matmul", vec![a.clone(), r(&[4, 5])], Box::new(|_, v| weighted_sum(v[0].matmul(v[1])?))),
        Case::full(
            "concat/narrow",
            vec![a.clone(), r(&[3, 2])],
            Box::new(|_, v| weighted_sum(Var::concat(&[v[0], v[1]], 1)?.narrow(1, 1, 4)?)),
        ),
        Case::full(
            "reshape/permute",
            vec![r(&[2, 3, 4])],
            Box::new(|_, v| weighted_sum(v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?)),
        ),
        Case::full("sum_axis", vec![r(&[2, 3, 4])], Box::new(|_, v| weighted_sum(v[0].sum_axis(1)?))),
        Case::full("mean_axis", vec![a.clone()], Box::new(|_, v| weighted_sum(v[0].mean_axis(0)?))),
        Case::full("softmax", vec![a.clone()], Box::new(|_, v| weighted_sum(v[0].softmax()?))),
        Case::full(
            "layer_norm",
            vec![a.clone(), r(&[4]), r(&[4])],
            Box::new(|_, v| weighted_sum(v[0].layer_norm(v[1], v[2], 1e-5)?)),
        ),
        Case::full(
            "conv2d",
            vec![r(&[3, 5, 6]), r(&[4, 3, 3, 3]), r(&[4])],
            Box::new(|_, v| weighted_sum(v[0].conv2d(v[1], Some(v[2]), 1, 1)?)),
        ),
        Case::full(
            "conv2d_stride2",
            vec![r(&[2, 6, 6]), r(&[3, 2, 3, 3])],
            Box::new(|_, v| weighted_sum(v[0].conv2d(v[1], None, 2, 1)?)),
        ),
        Case::full(
            "conv2d_pointwise",
            vec![r(&[3, 4, 5]), r(&[2, 3, 1, 1]), r(&[2])],
            Box::new(|_, v| weighted_sum(v[0].conv2d(v[1], Some(v[2]), 1, 0)?)),
        ),
        Case::full(
            "depthwise_conv2d",
            vec![r(&[3, 5, 6]), r(&[3, 3, 3]), r(&[3])],
            Box::new(|_, v| weighted_sum(v[0].depthwise_conv2d(v[1], Some(v[2]), 1, 1)?)),
        ),
        Case::full(
            "conv1d_depthwise_causal",
            vec![r(&[7, 3]), r(&[3, 4])],
            Box::new(|_, v| weighted_sum(v[0].conv1d_depthwise(v[1], true)?)),
        ),
        Case::full(
            "bilinear_half",
            vec![r(&[2, 6, 4])],
            Box::new(|_, v| weighted_sum(v[0].resize_bilinear(ResizeScale::Half)?)),
        ),
        Case::full(
            "bilinear_double",
            vec![r(&[2, 3, 2])],
            Box::new(|_, v| weighted_sum(v[0].resize_bilinear(ResizeScale::Double)?)),
        ),
    ];
    for kind in [
        Unary::Silu,
        Unary::Relu,
        Unary::LeakyRelu,
        Unary::Sigmoid,
        Unary::Softplus,
        Unary::Exp,
        Unary::Abs,
    ] {
        cases.push(Case::full(
            &format!("{kind:?}").to_lowercase(),
            vec![r(&[3, 4])],
            Box::new(move |_, v| weighted_sum(v[0].unary(kind)?)),
        ));
    }
    let y: Vec<u8> = (0..10).map(|i| (i % 3 == 1) as u8).collect();
    let (y1, y2) = (y.clone(), y.clone());
    cases.push(Case::full("ce_loss", vec![r(&[10, 2])], Box::new(move |_, v| ce_loss(v[0], &y1))));
    cases.push(Case::full(
        "dice_loss",
        vec![r(&[10, 2])],
        Box::new(move |_, v| dice_loss(change_probability(v[0])?, &y2, 1.0)),
    ));
    cases.push(Case::full(
        "total_loss",
        vec![r(&[10, 2])],
        Box::new(move |_, v| Ok(total_loss(v[0], &y, &LossConfig::default())?.total)),
    ));
    cases
}

/// The inputs followed by every parameter of `store`.
fn with_params(inputs: Vec<Tensor>, store: &ParamStore) -> Vec<Tensor> {
    inputs.into_iter().chain(store.iter().map(|p| p.value.clone())).collect()
}

fn ssm_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let (l, d, n) = (8, 3, 4);
    let delta = Tensor::from_fn([l, d], |_| rng.gen_range(0.05..0.6));
    let a = Tensor::from_fn([d, n], |_| -rng.gen_range(0.2..2.0));
    let mut scan_inputs = vec![off_zero(&[l, d], rng), delta.clone(), a.clone()];
    scan_inputs.extend([off_zero(&[l, n], rng), off_zero(&[l, n], rng), off_zero(&[d], rng)]);
    let mut taylor_inputs = scan_inputs.clone();
    // |Δ·a| below the Taylor threshold everywhere.
    taylor_inputs[2] = Tensor::from_fn([d, n], |i| a.data()[i] * 1e-5);

    let mut cases = vec![
        Case::full(
            "selective_scan",
            scan_inputs,
            Box::new(|_, v| weighted_sum(v[0].selective_scan(v[1], v[2], v[3], v[4], Some(v[5]))?)),
        ),
        Case::full(
            "selective_scan_taylor_branch",
            taylor_inputs,
            Box::new(|_, v| weighted_sum(v[0].selective_scan(v[1], v[2], v[3], v[4], Some(v[5]))?)),
        ),
    ];

    let mut store = ParamStore::new();
    let ssm = SsmParams::new(&mut store, "ssm", d, n, true, rng)?;
    let x = off_zero(&[l, d], rng);
    cases.push(Case::full(
        "ssm_layer",
        with_params(vec![x], &store),
        Box::new(move |tape, v| {
            let p = Bound::from_vars(tape, v[1..].to_vec());
            weighted_sum(ssm.forward(&p, v[0])?)
        }),
    ));
    Ok(cases)
}

fn block_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let (h, w, c) = (3, 4, 4);
    let cfg = BlockConfig {
        state_size: 3,
        ..BlockConfig::new(c)
    };
    let mut cases = Vec::new();
    let f1 = off_zero(&[h * w, c], rng);
    let f2 = off_zero(&[h * w, c], rng);

    let mut store = ParamStore::new();
    let cm = ConvMamba::new(&mut store, "cm", &cfg, rng)?;
    cases.push(Case::full(
        "conv_mamba",
        with_params(vec![f1.clone()], &store),
        Box::new(move |tape, v| {
            let p = Bound::from_vars(tape, v[1..].to_vec());
            weighted_sum(cm.forward(&p, v[0], h, w)?)
        }),
    ));

    let mut store = ParamStore::new();
    let srcm = Srcm::new(&mut store, "srcm", &cfg, rng)?;
    cases.push(Case::full(
        "srcm",
        with_params(vec![f1.clone()], &store),
        Box::new(move |tape, v| {
            let p = Bound::from_vars(tape, v[1..].to_vec());
            weighted_sum(srcm.forward(&p, v[0], h, w)?)
        }),
    ));

    let mut store = ParamStore::new();
    let ggf = Ggf::new(&mut store, "ggf", &cfg, rng)?;
    cases.push(Case::full(
        "ggf",
        with_params(vec![f1.clone(), f2.clone()], &store),
        Box::new(move |tape, v| {
            let p = Bound::from_vars(tape, v[2..].to_vec());
            weighted_sum(ggf.forward(&p, v[0], v[1])?)
        }),
    ));

    let mut store = ParamStore::new();
    let lgf = Lgf::new(&mut store, "lgf", &cfg, rng)?;
    cases.push(Case::full(
        "lgf",
        with_params(vec![f1.clone(), f2.clone()], &store),
        Box::new(move |tape, v| {
            let p = Bound::from_vars(tape, v[2..].to_vec());
            weighted_sum(lgf.forward(&p, v[0], v[1], h, w)?)
        }),
    ));

    let mut store = ParamStore::new();
    let gate = AglgfGate::new(&mut store, "gate", c, rng);
    cases.push(Case::full(
        "aglgf_gate",
        with_params(vec![f1.clone(), f2.clone()], &store),
        Box::new(move |tape, v| {
            let p = Bound::from_vars(tape, v[2..].to_vec());
            weighted_sum(gate.forward(&p, v[0], v[1])?)
        }),
    ));

    let mut store = ParamStore::new();
    let aglgf = Aglgf::new(&mut store, "aglgf", &cfg, rng)?;
    cases.push(Case::full(
        "aglgf",
        with_params(vec![f1, f2], &store),
        Box::new(move |tape, v| {
            let p = Bound::from_vars(tape, v[2..].to_vec());
            let (a, b) = aglgf.forward(&p, v[0], v[1], h, w)?;
            weighted_sum(a)?.add(weighted_sum(b)?.scale(0.5)?)
        }),
    ));
    Ok(cases)
}

/// Side of the square input used by the model suite.
pub const MODEL_CHECK_SIZE: usize = 8;
/// Coordinates sampled from each image and each parameter tensor.
const MODEL_IMAGE_COORDS: usize = 12;
const MODEL_PARAM_COORDS: usize = 2;

fn model_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let s = MODEL_CHECK_SIZE;
    let cfg = ModelConfig::reduced();
    let (model, store) = CdMamba::new(&cfg, rng.gen())?;
    let t1 = Tensor::from_fn([3, s, s], |_| rng.gen_range(0.0..1.0));
    let t2 = Tensor::from_fn([3, s, s], |_| rng.gen_range(0.0..1.0));
    let y: Vec<u8> = (0..s * s).map(|_| rng.gen_range(0..2)).collect();
    let inputs = with_params(vec![t1, t2], &store);
    let coords = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let k = if i < 2 { MODEL_IMAGE_COORDS } else { MODEL_PARAM_COORDS };
            sample(rng, t.numel(), k.min(t.numel())).into_vec()
        })
        .collect();
    Ok(vec![Case {
        name: "cdmamba_reduced_total_loss".into(),
        inputs,
        coords: Some(coords),
        f: Box::new(move |tape, v| {
            let p = Bound::from_vars(tape, v[2..].to_vec());
            let logits = model.forward(&p, v[0], v[1])?;
            Ok(total_loss(pixel_logits(logits)?, &y, &LossConfig::default())?.total)
        }),
    }])
}

/// Runs one scope with a fixed seed.
pub fn run_scope(scope: Scope) -> Result<ScopeReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 + scope as u64);
    let cases = match scope {
        Scope::Primitives => primitive_cases(&mut rng),
        Scope::Ssm => ssm_cases(&mut rng)?,
        Scope::Blocks => block_cases(&mut rng)?,
        Scope::Model => model_cases(&mut rng)?,
    };
    let components = cases
        .into_iter()
        .map(|c| c.run(scope))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScopeReport {
        scope,
        components,
        elapsed: start.elapsed(),
    })
}
