//! ConvMamba, the scaled-residual block built on it, and the two guided
//! fusion modules combined by an adaptive gate.
//!
//! Every block maps `[L, C]` tokens to `[L, C]`; blocks with a convolutional
//! branch also need the `H × W` grid the tokens were flattened from.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{from_tokens, to_tokens, Bound, CausalConv1d, LayerNorm, Linear, ParamId, ParamStore, SpatialConv};
use crate::ssm::SsmParams;
use crate::tensor::{Tensor, Unary, Var};

/// Activation applied to the guiding branch of the fusion modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateActivation {
    Relu,
    Silu,
    LeakyRelu,
    Sigmoid,
}

impl GateActivation {
    pub const ALL: [GateActivation; 4] = [
        GateActivation::Relu,
        GateActivation::Silu,
        GateActivation::LeakyRelu,
        GateActivation::Sigmoid,
    ];

    pub fn unary(self) -> Unary {
        match self {
            GateActivation::Relu => Unary::Relu,
            GateActivation::Silu => Unary::Silu,
            GateActivation::LeakyRelu => Unary::LeakyRelu,
            GateActivation::Sigmoid => Unary::Sigmoid,
        }
    }
}

impl fmt::Display for GateActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateActivation::Relu => "relu",
            GateActivation::Silu => "silu",
            GateActivation::LeakyRelu => "leaky_relu",
            GateActivation::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for GateActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(GateActivation::Relu),
            "silu" => Ok(GateActivation::Silu),
            "leaky_relu" | "leakyrelu" => Ok(GateActivation::LeakyRelu),
            "sigmoid" => Ok(GateActivation::Sigmoid),
            other => Err(Error::Config(format!(
                "unknown gate activation `{other}` (expected relu, silu, leaky_relu or sigmoid)"
            ))),
        }
    }
}

/// Width of the local-guided fusion branch relative to `d_model`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LgfMultiplier {
    One,
    OneAndHalf,
    Two,
}

impl LgfMultiplier {
    /// `multiplier · c`, rounded down.
    pub fn apply(self, c: usize) -> usize {
        match self {
            LgfMultiplier::One => c,
            LgfMultiplier::OneAndHalf => c * 3 / 2,
            LgfMultiplier::Two => 2 * c,
        }
    }
}

impl fmt::Display for LgfMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LgfMultiplier::One => "1",
            LgfMultiplier::OneAndHalf => "1.5",
            LgfMultiplier::Two => "2",
        })
    }
}

impl FromStr for LgfMultiplier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" | "1.0" => Ok(LgfMultiplier::One),
            "1.5" => Ok(LgfMultiplier::OneAndHalf),
            "2" | "2.0" => Ok(LgfMultiplier::Two),
            other => Err(Error::Config(format!("lgf multiplier must be 1, 1.5 or 2, got `{other}`"))),
        }
    }
}

/// Hyperparameters shared by all blocks of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub expand: usize,
    pub state_size: usize,
    pub conv1d_kernel: usize,
    pub conv2d_kernel: usize,
    pub gate: GateActivation,
    pub lgf_multiplier: LgfMultiplier,
    pub skip_d: bool,
    /// Depthwise-separable convolutions in the local branch.
    pub separable: bool,
}

impl BlockConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            expand: 2,
            state_size: 16,
            conv1d_kernel: 4,
            conv2d_kernel: 3,
            gate: GateActivation::Relu,
            lgf_multiplier: LgfMultiplier::Two,
            skip_d: true,
            separable: false,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!("d_model must be even and positive, got {}", self.d_model)));
        }
        if self.expand == 0 || self.state_size == 0 || self.conv1d_kernel == 0 {
            return Err(Error::Config("expansion, state size and conv1d kernel must be positive".into()));
        }
        if self.conv2d_kernel % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel must be odd, got {}", self.conv2d_kernel)));
        }
        if self.lgf_multiplier.apply(self.d_model) == 0 {
            return Err(Error::Config("local fusion width is zero".into()));
        }
        Ok(())
    }
}

fn check_tokens(op: &'static str, x: &Var<'_>, c: usize, h: usize, w: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 2 || s[1] != c {
        return Err(Error::shape(op, format!("tokens {s:?} for d_model {c}")));
    }
    if s[0] != h * w {
        return Err(Error::shape(op, format!("{} tokens for a {h}x{w} grid", s[0])));
    }
    Ok(())
}

/// `Linear → causal conv1d → SSM`, the sequence path shared by several blocks.
#[derive(Clone, Debug)]
struct SsmPath {
    proj: Linear,
    conv: CausalConv1d,
    ssm: SsmParams,
}

impl SsmPath {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        width: usize,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.proj"), c_in, width, true, rng),
            conv: CausalConv1d::new(store, &format!("{name}.conv1d"), width, cfg.conv1d_kernel, rng),
            ssm: SsmParams::new(store, &format!("{name}.ssm"), width, cfg.state_size, cfg.skip_d, rng)?,
        })
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.proj.forward(p, x)?;
        let y = self.conv.forward(p, y)?;
        self.ssm.forward(p, y)
    }
}

/// `conv → SiLU → conv` on the spatial grid; the first conv sets the width.
#[derive(Clone, Debug)]
struct ConvPath {
    first: SpatialConv,
    second: SpatialConv,
}

impl ConvPath {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        width: usize,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Self {
        let k = cfg.conv2d_kernel;
        Self {
            first: SpatialConv::new(store, &format!("{name}.conv_a"), c_in, width, k, cfg.separable, rng),
            second: SpatialConv::new(store, &format!("{name}.conv_b"), width, width, k, cfg.separable, rng),
        }
    }

    /// Tokens `[L, c_in]` → tokens `[L, width]`.
    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let grid = from_tokens(x, h, w)?;
        let y = self.first.forward(p, grid)?.silu()?;
        to_tokens(self.second.forward(p, y)?)
    }
}

/// Three-branch block: a SiLU gate and an SSM path on the two channel halves,
/// plus a convolutional path on the full feature grid.
#[derive(Clone, Debug)]
pub struct ConvMamba {
    pub cfg: BlockConfig,
    gate_proj: Linear,
    seq: SsmPath,
    seq_norm: LayerNorm,
    local: ConvPath,
    pub out_proj: Linear,
}

impl ConvMamba {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, half, inner) = (cfg.d_model, cfg.d_model / 2, cfg.inner());
        Ok(Self {
            cfg: cfg.clone(),
            gate_proj: Linear::new(store, &format!("{name}.gate_proj"), half, inner, true, rng),
            seq: SsmPath::new(store, &format!("{name}.seq"), half, inner, cfg, rng)?,
            seq_norm: LayerNorm::new(store, &format!("{name}.seq_norm"), inner),
            local: ConvPath::new(store, &format!("{name}.local"), c, inner, cfg, rng),
            out_proj: Linear::new(store, &format!("{name}.out_proj"), inner, c, true, rng),
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let (c, half) = (self.cfg.d_model, self.cfg.d_model / 2);
        check_tokens("conv_mamba", &x, c, h, w)?;
        let first = x.narrow(1, 0, half)?;
        let second = x.narrow(1, half, half)?;
        let gate = self.gate_proj.forward(p, first)?.silu()?;
        let seq = self.seq_norm.forward(p, self.seq.forward(p, second)?)?;
        let local = self.local.forward(p, x, h, w)?;
        self.out_proj.forward(p, gate.mul(seq)?.add(local)?)
    }
}

/// Pre-norm ConvMamba with a learnable-scale residual, then norm and a
/// `C → C` projection.
#[derive(Clone, Debug)]
pub struct Srcm {
    norm_in: LayerNorm,
    pub core: ConvMamba,
    pub alpha: ParamId,
    norm_out: LayerNorm,
    pub proj: Linear,
}

impl Srcm {
    pub const ALPHA_INIT: f64 = 1.0;

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.d_model;
        Ok(Self {
            norm_in: LayerNorm::new(store, &format!("{name}.norm_in"), c),
            core: ConvMamba::new(store, &format!("{name}.core"), cfg, rng)?,
            alpha: store.add(format!("{name}.alpha"), Tensor::scalar(Self::ALPHA_INIT)),
            norm_out: LayerNorm::new(store, &format!("{name}.norm_out"), c),
            proj: Linear::new(store, &format!("{name}.proj"), c, c, true, rng),
        })
    }

    /// The residual sum `core(LN(x)) + α·x`, before the output norm.
    pub fn residual<'t>(&self, p: &Bound<'t>, x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let core = self.core.forward(p, self.norm_in.forward(p, x)?, h, w)?;
        core.add(x.scale_by(p.var(self.alpha))?)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let r = self.residual(p, x, h, w)?;
        self.proj.forward(p, self.norm_out.forward(p, r)?)
    }
}

/// The guided feature's gate and SSM branches, common to both fusion modules.
#[derive(Clone, Debug)]
struct GuidedBranches {
    gate_proj: Linear,
    seq: SsmPath,
    seq_norm: LayerNorm,
}

impl GuidedBranches {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &BlockConfig,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.d_model;
        Ok(Self {
            gate_proj: Linear::new(store, &format!("{name}.gate_proj"), c, width, true, rng),
            seq: SsmPath::new(store, &format!("{name}.seq"), c, width, cfg, rng)?,
            seq_norm: LayerNorm::new(store, &format!("{name}.seq_norm"), width),
        })
    }

    fn forward<'t>(&self, p: &Bound<'t>, f1: Var<'t>) -> Result<Var<'t>> {
        let gate = self.gate_proj.forward(p, f1)?.silu()?;
        let seq = self.seq_norm.forward(p, self.seq.forward(p, f1)?)?;
        gate.mul(seq)
    }
}

fn check_pair(op: &'static str, f1: &Var<'_>, f2: &Var<'_>) -> Result<()> {
    let (a, b) = (f1.shape(), f2.shape());
    if a != b {
        return Err(Error::Input(format!("{op}: guided {a:?} and guiding {b:?} features differ")));
    }
    Ok(())
}

/// Global-guided fusion: `f2` gates `f1` through an SSM path.
#[derive(Clone, Debug)]
pub struct Ggf {
    pub cfg: BlockConfig,
    guided: GuidedBranches,
    guide: SsmPath,
    pub out_proj: Linear,
}

impl Ggf {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, inner) = (cfg.d_model, cfg.inner());
        Ok(Self {
            cfg: cfg.clone(),
            guided: GuidedBranches::new(store, &format!("{name}.guided"), cfg, inner, rng)?,
            guide: SsmPath::new(store, &format!("{name}.guide"), c, inner, cfg, rng)?,
            out_proj: Linear::new(store, &format!("{name}.out_proj"), inner, c, true, rng),
        })
    }

    /// Pre-activation of the guiding branch (before the gate activation).
    pub fn guide_logits<'t>(&self, p: &Bound<'t>, f2: Var<'t>) -> Result<Var<'t>> {
        self.guide.forward(p, f2)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, f1: Var<'t>, f2: Var<'t>) -> Result<Var<'t>> {
        check_pair("ggf", &f1, &f2)?;
        let fused = self.guided.forward(p, f1)?;
        let gate = self.guide_logits(p, f2)?.unary(self.cfg.gate.unary())?;
        self.out_proj.forward(p, fused.mul(gate)?)
    }
}

/// Local-guided fusion: `f2` gates `f1` through a convolutional path. All
/// internal widths are `lgf_multiplier · d_model`.
#[derive(Clone, Debug)]
pub struct Lgf {
    pub cfg: BlockConfig,
    guided: GuidedBranches,
    guide: ConvPath,
    pub out_proj: Linear,
}

impl Lgf {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.d_model;
        let width = cfg.lgf_multiplier.apply(c);
        Ok(Self {
            cfg: cfg.clone(),
            guided: GuidedBranches::new(store, &format!("{name}.guided"), cfg, width, rng)?,
            guide: ConvPath::new(store, &format!("{name}.guide"), c, width, cfg, rng),
            out_proj: Linear::new(store, &format!("{name}.out_proj"), width, c, true, rng),
        })
    }

    pub fn guide_logits<'t>(&self, p: &Bound<'t>, f2: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        self.guide.forward(p, f2, h, w)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, f1: Var<'t>, f2: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        check_pair("lgf", &f1, &f2)?;
        check_tokens("lgf", &f2, self.cfg.d_model, h, w)?;
        let fused = self.guided.forward(p, f1)?;
        let gate = self.guide_logits(p, f2, h, w)?.unary(self.cfg.gate.unary())?;
        self.out_proj.forward(p, fused.mul(gate)?)
    }
}

/// Softmax over two scores computed from the channel means of both inputs;
/// returns their convex combination.
#[derive(Clone, Debug)]
pub struct AglgfGate {
    pub score: Linear,
}

impl AglgfGate {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            score: Linear::new(store, &format!("{name}.score"), 2 * c, 2, true, rng),
        }
    }

    /// The two gate weights, shape `[1, 2]`.
    pub fn scores<'t>(&self, p: &Bound<'t>, global: Var<'t>, local: Var<'t>) -> Result<Var<'t>> {
        let pooled = Var::concat(&[global.mean_axis(0)?, local.mean_axis(0)?], 0)?;
        let c2 = pooled.numel();
        self.score.forward(p, pooled.reshape(&[1, c2])?)?.softmax()
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, global: Var<'t>, local: Var<'t>) -> Result<Var<'t>> {
        if global.shape() != local.shape() {
            return Err(Error::Input(format!(
                "aglgf gate: global {:?} and local {:?} features differ",
                global.shape(),
                local.shape()
            )));
        }
        let g = self.scores(p, global, local)?.reshape(&[2])?;
        let wg = g.narrow(0, 0, 1)?;
        let wl = g.narrow(0, 1, 1)?;
        global.scale_by(wg)?.add(local.scale_by(wl)?)
    }
}

/// Bidirectional adaptive global/local guided fusion with weights shared
/// between the two guidance directions.
#[derive(Clone, Debug)]
pub struct Aglgf {
    pub ggf: Ggf,
    pub lgf: Lgf,
    pub gate: AglgfGate,
}

impl Aglgf {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            ggf: Ggf::new(store, &format!("{name}.ggf"), cfg, rng)?,
            lgf: Lgf::new(store, &format!("{name}.lgf"), cfg, rng)?,
            gate: AglgfGate::new(store, &format!("{name}.gate"), cfg.d_model, rng),
        })
    }

    /// One guidance direction: `f2` guides `f1`.
    pub fn fuse<'t>(&self, p: &Bound<'t>, f1: Var<'t>, f2: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let g = self.ggf.forward(p, f1, f2)?;
        let l = self.lgf.forward(p, f1, f2, h, w)?;
        self.gate.forward(p, g, l)
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        f1: Var<'t>,
        f2: Var<'t>,
        h: usize,
        w: usize,
    ) -> Result<(Var<'t>, Var<'t>)> {
        Ok((self.fuse(p, f1, f2, h, w)?, self.fuse(p, f2, f1, h, w)?))
    }
}
