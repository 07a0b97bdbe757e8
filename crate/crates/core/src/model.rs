//! Siamese encoder, per-stage differential features, and the decoder that
//! turns them into two-class change logits.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Aglgf, BlockConfig, GateActivation, LgfMultiplier, Srcm};
use crate::error::{Error, Result};
use crate::nn::{from_tokens, to_tokens, Bound, Conv2d, ParamStore};
use crate::tensor::{ResizeScale, Var};

/// Number of encoder stages; the decoder has one fewer.
pub const STAGES: usize = 4;

/// Every architecture hyperparameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub decoder_depths: Vec<usize>,
    /// 1-based stage indices that use adaptive guided fusion.
    pub aglgf_stages: BTreeSet<usize>,
    pub num_classes: usize,
    pub expand: usize,
    pub state_size: usize,
    pub conv1d_kernel: usize,
    pub conv2d_kernel: usize,
    pub gate: GateActivation,
    pub lgf_multiplier: LgfMultiplier,
    pub skip_d: bool,
    pub decoder_separable: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            stem_channels: 16,
            stem_kernel: 3,
            stage_channels: vec![16, 32, 64, 128],
            stage_depths: vec![1, 2, 2, 4],
            decoder_depths: vec![1, 1, 1],
            aglgf_stages: BTreeSet::from([1, 2]),
            num_classes: 2,
            expand: 2,
            state_size: 16,
            conv1d_kernel: 4,
            conv2d_kernel: 3,
            gate: GateActivation::Relu,
            lgf_multiplier: LgfMultiplier::Two,
            skip_d: true,
            decoder_separable: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration for finite-difference checks on 8×8 inputs.
    pub fn reduced() -> Self {
        Self {
            stem_channels: 4,
            stage_channels: vec![4, 8, 8, 8],
            stage_depths: vec![1, 1, 1, 1],
            state_size: 2,
            ..Self::default()
        }
    }

    /// Spatial downscale of stage `i` (0-based) relative to the input.
    pub fn stage_divisor(i: usize) -> usize {
        1 << i
    }

    /// Input sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        Self::stage_divisor(STAGES - 1)
    }

    pub fn block_config(&self, stage: usize, separable: bool) -> BlockConfig {
        BlockConfig {
            d_model: self.stage_channels[stage],
            expand: self.expand,
            state_size: self.state_size,
            conv1d_kernel: self.conv1d_kernel,
            conv2d_kernel: self.conv2d_kernel,
            gate: self.gate,
            lgf_multiplier: self.lgf_multiplier,
            skip_d: self.skip_d,
            separable,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != STAGES || self.stage_depths.len() != STAGES {
            return Err(Error::Config(format!(
                "stage_channels and stage_depths need {STAGES} entries, got {} and {}",
                self.stage_channels.len(),
                self.stage_depths.len()
            )));
        }
        if self.decoder_depths.len() != STAGES - 1 {
            return Err(Error::Config(format!(
                "decoder_depths needs {} entries, got {}",
                STAGES - 1,
                self.decoder_depths.len()
            )));
        }
        if let Some(bad) = self.aglgf_stages.iter().find(|&&s| s == 0 || s > STAGES) {
            return Err(Error::Config(format!("aglgf stage {bad} outside 1..={STAGES}")));
        }
        if self.input_channels == 0 || self.stem_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config("input/stem channels must be positive and num_classes ≥ 2".into()));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::Config(format!("stem kernel must be odd, got {}", self.stem_kernel)));
        }
        for i in 0..STAGES {
            self.block_config(i, false).validate()?;
        }
        Ok(())
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h < m || w < m || h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be at least {m} and divisible by {m} \
                 ({} halvings between stages)",
                STAGES - 1
            )));
        }
        Ok(())
    }
}

struct EncoderStage {
    map: Option<Conv2d>,
    blocks: Vec<Srcm>,
}

struct DecoderStage {
    fuse: Conv2d,
    blocks: Vec<Srcm>,
}

/// Bi-temporal encoder features; `f1[i]`, `f2[i]` are `[C_i, H_i, W_i]`.
pub struct StageFeatures<'t> {
    pub f1: Vec<Var<'t>>,
    pub f2: Vec<Var<'t>>,
}

impl StageFeatures<'_> {
    /// `(C, H, W)` of stage `i`.
    pub fn dims(&self, i: usize) -> (usize, usize, usize) {
        let s = self.f1[i].shape();
        (s[0], s[1], s[2])
    }
}

/// Everything a forward pass produces on the way to the logits.
pub struct ForwardTrace<'t> {
    pub features: StageFeatures<'t>,
    pub diffs: Vec<Var<'t>>,
    pub decoded: Var<'t>,
    pub logits: Var<'t>,
}

pub struct CdMamba {
    pub cfg: ModelConfig,
    stem: Conv2d,
    encoder: Vec<EncoderStage>,
    fusion: Vec<Option<Aglgf>>,
    /// Ordered from the deepest fused stage upwards (stage 3, 2, 1).
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

impl CdMamba {
    /// Builds the model and registers its parameters, initialised from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &cfg.stage_channels;
        let stem = Conv2d::new(&mut store, "stem", cfg.input_channels, cfg.stem_channels, cfg.stem_kernel, &mut rng);
        let mut encoder = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let c_prev = if i == 0 { cfg.stem_channels } else { c[i - 1] };
            let map = (c_prev != c[i])
                .then(|| Conv2d::new(&mut store, &format!("enc{}.map", i + 1), c_prev, c[i], 1, &mut rng));
            let bcfg = cfg.block_config(i, false);
            let blocks = (0..cfg.stage_depths[i])
                .map(|j| Srcm::new(&mut store, &format!("enc{}.srcm{j}", i + 1), &bcfg, &mut rng))
                .collect::<Result<_>>()?;
            encoder.push(EncoderStage { map, blocks });
        }
        let fusion = (0..STAGES)
            .map(|i| {
                cfg.aglgf_stages
                    .contains(&(i + 1))
                    .then(|| Aglgf::new(&mut store, &format!("aglgf{}", i + 1), &cfg.block_config(i, false), &mut rng))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        let mut decoder = Vec::with_capacity(STAGES - 1);
        for l in (0..STAGES - 1).rev() {
            let fuse = Conv2d::new(&mut store, &format!("dec{}.fuse", l + 1), c[l + 1] + c[l], c[l], 1, &mut rng);
            let bcfg = cfg.block_config(l, cfg.decoder_separable);
            let blocks = (0..cfg.decoder_depths[l])
                .map(|j| Srcm::new(&mut store, &format!("dec{}.srcm{j}", l + 1), &bcfg, &mut rng))
                .collect::<Result<_>>()?;
            decoder.push(DecoderStage { fuse, blocks });
        }
        let head = Conv2d::new(&mut store, "head", c[0], cfg.num_classes, 1, &mut rng);
        let model = Self {
            cfg: cfg.clone(),
            stem,
            encoder,
            fusion,
            decoder,
            head,
        };
        Ok((model, store))
    }

    /// Number of trainable scalars implied by `cfg`.
    pub fn parameter_count(cfg: &ModelConfig) -> Result<usize> {
        Ok(Self::new(cfg, 0)?.1.num_scalars())
    }

    fn check_image(&self, t: &Var<'_>) -> Result<(usize, usize)> {
        let s = t.shape();
        match *s.as_slice() {
            [c, h, w] if c == self.cfg.input_channels => {
                self.cfg.check_input_size(h, w)?;
                Ok((h, w))
            }
            _ => Err(Error::shape(
                "model input",
                format!("expected [{}, H, W], got {s:?}", self.cfg.input_channels),
            )),
        }
    }

    /// Stem convolution: `[3, H, W] → [stem_channels, H, W]`.
    pub fn conv_stream<'t>(&self, p: &Bound<'t>, t: Var<'t>) -> Result<Var<'t>> {
        self.check_image(&t)?;
        self.stem.forward(p, t)
    }

    fn run_blocks<'t>(blocks: &[Srcm], p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        if blocks.is_empty() {
            return Ok(x);
        }
        let s = x.shape();
        let (h, w) = (s[1], s[2]);
        let mut tok = to_tokens(x)?;
        for b in blocks {
            tok = b.forward(p, tok, h, w)?;
        }
        from_tokens(tok, h, w)
    }

    /// One temporal branch of the Siamese encoder.
    pub fn encode<'t>(&self, p: &Bound<'t>, t: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut x = self.conv_stream(p, t)?;
        let mut out = Vec::with_capacity(STAGES);
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 {
                x = x.resize_bilinear(ResizeScale::Half)?;
            }
            if let Some(map) = &stage.map {
                x = map.forward(p, x)?;
            }
            x = Self::run_blocks(&stage.blocks, p, x)?;
            out.push(x);
        }
        Ok(out)
    }

    pub fn encoder_forward<'t>(&self, p: &Bound<'t>, t1: Var<'t>, t2: Var<'t>) -> Result<StageFeatures<'t>> {
        let (a, b) = (self.check_image(&t1)?, self.check_image(&t2)?);
        if a != b {
            return Err(Error::Input(format!("bi-temporal images differ in size: {a:?} vs {b:?}")));
        }
        Ok(StageFeatures {
            f1: self.encode(p, t1)?,
            f2: self.encode(p, t2)?,
        })
    }

    /// `|G1 − G2|` of the fused pair at guided-fusion stages, `|F1 − F2|`
    /// elsewhere.
    pub fn diff_features<'t>(&self, p: &Bound<'t>, feats: &StageFeatures<'t>) -> Result<Vec<Var<'t>>> {
        (0..STAGES)
            .map(|i| {
                let (f1, f2) = (feats.f1[i], feats.f2[i]);
                match &self.fusion[i] {
                    None => f1.sub(f2)?.abs(),
                    Some(ag) => {
                        let (_, h, w) = feats.dims(i);
                        let (g1, g2) = ag.forward(p, to_tokens(f1)?, to_tokens(f2)?, h, w)?;
                        from_tokens(g1.sub(g2)?.abs()?, h, w)
                    }
                }
            })
            .collect()
    }

    /// Coarse-to-fine decoding to `[C_1, H, W]`.
    pub fn decoder_forward<'t>(&self, p: &Bound<'t>, diffs: &[Var<'t>]) -> Result<Var<'t>> {
        if diffs.len() != STAGES {
            return Err(Error::Input(format!("decoder needs {STAGES} features, got {}", diffs.len())));
        }
        let mut x = diffs[STAGES - 1];
        for (stage, l) in self.decoder.iter().zip((0..STAGES - 1).rev()) {
            let up = x.resize_bilinear(ResizeScale::Double)?;
            let skip = diffs[l];
            let (su, ss) = (up.shape(), skip.shape());
            assert_eq!(su[1..], ss[1..], "decoder scale mismatch at stage {}", l + 1);
            let fused = stage.fuse.forward(p, Var::concat(&[up, skip], 0)?)?;
            x = Self::run_blocks(&stage.blocks, p, fused)?;
        }
        Ok(x)
    }

    pub fn forward_trace<'t>(&self, p: &Bound<'t>, t1: Var<'t>, t2: Var<'t>) -> Result<ForwardTrace<'t>> {
        let features = self.encoder_forward(p, t1, t2)?;
        let diffs = self.diff_features(p, &features)?;
        let decoded = self.decoder_forward(p, &diffs)?;
        let logits = self.head.forward(p, decoded)?;
        Ok(ForwardTrace {
            features,
            diffs,
            decoded,
            logits,
        })
    }

    /// `[3, H, W] × 2 → [num_classes, H, W]` unnormalised logits.
    pub fn forward<'t>(&self, p: &Bound<'t>, t1: Var<'t>, t2: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_trace(p, t1, t2)?.logits)
    }

    pub fn srcm_count(&self) -> (usize, usize) {
        (
            self.encoder.iter().map(|s| s.blocks.len()).sum(),
            self.decoder.iter().map(|s| s.blocks.len()).sum(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform([3, h, w], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn stem_shapes_and_divisibility() {
        let (m, store) = CdMamba::new(&ModelConfig::default(), 0).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let y = m.conv_stream(&p, tape.constant(image(32, 32, 1))).unwrap();
        assert_eq!(y.shape(), vec![16, 32, 32]);
        let zero = m.conv_stream(&p, tape.constant(Tensor::zeros([3, 16, 16]))).unwrap();
        assert!(zero.value().data().iter().all(|&v| v == 0.0));
        let err = m.conv_stream(&p, tape.constant(image(30, 30, 1))).unwrap_err();
        assert!(matches!(&err, Error::Config(msg) if msg.contains("divisible by 8")), "{err}");
    }

    #[test]
    fn reduced_model_shapes() {
        let cfg = ModelConfig::reduced();
        let (m, store) = CdMamba::new(&cfg, 3).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let tr = m
            .forward_trace(&p, tape.constant(image(8, 8, 1)), tape.constant(image(8, 8, 2)))
            .unwrap();
        let want = [(4, 8, 8), (8, 4, 4), (8, 2, 2), (8, 1, 1)];
        for (i, w) in want.into_iter().enumerate() {
            assert_eq!(tr.features.dims(i), w);
            assert_eq!(tr.diffs[i].shape(), vec![w.0, w.1, w.2]);
            assert!(tr.diffs[i].value().data().iter().all(|&v| v >= 0.0));
        }
        assert_eq!(tr.logits.shape(), vec![2, 8, 8]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.aglgf_stages.insert(5);
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            decoder_depths: vec![1, 1],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            stage_channels: vec![16, 33, 64, 128],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_diffs_decode_to_zero_with_zero_biases() {
        let (m, store) = CdMamba::new(&ModelConfig::reduced(), 4).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let diffs: Vec<Var> = [(4, 8, 8), (8, 4, 4), (8, 2, 2), (8, 1, 1)]
            .iter()
            .map(|&(c, h, w)| tape.constant(Tensor::zeros([c, h, w])))
            .collect();
        let y = m.decoder_forward(&p, &diffs).unwrap();
        assert_eq!(y.shape(), vec![4, 8, 8]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aglgf_off_has_fewer_parameters() {
        let base = CdMamba::parameter_count(&ModelConfig::default()).unwrap();
        let off = CdMamba::parameter_count(&ModelConfig {
            aglgf_stages: BTreeSet::new(),
            ..ModelConfig::default()
        })
        .unwrap();
        assert!(off < base);
    }
}
