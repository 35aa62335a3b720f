//! Five-stage encoder-decoder with token-memory blocks at the two deepest
//! stages on both sides.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::mstm::{MstmBlock, MstmConfig};
use crate::nn::{Conv2d, ConvBnRelu, ParamStore, Session};
use crate::ops::Conv2dSpec;
use crate::scalar::Scalar;
use crate::tape::Var;

pub const STAGES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// `{4, 8, 16, 32, 64}`, used for gradient checks.
    Tiny,
    Small,
    Medium,
    Large,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Medium => "medium",
            Preset::Large => "large",
        }
    }

    pub fn base(self) -> usize {
        match self {
            Preset::Tiny => 4,
            Preset::Small => 8,
            Preset::Medium => 16,
            Preset::Large => 32,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "medium" => Ok(Preset::Medium),
            "large" => Ok(Preset::Large),
            _ => Err(Error::Config {
                key: "model.preset".into(),
                msg: format!("unknown preset `{s}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelConfig {
    pub channels: [usize; STAGES],
    pub input_channels: usize,
    pub num_classes: usize,
}

impl ChannelConfig {
    /// Doubling ladder starting at the preset's base width; RGB in, one logit out.
    pub fn preset(p: Preset) -> Self {
        let b = p.base();
        Self {
            channels: [b, 2 * b, 4 * b, 8 * b, 16 * b],
            input_channels: 3,
            num_classes: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.num_classes == 0 || self.channels[0] == 0 {
            return arg_err("channels", "all extents must be positive");
        }
        if self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return arg_err(
                "channels",
                format!("{:?} is not strictly increasing", self.channels),
            );
        }
        Ok(())
    }
}

impl fmt::Display for ChannelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        write!(f, "{{{}}}", c.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: ChannelConfig,
    pub mstm: MstmConfig,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            channels: ChannelConfig::preset(p),
            mstm: MstmConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.channels.validate()?;
        self.mstm.validate()
    }
}

/// Two 3x3 conv/BN/ReLU layers.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

impl ConvBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let spec = Conv2dSpec::new(1, 1, 1);
        Self {
            first: ConvBnRelu::new(store, &format!("{name}.0"), cin, cout, 3, spec, rng),
            second: ConvBnRelu::new(store, &format!("{name}.1"), cout, cout, 3, spec, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(s, x)?;
        self.second.forward(s, y)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub block: ConvBlock,
    /// Stride-2 3x3 conv/BN/ReLU.
    pub down: ConvBnRelu,
    pub mstm: Option<MstmBlock>,
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub block: ConvBlock,
    pub mstm: Option<MstmBlock>,
}

#[derive(Debug, Clone)]
pub struct TmUnet {
    pub cfg: ModelConfig,
    pub encoder: Vec<EncoderStage>,
    /// Ordered deepest first: `decoder[0]` fuses stage 5 with stage 4.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv2d,
}

/// Stages (1-based) that carry a token-memory block.
fn has_mstm(stage: usize) -> bool {
    stage >= 4
}

impl TmUnet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels;
        let c = ch.channels;
        let mut encoder = Vec::with_capacity(STAGES);
        for k in 0..STAGES {
            let cin = if k == 0 { ch.input_channels } else { c[k - 1] };
            let name = format!("enc{}", k + 1);
            encoder.push(EncoderStage {
                block: ConvBlock::new(store, &format!("{name}.block"), cin, c[k], rng),
                down: ConvBnRelu::new(
                    store,
                    &format!("{name}.down"),
                    c[k],
                    c[k],
                    3,
                    Conv2dSpec::new(2, 1, 1),
                    rng,
                ),
                mstm: if has_mstm(k + 1) {
                    Some(MstmBlock::new(
                        store,
                        &format!("{name}.mstm"),
                        c[k],
                        &cfg.mstm,
                        rng,
                    )?)
                } else {
                    None
                },
            });
        }
        let mut decoder = Vec::with_capacity(STAGES);
        for k in (0..STAGES).rev() {
            // Decoder stage k+1 lifts stage k+1 features to the resolution of stage k.
            let (skip, out) = if k == 0 {
                (ch.input_channels, c[0])
            } else {
                (c[k - 1], c[k - 1])
            };
            let cin = c[k] + skip;
            let name = format!("dec{}", k + 1);
            decoder.push(DecoderStage {
                block: ConvBlock::new(store, &format!("{name}.block"), cin, out, rng),
                mstm: if has_mstm(k + 1) {
                    Some(MstmBlock::new(
                        store,
                        &format!("{name}.mstm"),
                        out,
                        &cfg.mstm,
                        rng,
                    )?)
                } else {
                    None
                },
            });
        }
        let head = Conv2d::new(
            store,
            "head",
            c[0],
            ch.num_classes,
            1,
            Conv2dSpec::default(),
            true,
            rng,
        );
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let div = 1usize << STAGES;
        match *shape {
            [_, c, h, w] if c == self.cfg.channels.input_channels => {
                if h % div != 0 || w % div != 0 {
                    return arg_err("tmunet", format!("input {h}x{w} is not divisible by {div}"));
                }
                Ok(())
            }
            _ => shape_err(
                "tmunet",
                format!(
                    "expected [B, {}, H, W], got {shape:?}",
                    self.cfg.channels.input_channels
                ),
            ),
        }
    }

    /// Feature maps of the five stages, finest first.
    pub fn encoder_forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Vec<Var>> {
        self.check_input(s.tape.shape(x))?;
        let mut feats = Vec::with_capacity(STAGES);
        let mut y = x;
        for st in &self.encoder {
            y = st.block.forward(s, y)?;
            y = st.down.forward(s, y)?;
            if let Some(m) = &st.mstm {
                y = m.forward(s, y)?;
            }
            feats.push(y);
        }
        Ok(feats)
    }

    /// Logits at input resolution from the encoder features and the input.
    pub fn decoder_forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        feats: &[Var],
        input: Var,
    ) -> Result<Var> {
        if feats.len() != STAGES {
            return shape_err(
                "tmunet",
                format!("expected {STAGES} feature maps, got {}", feats.len()),
            );
        }
        let mut y = feats[STAGES - 1];
        for (i, st) in self.decoder.iter().enumerate() {
            let k = STAGES - 1 - i;
            let skip = if k == 0 { input } else { feats[k - 1] };
            let (h, w) = {
                let sh = s.tape.shape(skip);
                (sh[2], sh[3])
            };
            let up = s.tape.bilinear_upsample2d(y, h, w)?;
            y = s.tape.concat(&[up, skip], 1)?;
            y = st.block.forward(s, y)?;
            if let Some(m) = &st.mstm {
                y = m.forward(s, y)?;
            }
        }
        self.head.forward(s, y)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let feats = self.encoder_forward(s, x)?;
        self.decoder_forward(s, &feats, x)
    }
}

/// Number of learnable scalars in `store`.
pub fn count_params<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.count_trainable()
}
