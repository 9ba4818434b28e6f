//! Complete simulators: a conditioning source feeding a trajectory decoder.
//!
//! Every variant conditions its decoder on a vector `r` of width
//! `encoder.latent_dim`:
//!
//! | conditioning | `r`                                  | parameter head |
//! |--------------|--------------------------------------|----------------|
//! | `none`       | zeros                                | no             |
//! | `meta`       | encoder output on the context set    | yes            |
//! | `oracle`     | embedding of the normalized true ρ   | no             |
//! | `two-stage`  | embedding of the predicted ρ̂         | yes            |

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::autoregressive::{ArConfig, AutoregressiveDecoder};
use crate::decoder::{DecoderConfig, MangoDecoder};
use crate::encoder::{trial_channels, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::nn::{Bound, Mlp, MlpConfig, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::trial::{Trial, TrialInputs};

pub const ENCODER: &str = "enc";
pub const RHO_HEAD: &str = "rho_head";
pub const RHO_EMBED: &str = "rho_embed";
pub const DECODER: &str = "dec";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    None,
    Meta,
    Oracle,
    TwoStage,
}

impl Conditioning {
    pub const ALL: [Conditioning; 4] = [Conditioning::None, Conditioning::Meta, Conditioning::Oracle, Conditioning::TwoStage];

    pub fn uses_encoder(self) -> bool {
        matches!(self, Conditioning::Meta | Conditioning::TwoStage)
    }

    pub fn uses_rho_embedding(self) -> bool {
        matches!(self, Conditioning::Oracle | Conditioning::TwoStage)
    }

    pub fn name(self) -> &'static str {
        match self {
            Conditioning::None => "none",
            Conditioning::Meta => "meta",
            Conditioning::Oracle => "oracle",
            Conditioning::TwoStage => "two-stage",
        }
    }
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Conditioning::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown conditioning {s:?}; expected none, meta, oracle or two-stage")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    Mango,
    Autoregressive,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Mango => "mango",
            DecoderKind::Autoregressive => "autoregressive",
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mango" => Ok(DecoderKind::Mango),
            "autoregressive" | "ar" => Ok(DecoderKind::Autoregressive),
            _ => Err(Error::InvalidArgument(format!("unknown decoder {s:?}; expected mango or autoregressive"))),
        }
    }
}

/// Per-component min-max scaling of ρ to `[0, 1]` over the training range,
/// optionally in log space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoNormalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub log: bool,
}

impl RhoNormalizer {
    pub fn identity(dim: usize) -> Self {
        RhoNormalizer {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
            log: false,
        }
    }

    /// Fits the range of `rhos`, one vector per task.
    pub fn fit<'a>(rhos: impl IntoIterator<Item = &'a [f64]>, log: bool) -> Result<Self> {
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for rho in rhos {
            if lo.is_empty() {
                lo = rho.to_vec();
                hi = rho.to_vec();
            } else if rho.len() != lo.len() {
                return Err(Error::shape("RhoNormalizer::fit", format!("ρ of length {} vs {}", rho.len(), lo.len())));
            }
            for (i, &v) in rho.iter().enumerate() {
                if !v.is_finite() || (log && v <= 0.0) {
                    return Err(Error::InvalidArgument(format!("ρ component {v} cannot be normalized")));
                }
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        if lo.is_empty() {
            return Err(Error::InvalidArgument("no ρ values to fit".into()));
        }
        Ok(RhoNormalizer { lo, hi, log })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn warp(&self, v: f64) -> f64 {
        if self.log {
            v.ln()
        } else {
            v
        }
    }

    fn span(&self, i: usize) -> (f64, f64) {
        let (a, b) = (self.warp(self.lo[i]), self.warp(self.hi[i]));
        let w = b - a;
        (a, if w > 0.0 { w } else { 1.0 })
    }

    pub fn normalize(&self, rho: &[f64]) -> Result<Vec<f64>> {
        if rho.len() != self.dim() {
            return Err(Error::shape("normalize", format!("ρ of length {}, expected {}", rho.len(), self.dim())));
        }
        Ok(rho
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (a, w) = self.span(i);
                (self.warp(v) - a) / w
            })
            .collect())
    }

    pub fn denormalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::shape("denormalize", format!("{} values, expected {}", z.len(), self.dim())));
        }
        Ok(z
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (a, w) = self.span(i);
                let u = a + v * w;
                if self.log {
                    u.exp()
                } else {
                    u
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conditioning: Conditioning,
    pub decoder_kind: DecoderKind,
    pub d: usize,
    pub d_h: usize,
    pub rho_dim: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub autoregressive: ArConfig,
    /// Hidden width of the parameter head and the ρ embedding.
    pub head_hidden: usize,
    pub rho_norm: RhoNormalizer,
}

impl ModelConfig {
    /// Full-size widths: 128 channels, 15 blocks.
    pub fn full(conditioning: Conditioning, decoder_kind: DecoderKind, d: usize, d_h: usize, rho_norm: RhoNormalizer) -> Self {
        ModelConfig {
            conditioning,
            decoder_kind,
            d,
            d_h,
            rho_dim: rho_norm.dim(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            autoregressive: ArConfig::default(),
            head_hidden: 128,
            rho_norm,
        }
    }

    /// Width 64 with 5 blocks, sized for single-core CPU training.
    pub fn desk(conditioning: Conditioning, decoder_kind: DecoderKind, d: usize, d_h: usize, rho_norm: RhoNormalizer) -> Self {
        let mut c = Self::full(conditioning, decoder_kind, d, d_h, rho_norm);
        c.set_width(64, 5);
        c.encoder.latent_dim = 32;
        c
    }

    /// Sets the latent width and the number of blocks (message-passing
    /// layers for the autoregressive decoder) of every component.
    pub fn set_width(&mut self, width: usize, blocks: usize) {
        self.encoder.conv_channels = width;
        self.encoder.hidden = width;
        self.encoder.latent_dim = width;
        self.decoder.width = width;
        self.decoder.hidden = width;
        self.decoder.blocks = blocks;
        self.autoregressive.width = width;
        self.autoregressive.hidden = width;
        self.autoregressive.layers = blocks;
        self.head_hidden = width;
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    /// Short tag such as `meta/mango`.
    pub fn kind_tag(&self) -> String {
        format!("{}/{}", self.conditioning, self.decoder_kind)
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho_dim != self.rho_norm.dim() {
            return Err(Error::Config(format!(
                "rho_dim {} disagrees with normalizer width {}",
                self.rho_dim,
                self.rho_norm.dim()
            )));
        }
        if self.d == 0 || self.latent_dim() == 0 || self.head_hidden == 0 {
            return Err(Error::Config("d, latent_dim and head_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum TrajectoryDecoder {
    Mango(MangoDecoder),
    Autoregressive(AutoregressiveDecoder),
}

/// Layer definitions; the weights live in [`Model::params`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder: Option<Encoder>,
    pub rho_head: Option<Mlp>,
    pub rho_embed: Option<Mlp>,
    pub decoder: TrajectoryDecoder,
}

/// Conditioning vector and, when the model has a parameter head, the
/// normalized ρ prediction.
#[derive(Clone, Copy, Debug)]
pub struct Condition {
    pub r: Var,
    pub rho_hat: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cond = config.conditioning;
        let latent = config.latent_dim();
        let encoder = if cond.uses_encoder() {
            let channels = trial_channels(config.d, config.d_h);
            Some(Encoder::new(&mut params, &mut rng, ENCODER, config.encoder.clone(), channels)?)
        } else {
            None
        };
        let rho_head = if cond.uses_encoder() {
            let widths = [latent, config.head_hidden, config.rho_dim];
            Some(Mlp::new(&mut params, &mut rng, RHO_HEAD, MlpConfig::new(widths))?)
        } else {
            None
        };
        let rho_embed = if cond.uses_rho_embedding() {
            let widths = [config.rho_dim, config.head_hidden, latent];
            Some(Mlp::new(&mut params, &mut rng, RHO_EMBED, MlpConfig::new(widths))?)
        } else {
            None
        };
        let decoder = match config.decoder_kind {
            DecoderKind::Mango => TrajectoryDecoder::Mango(MangoDecoder::new(
                &mut params,
                &mut rng,
                DECODER,
                config.decoder.clone(),
                latent,
                config.d,
                config.d_h,
            )?),
            DecoderKind::Autoregressive => TrajectoryDecoder::Autoregressive(AutoregressiveDecoder::new(
                &mut params,
                &mut rng,
                DECODER,
                config.autoregressive.clone(),
                latent,
                config.d,
                config.d_h,
            )?),
        };
        Ok(Model {
            config,
            arch: Architecture {
                encoder,
                rho_head,
                rho_embed,
                decoder,
            },
            params,
        })
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Replaces all parameters, checking names and shapes.
    pub fn load_params(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Config(format!(
                "{} tensors supplied for a model with {} parameters",
                named.len(),
                self.params.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .params
                .find(&name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            if self.params.get(id).shape() != value.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("{name}: {:?} vs {:?}", value.shape(), self.params.get(id).shape()),
                ));
            }
            *self.params.get_mut(id) = value;
        }
        Ok(())
    }

    pub fn encoder(&self) -> Result<&Encoder> {
        self.arch
            .encoder
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} model has no encoder", self.config.conditioning)))
    }

    /// Encoder latent `r[d_r]` of a context set.
    pub fn encode(&self, tape: &mut Tape<T>, p: &Bound, context: &[Trial<T>]) -> Result<Var> {
        self.encoder()?.encode_context(tape, p, context)
    }

    /// Normalized ρ̂ from an encoder latent.
    pub fn predict_parameters(&self, tape: &mut Tape<T>, p: &Bound, r: Var) -> Result<Var> {
        let head = self
            .arch
            .rho_head
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} model has no parameter head", self.config.conditioning)))?;
        head.forward(tape, p, r)
    }

    fn embed_rho(&self, tape: &mut Tape<T>, p: &Bound, rho_norm: Var) -> Result<Var> {
        let embed = self.arch.rho_embed.as_ref().expect("ρ embedding exists for this conditioning");
        embed.forward(tape, p, rho_norm)
    }

    /// Builds the decoder's conditioning vector. `context` feeds the encoder
    /// and `rho` (raw, not normalized) the oracle embedding.
    pub fn condition(&self, tape: &mut Tape<T>, p: &Bound, context: &[Trial<T>], rho: Option<&[f64]>) -> Result<Condition> {
        match self.config.conditioning {
            Conditioning::None => Ok(Condition {
                r: tape.constant(Tensor::zeros(vec![self.config.latent_dim()])),
                rho_hat: None,
            }),
            Conditioning::Meta => {
                let r = self.encode(tape, p, context)?;
                let rho_hat = self.predict_parameters(tape, p, r)?;
                Ok(Condition { r, rho_hat: Some(rho_hat) })
            }
            Conditioning::Oracle => {
                let rho = rho.ok_or_else(|| Error::InvalidArgument("oracle model needs the true ρ".into()))?;
                let z = self.config.rho_norm.normalize(rho)?;
                let z = tape.constant(Tensor::from_f64(vec![z.len()], &z)?);
                let r = self.embed_rho(tape, p, z)?;
                Ok(Condition { r, rho_hat: None })
            }
            Conditioning::TwoStage => {
                let latent = self.encode(tape, p, context)?;
                let rho_hat = self.predict_parameters(tape, p, latent)?;
                let r = self.embed_rho(tape, p, rho_hat)?;
                Ok(Condition { r, rho_hat: Some(rho_hat) })
            }
        }
    }

    /// Differentiable full-trajectory decode; only for the MaNGO decoder.
    pub fn decode(&self, tape: &mut Tape<T>, p: &Bound, x: &TrialInputs<T>, r: Var, topo: &Topology) -> Result<Var> {
        match &self.arch.decoder {
            TrajectoryDecoder::Mango(dec) => dec.decode(tape, p, x, r, topo),
            TrajectoryDecoder::Autoregressive(_) => Err(Error::InvalidArgument(
                "the autoregressive decoder has no differentiable full-trajectory decode; use rollout".into(),
            )),
        }
    }

    /// Trajectory prediction `[T, N, d]` without gradients.
    pub fn predict(&self, context: &[Trial<T>], x: &TrialInputs<T>, rho: Option<&[f64]>, topo: &Topology) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let p = self.params.bind_frozen(&mut tape);
        let cond = self.condition(&mut tape, &p, context, rho)?;
        match &self.arch.decoder {
            TrajectoryDecoder::Mango(dec) => {
                let y = dec.decode(&mut tape, &p, x, cond.r, topo)?;
                let out = tape.value(y).clone();
                if !out.is_finite() {
                    return Err(Error::NonFinite("decoder produced non-finite positions".into()));
                }
                Ok(out)
            }
            TrajectoryDecoder::Autoregressive(dec) => dec.rollout(&mut tape, &p, cond.r, x, topo),
        }
    }

    /// Conditioning vector `r` without gradients.
    pub fn condition_vector(&self, context: &[Trial<T>], rho: Option<&[f64]>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let p = self.params.bind_frozen(&mut tape);
        let cond = self.condition(&mut tape, &p, context, rho)?;
        Ok(tape.value(cond.r).clone())
    }

    /// Trajectory prediction from a precomputed conditioning vector.
    pub fn decode_with(&self, r: &Tensor<T>, x: &TrialInputs<T>, topo: &Topology) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let p = self.params.bind_frozen(&mut tape);
        let r = tape.constant(r.clone());
        match &self.arch.decoder {
            TrajectoryDecoder::Mango(dec) => {
                let y = dec.decode(&mut tape, &p, x, r, topo)?;
                Ok(tape.value(y).clone())
            }
            TrajectoryDecoder::Autoregressive(dec) => dec.rollout(&mut tape, &p, r, x, topo),
        }
    }

    /// Denormalized ρ̂ for a context set.
    pub fn predict_rho(&self, context: &[Trial<T>]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let p = self.params.bind_frozen(&mut tape);
        let r = self.encode(&mut tape, &p, context)?;
        let z = self.predict_parameters(&mut tape, &p, r)?;
        self.config.rho_norm.denormalize(&tape.value(z).to_f64_vec())
    }

    /// Encoder latent for a context set.
    pub fn latent(&self, context: &[Trial<T>]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let p = self.params.bind_frozen(&mut tape);
        let r = self.encode(&mut tape, &p, context)?;
        Ok(tape.value(r).to_f64_vec())
    }
}
