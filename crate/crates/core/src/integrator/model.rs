//! Full predictor: DAM, encoders, recurrent integration, gating and output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::alstm::{alstm_run, AlstmParams};
use super::encoder::{encode_modality, EncoderParams};
use super::gmu::{gmu_fuse, GmuParams};
use crate::dam::{direct_stream, inverted_stream, DamParams};
use crate::datamodel::{MapKind, Modality, PriorityMap};
use crate::error::{Error, Result};
use crate::numeric::param::conv_kernel;
use crate::numeric::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One recurrence per modality, gated fusion of the final hidden states.
    Argmu,
    /// Channel concatenation, a single recurrence, then gating.
    Largmu,
}

impl Variant {
    pub fn default_context(self) -> usize {
        match self {
            Variant::Argmu => 8,
            Variant::Largmu => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Argmu => "argmu",
            Variant::Largmu => "largmu",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmu" => Ok(Variant::Argmu),
            "largmu" => Ok(Variant::Largmu),
            _ => Err(Error::Config(format!("unknown variant '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Context size `T′`; the variant's default when absent.
    pub context: Option<usize>,
    pub height: usize,
    pub width: usize,
    /// Excitation reduction ratio.
    pub gamma: usize,
    /// Social cues fed to the model; the fixation history is always appended.
    pub cues: Vec<Modality>,
    pub encoder_channels: (usize, usize),
    pub hidden: usize,
    pub dam_head_channels: usize,
    /// LARGMU only: gate the hidden state as one group per modality instead
    /// of a single gated-tanh path.
    pub gmu_split: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Argmu,
            context: None,
            height: 24,
            width: 24,
            gamma: 4,
            cues: Modality::ALL.to_vec(),
            encoder_channels: (16, 32),
            hidden: 32,
            dam_head_channels: 32,
            gmu_split: false,
        }
    }
}

impl ModelConfig {
    pub fn context(&self) -> usize {
        self.context.unwrap_or_else(|| self.variant.default_context())
    }

    /// Modalities including the history: `C′`.
    pub fn channels(&self) -> usize {
        self.cues.len() + 1
    }

    /// Channel labels in input order.
    pub fn channel_names(&self) -> Vec<String> {
        self.cues.iter().map(|m| m.name().to_owned()).chain(["history".to_owned()]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.context() == 0 {
            return Err(Error::Config("context size must be >= 1".into()));
        }
        if self.height < 2 || self.width < 2 || self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!("resolution {}x{} must be even and >= 2", self.height, self.width)));
        }
        if !self.cues.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("cues must be distinct and in saliency, gaze, expression order".into()));
        }
        if self.encoder_channels.0 == 0 || self.encoder_channels.1 == 0 || self.hidden == 0 || self.dam_head_channels == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.gmu_split && self.hidden % self.channels() != 0 {
            return Err(Error::Config(format!(
                "split gating needs hidden width {} divisible by {} modalities",
                self.hidden,
                self.channels()
            )));
        }
        crate::dam::reduced_dim(self.channels(), self.gamma)?;
        Ok(())
    }
}

/// Cue window plus aligned fixation history for one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `[T′, K, 1, H, W]`.
    pub cues: Tensor,
    /// `[T′, 1, H, W]`.
    pub history: Tensor,
}

impl ModelInput {
    /// Per-timestep `[C′, H, W]` stacks: cues first, history last.
    pub fn channel_stacks(&self) -> Result<Vec<Tensor>> {
        let s = self.cues.shape();
        let hs = self.history.shape();
        if s.len() != 5 || hs.len() != 4 || hs[0] != s[0] || hs[1] != 1 || hs[2..] != s[3..] || s[2] != 1 {
            return Err(Error::shape("model_input", "cue/history layout", format!("[T, K, 1, H, W] and [T, 1, H, W], got {s:?}"), format!("{hs:?}")));
        }
        let (t, k, h, w) = (s[0], s[1], s[3], s[4]);
        let plane = h * w;
        Ok((0..t)
            .map(|i| {
                let mut data = Vec::with_capacity((k + 1) * plane);
                data.extend_from_slice(&self.cues.data()[i * k * plane..(i + 1) * k * plane]);
                data.extend_from_slice(&self.history.data()[i * plane..(i + 1) * plane]);
                Tensor::new(&[k + 1, h, w], data).expect("stack shape")
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
enum Integration {
    Argmu { alstms: Vec<AlstmParams>, gmu: GmuParams },
    Largmu { alstm: AlstmParams, gmu: GmuParams, groups: usize },
}

/// Parameter handles and wiring; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    pub dam: DamParams,
    pub encoders: Vec<EncoderParams>,
    integration: Integration,
    pub head: (ParamId, ParamId),
}

pub struct TrainForward {
    /// Sigmoid map `[1, H, W]`.
    pub pred: Var,
    /// Cross-entropy of the inverted stream.
    pub dam_loss: Var,
}

impl Network {
    pub fn init(config: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cp = config.channels();
        let t = config.context();
        let dam = DamParams::init(store, cp, config.gamma, t, config.dam_head_channels, &mut rng)?;
        let names = config.channel_names();
        let encoders = names
            .iter()
            .map(|n| EncoderParams::init(store, &format!("enc.{n}"), config.encoder_channels, &mut rng))
            .collect::<Result<_>>()?;
        let (e2, hd) = (config.encoder_channels.1, config.hidden);
        let (integration, head_in) = match config.variant {
            Variant::Argmu => {
                let alstms = names
                    .iter()
                    .map(|n| AlstmParams::init(store, &format!("alstm.{n}"), e2, hd, &mut rng))
                    .collect::<Result<_>>()?;
                let gmu = GmuParams::init(store, "gmu", cp, hd, hd, &mut rng)?;
                (Integration::Argmu { alstms, gmu }, hd)
            }
            Variant::Largmu => {
                let alstm = AlstmParams::init(store, "alstm", e2 * cp, hd, &mut rng)?;
                let groups = if config.gmu_split { cp } else { 1 };
                let width = hd / groups;
                let gmu = GmuParams::init(store, "gmu", groups, width, width, &mut rng)?;
                (Integration::Largmu { alstm, gmu, groups }, width)
            }
        };
        let g = ParamGroup::Integration;
        let head = (
            store.add("head.k", conv_kernel(1, head_in, 1, &mut rng), g)?,
            store.add("head.b", Tensor::zeros(&[1]), g)?,
        );
        Ok(Self {
            config: config.clone(),
            dam,
            encoders,
            integration,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, input: &ModelInput) -> Result<Vec<Tensor>> {
        let stacks = input.channel_stacks()?;
        let c = &self.config;
        let expect = [c.context(), c.channels(), c.height, c.width];
        let got = [stacks.len(), stacks[0].shape()[0], stacks[0].shape()[1], stacks[0].shape()[2]];
        if expect != got {
            return Err(Error::shape("model", "[T′, C′, H, W]", format!("{expect:?}"), format!("{got:?}")));
        }
        Ok(stacks)
    }

    /// Records the prediction path for per-timestep modality stacks `r_seq`.
    pub fn forward_stacks(&self, g: &mut Graph, store: &ParamStore, r_seq: &[Var]) -> Result<Var> {
        let weighted = direct_stream(g, store, &self.dam, r_seq)?;
        let cp = self.config.channels();
        let mut streams = Vec::with_capacity(cp);
        for (k, enc) in self.encoders.iter().enumerate() {
            let seq: Vec<Var> = weighted.iter().map(|&r| g.slice(r, k, 1)).collect::<Result<_>>()?;
            streams.push(encode_modality(g, store, enc, &seq)?);
        }
        let fused = match &self.integration {
            Integration::Argmu { alstms, gmu } => {
                let finals: Vec<Var> = alstms
                    .iter()
                    .zip(&streams)
                    .map(|(p, seq)| alstm_run(g, store, p, seq))
                    .collect::<Result<_>>()?;
                gmu_fuse(g, store, gmu, &finals)?
            }
            Integration::Largmu { alstm, gmu, groups } => {
                let seq: Vec<Var> = (0..r_seq.len())
                    .map(|t| {
                        let parts: Vec<Var> = streams.iter().map(|s| s[t]).collect();
                        g.concat(&parts)
                    })
                    .collect::<Result<_>>()?;
                let h = alstm_run(g, store, alstm, &seq)?;
                let width = self.config.hidden / groups;
                let parts: Vec<Var> = (0..*groups).map(|k| g.slice(h, k * width, width)).collect::<Result<_>>()?;
                gmu_fuse(g, store, gmu, &parts)?
            }
        };
        let (k, b) = (g.param(store, self.head.0)?, g.param(store, self.head.1)?);
        let out = g.conv2d(fused, k, Some(b), 0)?;
        g.sigmoid(out)
    }

    /// Prediction path only.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &ModelInput) -> Result<Var> {
        let stacks = self.check_input(input)?;
        let r: Vec<Var> = stacks.into_iter().map(|t| g.constant(t)).collect::<Result<_>>()?;
        self.forward_stacks(g, store, &r)
    }

    /// Prediction plus the inverted-stream loss against `dam_targets`
    /// (`[T′, 1, H/2, W/2]` densities).
    pub fn forward_train(&self, g: &mut Graph, store: &ParamStore, input: &ModelInput, dam_targets: &Tensor) -> Result<TrainForward> {
        let stacks = self.check_input(input)?;
        let r: Vec<Var> = stacks.into_iter().map(|t| g.constant(t)).collect::<Result<_>>()?;
        let pred = self.forward_stacks(g, store, &r)?;
        let inv = inverted_stream(g, store, &self.dam, &r, Some(dam_targets))?;
        Ok(TrainForward {
            pred,
            dam_loss: inv.loss.expect("targets given"),
        })
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::init(config, &mut store, seed)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn predict(&self, input: &ModelInput) -> Result<PriorityMap> {
        let mut g = Graph::new();
        let out = self.net.forward(&mut g, &self.store, input)?;
        PriorityMap::new(g.value(out).clone(), MapKind::Prediction)
    }
}

/// Where a prediction is made. Learned models ignore it; oracle stubs use it
/// to look up ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Query {
    pub video: usize,
    pub frame: usize,
    pub observer: crate::datamodel::ObserverId,
}

/// Anything that turns a model input into a priority map.
pub trait Predictor {
    fn context(&self) -> usize;
    fn cues(&self) -> &[Modality];
    fn predict(&self, input: &ModelInput, query: &Query) -> Result<PriorityMap>;
}

impl Predictor for Model {
    fn context(&self) -> usize {
        self.config().context()
    }

    fn cues(&self) -> &[Modality] {
        &self.config().cues
    }

    fn predict(&self, input: &ModelInput, _query: &Query) -> Result<PriorityMap> {
        Model::predict(self, input)
    }
}
