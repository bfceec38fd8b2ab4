//! End-to-end network: per-modality frame encoders, the bidirectional SSM
//! block, cross-modal interaction, and the expert mixture head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{ModalityMode, ModelConfig, RGB_CHANNELS};
use crate::encoder::{EncoderConfig, FrameEncoder};
use crate::error::{Error, Result};
use crate::mamba::McoMamba;
use crate::mcib::Mcib;
use crate::metrics::Condition;
use crate::moe::{Dropout, GateSelection, Moe, Routing};
use crate::params::{Binder, Linear, ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One modality's input: raw frames, or an already encoded `[M, E]` sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum Stream<T> {
    Frames(Vec<Tensor<T>>),
    Features(Tensor<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// RGB frames `[H, W, 3]`.
    pub rgb: Stream<T>,
    /// Voxel grids `[H, W, B]`.
    pub events: Stream<T>,
    pub label: usize,
    pub condition: Condition,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Moe(Moe),
    /// Mean-pool then linear.
    Linear(Linear),
}

/// Per-pass switches.
#[derive(Default)]
pub struct PassOptions<'r> {
    pub routing: Routing,
    /// Training-mode dropout; `None` evaluates deterministically.
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
}

pub struct ForwardOutput<'t, T: Scalar> {
    /// `[J]`.
    pub logits: Var<'t, T>,
    pub selection: Option<GateSelection<T>>,
    pub alpha: Option<T>,
    pub experts_evaluated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub rgb_encoder: FrameEncoder,
    pub event_encoder: FrameEncoder,
    pub mamba: Option<McoMamba>,
    pub interaction: Option<Mcib>,
    pub head: Head,
}

impl Model {
    /// Builds the network and its freshly initialized parameters.
    ///
    /// Parameters are rounded to `f32` so that checkpoints store them
    /// exactly.
    pub fn init<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            Self::build(&mut b, config)?
        };
        round_to_storage(&mut store);
        Ok((model, store))
    }

    fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, config: ModelConfig) -> Result<Self> {
        let enc = |in_channels: usize| EncoderConfig {
            in_channels,
            conv_channels: config.conv_channels.clone(),
            embed_dim: config.embed_dim,
            tokens_per_frame: config.tokens_per_frame,
            activation: true,
        };
        let rgb_encoder = FrameEncoder::new(&mut b.scope("rgb_encoder"), enc(RGB_CHANNELS))?;
        let event_encoder = FrameEncoder::new(&mut b.scope("event_encoder"), enc(config.bins))?;
        let ab = config.ablations;
        let mamba = if ab.no_mamba {
            None
        } else {
            Some(McoMamba::new(&mut b.scope("ssm"), config.mamba(), false)?)
        };
        let interaction = if ab.no_interaction {
            None
        } else {
            Some(Mcib::new(
                &mut b.scope("interaction"),
                config.embed_dim,
                config.heads,
                config.gate,
            )?)
        };
        let head = if ab.no_moe {
            Head::Linear(b.linear("head", config.embed_dim, config.classes, true)?)
        } else {
            Head::Moe(Moe::new(&mut b.scope("moe"), config.moe())?)
        };
        Ok(Self {
            config,
            rgb_encoder,
            event_encoder,
            mamba,
            interaction,
            head,
        })
    }

    /// Rebuilds the structure for `config` without drawing random values
    /// that matter; used when loading checkpoints.
    pub fn skeleton<T: Scalar>(config: ModelConfig) -> Result<(Self, ParamStore<T>)> {
        Self::init(config, 0)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn encode<'t, T: Scalar>(
        &self,
        b: &Binder<'t, '_, T>,
        encoder: &FrameEncoder,
        stream: &Stream<T>,
        what: &str,
    ) -> Result<Var<'t, T>> {
        let m = self.config.seq_len();
        let e = self.config.embed_dim;
        let tokens = match stream {
            Stream::Frames(frames) => {
                if frames.len() != self.config.frames {
                    return Err(Error::contract(format!(
                        "{what}: expected {} frames, got {}",
                        self.config.frames,
                        frames.len()
                    )));
                }
                let vars: Vec<_> = frames.iter().map(|f| b.constant(f.clone())).collect();
                encoder.encode_sequence(b, &vars)?
            }
            Stream::Features(t) => b.constant(t.clone()),
        };
        if tokens.shape() != [m, e] {
            return Err(Error::contract(format!(
                "{what}: expected a [{m}, {e}] token sequence, got {:?}",
                tokens.shape()
            )));
        }
        Ok(tokens)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        b: &Binder<'t, '_, T>,
        sample: &Sample<T>,
        opts: PassOptions<'_>,
    ) -> Result<ForwardOutput<'t, T>> {
        let zeros = || {
            b.constant(Tensor::zeros([
                self.config.seq_len(),
                self.config.embed_dim,
            ]))
        };
        let rgb = match self.config.modality {
            ModalityMode::EventOnly => zeros(),
            _ => self.encode(b, &self.rgb_encoder, &sample.rgb, "rgb")?,
        };
        let event = match self.config.modality {
            ModalityMode::RgbOnly => zeros(),
            _ => self.encode(b, &self.event_encoder, &sample.events, "events")?,
        };
        let (y_rgb, y_event) = match &self.mamba {
            Some(m) => m.forward(b, rgb, event)?,
            None => (rgb, event),
        };
        let (h, alpha) = match &self.interaction {
            Some(i) => {
                let f = i.forward(b, y_rgb, y_event)?;
                (f.h, Some(f.alpha_value()))
            }
            None => (y_rgb.add(y_event)?, None),
        };
        match &self.head {
            Head::Linear(lin) => {
                let e = self.config.embed_dim;
                let pooled = h.mean_rows()?.reshape([1, e])?;
                let logits = lin.forward(b, pooled)?.reshape([self.config.classes])?;
                Ok(ForwardOutput {
                    logits,
                    selection: None,
                    alpha,
                    experts_evaluated: 0,
                })
            }
            Head::Moe(moe) => {
                let dropout = opts.dropout_rng.map(|rng| Dropout {
                    rate: self.config.dropout,
                    rng,
                });
                let out = moe.forward(b, h, &opts.routing, dropout)?;
                Ok(ForwardOutput {
                    logits: out.logits,
                    selection: Some(out.selection),
                    alpha,
                    experts_evaluated: out.evaluated,
                })
            }
        }
    }

    /// Evaluation-mode logits.
    pub fn logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sample: &Sample<T>,
    ) -> Result<Tensor<T>> {
        Ok(self.evaluate(store, sample)?.0)
    }

    /// Evaluation-mode logits and the router's choice.
    pub fn evaluate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sample: &Sample<T>,
    ) -> Result<(Tensor<T>, Option<GateSelection<T>>)> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, store);
        let out = self.forward(&b, sample, PassOptions::default())?;
        Ok(((*out.logits.value()).clone(), out.selection))
    }

    /// Mean cross-entropy of a single sample, on the tape.
    pub fn loss<'t, T: Scalar>(
        &self,
        b: &Binder<'t, '_, T>,
        sample: &Sample<T>,
        opts: PassOptions<'_>,
    ) -> Result<Var<'t, T>> {
        let out = self.forward(b, sample, opts)?;
        cross_entropy(out.logits, sample.label)
    }
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, label: usize) -> Result<Var<'t, T>> {
    let n = logits.shape()[0];
    if label >= n {
        return Err(Error::data(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    let ls = logits.reshape([1, n])?.log_softmax().reshape([n])?;
    Ok(ls.gather(&[label])?.neg().sum())
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best
}

/// Rounds every parameter to the nearest `f32`.
pub fn round_to_storage<T: Scalar>(store: &mut ParamStore<T>) {
    for t in store.values_mut() {
        for v in t.data_mut() {
            *v = T::from_storage(v.to_storage());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Ablations, TrainConfig};
    use crate::gradcheck::{check_against, Coords, DEFAULT_STEP};
    use rand::Rng;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.embed_dim = 8;
        c.inner_dim = 6;
        c.state_dim = 3;
        c.height = 8;
        c.width = 8;
        c.conv_channels = vec![4];
        c.heads = 2;
        c.layout = "DAF".parse().unwrap();
        c.depth = 1;
        c
    }

    fn sample(cfg: &ModelConfig, seed: u64) -> Sample<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frame =
            |c: usize| Tensor::from_fn([cfg.height, cfg.width, c], |_| rng.gen_range(-1.0..1.0));
        Sample {
            rgb: Stream::Frames((0..cfg.frames).map(|_| frame(3)).collect()),
            events: Stream::Frames((0..cfg.frames).map(|_| frame(cfg.bins)).collect()),
            label: 2,
            condition: Condition::Normal,
        }
    }

    #[test]
    fn param_count_matches_closed_form_for_every_variant() {
        let variants = [
            Ablations::default(),
            Ablations {
                no_mamba: true,
                ..Default::default()
            },
            Ablations {
                no_joint: true,
                ..Default::default()
            },
            Ablations {
                no_interaction: true,
                ..Default::default()
            },
            Ablations {
                no_moe: true,
                ..Default::default()
            },
        ];
        for ab in variants {
            let mut c = small();
            c.ablations = ab;
            let (_, store) = Model::init::<f64>(c.clone(), 1).unwrap();
            assert_eq!(store.scalar_count(), c.param_count(), "{ab:?}");
        }
        let desk = ModelConfig::desk();
        let (_, store) = Model::init::<f32>(desk.clone(), 1).unwrap();
        assert_eq!(store.scalar_count(), desk.param_count());
        assert_eq!(TrainConfig::desk().model, desk);
    }

    #[test]
    fn deterministic_and_shaped() {
        let c = small();
        let (m1, s1) = Model::init::<f64>(c.clone(), 5).unwrap();
        let (m2, s2) = Model::init::<f64>(c.clone(), 5).unwrap();
        let x = sample(&c, 1);
        let a = m1.logits(&s1, &x).unwrap();
        let b = m2.logits(&s2, &x).unwrap();
        assert_eq!(a.shape(), &[7]);
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn single_modality_ignores_the_other_stream() {
        let mut c = small();
        c.modality = ModalityMode::RgbOnly;
        let (m, s) = Model::init::<f64>(c.clone(), 2).unwrap();
        let x = sample(&c, 3);
        let mut y = x.clone();
        y.events = Stream::Frames(vec![]);
        assert_eq!(m.logits(&s, &x).unwrap(), m.logits(&s, &y).unwrap());
        assert_eq!(m.logits(&s, &x).unwrap().shape(), &[7]);
    }

    #[test]
    fn features_bypass_the_encoder() {
        let c = small();
        let (m, s) = Model::init::<f64>(c.clone(), 2).unwrap();
        let x = sample(&c, 4);
        let Stream::Frames(frames) = &x.rgb else {
            unreachable!()
        };
        let enc = m
            .rgb_encoder
            .encode_frames(&s, frames, crate::encoder::Modality::Rgb)
            .unwrap();
        let mut y = x.clone();
        y.rgb = Stream::Features(enc.tokens);
        assert!(
            m.logits(&s, &x)
                .unwrap()
                .max_abs_diff(&m.logits(&s, &y).unwrap())
                < 1e-14
        );
        y.rgb = Stream::Features(Tensor::zeros([3, 8]));
        assert!(matches!(m.logits(&s, &y), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_j() {
        let tape = Tape::<f64>::new();
        let l = cross_entropy(tape.constant(Tensor::zeros([7])), 3).unwrap();
        assert!((l.value().data()[0] - 7f64.ln()).abs() < 1e-14);
        assert!(cross_entropy(tape.constant(Tensor::zeros([7])), 7).is_err());
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        assert_eq!(
            argmax(&Tensor::<f64>::from_f64([4], &[1.0, 3.0, 3.0, 0.0]).unwrap()),
            1
        );
    }

    #[test]
    fn end_to_end_gradient_on_a_parameter_subsample() {
        let c = small();
        let (m, store) = Model::init::<f64>(c.clone(), 7).unwrap();
        let x = sample(&c, 8);
        let routing = Routing::Fixed(m.evaluate(&store, &x).unwrap().1.unwrap().indices);
        let tape = Tape::new();
        let b = Binder::trainable(&tape, &store);
        let loss = m
            .loss(
                &b,
                &x,
                PassOptions {
                    routing: routing.clone(),
                    dropout_rng: None,
                },
            )
            .unwrap();
        let grads = b.collect_grads(&tape.backward(loss).unwrap());
        let point = store.values().to_vec();
        let r = check_against(
            |p: &[Tensor<f64>]| {
                let mut s = store.clone();
                s.values_mut().clone_from_slice(p);
                let tape = Tape::new();
                let b = Binder::frozen(&tape, &s);
                let l = m.loss(
                    &b,
                    &x,
                    PassOptions {
                        routing: routing.clone(),
                        dropout_rng: None,
                    },
                )?;
                Ok(l.value().data()[0])
            },
            &point,
            &grads,
            Coords::Fraction {
                fraction: 0.05,
                seed: 9,
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.coords_checked > 10);
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }
}
