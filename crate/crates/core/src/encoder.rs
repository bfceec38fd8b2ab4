//! Per-frame feature encoder producing the token sequences fed to the SSM.
//!
//! Each `[H, W, C]` tensor (an RGB frame or a voxel grid) passes through a
//! stack of bias-free strided 3x3 convolutions with SiLU, is average-pooled
//! into `T` horizontal strips, and each strip is projected to `E` features.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, Linear, ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Tensor};

pub const MIN_SPATIAL: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Event,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Event => "event",
        }
    }
}

/// `M x E` token sequence of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<T> {
    pub tokens: Tensor<T>,
    pub modality: Modality,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(tokens: Tensor<T>, modality: Modality) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::shape("feature_sequence", tokens.shape(), &[]));
        }
        tokens.check_finite(&format!("{} features", modality.as_str()))?;
        Ok(Self { tokens, modality })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of each stride-2 convolution.
    pub conv_channels: Vec<usize>,
    pub embed_dim: usize,
    pub tokens_per_frame: usize,
    /// SiLU after each convolution; off gives a linear map (used in tests).
    pub activation: bool,
}

impl EncoderConfig {
    pub fn new(in_channels: usize, embed_dim: usize) -> Self {
        Self {
            in_channels,
            conv_channels: vec![8, 16],
            embed_dim,
            tokens_per_frame: 1,
            activation: true,
        }
    }
}

const CONV: Conv2dSpec = Conv2dSpec { stride: 2, pad: 1 };
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameEncoder {
    config: EncoderConfig,
    convs: Vec<ParamId>,
    proj: Linear,
}

impl FrameEncoder {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, config: EncoderConfig) -> Result<Self> {
        if config.in_channels == 0 || config.embed_dim == 0 || config.tokens_per_frame == 0 {
            return Err(Error::config("encoder dimensions must be at least 1"));
        }
        let mut convs = Vec::new();
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.conv_channels.iter().enumerate() {
            let bound = 1.0 / ((KERNEL * KERNEL * c_in) as f64).sqrt();
            convs.push(b.uniform(&format!("conv{i}"), &[KERNEL, KERNEL, c_in, c_out], bound)?);
            c_in = c_out;
        }
        let proj = b.linear("proj", c_in, config.embed_dim, true)?;
        Ok(Self {
            config,
            convs,
            proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn proj(&self) -> &Linear {
        &self.proj
    }

    pub fn param_count(&self) -> usize {
        let mut c_in = self.config.in_channels;
        let mut n = 0;
        for &c in &self.config.conv_channels {
            n += KERNEL * KERNEL * c_in * c;
            c_in = c;
        }
        n + self.proj.param_count()
    }

    /// `[H, W, C] -> [T, E]`.
    pub fn encode_frame<'t, T: Scalar>(
        &self,
        b: &Binder<'t, '_, T>,
        frame: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let shape = frame.shape();
        if shape.len() != 3 {
            return Err(Error::shape("encode_frame", &shape, &[]));
        }
        if shape[2] != self.config.in_channels {
            return Err(Error::config(format!(
                "encoder expects {} channels, frame has {}",
                self.config.in_channels, shape[2]
            )));
        }
        if shape[0] < MIN_SPATIAL || shape[1] < MIN_SPATIAL {
            return Err(Error::contract(format!(
                "frame spatial dims must be at least {MIN_SPATIAL}, got {}x{}",
                shape[0], shape[1]
            )));
        }
        let mut x = frame;
        for &k in &self.convs {
            x = x.conv2d(b.var(k), CONV)?;
            if self.config.activation {
                x = x.silu();
            }
        }
        let fs = x.shape();
        let (h, w, c) = (fs[0], fs[1], fs[2]);
        let t = self.config.tokens_per_frame;
        if h < t {
            return Err(Error::config(format!(
                "feature map height {h} cannot hold {t} tokens per frame"
            )));
        }
        let flat = x.reshape([h * w, c])?;
        let mut strips = Vec::with_capacity(t);
        for i in 0..t {
            let (r0, r1) = (i * h / t, (i + 1) * h / t);
            let pooled = flat.rows(r0 * w, (r1 - r0) * w)?.mean_rows()?;
            strips.push(pooled.reshape([1, c])?);
        }
        let pooled = if t == 1 {
            strips[0]
        } else {
            Var::concat_rows(&strips)?
        };
        self.proj.forward(b, pooled)
    }

    /// Encodes `m` frames and stacks their tokens: `[m * T, E]`.
    pub fn encode_sequence<'t, T: Scalar>(
        &self,
        b: &Binder<'t, '_, T>,
        frames: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        let first = frames
            .first()
            .ok_or_else(|| Error::contract("encode_sequence needs at least one frame"))?;
        let shape = first.shape();
        let mut tokens = Vec::with_capacity(frames.len());
        for f in frames {
            if f.shape() != shape {
                return Err(Error::shape("encode_sequence", &shape, &f.shape()));
            }
            tokens.push(self.encode_frame(b, *f)?);
        }
        if tokens.len() == 1 {
            Ok(tokens[0])
        } else {
            Var::concat_rows(&tokens)
        }
    }

    /// Value-level encoding of a frame list into a [`FeatureSequence`].
    pub fn encode_frames<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        frames: &[Tensor<T>],
        modality: Modality,
    ) -> Result<FeatureSequence<T>> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, store);
        let vars: Vec<_> = frames.iter().map(|f| tape.constant(f.clone())).collect();
        let out = self.encode_sequence(&b, &vars)?;
        FeatureSequence::new((*out.value()).clone(), modality)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(config: EncoderConfig, seed: u64) -> (ParamStore<f64>, FrameEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = FrameEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng), config).unwrap();
        (store, enc)
    }

    fn frame(seed: u64, h: usize, w: usize, c: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([h, w, c], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_frame_with_zero_bias_gives_zero_token() {
        let (mut store, enc) = build(EncoderConfig::new(3, 16), 1);
        *store.get_mut(enc.proj().bias.unwrap()) = Tensor::zeros([16]);
        let out = enc
            .encode_frames(&store, &[Tensor::zeros([8, 8, 3])], Modality::Rgb)
            .unwrap();
        assert_eq!(out.tokens, Tensor::zeros([1, 16]));
    }

    #[test]
    fn deterministic_across_builds() {
        let x = frame(3, 8, 8, 3);
        let (s1, e1) = build(EncoderConfig::new(3, 16), 42);
        let (s2, e2) = build(EncoderConfig::new(3, 16), 42);
        let a = e1
            .encode_frames(&s1, std::slice::from_ref(&x), Modality::Rgb)
            .unwrap();
        let b = e2.encode_frames(&s2, &[x], Modality::Rgb).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.tokens), bits(&b.tokens));
    }

    #[test]
    fn linear_configuration_is_homogeneous() {
        let mut cfg = EncoderConfig::new(2, 8);
        cfg.activation = false;
        let (mut store, enc) = build(cfg, 5);
        *store.get_mut(enc.proj().bias.unwrap()) = Tensor::zeros([8]);
        let x = frame(9, 10, 12, 2);
        let a = enc
            .encode_frames(&store, std::slice::from_ref(&x), Modality::Event)
            .unwrap();
        let b = enc
            .encode_frames(&store, &[x.scale(2.0)], Modality::Event)
            .unwrap();
        assert!(a.tokens.scale(2.0).max_abs_diff(&b.tokens) < 1e-12);
    }

    #[test]
    fn sequence_blocks_match_frames_and_permute() {
        let mut cfg = EncoderConfig::new(3, 8);
        cfg.tokens_per_frame = 2;
        let (store, enc) = build(cfg, 7);
        let frames = [frame(1, 8, 8, 3), frame(2, 8, 8, 3)];
        let seq = enc.encode_frames(&store, &frames, Modality::Rgb).unwrap();
        assert_eq!(seq.tokens.shape(), &[4, 8]);
        for (i, f) in frames.iter().enumerate() {
            let single = enc
                .encode_frames(&store, std::slice::from_ref(f), Modality::Rgb)
                .unwrap();
            assert_eq!(seq.tokens.rows(2 * i, 2).unwrap(), single.tokens);
        }
        let swapped = enc
            .encode_frames(
                &store,
                &[frames[1].clone(), frames[0].clone()],
                Modality::Rgb,
            )
            .unwrap();
        assert_eq!(
            swapped.tokens.rows(0, 2).unwrap(),
            seq.tokens.rows(2, 2).unwrap()
        );
        assert_eq!(
            swapped.tokens.rows(2, 2).unwrap(),
            seq.tokens.rows(0, 2).unwrap()
        );
    }

    #[test]
    fn contract_errors() {
        let (store, enc) = build(EncoderConfig::new(3, 8), 1);
        assert!(matches!(
            enc.encode_frames(&store, &[Tensor::zeros([8, 8, 2])], Modality::Rgb),
            Err(Error::Config(_))
        ));
        assert!(enc
            .encode_frames(&store, &[Tensor::zeros([4, 8, 3])], Modality::Rgb)
            .is_err());
        assert!(enc.encode_frames(&store, &[], Modality::Rgb).is_err());
    }

    #[test]
    fn param_count_matches_store() {
        let (store, enc) = build(EncoderConfig::new(3, 8), 1);
        assert_eq!(enc.param_count(), store.scalar_count());
    }
}
