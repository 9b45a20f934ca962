//! Outer encoder with two parallel decoders (background and noise).
//!
//! The encoder embeds the image with a 3x3 conv and runs four UTB stages,
//! each followed by a stride-2 downsample that doubles the width, then a
//! stack of transformer blocks at the lowest resolution. Each decoder
//! mirrors the encoder: transposed-conv upsample, concatenation with the
//! symmetric encoder feature, 1x1 fuse, UTB. Every decoder stage emits a
//! side feature; side features are resized to full resolution and turned
//! into images.

use crate::blocks::{run_blocks, BlockConfig, FilterConfig, TransformerBlock};
use crate::error::{Error, Result};
use crate::numerics::{concat, Bound, Element, Init, ParamBuilder, ParamId, Tensor, Var};
use crate::utb::{Utb, UtbConfig};

pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct U2FormerConfig {
    pub base_channels: usize,
    pub window: usize,
    pub stage_depths: [usize; STAGES],
    pub bottleneck_blocks: usize,
    pub filter: FilterConfig,
    pub heads: usize,
    pub reduction: usize,
    pub rel_pos_bias: bool,
    pub blocks_per_level: usize,
}

impl Default for U2FormerConfig {
    fn default() -> Self {
        U2FormerConfig {
            base_channels: 8,
            window: 4,
            stage_depths: [5, 4, 3, 2],
            bottleneck_blocks: 6,
            filter: FilterConfig::default(),
            heads: 2,
            reduction: 4,
            rel_pos_bias: true,
            blocks_per_level: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Background,
    Noise,
}

impl U2FormerConfig {
    pub fn new(base_channels: usize, window: usize) -> Self {
        U2FormerConfig {
            base_channels,
            window,
            ..Default::default()
        }
    }

    /// Width of encoder feature `X_l`.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn utb(&self, depth: usize, channels: usize) -> UtbConfig {
        UtbConfig {
            blocks_per_level: self.blocks_per_level,
            heads: self.heads,
            reduction: self.reduction,
            rel_pos_bias: self.rel_pos_bias,
            ..UtbConfig::new(depth, channels, self.window, self.filter)
        }
    }

    /// UTB of encoder stage `l` (1-based), applied to `X_{l-1}`.
    pub fn encoder_utb(&self, l: usize) -> UtbConfig {
        self.utb(self.stage_depths[l - 1], self.width(l - 1))
    }

    /// UTB of decoder stage `i` (1-based, coarse to fine), mirroring
    /// encoder stage `5 - i`.
    pub fn decoder_utb(&self, i: usize) -> UtbConfig {
        self.utb(self.stage_depths[STAGES - i], self.width(STAGES - i))
    }

    pub fn bottleneck_block(&self) -> BlockConfig {
        BlockConfig {
            heads: self.heads,
            reduction: self.reduction,
            rel_pos_bias: self.rel_pos_bias,
            ..BlockConfig::new(self.width(STAGES), self.window, self.filter)
        }
    }

    /// Deepest resolution level (as a power of two) reached anywhere.
    fn max_level(&self) -> usize {
        (1..=STAGES)
            .map(|l| l - 1 + self.stage_depths[l - 1] - 1)
            .max()
            .unwrap_or(0)
            .max(STAGES)
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.window << self.max_level()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.window == 0 || self.stage_depths.contains(&0) {
            return Err(Error::config(format!("invalid model config {self:?}")));
        }
        for l in 1..=STAGES {
            self.encoder_utb(l).validate()?;
        }
        self.bottleneck_block().validate()
    }

    /// Scalar parameter count of the whole model, traced layer by layer.
    pub fn num_params(&self) -> usize {
        let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
        let c = self.base_channels;
        let encoder: usize = (1..=STAGES)
            .map(|l| self.encoder_utb(l).num_params() + conv(self.width(l), self.width(l - 1), 2))
            .sum();
        let bottleneck = self.bottleneck_blocks * self.bottleneck_block().num_params();
        let decoder: usize = (1..=STAGES)
            .map(|i| {
                let (wide, narrow) = (self.width(STAGES + 1 - i), self.width(STAGES - i));
                wide * narrow * 4 + narrow + conv(narrow, 2 * narrow, 1) + self.decoder_utb(i).num_params()
            })
            .sum::<usize>()
            + (1..STAGES).map(|i| conv(3, self.width(STAGES - i), 3)).sum::<usize>()
            + conv(3, (0..STAGES).map(|l| self.width(l)).sum(), 1);
        conv(c, 3, 3) + encoder + bottleneck + 2 * decoder
    }

    /// Strict check for `encode`: every level must hold at least one whole
    /// window.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let deepest = self.max_level();
        for (name, s) in [("height", h), ("width", w)] {
            if s >> deepest < self.window {
                return Err(Error::SpatialTooSmall {
                    at: format!("{name} at level {deepest}"),
                    size: s >> deepest,
                    window: self.window,
                });
            }
        }
        let m = self.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::NonDivisibleSpatialDims {
                height: h,
                width: w,
                window: m,
            });
        }
        Ok(())
    }

    /// Smallest valid size covering `n`.
    pub fn padded(&self, n: usize) -> usize {
        let m = self.size_multiple();
        n.div_ceil(m).max(1) * m
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, co: usize, ci: usize, k: usize) -> Result<Self> {
        let fan = ci * k * k;
        Ok(Conv {
            w: pb.param(&format!("{name}.weight"), &[co, ci, k, k], Init::FanUniform(fan))?,
            b: pb.param(&format!("{name}.bias"), &[co], Init::FanUniform(fan))?,
        })
    }

    fn transposed<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, ci: usize, co: usize) -> Result<Self> {
        let fan = co * 4;
        Ok(Conv {
            w: pb.param(&format!("{name}.weight"), &[ci, co, 2, 2], Init::FanUniform(fan))?,
            b: pb.param(&format!("{name}.bias"), &[co], Init::FanUniform(fan))?,
        })
    }

    fn apply<'t, T: Element>(&self, x: &Var<'t, T>, p: &Bound<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        x.conv2d(&p.get(self.w), Some(&p.get(self.b)), stride, pad)
    }

    fn apply_transposed<'t, T: Element>(&self, x: &Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        x.conv_transpose2x2(&p.get(self.w), Some(&p.get(self.b)))
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: Conv,
    fuse: Conv,
    utb: Utb,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    stages: Vec<DecoderStage>,
    side: Vec<Conv>,
    fusion: Conv,
}

#[derive(Clone, Debug)]
pub struct U2Former {
    pub cfg: U2FormerConfig,
    embed: Conv,
    encoder: Vec<(Utb, Conv)>,
    bottleneck: Vec<TransformerBlock>,
    background: Decoder,
    noise: Decoder,
}

/// Encoder features `X_0..X_4` (`X_4` after the bottleneck).
pub type EncoderFeatures<'t, T> = Vec<Var<'t, T>>;

pub struct RestorationOutput<'t, T> {
    /// `T_1..T_4`, coarse to fine; the last is the fused final image.
    pub background_stages: Vec<Var<'t, T>>,
    pub noise_stages: Vec<Var<'t, T>>,
    pub encoder_features: EncoderFeatures<'t, T>,
}

impl<'t, T: Element> RestorationOutput<'t, T> {
    pub fn final_background(&self) -> Var<'t, T> {
        self.background_stages[STAGES - 1]
    }

    pub fn final_noise(&self) -> Var<'t, T> {
        self.noise_stages[STAGES - 1]
    }

    pub fn stages(&self, branch: Branch) -> &[Var<'t, T>] {
        match branch {
            Branch::Background => &self.background_stages,
            Branch::Noise => &self.noise_stages,
        }
    }
}

fn build_decoder<T: Element>(pb: &mut ParamBuilder<'_, T>, cfg: &U2FormerConfig) -> Result<Decoder> {
    let mut stages = Vec::with_capacity(STAGES);
    for i in 1..=STAGES {
        let mut s = pb.scope(&format!("stage{i}"));
        let (wide, narrow) = (cfg.width(STAGES + 1 - i), cfg.width(STAGES - i));
        stages.push(DecoderStage {
            up: Conv::transposed(&mut s, "up", wide, narrow)?,
            fuse: Conv::new(&mut s, "fuse", narrow, 2 * narrow, 1)?,
            utb: Utb::new(&mut s.scope("utb"), cfg.decoder_utb(i))?,
        });
    }
    let side = (1..STAGES)
        .map(|i| Conv::new(pb, &format!("side{i}"), 3, cfg.width(STAGES - i), 3))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = (1..=STAGES).map(|i| cfg.width(STAGES - i)).sum();
    let fusion = Conv::new(pb, "fusion", 3, total, 1)?;
    Ok(Decoder { stages, side, fusion })
}

impl U2Former {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, cfg: U2FormerConfig) -> Result<Self> {
        cfg.validate()?;
        let embed = Conv::new(pb, "embed", cfg.width(0), 3, 3)?;
        let mut encoder = Vec::with_capacity(STAGES);
        for l in 1..=STAGES {
            let mut s = pb.scope(&format!("encoder.stage{l}"));
            let utb = Utb::new(&mut s.scope("utb"), cfg.encoder_utb(l))?;
            let down = Conv::new(&mut s, "down", cfg.width(l), cfg.width(l - 1), 2)?;
            encoder.push((utb, down));
        }
        let bottleneck = {
            let mut s = pb.scope("encoder.bottleneck");
            (0..cfg.bottleneck_blocks)
                .map(|i| TransformerBlock::new(&mut s.scope(&i.to_string()), cfg.bottleneck_block()))
                .collect::<Result<Vec<_>>>()?
        };
        let background = build_decoder(&mut pb.scope("decoder_b"), &cfg)?;
        let noise = build_decoder(&mut pb.scope("decoder_n"), &cfg)?;
        Ok(U2Former {
            cfg,
            embed,
            encoder,
            bottleneck,
            background,
            noise,
        })
    }

    pub fn bottleneck(&self) -> &[TransformerBlock] {
        &self.bottleneck
    }

    fn decoder(&self, branch: Branch) -> &Decoder {
        match branch {
            Branch::Background => &self.background,
            Branch::Noise => &self.noise,
        }
    }

    /// `[X_0, .., X_4]` with `X_l` of shape `[2^l C, H/2^l, W/2^l]`.
    /// Input sides must already be valid (see [`U2FormerConfig::check_input`]).
    pub fn encode<'t, T: Element>(&self, image: &Var<'t, T>, p: &Bound<'t, T>) -> Result<EncoderFeatures<'t, T>> {
        let (c, h, w) = image.value().dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("expected an RGB image, got {c} channels")));
        }
        check_range(&image.value())?;
        self.cfg.check_input(h, w)?;
        let mut feats = Vec::with_capacity(STAGES + 1);
        let mut x = self.embed.apply(image, p, 1, 1)?;
        for (utb, down) in &self.encoder {
            feats.push(x);
            x = down.apply(&utb.forward(&x, p)?, p, 2, 0)?;
        }
        feats.push(run_blocks(&self.bottleneck, &x, p)?);
        Ok(feats)
    }

    /// Side features of one decoder, coarse to fine.
    pub fn decode_branch<'t, T: Element>(&self, feats: &[Var<'t, T>], branch: Branch, p: &Bound<'t, T>) -> Result<Vec<Var<'t, T>>> {
        if feats.len() != STAGES + 1 {
            return Err(Error::shape(format!("expected {} encoder features, got {}", STAGES + 1, feats.len())));
        }
        let mut x = feats[STAGES];
        let mut sides = Vec::with_capacity(STAGES);
        for (i, stage) in self.decoder(branch).stages.iter().enumerate() {
            let up = stage.up.apply_transposed(&x, p)?;
            let skip = feats[STAGES - 1 - i];
            if up.shape() != skip.shape() {
                return Err(Error::shape(format!("decoder stage {} got {:?}, skip is {:?}", i + 1, up.shape(), skip.shape())));
            }
            let fused = stage.fuse.apply(&concat(&[up, skip])?, p, 1, 0)?;
            x = stage.utb.forward(&fused, p)?;
            sides.push(x);
        }
        Ok(sides)
    }

    /// Stage images `[S_1, S_2, S_3, fused]` at full resolution, all in (0, 1).
    pub fn side_to_images<'t, T: Element>(&self, sides: &[Var<'t, T>], branch: Branch, p: &Bound<'t, T>) -> Result<Vec<Var<'t, T>>> {
        if sides.len() != STAGES {
            return Err(Error::shape(format!("expected {STAGES} side features, got {}", sides.len())));
        }
        let (_, h, w) = sides[STAGES - 1].value().dims3()?;
        let dec = self.decoder(branch);
        let resized = sides.iter().map(|s| s.resize_bilinear(h, w)).collect::<Result<Vec<_>>>()?;
        let mut images = Vec::with_capacity(STAGES);
        for (conv, r) in dec.side.iter().zip(&resized) {
            images.push(conv.apply(r, p, 1, 1)?.sigmoid());
        }
        images.push(dec.fusion.apply(&concat(&resized)?, p, 1, 0)?.sigmoid());
        Ok(images)
    }

    /// Full restoration of an image of any size; inputs are reflect-padded
    /// on the bottom and right to a valid size and outputs cropped back.
    pub fn forward<'t, T: Element>(&self, image: &Var<'t, T>, p: &Bound<'t, T>) -> Result<RestorationOutput<'t, T>> {
        let (_, h, w) = image.value().dims3()?;
        check_range(&image.value())?;
        let (ph, pw) = (self.cfg.padded(h), self.cfg.padded(w));
        let padded = if (ph, pw) == (h, w) { *image } else { image.pad_reflect(ph, pw)? };
        let feats = self.encode(&padded, p)?;
        let crop = |v: Vec<Var<'t, T>>| -> Result<Vec<Var<'t, T>>> {
            if (ph, pw) == (h, w) {
                Ok(v)
            } else {
                v.iter().map(|x| x.crop(0, 0, h, w)).collect()
            }
        };
        let background = crop(self.side_to_images(&self.decode_branch(&feats, Branch::Background, p)?, Branch::Background, p)?)?;
        let noise = crop(self.side_to_images(&self.decode_branch(&feats, Branch::Noise, p)?, Branch::Noise, p)?)?;
        Ok(RestorationOutput {
            background_stages: background,
            noise_stages: noise,
            encoder_features: feats,
        })
    }

    /// Encoder of a possibly undersized or non-divisible image, via the
    /// same padding rule as [`forward`](Self::forward).
    pub fn encode_padded<'t, T: Element>(&self, image: &Var<'t, T>, p: &Bound<'t, T>) -> Result<EncoderFeatures<'t, T>> {
        let (_, h, w) = image.value().dims3()?;
        let (ph, pw) = (self.cfg.padded(h), self.cfg.padded(w));
        let padded = if (ph, pw) == (h, w) { *image } else { image.pad_reflect(ph, pw)? };
        self.encode(&padded, p)
    }
}

fn check_range<T: Element>(image: &Tensor<T>) -> Result<()> {
    let (lo, hi) = (T::zero(), T::one());
    if image.data().iter().all(|&v| v >= lo && v <= hi) {
        Ok(())
    } else {
        Err(Error::InvalidInputRange)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{InitMode, ParamStore, Tape};
    use crate::rng::Stream;

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut s = Stream::new(seed, 31);
        Tensor::from_fn(&[3, h, w], |_| s.uniform())
    }

    fn small() -> U2FormerConfig {
        U2FormerConfig {
            base_channels: 4,
            stage_depths: [1, 1, 1, 1],
            bottleneck_blocks: 1,
            ..Default::default()
        }
    }

    fn build(cfg: U2FormerConfig, mode: InitMode, seed: u64) -> (ParamStore<f64>, U2Former) {
        let mut store = ParamStore::new();
        let mut rng = Stream::new(seed, 0);
        let m = U2Former::new(&mut ParamBuilder::new(&mut store, &mut rng, mode), cfg).unwrap();
        (store, m)
    }

    #[test]
    fn size_multiple_covers_deepest_level() {
        assert_eq!(U2FormerConfig::default().size_multiple(), 64);
        assert_eq!(small().size_multiple(), 64);
        let mut deep = small();
        deep.stage_depths = [6, 1, 1, 1];
        assert_eq!(deep.size_multiple(), 128);
        assert_eq!(U2FormerConfig::default().padded(48), 64);
        assert_eq!(U2FormerConfig::default().padded(65), 128);
    }

    #[test]
    fn encoder_shapes_follow_the_level_law() {
        let (store, m) = build(small(), InitMode::Standard, 1);
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let feats = m.encode(&tape.constant(image(64, 128, 2)), &p).unwrap();
        for (l, f) in feats.iter().enumerate() {
            assert_eq!(f.shape(), vec![4 << l, 64 >> l, 128 >> l]);
        }
    }

    #[test]
    fn encode_rejects_small_or_bad_inputs() {
        let (store, m) = build(small(), InitMode::Standard, 1);
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let err = m.encode(&tape.constant(image(32, 32, 3)), &p).unwrap_err();
        assert!(matches!(err, Error::SpatialTooSmall { size: 2, window: 4, .. }), "{err:?}");
        let err = m.encode(&tape.constant(image(64, 96, 3)), &p).unwrap_err();
        assert!(matches!(err, Error::NonDivisibleSpatialDims { .. }), "{err:?}");
        let bad = image(64, 64, 4).map(|v| v + 1.0);
        assert!(matches!(m.encode(&tape.constant(bad), &p), Err(Error::InvalidInputRange)));
    }

    #[test]
    fn forward_pads_and_crops() {
        let (store, m) = build(small(), InitMode::Randomized(0.05), 5);
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let out = m.forward(&tape.constant(image(20, 27, 6)), &p).unwrap();
        assert_eq!(out.background_stages.len(), 4);
        assert_eq!(out.noise_stages.len(), 4);
        for v in out.background_stages.iter().chain(&out.noise_stages) {
            assert_eq!(v.shape(), vec![3, 20, 27]);
            assert!(v.value().data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
        assert_eq!(out.encoder_features[0].shape(), vec![4, 64, 64]);
    }

    #[test]
    fn side_features_mirror_the_encoder() {
        let (store, m) = build(small(), InitMode::Standard, 7);
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let feats = m.encode(&tape.constant(image(64, 64, 8)), &p).unwrap();
        let sides = m.decode_branch(&feats, Branch::Noise, &p).unwrap();
        let shapes: Vec<Vec<usize>> = sides.iter().map(|s| s.shape()).collect();
        assert_eq!(shapes, vec![vec![32, 8, 8], vec![16, 16, 16], vec![8, 32, 32], vec![4, 64, 64]]);
    }

    #[test]
    fn branches_differ_only_by_parameters() {
        let (mut store, m) = build(small(), InitMode::Standard, 9);
        let tape = Tape::inference();
        let x = image(64, 64, 10);
        {
            let p = store.bind(&tape);
            let out = m.forward(&tape.constant(x.clone()), &p).unwrap();
            assert_ne!(out.final_background().to_tensor(), out.final_noise().to_tensor());
        }
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        for name in names.iter().filter(|n| n.starts_with("decoder_n")) {
            let src = store.id_of(&name.replacen("decoder_n", "decoder_b", 1)).unwrap();
            let t = store.get(src).tensor.clone();
            let dst = store.id_of(name).unwrap();
            store.get_mut(dst).tensor = t;
        }
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let out = m.forward(&tape.constant(x), &p).unwrap();
        for (b, n) in out.background_stages.iter().zip(&out.noise_stages) {
            assert_eq!(b.to_tensor(), n.to_tensor());
        }
    }

    #[test]
    fn noise_parameters_do_not_affect_background() {
        let (mut store, m) = build(small(), InitMode::Randomized(0.05), 11);
        let x = image(64, 64, 12);
        let run = |store: &ParamStore<f64>| {
            let tape = Tape::inference();
            let p = store.bind(&tape);
            let out = m.forward(&tape.constant(x.clone()), &p).unwrap();
            (out.final_background().to_tensor(), out.final_noise().to_tensor())
        };
        let (b0, n0) = run(&store);
        let ids: Vec<_> = store.ids().filter(|&id| store.get(id).name.starts_with("decoder_n")).collect();
        for id in ids {
            store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v += 0.1);
        }
        let (b1, n1) = run(&store);
        assert_eq!(b0, b1);
        assert_ne!(n0, n1);
    }

    #[test]
    fn zero_fusion_gives_half() {
        let (mut store, m) = build(small(), InitMode::Standard, 13);
        for name in ["decoder_b.fusion.weight", "decoder_b.fusion.bias"] {
            let id = store.id_of(name).unwrap();
            store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let out = m.forward(&tape.constant(image(64, 64, 14)), &p).unwrap();
        assert!(out.final_background().value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn param_count_matches_store() {
        for cfg in [small(), U2FormerConfig::default()] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = Stream::new(0, 0);
            U2Former::new(&mut ParamBuilder::new(&mut store, &mut rng, InitMode::Standard), cfg.clone()).unwrap();
            assert_eq!(store.num_scalars(), cfg.num_params());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (store, m) = build(small(), InitMode::Randomized(0.05), 15);
        let run = || {
            let tape = Tape::<f32>::inference();
            let s32 = store.cast::<f32>();
            let p = s32.bind(&tape);
            let out = m.forward(&tape.constant(image(64, 64, 16).cast()), &p).unwrap();
            out.final_background().to_tensor()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
