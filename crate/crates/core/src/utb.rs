//! Inner U-shaped transformer block (UTB-L).
//!
//! A depth-`L` miniature U-Net: level `k` runs transformer blocks at width
//! `C * 2^k` and resolution `H / 2^k`, levels are joined by stride-2 convs
//! (down) and 2x2 transposed convs (up) with concatenation skips, and a
//! zero-initialized 1x1 conv closes the unit before the residual `X + F(X)`.

use crate::blocks::{run_blocks, BlockConfig, FilterConfig, TransformerBlock};
use crate::error::{Error, Result};
use crate::numerics::{concat, Bound, Element, Init, ParamBuilder, ParamId, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UtbConfig {
    pub depth: usize,
    pub channels: usize,
    pub window: usize,
    pub filter: FilterConfig,
    pub blocks_per_level: usize,
    pub heads: usize,
    pub reduction: usize,
    pub rel_pos_bias: bool,
}

impl UtbConfig {
    pub fn new(depth: usize, channels: usize, window: usize, filter: FilterConfig) -> Self {
        UtbConfig {
            depth,
            channels,
            window,
            filter,
            blocks_per_level: 1,
            heads: 2,
            reduction: 4,
            rel_pos_bias: true,
        }
    }

    pub fn block(&self, level: usize) -> BlockConfig {
        BlockConfig {
            heads: self.heads,
            reduction: self.reduction,
            rel_pos_bias: self.rel_pos_bias,
            ..BlockConfig::new(self.channels << level, self.window, self.filter)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.blocks_per_level == 0 {
            return Err(Error::config("UTB depth and blocks_per_level must be >= 1"));
        }
        (0..self.depth).try_for_each(|k| self.block(k).validate())
    }

    /// Smallest spatial size the unit accepts, `2^(L-1) * window`.
    pub fn min_size(&self) -> usize {
        self.window << (self.depth - 1)
    }

    /// Check that an `h x w` input keeps every level at least one window
    /// large and window-divisible.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let deepest = self.depth - 1;
        if let Some(&size) = [h, w].iter().find(|&&s| s >> deepest < self.window) {
            let level = (0..self.depth).find(|&k| size >> k < self.window).unwrap_or(deepest);
            return Err(Error::SpatialTooSmall {
                at: format!("UTB-{} level {level}", self.depth),
                size: size >> level,
                window: self.window,
            });
        }
        let unit = self.min_size();
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::NonDivisibleSpatialDims {
                height: h,
                width: w,
                window: unit,
            });
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let c = self.channels;
        let level_blocks = |k: usize| self.block(k).num_params() * self.blocks_per_level;
        let encoder: usize = (0..self.depth).map(level_blocks).sum();
        let decoder: usize = (0..self.depth - 1).map(level_blocks).sum();
        let joins: usize = (0..self.depth - 1)
            .map(|k| {
                let (lo, hi) = (c << k, c << (k + 1));
                let down = hi * lo * 4 + hi;
                let up = hi * lo * 4 + lo;
                let fuse = lo * 2 * lo + lo;
                down + up + fuse
            })
            .sum();
        encoder + decoder + joins + c * c + c
    }
}

#[derive(Clone, Debug)]
struct Join {
    down_w: ParamId,
    down_b: ParamId,
    up_w: ParamId,
    up_b: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Utb {
    pub cfg: UtbConfig,
    encoder: Vec<Vec<TransformerBlock>>,
    decoder: Vec<Vec<TransformerBlock>>,
    joins: Vec<Join>,
    out_w: ParamId,
    out_b: ParamId,
}

fn make_blocks<T: Element>(pb: &mut ParamBuilder<'_, T>, cfg: BlockConfig, n: usize) -> Result<Vec<TransformerBlock>> {
    (0..n).map(|i| TransformerBlock::new(&mut pb.scope(&i.to_string()), cfg)).collect()
}

impl Utb {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, cfg: UtbConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.blocks_per_level;
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut joins = Vec::with_capacity(cfg.depth - 1);
        for k in 0..cfg.depth {
            encoder.push(make_blocks(&mut pb.scope(&format!("enc{k}")), cfg.block(k), n)?);
            if k + 1 < cfg.depth {
                let (lo, hi) = (cfg.channels << k, cfg.channels << (k + 1));
                let mut j = pb.scope(&format!("join{k}"));
                joins.push(Join {
                    down_w: j.param("down.weight", &[hi, lo, 2, 2], Init::FanUniform(lo * 4))?,
                    down_b: j.param("down.bias", &[hi], Init::FanUniform(lo * 4))?,
                    up_w: j.param("up.weight", &[hi, lo, 2, 2], Init::FanUniform(lo * 4))?,
                    up_b: j.param("up.bias", &[lo], Init::FanUniform(lo * 4))?,
                    fuse_w: j.param("fuse.weight", &[lo, 2 * lo, 1, 1], Init::FanUniform(2 * lo))?,
                    fuse_b: j.param("fuse.bias", &[lo], Init::FanUniform(2 * lo))?,
                });
            }
        }
        let mut decoder = Vec::with_capacity(cfg.depth - 1);
        for k in 0..cfg.depth - 1 {
            decoder.push(make_blocks(&mut pb.scope(&format!("dec{k}")), cfg.block(k), n)?);
        }
        let c = cfg.channels;
        Ok(Utb {
            cfg,
            encoder,
            decoder,
            joins,
            out_w: pb.param("out.weight", &[c, c, 1, 1], Init::Zeros)?,
            out_b: pb.param("out.bias", &[c], Init::Zeros)?,
        })
    }

    /// `X + F(X)`; output shape equals input shape.
    pub fn forward<'t, T: Element>(&self, x: &Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let (c, h, w) = x.value().dims3()?;
        if c != self.cfg.channels {
            return Err(Error::shape(format!("UTB of width {} applied to {c} channels", self.cfg.channels)));
        }
        self.cfg.check_input(h, w)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut e = run_blocks(&self.encoder[0], x, p)?;
        for (k, j) in self.joins.iter().enumerate() {
            skips.push(e);
            let down = e.conv2d(&p.get(j.down_w), Some(&p.get(j.down_b)), 2, 0)?;
            e = run_blocks(&self.encoder[k + 1], &down, p)?;
        }
        let mut d = e;
        for k in (0..self.joins.len()).rev() {
            let j = &self.joins[k];
            let up = d.conv_transpose2x2(&p.get(j.up_w), Some(&p.get(j.up_b)))?;
            let fused = concat(&[up, skips[k]])?.conv2d(&p.get(j.fuse_w), Some(&p.get(j.fuse_b)), 1, 0)?;
            d = run_blocks(&self.decoder[k], &fused, p)?;
        }
        let f = d.conv2d(&p.get(self.out_w), Some(&p.get(self.out_b)), 1, 0)?;
        x.add(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{InitMode, ParamStore, Tape, Tensor};
    use crate::rng::Stream;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = Stream::new(seed, 21);
        Tensor::from_fn(shape, |_| s.normal())
    }

    fn build(cfg: UtbConfig, mode: InitMode) -> (ParamStore<f64>, Utb) {
        build_seeded(cfg, mode, 9)
    }

    fn build_seeded(cfg: UtbConfig, mode: InitMode, seed: u64) -> (ParamStore<f64>, Utb) {
        let mut store = ParamStore::new();
        let mut rng = Stream::new(seed, 0);
        let u = Utb::new(&mut ParamBuilder::new(&mut store, &mut rng, mode), cfg).unwrap();
        (store, u)
    }

    #[test]
    fn default_init_is_identity() {
        for depth in 1..=3 {
            let (store, u) = build(UtbConfig::new(depth, 4, 4, FilterConfig::default()), InitMode::Standard);
            let tape = Tape::inference();
            let p = store.bind(&tape);
            let x = random(&[4, 16, 16], depth as u64);
            assert_eq!(u.forward(&tape.constant(x.clone()), &p).unwrap().to_tensor(), x);
        }
    }

    #[test]
    fn depth_one_is_block_plus_residual() {
        let (store, u) = build(UtbConfig::new(1, 4, 4, FilterConfig::default()), InitMode::Randomized(0.2));
        assert!(u.joins.is_empty() && u.decoder.is_empty());
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let x = tape.constant(random(&[4, 8, 8], 3));
        let y = u.forward(&x, &p).unwrap().to_tensor();
        let b = u.encoder[0][0].forward(&x, &p).unwrap();
        let want = x.add(&b.conv2d(&p.get(u.out_w), Some(&p.get(u.out_b)), 1, 0).unwrap()).unwrap().to_tensor();
        assert_eq!(y, want);
    }

    #[test]
    fn level_resolutions_and_shape() {
        let (store, u) = build(UtbConfig::new(3, 8, 4, FilterConfig::default()), InitMode::Randomized(0.1));
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let y = u.forward(&tape.constant(random(&[8, 32, 32], 4)), &p).unwrap();
        assert_eq!(y.shape(), vec![8, 32, 32]);
        let widths: Vec<usize> = u.encoder.iter().map(|l| l[0].cfg.channels).collect();
        assert_eq!(widths, vec![8, 16, 32]);
        assert_eq!(u.cfg.min_size(), 16);
    }

    #[test]
    fn too_small_inputs_are_rejected() {
        let (store, u) = build(UtbConfig::new(3, 4, 4, FilterConfig::default()), InitMode::Standard);
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let err = u.forward(&tape.constant(random(&[4, 8, 8], 5)), &p).unwrap_err();
        assert!(matches!(err, Error::SpatialTooSmall { size: 2, window: 4, .. }), "{err:?}");
        let err = u.forward(&tape.constant(random(&[4, 24, 16], 5)), &p).unwrap_err();
        assert!(matches!(err, Error::NonDivisibleSpatialDims { .. }), "{err:?}");
    }

    const SEED: u64 = 0;

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = UtbConfig {
            reduction: 1,
            ..UtbConfig::new(3, 4, 4, FilterConfig::topk(1.0))
        };
        let (mut store, u) = build_seeded(cfg, InitMode::Randomized(0.2), SEED);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = u.forward(&tape.constant(random(&[4, 16, 16], 6)), &p).unwrap();
        let grads = tape.backward(y.sum()).unwrap();
        store.accumulate_grads(&grads, &p);
        for param in store.iter() {
            let g = param.grad.as_ref().unwrap_or_else(|| panic!("{} has no gradient", param.name));
            assert!(g.data().iter().any(|&v| v != 0.0), "{} has zero gradient", param.name);
        }
    }

    #[test]
    fn param_count_matches_store() {
        for depth in 1..=4 {
            let cfg = UtbConfig::new(depth, 4, 4, FilterConfig::default());
            let (store, _) = build(cfg, InitMode::Standard);
            assert_eq!(store.num_scalars(), cfg.num_params(), "depth {depth}");
        }
    }
}
