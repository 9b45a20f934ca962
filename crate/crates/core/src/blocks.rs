//! Feature-filtering window attention transformer block.
//!
//! A block computes per-channel attention weights from pooled features,
//! keeps the highest-weighted channels, runs windowed multi-head
//! self-attention on the kept (and reweighted) channels only, scatters them
//! back over a copy of the input, and finishes with a depthwise-separable
//! feed-forward network and a residual to the block input.

use crate::error::{Error, Result};
use crate::numerics::{Bound, Element, Init, ParamBuilder, ParamId, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    /// Keep channels whose weight exceeds `rho`.
    Threshold,
    /// Keep the `ceil(keep_ratio * C)` highest-weighted channels.
    TopK,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig {
    pub mode: FilterMode,
    pub rho: f64,
    pub keep_ratio: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            mode: FilterMode::TopK,
            rho: 0.5,
            keep_ratio: 0.5,
        }
    }
}

impl FilterConfig {
    pub fn topk(keep_ratio: f64) -> Self {
        FilterConfig {
            mode: FilterMode::TopK,
            keep_ratio,
            ..Default::default()
        }
    }

    pub fn threshold(rho: f64) -> Self {
        FilterConfig {
            mode: FilterMode::Threshold,
            rho,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            FilterMode::Threshold if !(0.0..=1.0).contains(&self.rho) => {
                Err(Error::config(format!("rho {} outside [0, 1]", self.rho)))
            }
            FilterMode::TopK if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) => {
                Err(Error::config(format!("keep_ratio {} outside (0, 1]", self.keep_ratio)))
            }
            _ => Ok(()),
        }
    }

    /// Channels kept in topk mode, `ceil(keep_ratio * c)`.
    pub fn kept(&self, c: usize) -> usize {
        kept_channels(self.keep_ratio, c)
    }
}

pub fn kept_channels(keep_ratio: f64, c: usize) -> usize {
    // the small slack absorbs products like 0.7 * 10 = 7.000000000000001
    ((keep_ratio * c as f64 - 1e-9).ceil() as usize).clamp(1, c)
}

/// Sorted channel indices selected from weights `w`.
pub fn select_channels(w: &[f64], cfg: &FilterConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(Error::shape("no channels to filter"));
    }
    let mut sel: Vec<usize> = match cfg.mode {
        FilterMode::Threshold => {
            let kept: Vec<usize> = (0..w.len()).filter(|&i| w[i] > cfg.rho).collect();
            if kept.is_empty() {
                // argmax, lowest index on ties
                let best = (0..w.len()).fold(0, |b, i| if w[i] > w[b] { i } else { b });
                vec![best]
            } else {
                kept
            }
        }
        FilterMode::TopK => {
            let k = cfg.kept(w.len());
            let mut order: Vec<usize> = (0..w.len()).collect();
            order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
            order.truncate(k);
            order
        }
    };
    sel.sort_unstable();
    Ok(sel)
}

pub struct FilterResult<'t, T> {
    /// Strictly increasing original channel indices.
    pub selected: Vec<usize>,
    /// Attention weights of the selected channels, `[C_s]`.
    pub weights: Var<'t, T>,
    /// `weights[j] * F[selected[j]]`, `[C_s, H, W]`.
    pub packed: Var<'t, T>,
}

/// Select channels of `f` (`[C, H, W]`) by their weights `w` (`[C]`) and
/// scale each kept channel by its weight.
pub fn feature_filter<'t, T: Element>(f: &Var<'t, T>, w: &Var<'t, T>, cfg: &FilterConfig) -> Result<FilterResult<'t, T>> {
    let c = f.value().dims3()?.0;
    if w.shape() != [c] {
        return Err(Error::shape(format!("filter weights {:?} for {c} channels", w.shape())));
    }
    let selected = select_channels(&w.value().to_f64_vec(), cfg)?;
    let (weights, feats) = if selected.len() == c {
        (*w, *f)
    } else {
        (w.index_select(0, &selected)?, f.index_select(0, &selected)?)
    };
    let packed = feats.mul_channels(&weights)?;
    Ok(FilterResult {
        selected,
        weights,
        packed,
    })
}

/// Squeeze-and-excitation style channel weights.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    pub hidden: usize,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl ChannelAttention {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, channels: usize, reduction: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::config("channel attention needs channels and reduction >= 1"));
        }
        let hidden = (channels / reduction).max(1);
        Ok(ChannelAttention {
            channels,
            hidden,
            fc1_w: pb.param("fc1.weight", &[channels, hidden], Init::FanUniform(channels))?,
            fc1_b: pb.param("fc1.bias", &[hidden], Init::Zeros)?,
            fc2_w: pb.param("fc2.weight", &[hidden, channels], Init::FanUniform(hidden))?,
            fc2_b: pb.param("fc2.bias", &[channels], Init::Zeros)?,
        })
    }

    pub fn num_params(channels: usize, reduction: usize) -> usize {
        let hidden = (channels / reduction).max(1);
        2 * channels * hidden + hidden + channels
    }

    /// `sigmoid(fc2(relu(fc1(avgpool(F)))))`, one weight per channel.
    pub fn weights<'t, T: Element>(&self, f: &Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        channel_weights(f, p.get(self.fc1_w), p.get(self.fc1_b), p.get(self.fc2_w), p.get(self.fc2_b))
    }
}

pub fn channel_weights<'t, T: Element>(
    f: &Var<'t, T>,
    fc1_w: Var<'t, T>,
    fc1_b: Var<'t, T>,
    fc2_w: Var<'t, T>,
    fc2_b: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let c = f.value().dims3()?.0;
    if fc1_w.shape().first() != Some(&c) || fc2_w.shape().get(1) != Some(&c) {
        return Err(Error::shape(format!(
            "channel attention {:?}/{:?} for {c} channels",
            fc1_w.shape(),
            fc2_w.shape()
        )));
    }
    let pooled = f.global_avg_pool()?.reshape(&[1, c])?;
    let hidden = pooled.linear(&fc1_w, Some(&fc1_b))?.relu();
    Ok(hidden.linear(&fc2_w, Some(&fc2_b))?.sigmoid().reshape(&[c])?)
}

/// Largest divisor of `n` not exceeding `k`.
pub fn clamp_heads(n: usize, k: usize) -> usize {
    (1..=k.min(n).max(1)).rev().find(|h| n % h == 0).unwrap_or(1)
}

/// Already-gathered attention weights for one call of [`w_msa`]. Keys carry
/// no bias since the softmax would cancel it.
pub struct WmsaParams<'t, T> {
    pub q_w: Var<'t, T>,
    pub q_b: Var<'t, T>,
    pub k_w: Var<'t, T>,
    pub v_w: Var<'t, T>,
    pub v_b: Var<'t, T>,
    pub proj_w: Var<'t, T>,
    pub proj_b: Var<'t, T>,
    /// `[heads, T, T]` additive score bias.
    pub bias: Option<Var<'t, T>>,
    pub heads: usize,
}

/// Multi-head self-attention inside each window of `tokens`
/// (`[num_windows, T, d]`).
pub fn w_msa<'t, T: Element>(tokens: &Var<'t, T>, p: &WmsaParams<'t, T>) -> Result<Var<'t, T>> {
    let &[nw, t, d] = tokens.shape().as_slice() else {
        return Err(Error::shape(format!("w_msa expects [nW, T, d], got {:?}", tokens.shape())));
    };
    let h = p.heads;
    if h == 0 || d % h != 0 {
        return Err(Error::HeadDivisibility { channels: d, heads: h });
    }
    let dh = d / h;
    let tape = tokens.tape();
    let split = |x: Var<'t, T>| -> Result<Var<'t, T>> {
        x.reshape(&[nw, t, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[nw * h, t, dh])
    };
    let (q, k, v) = tape.with_tag("qkv", || -> Result<_> {
        Ok((
            tokens.linear(&p.q_w, Some(&p.q_b))?,
            tokens.linear(&p.k_w, None)?,
            tokens.linear(&p.v_w, Some(&p.v_b))?,
        ))
    })?;
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let mut scores = tape
        .with_tag("attn_matrix", || q.matmul_t(&k, false, true))?
        .scale(1.0 / (dh as f64).sqrt());
    if let Some(bias) = &p.bias {
        if bias.shape() != [h, t, t] {
            return Err(Error::shape(format!("attention bias {:?} for {h} heads, {t} tokens", bias.shape())));
        }
        scores = scores.reshape(&[nw, h, t, t])?.add_suffix(bias)?.reshape(&[nw * h, t, t])?;
    }
    let attn = scores.softmax();
    let out = tape.with_tag("attn_apply", || attn.matmul(&v))?;
    let out = out.reshape(&[nw, h, t, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[nw, t, d])?;
    tape.with_tag("out_proj", || out.linear(&p.proj_w, Some(&p.proj_b)))
}

/// Flat indices into a `[(2w-1)^2, table_heads]` table producing the
/// `[heads, w*w, w*w]` relative position bias.
pub fn relative_bias_index(win: usize, heads: usize, table_heads: usize) -> Vec<u32> {
    let t = win * win;
    let span = 2 * win - 1;
    let mut map = Vec::with_capacity(heads * t * t);
    for head in 0..heads {
        for i in 0..t {
            let (yi, xi) = (i / win, i % win);
            for j in 0..t {
                let (yj, xj) = (j / win, j % win);
                let rel = (yi + win - 1 - yj) * span + (xi + win - 1 - xj);
                map.push((rel * table_heads + head) as u32);
            }
        }
    }
    map
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub reduction: usize,
    pub ffn_expansion: usize,
    pub rel_pos_bias: bool,
    pub filter: FilterConfig,
}

impl BlockConfig {
    pub fn new(channels: usize, window: usize, filter: FilterConfig) -> Self {
        BlockConfig {
            channels,
            heads: 2,
            window,
            reduction: 4,
            ffn_expansion: 4,
            rel_pos_bias: true,
            filter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        if self.channels == 0 || self.window == 0 || self.heads == 0 || self.reduction == 0 || self.ffn_expansion == 0 {
            return Err(Error::config(format!("invalid block config {self:?}")));
        }
        if self.filter.mode == FilterMode::TopK {
            let ds = self.filter.kept(self.channels);
            if ds % self.heads != 0 {
                return Err(Error::HeadDivisibility {
                    channels: ds,
                    heads: self.heads,
                });
            }
        }
        Ok(())
    }

    /// Trainable scalars in one block.
    pub fn num_params(&self) -> usize {
        let c = self.channels;
        let e = self.ffn_expansion * c;
        let bias = if self.rel_pos_bias {
            (2 * self.window - 1).pow(2) * self.heads
        } else {
            0
        };
        ChannelAttention::num_params(c, self.reduction)
            + 2 * c
            + 4 * c * c
            + 3 * c
            + bias
            + 2 * c
            + (e * c + e)
            + (e * 9 + e)
            + (c * e + c)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub cfg: BlockConfig,
    pub attention: ChannelAttention,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub rel_bias: Option<ParamId>,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub pw1_w: ParamId,
    pub pw1_b: ParamId,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub pw2_w: ParamId,
    pub pw2_b: ParamId,
}

/// Intermediate values of one block application.
pub struct BlockTrace<'t, T> {
    pub weights: Var<'t, T>,
    pub selected: Vec<usize>,
    pub heads: usize,
    /// Input with the attended channels written back, before the FFN.
    pub scattered: Var<'t, T>,
    pub output: Var<'t, T>,
}

impl TransformerBlock {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let e = cfg.ffn_expansion * c;
        let proj = Init::TruncNormal(0.02);
        let attention = ChannelAttention::new(&mut pb.scope("ca"), c, cfg.reduction)?;
        let mut a = pb.scope("attn");
        let ln1_g = a.param("norm.weight", &[c], Init::Ones)?;
        let ln1_b = a.param("norm.bias", &[c], Init::Zeros)?;
        let q_w = a.param("q.weight", &[c, c], proj)?;
        let q_b = a.param("q.bias", &[c], Init::Zeros)?;
        let k_w = a.param("k.weight", &[c, c], proj)?;
        let v_w = a.param("v.weight", &[c, c], proj)?;
        let v_b = a.param("v.bias", &[c], Init::Zeros)?;
        let proj_w = a.param("proj.weight", &[c, c], Init::Zeros)?;
        let proj_b = a.param("proj.bias", &[c], Init::Zeros)?;
        let rel_bias = if cfg.rel_pos_bias {
            let span = 2 * cfg.window - 1;
            Some(a.param("rel_bias", &[span * span, cfg.heads], proj)?)
        } else {
            None
        };
        let mut f = pb.scope("ffn");
        Ok(TransformerBlock {
            cfg,
            attention,
            ln1_g,
            ln1_b,
            q_w,
            q_b,
            k_w,
            v_w,
            v_b,
            proj_w,
            proj_b,
            rel_bias,
            ln2_g: f.param("norm.weight", &[c], Init::Ones)?,
            ln2_b: f.param("norm.bias", &[c], Init::Zeros)?,
            pw1_w: f.param("pw1.weight", &[e, c, 1, 1], proj)?,
            pw1_b: f.param("pw1.bias", &[e], Init::Zeros)?,
            dw_w: f.param("dw.weight", &[e, 1, 3, 3], Init::FanUniform(9))?,
            dw_b: f.param("dw.bias", &[e], Init::Zeros)?,
            pw2_w: f.param("pw2.weight", &[c, e, 1, 1], Init::Zeros)?,
            pw2_b: f.param("pw2.bias", &[c], Init::Zeros)?,
        })
    }

    pub fn forward<'t, T: Element>(&self, f: &Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_traced(f, p)?.output)
    }

    pub fn forward_traced<'t, T: Element>(&self, f: &Var<'t, T>, p: &Bound<'t, T>) -> Result<BlockTrace<'t, T>> {
        let (c, h, w) = f.value().dims3()?;
        let cfg = &self.cfg;
        if c != cfg.channels {
            return Err(Error::shape(format!("block of width {} applied to {c} channels", cfg.channels)));
        }
        if h % cfg.window != 0 || w % cfg.window != 0 {
            return Err(Error::NonDivisibleSpatialDims {
                height: h,
                width: w,
                window: cfg.window,
            });
        }
        let tape = f.tape();
        let weights = tape.with_tag("filter_overhead", || self.attention.weights(f, p))?;
        let filtered = tape.with_tag("filter_overhead", || feature_filter(f, &weights, &cfg.filter))?;
        let sel = &filtered.selected;
        let ds = sel.len();
        let heads = match cfg.filter.mode {
            FilterMode::TopK => cfg.heads,
            FilterMode::Threshold => clamp_heads(ds, cfg.heads),
        };
        let all = ds == c;
        let vec_sel = |id: ParamId| -> Result<Var<'t, T>> {
            let v = p.get(id);
            if all {
                Ok(v)
            } else {
                v.index_select(0, sel)
            }
        };
        let mat_sel = |id: ParamId| -> Result<Var<'t, T>> {
            let v = p.get(id);
            if all {
                Ok(v)
            } else {
                v.index_select(0, sel)?.index_select(1, sel)
            }
        };
        let bias = match self.rel_bias {
            Some(id) => Some(p.get(id).gather_flat(
                relative_bias_index(cfg.window, heads, cfg.heads),
                vec![heads, cfg.window * cfg.window, cfg.window * cfg.window],
            )),
            None => None,
        };
        let params = WmsaParams {
            q_w: mat_sel(self.q_w)?,
            q_b: vec_sel(self.q_b)?,
            k_w: mat_sel(self.k_w)?,
            v_w: mat_sel(self.v_w)?,
            v_b: vec_sel(self.v_b)?,
            proj_w: mat_sel(self.proj_w)?,
            proj_b: vec_sel(self.proj_b)?,
            bias,
            heads,
        };
        let tokens = filtered.packed.window_partition(cfg.window)?;
        let normed = tokens.layer_norm(2, Some(&vec_sel(self.ln1_g)?), Some(&vec_sel(self.ln1_b)?))?;
        let attended = w_msa(&normed, &params)?.add(&tokens)?.window_merge(h, w)?;
        let scattered = if all { attended } else { f.scatter_rows(sel, &attended)? };
        let normed = scattered.layer_norm(0, Some(&p.get(self.ln2_g)), Some(&p.get(self.ln2_b)))?;
        let ffn = tape.with_tag("ffn", || -> Result<_> {
            let x = normed.conv2d(&p.get(self.pw1_w), Some(&p.get(self.pw1_b)), 1, 0)?;
            let x = x.depthwise_conv2d(&p.get(self.dw_w), Some(&p.get(self.dw_b)), 1)?.gelu();
            x.conv2d(&p.get(self.pw2_w), Some(&p.get(self.pw2_b)), 1, 0)
        })?;
        Ok(BlockTrace {
            weights,
            selected: filtered.selected,
            heads,
            scattered,
            output: ffn.add(f)?,
        })
    }
}

/// Apply `blocks` in sequence.
pub fn run_blocks<'t, T: Element>(blocks: &[TransformerBlock], x: &Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
    blocks.iter().try_fold(*x, |x, b| b.forward(&x, p))
}
