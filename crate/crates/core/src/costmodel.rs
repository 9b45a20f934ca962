//! Parameter and multiply-accumulate accounting.
//!
//! Counts are MACs; layer norm, softmax, activations and elementwise adds are
//! not counted. The instrumented counterpart runs a real block forward on a
//! tagged tape and reads the per-tag counters.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::backbone::U2FormerConfig;
use crate::blocks::{clamp_heads, BlockConfig, FilterConfig, FilterMode, TransformerBlock};
use crate::error::{Error, Result};
use crate::numerics::{InitMode, ParamBuilder, ParamStore, Tape, Tensor};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub qkv_proj: u64,
    pub attn_matrix: u64,
    pub attn_apply: u64,
    pub out_proj: u64,
    pub ffn: u64,
    pub filter_overhead: u64,
    pub total: u64,
}

impl FlopBreakdown {
    fn from_parts(qkv_proj: u64, attn_matrix: u64, attn_apply: u64, out_proj: u64, ffn: u64, filter_overhead: u64) -> Self {
        FlopBreakdown {
            qkv_proj,
            attn_matrix,
            attn_apply,
            out_proj,
            ffn,
            filter_overhead,
            total: qkv_proj + attn_matrix + attn_apply + out_proj + ffn + filter_overhead,
        }
    }

    /// `qkv + attn_matrix + attn_apply + out_proj`.
    pub fn attention_side(&self) -> u64 {
        self.qkv_proj + self.attn_matrix + self.attn_apply + self.out_proj
    }

    pub fn fields(&self) -> [u64; 7] {
        [self.qkv_proj, self.attn_matrix, self.attn_apply, self.out_proj, self.ffn, self.filter_overhead, self.total]
    }
}

/// Analytic MACs of one block on a `C x H x W` input.
pub fn block_flops_cfg(cfg: &BlockConfig, h: usize, w: usize) -> Result<FlopBreakdown> {
    cfg.validate()?;
    let win = cfg.window;
    if h % win != 0 || w % win != 0 || h == 0 || w == 0 {
        return Err(Error::NonDivisibleSpatialDims { height: h, width: w, window: win });
    }
    if cfg.filter.mode == FilterMode::TopK && !(cfg.filter.keep_ratio > 0.0 && cfg.filter.keep_ratio <= 1.0) {
        return Err(Error::config(format!("keep_ratio {} outside (0, 1]", cfg.filter.keep_ratio)));
    }
    let c = cfg.channels as u64;
    let ds = cfg.filter.kept(cfg.channels) as u64;
    let hw = (h * w) as u64;
    let t = (win * win) as u64;
    let nw = hw / t;
    let e = cfg.ffn_expansion as u64 * c;
    let hidden = (cfg.channels / cfg.reduction).max(1) as u64;
    Ok(FlopBreakdown::from_parts(
        nw * 3 * t * ds * ds,
        nw * t * t * ds,
        nw * t * t * ds,
        nw * t * ds * ds,
        hw * (c * e + e * 9 + e * c),
        2 * c * hidden + hw * c,
    ))
}

/// [`block_flops_cfg`] for a top-k block with default reduction and
/// expansion.
pub fn block_flops(c: usize, h: usize, w: usize, win: usize, heads: usize, keep_ratio: f64) -> Result<FlopBreakdown> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::config(format!("keep_ratio {keep_ratio} outside (0, 1]")));
    }
    let cfg = BlockConfig {
        heads,
        ..BlockConfig::new(c, win, FilterConfig::topk(keep_ratio))
    };
    block_flops_cfg(&cfg, h, w)
}

/// MACs counted by a tagged forward pass of a randomly initialized block.
pub fn instrumented_block_flops(cfg: &BlockConfig, h: usize, w: usize, seed: u64) -> Result<FlopBreakdown> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = Stream::new(seed, 0);
    let block = TransformerBlock::new(&mut ParamBuilder::new(&mut store, &mut rng, InitMode::Randomized(0.05)), *cfg)?;
    let tape = Tape::inference().instrumented();
    let p = store.bind(&tape);
    let x = Tensor::from_fn(&[cfg.channels, h, w], |_| rng.normal() as f32);
    block.forward(&tape.constant(x), &p)?;
    Ok(from_counts(&tape.mac_counts()))
}

fn from_counts(m: &BTreeMap<&'static str, u64>) -> FlopBreakdown {
    let get = |k: &str| m.get(k).copied().unwrap_or(0);
    FlopBreakdown::from_parts(get("qkv"), get("attn_matrix"), get("attn_apply"), get("out_proj"), get("ffn"), get("filter_overhead"))
}

/// Trainable scalars of the restoration model.
pub fn count_params(cfg: &U2FormerConfig) -> usize {
    cfg.num_params()
}

/// `(in + 1) * out` for a linear layer with bias.
pub fn linear_params(input: usize, output: usize) -> usize {
    (input + 1) * output
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub flops: FlopBreakdown,
}

/// Block cost at each keep ratio; `ratios` must ascend within `(0, 1]`.
/// Heads are clamped per ratio to a divisor of the kept channel count.
pub fn sweep_ratio(base: &BlockConfig, h: usize, w: usize, ratios: &[f64]) -> Result<Vec<SweepRow>> {
    if ratios.is_empty() {
        return Err(Error::config("sweep needs at least one ratio"));
    }
    if ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) || ratios.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::config(format!("ratios must ascend within (0, 1]: {ratios:?}")));
    }
    ratios
        .iter()
        .map(|&ratio| {
            let filter = FilterConfig::topk(ratio);
            let cfg = BlockConfig {
                filter,
                heads: clamp_heads(base.heads, filter.kept(base.channels)),
                ..*base
            };
            Ok(SweepRow {
                ratio,
                flops: block_flops_cfg(&cfg, h, w)?,
            })
        })
        .collect()
}

pub const CSV_HEADER: &str = "ratio,qkv,attn_matrix,attn_apply,out_proj,ffn,filter_overhead,total";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let f = r.flops.fields().map(|v| v.to_string()).join(",");
        let _ = writeln!(out, "{},{f}", r.ratio);
    }
    out
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let names = ["ratio", "qkv", "attn_matrix", "attn_apply", "out_proj", "ffn", "filter_overhead", "total"];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| std::iter::once(format!("{:.3}", r.ratio)).chain(r.flops.fields().iter().map(|v| v.to_string())).collect())
        .collect();
    let widths: Vec<usize> = (0..names.len())
        .map(|i| cells.iter().map(|row| row[i].len()).chain([names[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |row: Vec<&str>| row.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect::<Vec<_>>().join("  ");
    let mut out = line(names.to_vec());
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window_closed_form() {
        let f = block_flops(32, 8, 8, 8, 1, 1.0).unwrap();
        assert_eq!((f.qkv_proj, f.attn_matrix, f.attn_apply, f.out_proj), (196608, 131072, 131072, 65536));
        assert_eq!(f.total, f.fields()[..6].iter().sum::<u64>());
    }

    #[test]
    fn analytic_matches_instrumented_forward() {
        for (c, hw, win, heads, ratio) in [(32, 8, 8, 1, 1.0), (8, 16, 4, 2, 0.5), (12, 8, 4, 3, 0.75), (8, 64, 4, 2, 0.5)] {
            let cfg = BlockConfig {
                heads,
                ..BlockConfig::new(c, win, FilterConfig::topk(ratio))
            };
            let a = block_flops_cfg(&cfg, hw, hw).unwrap();
            let m = instrumented_block_flops(&cfg, hw, hw, 1).unwrap();
            assert_eq!(a.attention_side(), m.attention_side(), "{cfg:?}");
            assert_eq!(a.ffn, m.ffn);
            let rel = (a.total as f64 - m.total as f64).abs() / m.total as f64;
            assert!(rel <= 0.02, "{rel} for {cfg:?}");
        }
    }

    #[test]
    fn halving_keep_ratio_scales_terms() {
        let full = block_flops(64, 16, 16, 8, 2, 1.0).unwrap();
        let half = block_flops(64, 16, 16, 8, 2, 0.5).unwrap();
        assert_eq!(half.qkv_proj * 4, full.qkv_proj);
        assert_eq!(half.out_proj * 4, full.out_proj);
        assert_eq!(half.attn_matrix * 2, full.attn_matrix);
        assert_eq!((half.ffn, half.filter_overhead), (full.ffn, full.filter_overhead));
    }

    #[test]
    fn sweep_is_monotone() {
        let base = BlockConfig::new(8, 4, FilterConfig::default());
        let ratios = [0.125, 0.25, 0.5, 0.75, 1.0];
        let rows = sweep_ratio(&base, 64, 64, &ratios).unwrap();
        assert_eq!(rows.len(), 5);
        for pair in rows.windows(2) {
            let (lo, hi) = (pair[0].flops, pair[1].flops);
            assert!(lo.total <= hi.total);
            assert!(lo.qkv_proj <= hi.qkv_proj && lo.attn_matrix <= hi.attn_matrix && lo.out_proj <= hi.out_proj);
        }
        let at = |r: f64| rows.iter().find(|x| x.ratio == r).unwrap().flops;
        assert!(at(0.5).attention_side() as f64 <= 0.55 * at(1.0).attention_side() as f64);
        assert!(sweep_ratio(&base, 64, 64, &[0.5, 0.25]).is_err());
        assert!(sweep_ratio(&base, 64, 64, &[0.0, 0.5]).is_err());
        assert!(sweep_ratio(&base, 64, 64, &[0.5, 1.5]).is_err());
    }

    #[test]
    fn csv_and_table_layout() {
        let base = BlockConfig::new(8, 4, FilterConfig::default());
        let rows = sweep_ratio(&base, 16, 16, &[0.5, 1.0]).unwrap();
        let csv = sweep_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0.5,"));
        assert_eq!(lines[2].split(',').count(), 8);
        let table = sweep_table(&rows);
        let widths: Vec<usize> = table.lines().map(str::len).collect();
        assert!(widths.iter().all(|&w| w == widths[0]));
    }

    #[test]
    fn invalid_inputs() {
        assert!(block_flops(8, 16, 16, 4, 2, 0.0).is_err());
        assert!(block_flops(8, 16, 16, 4, 2, 1.2).is_err());
        assert!(matches!(block_flops(8, 18, 16, 4, 2, 0.5), Err(Error::NonDivisibleSpatialDims { .. })));
    }

    #[test]
    fn param_counts() {
        assert_eq!(linear_params(16, 16), 16 * 16 + 16);
        let small = U2FormerConfig::new(4, 4);
        let big = U2FormerConfig::new(8, 4);
        assert_eq!(count_params(&big), big.num_params());
        // the 3x3 embed conv alone: 3 * 9 * C + C
        let embed = |c: usize| 27 * c + c;
        assert_eq!(embed(8), 2 * embed(4));
        assert!(count_params(&big) > 3 * count_params(&small));
    }
}
