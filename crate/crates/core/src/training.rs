//! Adam, augmentation, the training loop and evaluation.

use std::io::Write;

use crate::backbone::{U2Former, U2FormerConfig};
use crate::contrastive::{multiview_loss, ContrastiveConfig, Embedder, PairSources, ProjectionHead};
use crate::datasynth::SamplePair;
use crate::error::{Error, Result};
use crate::losses::{perceptual_loss, pixel_loss, psnr, ssim, total_loss, total_loss_value, FeatureExtractor, LossWeights};
use crate::numerics::{Bound, Element, InitMode, ParamBuilder, ParamStore, Tape, Tensor, Var};
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: U2FormerConfig,
    pub contrastive: ContrastiveConfig,
    pub loss: LossWeights,
    pub lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Side of the square training crop; 0 trains on whole images.
    pub crop: usize,
    pub flip: bool,
    pub random_crop: bool,
    /// Crop a random region of 1 to 1.5 times the crop size and resize it
    /// down to the crop size.
    pub resize: bool,
    pub eval_every: usize,
    pub extractor_seed: u64,
}

impl Default for TrainConfig {
    /// Full-scale settings (8x8 windows, base width 32).
    fn default() -> Self {
        TrainConfig {
            model: U2FormerConfig {
                base_channels: 32,
                window: 8,
                ..Default::default()
            },
            contrastive: ContrastiveConfig::default(),
            loss: LossWeights::default(),
            lr: 2e-4,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch_size: 4,
            max_steps: 1000,
            seed: 0,
            crop: 256,
            flip: true,
            random_crop: true,
            resize: true,
            eval_every: 0,
            extractor_seed: 0x5eed,
        }
    }
}

impl TrainConfig {
    /// CPU-sized settings: C = 8, 4x4 windows, 48x48 crops, batch 4.
    pub fn desk() -> Self {
        TrainConfig {
            model: U2FormerConfig::default(),
            contrastive: ContrastiveConfig {
                n_per_role: 1,
                ..Default::default()
            },
            crop: 48,
            max_steps: 400,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.adam_eps > 0.0) {
            return Err(Error::config(format!("bad Adam settings betas=({b1}, {b2}) eps={}", self.adam_eps)));
        }
        self.model.validate()?;
        self.contrastive.validate()?;
        self.loss.validate()
    }
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element> {
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update from the gradients stored on `store`;
/// parameters without a gradient are treated as having a zero gradient.
pub fn adam_step<T: Element>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, betas: (f64, f64), eps: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::shape(format!("Adam state for {} tensors, store has {}", state.m.len(), store.len())));
    }
    state.step += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (ib1, ib2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let step = T::from_f64(lr / c1);
    let inv_c2 = T::from_f64(1.0 / c2);
    let eps = T::from_f64(eps);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.len() != p.tensor.numel() {
            return Err(Error::shape(format!("Adam state shape mismatch for {}", p.name)));
        }
        let Some(g) = p.grad.as_ref() else {
            for (m, v) in m.iter_mut().zip(v.iter_mut()) {
                *m *= b1t;
                *v *= b2t;
            }
            continue;
        };
        let g = g.data();
        for (((x, m), v), &g) in p.tensor.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *m = b1t * *m + ib1 * g;
            *v = b2t * *v + ib2 * g * g;
            *x -= step * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Input, background and noise of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Triple<T: Element> {
    pub input: Tensor<T>,
    pub background: Tensor<T>,
    pub noise: Tensor<T>,
}

impl<T: Element> Triple<T> {
    pub fn from_sample(s: &SamplePair) -> Self {
        Triple {
            input: s.input.cast(),
            background: s.background.cast(),
            noise: s.noise.cast(),
        }
    }
}

fn crop_resize<T: Element>(x: &Tensor<T>, y0: usize, x0: usize, side: usize, out: usize) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let v = tape.constant(x.clone()).crop(y0, x0, side, side)?;
    let v = if side == out { v } else { v.resize_bilinear(out, out)? };
    Ok(v.to_tensor())
}

fn flip<T: Element>(x: &Tensor<T>, horizontal: bool) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ch, r) = (i / (h * w), i % (h * w));
        let (y, xx) = (r / w, r % w);
        if horizontal {
            x.at(&[ch, y, w - 1 - xx])
        } else {
            x.at(&[ch, h - 1 - y, xx])
        }
    }))
}

/// The same random crop / resize / flips applied to all three images.
pub fn augment<T: Element>(s: &Triple<T>, cfg: &TrainConfig, rng: &mut Stream) -> Result<Triple<T>> {
    let (_, h, w) = s.input.dims3()?;
    let mut out = s.clone();
    if cfg.crop > 0 {
        let limit = h.min(w);
        if cfg.crop > limit {
            return Err(Error::PatchTooLarge { patch: cfg.crop, height: h, width: w });
        }
        let side = if cfg.resize {
            let hi = ((cfg.crop as f64 * 1.5) as usize).min(limit);
            cfg.crop + rng.below(hi - cfg.crop + 1)
        } else {
            cfg.crop
        };
        let (y0, x0) = if cfg.random_crop { (rng.below(h - side + 1), rng.below(w - side + 1)) } else { ((h - side) / 2, (w - side) / 2) };
        let f = |t: &Tensor<T>| crop_resize(t, y0, x0, side, cfg.crop);
        out = Triple {
            input: f(&out.input)?,
            background: f(&out.background)?,
            noise: f(&out.noise)?,
        };
    }
    if cfg.flip {
        for horizontal in [true, false] {
            if rng.coin() {
                out = Triple {
                    input: flip(&out.input, horizontal)?,
                    background: flip(&out.background, horizontal)?,
                    noise: flip(&out.noise, horizontal)?,
                };
            }
        }
    }
    Ok(out)
}

/// Model, projection head and frozen extractor sharing one parameter store.
pub struct Network {
    pub model: U2Former,
    pub head: ProjectionHead,
}

impl Network {
    pub fn build<T: Element>(cfg: &TrainConfig, store: &mut ParamStore<T>, mode: InitMode) -> Result<Self> {
        let mut rng = Stream::new(cfg.seed, 0x1417);
        let mut pb = ParamBuilder::new(store, &mut rng, mode);
        let model = U2Former::new(&mut pb, cfg.model.clone())?;
        let head = ProjectionHead::new(&mut pb.scope("head"), cfg.model.width(4), cfg.contrastive.hidden, cfg.contrastive.dim)?;
        Ok(Network { model, head })
    }

    pub fn embedder(&self, cfg: &TrainConfig) -> Embedder<'_> {
        Embedder {
            model: &self.model,
            head: &self.head,
            l2_normalize: cfg.contrastive.l2_normalize,
        }
    }
}

/// Loss terms of one step, exactly as combined into the total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub total: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub contrastive: f64,
}

pub const LOG_HEADER: &str = "step,total,pixel,perceptual,contrastive";

impl StepLosses {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.total, self.pixel, self.perceptual, self.contrastive)
    }
}

/// Per-sample part of the batch objective, already scaled by `1 / batch`
/// (pixel and perceptual) so that per-sample gradients sum to the batch
/// gradient. The contrastive term is added for the anchor sample only.
pub struct SampleObjective<'t, T: Element> {
    pub scaled: Var<'t, T>,
    pub pixel: f64,
    pub perceptual: f64,
    pub contrastive: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn sample_objective<'t, T: Element>(
    net: &Network,
    extractor: &FeatureExtractor<T>,
    cfg: &TrainConfig,
    sample: &Triple<T>,
    others: &[Tensor<T>],
    anchor: bool,
    batch: usize,
    p: &Bound<'t, T>,
    tape: &'t Tape<T>,
    rng: &mut Stream,
) -> Result<SampleObjective<'t, T>> {
    let input = tape.constant(sample.input.clone());
    let t = tape.constant(sample.background.clone());
    let r = tape.constant(sample.noise.clone());
    let out = net.model.forward(&input, p)?;
    let pix = pixel_loss(&out, &t, &r, &cfg.loss)?;
    let per = perceptual_loss(&out, &t, &r, extractor, &cfg.loss)?;
    let zero = tape.constant(Tensor::scalar(T::zero()));
    let (con, con_value) = if anchor && cfg.loss.lambda3 != 0.0 {
        let others: Vec<Var<'t, T>> = others.iter().map(|o| tape.constant(o.clone())).collect();
        let fb = out.final_background();
        let fr = out.final_noise();
        let src = PairSources {
            restored_t: &fb,
            restored_r: &fr,
            gt_same: &t,
            gt_others: &others,
            image_id: 0,
        };
        let mv = multiview_loss(&src, &net.embedder(cfg), &cfg.contrastive, p, rng)?;
        (mv.loss, Some(mv.loss.item().to_f64()))
    } else if anchor {
        (zero, Some(0.0))
    } else {
        (zero, None)
    };
    let k = 1.0 / batch as f64;
    let scaled_w = LossWeights {
        lambda1: cfg.loss.lambda1 * k,
        lambda2: cfg.loss.lambda2 * k,
        ..cfg.loss.clone()
    };
    let scaled = total_loss(&pix, &per, &con, &scaled_w)?;
    Ok(SampleObjective {
        scaled,
        pixel: pix.item().to_f64(),
        perceptual: per.item().to_f64(),
        contrastive: con_value,
    })
}

/// Batch objective value `lambda1 mean(pixel) + lambda2 mean(perceptual) +
/// lambda3 contrastive(anchor)` as a single differentiable scalar.
pub fn batch_objective<'t, T: Element>(
    net: &Network,
    extractor: &FeatureExtractor<T>,
    cfg: &TrainConfig,
    batch: &[Triple<T>],
    anchor: usize,
    p: &Bound<'t, T>,
    tape: &'t Tape<T>,
    rng: &mut Stream,
) -> Result<Var<'t, T>> {
    let mut acc: Option<Var<'t, T>> = None;
    for (i, s) in batch.iter().enumerate() {
        let others = other_backgrounds(batch, i);
        let o = sample_objective(net, extractor, cfg, s, &others, i == anchor, batch.len(), p, tape, rng)?;
        acc = Some(match acc {
            Some(a) => a.add(&o.scaled)?,
            None => o.scaled,
        });
    }
    acc.ok_or_else(|| Error::config("empty batch"))
}

fn other_backgrounds<T: Element>(batch: &[Triple<T>], skip: usize) -> Vec<Tensor<T>> {
    batch.iter().enumerate().filter(|&(j, _)| j != skip).map(|(_, s)| s.background.clone()).collect()
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore<f32>,
    pub net: Network,
    pub extractor: FeatureExtractor<f32>,
    pub adam: AdamState<f32>,
    pub step: usize,
    rng: Stream,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        Self::with_extractor(cfg.clone(), FeatureExtractor::random(cfg.extractor_seed))
    }

    pub fn with_extractor(cfg: TrainConfig, extractor: FeatureExtractor<f32>) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let net = Network::build(&cfg, &mut store, InitMode::Standard)?;
        let adam = AdamState::new(&store);
        let rng = Stream::new(cfg.seed, 0x7a1);
        Ok(Trainer {
            cfg,
            store,
            net,
            extractor,
            adam,
            step: 0,
            rng,
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Next `batch_size` dataset indices, walking seeded permutations.
    fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                for i in (1..n).rev() {
                    let j = self.rng.below(i + 1);
                    self.order.swap(i, j);
                }
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Forward, backward and one Adam update on the given samples.
    pub fn train_step(&mut self, batch: &[Triple<f32>]) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let anchor = self.rng.below(batch.len());
        let mut crng = self.rng.split(self.step as u64);
        self.store.zero_grads();
        let (mut pixel, mut perceptual, mut contrastive) = (0.0, 0.0, 0.0);
        for (i, s) in batch.iter().enumerate() {
            let others = other_backgrounds(batch, i);
            let tape = Tape::new();
            let p = self.store.bind(&tape);
            let o = sample_objective(&self.net, &self.extractor, &self.cfg, s, &others, i == anchor, batch.len(), &p, &tape, &mut crng)
                .map_err(|e| dump(e, self.step, i, s))?;
            let grads = tape.backward(o.scaled)?;
            self.store.accumulate_grads(&grads, &p);
            pixel += o.pixel / batch.len() as f64;
            perceptual += o.perceptual / batch.len() as f64;
            contrastive += o.contrastive.unwrap_or(0.0);
        }
        let total = total_loss_value(pixel, perceptual, contrastive, &self.cfg.loss).map_err(|e| dump(e, self.step, anchor, &batch[anchor]))?;
        adam_step(&mut self.store, &mut self.adam, self.cfg.lr, self.cfg.betas, self.cfg.adam_eps)?;
        let losses = StepLosses {
            step: self.step,
            total,
            pixel,
            perceptual,
            contrastive,
        };
        self.step += 1;
        Ok(losses)
    }

    /// Draw an augmented batch from `data` and train on it.
    pub fn step_on(&mut self, data: &[Triple<f32>]) -> Result<StepLosses> {
        if data.is_empty() {
            return Err(Error::config("empty training set"));
        }
        let idx = self.next_indices(data.len());
        let mut arng = self.rng.split(0xa5 ^ self.step as u64);
        let batch = idx.iter().map(|&i| augment(&data[i], &self.cfg, &mut arng)).collect::<Result<Vec<_>>>()?;
        self.train_step(&batch)
    }

    /// Run until `max_steps`, writing one CSV line per step to `log`.
    pub fn fit(&mut self, data: &[Triple<f32>], log: &mut dyn Write, mut on_eval: impl FnMut(&Trainer) -> Result<()>) -> Result<Vec<StepLosses>> {
        writeln!(log, "{LOG_HEADER}")?;
        let mut history = Vec::with_capacity(self.cfg.max_steps);
        while self.step < self.cfg.max_steps {
            let l = self.step_on(data)?;
            writeln!(log, "{}", l.csv())?;
            history.push(l);
            if self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0 {
                on_eval(self)?;
            }
        }
        Ok(history)
    }
}

fn dump(e: Error, step: usize, index: usize, s: &Triple<f32>) -> Error {
    if matches!(e, Error::NonFiniteLoss(_)) {
        let stats = |t: &Tensor<f32>| {
            let d = t.data();
            let lo = d.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            format!("{:?} min {lo} max {hi} mean {}", t.shape(), t.mean())
        };
        log::error!(
            "non-finite loss at step {step}, batch item {index}: input {}, background {}, noise {}",
            stats(&s.input),
            stats(&s.background),
            stats(&s.noise)
        );
    }
    e
}

/// Background and noise estimates for one image of any size.
pub fn restore<T: Element>(model: &U2Former, store: &ParamStore<T>, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = Tape::inference();
    let p = store.bind(&tape);
    let out = model.forward(&tape.constant(image.clone()), &p)?;
    Ok((out.final_background().to_tensor(), out.final_noise().to_tensor()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

impl EvalReport {
    pub fn gain(&self) -> f64 {
        self.psnr - self.baseline_psnr
    }

    pub fn table(&self) -> String {
        let mut out = String::from("index    psnr    ssim  in_psnr  in_ssim\n");
        for r in &self.rows {
            out.push_str(&format!("{:>5} {:>7.3} {:>7.4} {:>8.3} {:>8.4}\n", r.index, r.psnr, r.ssim, r.baseline_psnr, r.baseline_ssim));
        }
        out.push_str(&format!(" mean {:>7.3} {:>7.4} {:>8.3} {:>8.4}\n", self.psnr, self.ssim, self.baseline_psnr, self.baseline_ssim));
        out
    }
}

/// Metrics of `predictions` against the backgrounds of `samples`, with the
/// degraded inputs as the baseline.
pub fn evaluate_predictions(predictions: &[Tensor<f64>], samples: &[SamplePair]) -> Result<EvalReport> {
    if predictions.len() != samples.len() || samples.is_empty() {
        return Err(Error::shape(format!("{} predictions for {} samples", predictions.len(), samples.len())));
    }
    let rows = predictions
        .iter()
        .zip(samples)
        .enumerate()
        .map(|(index, (pred, s))| {
            Ok(EvalRow {
                index,
                psnr: psnr(pred, &s.background)?,
                ssim: ssim(pred, &s.background)?,
                baseline_psnr: psnr(&s.input, &s.background)?,
                baseline_ssim: ssim(&s.input, &s.background)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        psnr: mean(|r| r.psnr),
        ssim: mean(|r| r.ssim),
        baseline_psnr: mean(|r| r.baseline_psnr),
        baseline_ssim: mean(|r| r.baseline_ssim),
        rows,
    })
}

/// Restore every sample's input and score the background estimate.
pub fn evaluate<T: Element>(model: &U2Former, store: &ParamStore<T>, samples: &[SamplePair]) -> Result<EvalReport> {
    let preds = samples
        .iter()
        .map(|s| Ok(restore(model, store, &s.input.cast::<T>())?.0.cast::<f64>()))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&preds, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::{synthesize, Backgrounds, DegradationSpec, Kind};

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: U2FormerConfig {
                base_channels: 4,
                stage_depths: [1, 1, 1, 1],
                bottleneck_blocks: 1,
                ..Default::default()
            },
            contrastive: ContrastiveConfig {
                n_per_role: 1,
                patch_size: 8,
                hidden: 16,
                dim: 8,
                ..Default::default()
            },
            crop: 16,
            batch_size: 2,
            max_steps: 3,
            lr: 1e-3,
            ..TrainConfig::desk()
        }
    }

    fn data(n: usize, size: usize) -> Vec<SamplePair> {
        synthesize(&DegradationSpec::new(Kind::Rain, size, 3), n, &Backgrounds::Procedural).unwrap()
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::scalar(0.5)).unwrap();
        let mut state = AdamState::new(&store);
        store.get_mut(id).grad = Some(Tensor::scalar(1.0));
        adam_step(&mut store, &mut state, 0.01, (0.9, 0.999), 1e-8).unwrap();
        let moved = 0.5 - store.get(id).tensor.item();
        assert!((moved - 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
        for _ in 0..3 {
            adam_step(&mut store, &mut state, 0.01, (0.9, 0.999), 1e-8).unwrap();
        }
        assert!((0.5 - store.get(id).tensor.item() - 0.04).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap()).unwrap();
        let before = store.get(id).tensor.clone();
        let mut state = AdamState::new(&store);
        store.get_mut(id).grad = Some(Tensor::zeros(&[3]));
        adam_step(&mut store, &mut state, 0.1, (0.9, 0.999), 1e-8).unwrap();
        store.zero_grads();
        adam_step(&mut store, &mut state, 0.1, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(store.get(id).tensor, before);
    }

    #[test]
    fn augmentation_is_shared_across_the_triple() {
        let s = &data(1, 32)[0];
        let t = Triple::<f64>::from_sample(s);
        let cfg = TrainConfig { crop: 16, ..tiny() };
        let a = augment(&t, &cfg, &mut Stream::new(1, 2)).unwrap();
        assert_eq!(a.input.shape(), &[3, 16, 16]);
        assert_eq!(a.noise.shape(), &[3, 16, 16]);
        let plain = TrainConfig {
            resize: false,
            flip: false,
            random_crop: false,
            ..cfg.clone()
        };
        let c = augment(&t, &plain, &mut Stream::new(1, 2)).unwrap();
        assert_eq!(c.background.at(&[0, 0, 0]), t.background.at(&[0, 8, 8]));
        for i in 0..c.input.numel() {
            assert_eq!(c.input.data()[i], (c.background.data()[i] + c.noise.data()[i]).clamp(0.0, 1.0));
        }
        let flipped = TrainConfig { flip: true, ..plain };
        let f = augment(&t, &flipped, &mut Stream::new(3, 0)).unwrap();
        for i in 0..f.input.numel() {
            assert_eq!(f.input.data()[i], (f.background.data()[i] + f.noise.data()[i]).clamp(0.0, 1.0));
        }
    }

    #[test]
    fn zeroed_auxiliary_weights_reduce_to_pixel_loss() {
        let mut cfg = tiny();
        cfg.loss.lambda2 = 0.0;
        cfg.loss.lambda3 = 0.0;
        let samples = data(2, 16);
        let batch: Vec<Triple<f32>> = samples.iter().map(Triple::from_sample).collect();
        let mut tr = Trainer::new(cfg).unwrap();
        let l = tr.train_step(&batch).unwrap();
        assert!((l.total - l.pixel).abs() < 1e-6);
        assert!(l.total.is_finite() && l.perceptual > 0.0);
    }

    #[test]
    fn runs_are_deterministic_and_logged() {
        let samples = data(3, 24);
        let set: Vec<Triple<f32>> = samples.iter().map(Triple::from_sample).collect();
        let run = || {
            let mut tr = Trainer::new(tiny()).unwrap();
            let mut log = Vec::new();
            let h = tr.fit(&set, &mut log, |_| Ok(())).unwrap();
            (h, String::from_utf8(log).unwrap(), tr.store)
        };
        let (h1, log1, s1) = run();
        let (h2, log2, s2) = run();
        assert_eq!(h1, h2);
        assert_eq!(log1, log2);
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let lines: Vec<&str> = log1.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 4);
        let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(first[0], 0.0);
        let w = LossWeights::default();
        assert_eq!(first[1], total_loss_value(first[2], first[3], first[4], &w).unwrap());
        assert!(h1[0].contrastive > 0.0);
    }

    #[test]
    fn evaluation_self_consistency() {
        let samples = data(2, 16);
        let gt: Vec<Tensor<f64>> = samples.iter().map(|s| s.background.clone()).collect();
        let r = evaluate_predictions(&gt, &samples).unwrap();
        assert_eq!(r.psnr, 100.0);
        assert!((r.ssim - 1.0).abs() < 1e-9);
        let inputs: Vec<Tensor<f64>> = samples.iter().map(|s| s.input.clone()).collect();
        let r = evaluate_predictions(&inputs, &samples).unwrap();
        assert_eq!(r.psnr, r.baseline_psnr);
        assert_eq!(r.ssim, r.baseline_ssim);
        assert!(r.table().lines().count() == 4);

        let tr = Trainer::new(tiny()).unwrap();
        let e = evaluate(&tr.net.model, &tr.store, &samples).unwrap();
        assert_eq!(e.rows.len(), 2);
        assert!(e.psnr.is_finite());
    }
}
