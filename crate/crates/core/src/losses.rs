//! Multi-stage pixel and perceptual losses, the total objective, and the
//! PSNR / SSIM metrics.

use crate::backbone::{RestorationOutput, STAGES};
use crate::error::{Error, Result};
use crate::numerics::{weighted_sum, Element, Tensor, Tape, Var};
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub beta1: f64,
    pub theta: [f64; STAGES],
    pub alpha2: f64,
    pub beta2: f64,
    pub theta_p: [f64; STAGES],
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 0.7,
            beta1: 0.3,
            theta: [0.1, 0.1, 0.1, 0.7],
            alpha2: 0.7,
            beta2: 0.3,
            theta_p: [0.1, 0.1, 0.1, 0.7],
            lambda1: 1.0,
            lambda2: 0.2,
            lambda3: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let scalars = [self.alpha1, self.beta1, self.alpha2, self.beta2, self.lambda1, self.lambda2, self.lambda3];
        let all = scalars.iter().chain(&self.theta).chain(&self.theta_p);
        if all.clone().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn l1_loss<'t, T: Element>(a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("l1_loss of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b)?.abs().mean())
}

/// `alpha * sum_i theta_i d(T, T_i) + beta * sum_i theta_i d(R, R_i)`.
fn staged<'t, T: Element>(
    out: &RestorationOutput<'t, T>,
    alpha: f64,
    beta: f64,
    theta: &[f64; STAGES],
    mut dist_t: impl FnMut(&Var<'t, T>) -> Result<Var<'t, T>>,
    mut dist_r: impl FnMut(&Var<'t, T>) -> Result<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    if out.background_stages.len() != STAGES || out.noise_stages.len() != STAGES {
        return Err(Error::shape(format!(
            "expected {STAGES} stage images per branch, got {} and {}",
            out.background_stages.len(),
            out.noise_stages.len()
        )));
    }
    let mut terms = Vec::with_capacity(2 * STAGES);
    for (th, img) in theta.iter().zip(&out.background_stages) {
        terms.push((alpha * th, dist_t(img)?));
    }
    for (th, img) in theta.iter().zip(&out.noise_stages) {
        terms.push((beta * th, dist_r(img)?));
    }
    weighted_sum(&terms)
}

pub fn pixel_loss<'t, T: Element>(out: &RestorationOutput<'t, T>, t: &Var<'t, T>, r: &Var<'t, T>, w: &LossWeights) -> Result<Var<'t, T>> {
    staged(out, w.alpha1, w.beta1, &w.theta, |x| l1_loss(t, x), |x| l1_loss(r, x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorSource {
    FixedSeedRandom,
    LoadedWeights,
}

/// Frozen convolutional feature pyramid; features are tapped after every
/// layer.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Element> {
    /// `(weight [co, ci, 3, 3], bias [co], stride)` per layer.
    pub layers: Vec<(Tensor<T>, Tensor<T>, usize)>,
    pub source: ExtractorSource,
}

impl<T: Element> FeatureExtractor<T> {
    pub const WIDTHS: [usize; 3] = [8, 16, 32];

    /// Three 3x3 conv + ReLU layers (3 -> 8 -> 16 -> 32, the last two with
    /// stride 2), He-normal weights from `seed`.
    pub fn random(seed: u64) -> Self {
        let mut rng = Stream::new(seed, 0xfea7);
        let mut ci = 3;
        let layers = Self::WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &co)| {
                let std = (2.0 / (ci * 9) as f64).sqrt();
                let w = Tensor::from_fn(&[co, ci, 3, 3], |_| T::from_f64(rng.normal() * std));
                ci = co;
                (w, Tensor::zeros(&[co]), if i == 0 { 1 } else { 2 })
            })
            .collect();
        FeatureExtractor {
            layers,
            source: ExtractorSource::FixedSeedRandom,
        }
    }

    pub fn from_layers(layers: Vec<(Tensor<T>, Tensor<T>, usize)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("feature extractor needs at least one layer"));
        }
        let mut ci = 3;
        for (w, b, stride) in &layers {
            let s = w.shape();
            if s.len() != 4 || s[1] != ci || s[2] != s[3] || s[2] % 2 == 0 || b.shape() != [s[0]] || *stride == 0 {
                return Err(Error::shape(format!("bad extractor layer {s:?} after {ci} channels")));
            }
            ci = s[0];
        }
        Ok(FeatureExtractor {
            layers,
            source: ExtractorSource::LoadedWeights,
        })
    }

    pub fn features<'t>(&self, x: &Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let tape = x.tape();
        let mut h = *x;
        let mut taps = Vec::with_capacity(self.layers.len());
        for (w, b, stride) in &self.layers {
            let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
            h = h.conv2d(&w, Some(&b), *stride, w.shape()[2] / 2)?.relu();
            taps.push(h);
        }
        Ok(taps)
    }

    /// Mean over taps of the L1 distance between features.
    pub fn distance<'t>(&self, a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        let fb = self.features(b)?;
        self.distance_to(&fb, a)
    }

    fn distance_to<'t>(&self, target: &[Var<'t, T>], a: &Var<'t, T>) -> Result<Var<'t, T>> {
        let fa = self.features(a)?;
        let k = 1.0 / fa.len() as f64;
        let terms = fa.iter().zip(target).map(|(x, y)| Ok((k, l1_loss(y, x)?))).collect::<Result<Vec<_>>>()?;
        weighted_sum(&terms)
    }
}

pub fn perceptual_loss<'t, T: Element>(
    out: &RestorationOutput<'t, T>,
    t: &Var<'t, T>,
    r: &Var<'t, T>,
    extractor: &FeatureExtractor<T>,
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    let (ft, fr) = (extractor.features(t)?, extractor.features(r)?);
    staged(out, w.alpha2, w.beta2, &w.theta_p, |x| extractor.distance_to(&ft, x), |x| extractor.distance_to(&fr, x))
}

/// `lambda1 * pixel + lambda2 * perceptual + lambda3 * contrastive`.
pub fn total_loss<'t, T: Element>(pixel: &Var<'t, T>, perceptual: &Var<'t, T>, contrastive: &Var<'t, T>, w: &LossWeights) -> Result<Var<'t, T>> {
    for (name, v) in [("pixel", pixel), ("perceptual", perceptual), ("contrastive", contrastive)] {
        let x = v.item().to_f64();
        if !x.is_finite() {
            return Err(Error::NonFiniteLoss(format!("{name} loss is {x}")));
        }
    }
    let total = weighted_sum(&[(w.lambda1, *pixel), (w.lambda2, *perceptual), (w.lambda3, *contrastive)])?;
    let x = total.item().to_f64();
    if !x.is_finite() {
        return Err(Error::NonFiniteLoss(format!("total loss is {x}")));
    }
    Ok(total)
}

/// Scalar form of [`total_loss`] for already-evaluated terms.
pub fn total_loss_value(pixel: f64, perceptual: f64, contrastive: f64, w: &LossWeights) -> Result<f64> {
    let tape = Tape::<f64>::inference();
    let s = |v| tape.constant(Tensor::scalar(v));
    Ok(total_loss(&s(pixel), &s(perceptual), &s(contrastive), w)?.item())
}

pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(1 / MSE)` for unit-range images, capped at 100 dB.
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b)?;
    if a.numel() == 0 {
        return Err(Error::shape("psnr of empty images"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.to_f64() - y.to_f64()).powi(2)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter, valid region only.
fn blur_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = SSIM_WINDOW;
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels (11x11 Gaussian window, sigma 1.5, K1 0.01,
/// K2 0.03, data range 1).
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (c, h, w) = a.dims3()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gaussian_kernel();
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.channel(ch).iter().map(|&v| v.to_f64()).collect();
        let y: Vec<f64> = b.channel(ch).iter().map(|&v| v.to_f64()).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = blur_valid(&x, h, w, &k);
        let my = blur_valid(&y, h, w, &k);
        let sxx = blur_valid(&prod(&x, &x), h, w, &k);
        let syy = blur_valid(&prod(&y, &y), h, w, &k);
        let sxy = blur_valid(&prod(&x, &y), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}
