//! Synthetic degradations (rain, haze, reflection) over procedural or
//! loaded backgrounds, and the on-disk dataset format.
//!
//! A dataset lives in `<root>/<split>/` as `<index>_{input,background,noise}.png`
//! plus `manifest.txt` with one `index kind seed spec_hash` line per sample.
//! Sample `i` of a dataset with seed `s` is generated from the stream
//! `Stream::new(s, i)`; its first word is the sample seed recorded in the
//! manifest, and [`generate`] with that seed reproduces the sample.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Rain,
    Haze,
    Reflection,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Rain => "rain",
            Kind::Haze => "haze",
            Kind::Reflection => "reflection",
        })
    }
}

impl FromStr for Kind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rain" => Ok(Kind::Rain),
            "haze" => Ok(Kind::Haze),
            "reflection" => Ok(Kind::Reflection),
            _ => Err(Error::Parse(format!("unknown degradation kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RainParams {
    pub streaks: usize,
    /// Streak length range in pixels.
    pub length: (f64, f64),
    /// Angle range in degrees from vertical.
    pub angle: (f64, f64),
    pub intensity: (f64, f64),
    /// Half width of a streak in pixels.
    pub half_width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams {
    pub transmission: (f64, f64),
    pub airlight: (f64, f64),
    /// Side of the coarse grid the transmission map is interpolated from.
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReflectionParams {
    pub weight: (f64, f64),
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    pub blur_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: Kind,
    pub size: usize,
    pub seed: u64,
    pub rain: RainParams,
    pub haze: HazeParams,
    pub reflection: ReflectionParams,
}

impl DegradationSpec {
    pub fn new(kind: Kind, size: usize, seed: u64) -> Self {
        DegradationSpec {
            kind,
            size,
            seed,
            rain: RainParams {
                streaks: 60,
                length: (8.0, 20.0),
                angle: (-20.0, 20.0),
                intensity: (0.3, 0.8),
                half_width: 0.8,
            },
            haze: HazeParams {
                transmission: (0.3, 0.9),
                airlight: (0.7, 1.0),
                grid: 4,
            },
            reflection: ReflectionParams {
                weight: (0.2, 0.5),
                blur_sigma: 1.5,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, (lo, hi): (f64, f64)| {
            if (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo <= hi {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!("{name} range ({lo}, {hi}) must lie in [0, 1]")))
            }
        };
        if self.size == 0 {
            return Err(Error::InvalidSpec("image size must be positive".into()));
        }
        let r = &self.rain;
        unit("rain intensity", r.intensity)?;
        if !(r.length.0 >= 0.0 && r.length.0 <= r.length.1) || !(r.half_width > 0.0) || !(r.angle.0 <= r.angle.1) || r.angle.0.abs() > 90.0 || r.angle.1.abs() > 90.0 {
            return Err(Error::InvalidSpec(format!("bad rain parameters {r:?}")));
        }
        unit("haze transmission", self.haze.transmission)?;
        unit("haze airlight", self.haze.airlight)?;
        if self.haze.grid < 2 {
            return Err(Error::InvalidSpec("haze grid must be at least 2".into()));
        }
        unit("reflection weight", self.reflection.weight)?;
        if !(self.reflection.blur_sigma >= 0.0) {
            return Err(Error::InvalidSpec("reflection blur sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// CRC32 of the canonical text form; the spec seed is excluded.
    pub fn hash(&self) -> u32 {
        let canon = format!("{}|{}|{:?}|{:?}|{:?}", self.kind, self.size, self.rain, self.haze, self.reflection);
        crc32fast::hash(canon.as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub input: Tensor<f64>,
    pub background: Tensor<f64>,
    pub noise: Tensor<f64>,
    pub kind: Kind,
    pub seed: u64,
    /// Haze transmission map `[1, H, W]`.
    pub transmission: Option<Tensor<f64>>,
}

fn check_unit(t: &Tensor<f64>, what: &str) -> Result<()> {
    if t.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("{what} must lie in [0, 1]")))
    }
}

fn additive(background: &Tensor<f64>, noise: Tensor<f64>, kind: Kind, seed: u64) -> Result<SamplePair> {
    let input = background.zip_map(&noise, |t, r| (t + r).clamp(0.0, 1.0))?;
    Ok(SamplePair {
        input,
        background: background.clone(),
        noise,
        kind,
        seed,
        transmission: None,
    })
}

fn segment_distance(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let s = if len2 == 0.0 { 0.0 } else { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (ax + s * dx, ay + s * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Bright anti-aliased streaks added on top of `background`.
pub fn gen_rain(background: &Tensor<f64>, p: &RainParams, rng: &mut Stream, seed: u64) -> Result<SamplePair> {
    check_unit(background, "background")?;
    let (c, h, w) = background.dims3()?;
    let mut layer = vec![0.0f64; h * w];
    for _ in 0..p.streaks {
        let (cx, cy) = (rng.range(0.0, w as f64), rng.range(0.0, h as f64));
        let len = rng.range(p.length.0, p.length.1);
        let theta = rng.range(p.angle.0, p.angle.1).to_radians();
        let a = rng.range(p.intensity.0, p.intensity.1);
        let (dx, dy) = (0.5 * len * theta.sin(), 0.5 * len * theta.cos());
        let (s, e) = ((cx - dx, cy - dy), (cx + dx, cy + dy));
        let reach = p.half_width + 1.0;
        let x0 = (s.0.min(e.0) - reach).floor().max(0.0) as usize;
        let x1 = ((s.0.max(e.0) + reach).ceil() as usize).min(w);
        let y0 = (s.1.min(e.1) - reach).floor().max(0.0) as usize;
        let y1 = ((s.1.max(e.1) + reach).ceil() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, s, e);
                let cover = (1.0 - (d - p.half_width + 0.5)).clamp(0.0, 1.0);
                let v = &mut layer[y * w + x];
                *v = (*v + a * cover).min(1.0);
            }
        }
    }
    let noise = Tensor::from_fn(&[c, h, w], |i| layer[i % (h * w)]);
    additive(background, noise, Kind::Rain, seed)
}

fn upsample_grid(grid: &[f64], g: usize, h: usize, w: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize| if n == 1 { 0.0 } else { i as f64 * (g - 1) as f64 / (n - 1) as f64 };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = coord(y, h);
        let (y0, ty) = ((fy.floor() as usize).min(g - 2), fy - (fy.floor() as usize).min(g - 2) as f64);
        for x in 0..w {
            let fx = coord(x, w);
            let (x0, tx) = ((fx.floor() as usize).min(g - 2), fx - (fx.floor() as usize).min(g - 2) as f64);
            let at = |yy: usize, xx: usize| grid[yy * g + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// `I = T t + A (1 - t)` with a smooth random transmission map `t`; the
/// stored noise layer is the veil `A (1 - t)`.
pub fn gen_haze(background: &Tensor<f64>, p: &HazeParams, rng: &mut Stream, seed: u64) -> Result<SamplePair> {
    check_unit(background, "background")?;
    let (_, h, w) = background.dims3()?;
    let g = p.grid;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.range(p.transmission.0, p.transmission.1)).collect();
    let airlight = rng.range(p.airlight.0, p.airlight.1);
    let t = Tensor::new(&[1, h, w], upsample_grid(&grid, g, h, w))?;
    Ok(haze_with(background, &t, airlight, seed))
}

/// Haze composition for a given transmission map.
pub fn haze_with(background: &Tensor<f64>, t: &Tensor<f64>, airlight: f64, seed: u64) -> SamplePair {
    let hw = t.numel();
    let tv = t.data();
    let noise = Tensor::from_fn(background.shape(), |i| airlight * (1.0 - tv[i % hw]));
    let input = Tensor::from_fn(background.shape(), |i| background.data()[i] * tv[i % hw] + noise.data()[i]);
    SamplePair {
        input,
        background: background.clone(),
        noise,
        kind: Kind::Haze,
        seed,
        transmission: Some(t.clone()),
    }
}

/// Separable Gaussian blur with reflected borders, radius `ceil(3 sigma)`.
pub fn gaussian_blur(x: &Tensor<f64>, sigma: f64) -> Result<Tensor<f64>> {
    let (c, h, w) = x.dims3()?;
    if sigma <= 0.0 {
        return Ok(x.clone());
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    let mut tmp = vec![0.0; c * h * w];
    let mut out = vec![0.0; c * h * w];
    let d = x.data();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                tmp[base + y * w + xx] = (-r..=r).map(|o| k[(o + r) as usize] * d[base + y * w + reflect(xx as isize + o, w)]).sum();
            }
        }
        for y in 0..h {
            for xx in 0..w {
                out[base + y * w + xx] = (-r..=r).map(|o| k[(o + r) as usize] * tmp[base + reflect(y as isize + o, h) * w + xx]).sum();
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// `R = w blur(other)`, `I = clamp(T + R)`.
pub fn gen_reflection(background: &Tensor<f64>, other: &Tensor<f64>, p: &ReflectionParams, rng: &mut Stream, seed: u64) -> Result<SamplePair> {
    check_unit(background, "background")?;
    check_unit(other, "reflected image")?;
    background.expect_same_shape(other)?;
    let weight = rng.range(p.weight.0, p.weight.1);
    let noise = gaussian_blur(other, p.blur_sigma)?.map(|v| weight * v);
    additive(background, noise, Kind::Reflection, seed)
}

/// Smooth value noise in `[0, 1]` from a random coarse grid.
fn value_noise(h: usize, w: usize, g: usize, rng: &mut Stream) -> Vec<f64> {
    let grid: Vec<f64> = (0..g * g).map(|_| rng.uniform()).collect();
    upsample_grid(&grid, g, h, w).into_iter().map(|v| v * v * (3.0 - 2.0 * v)).collect()
}

/// Procedural RGB texture: a linear colour gradient, an optional
/// checkerboard and soft noise blobs.
pub fn procedural_background(size: usize, rng: &mut Stream) -> Tensor<f64> {
    let (h, w) = (size, size);
    let colour = |rng: &mut Stream| [rng.uniform(), rng.uniform(), rng.uniform()];
    let (c0, c1, c2) = (colour(rng), colour(rng), colour(rng));
    let angle = rng.range(0.0, std::f64::consts::TAU);
    let (ux, uy) = (angle.cos(), angle.sin());
    let checker = if rng.coin() { Some(4 + rng.below(13)) } else { None };
    let checker_amp = rng.range(0.05, 0.25);
    let noise = value_noise(h, w, 3 + rng.below(6), rng);
    let blob_amp = rng.range(0.2, 0.6);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / (w.max(2) - 1) as f64, y as f64 / (h.max(2) - 1) as f64);
            let s = (((fx - 0.5) * ux + (fy - 0.5) * uy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            let n = noise[y * w + x];
            let check = match checker {
                Some(cell) if (x / cell + y / cell) % 2 == 0 => checker_amp,
                Some(_) => -checker_amp,
                None => 0.0,
            };
            for ch in 0..3 {
                let base = c0[ch] * (1.0 - s) + c1[ch] * s;
                let v = base * (1.0 - blob_amp * n) + c2[ch] * blob_amp * n + check;
                data[ch * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// Background source for dataset generation.
pub enum Backgrounds<'a> {
    Procedural,
    Images(&'a [Tensor<f64>]),
}

fn pick_background(bg: &Backgrounds<'_>, size: usize, rng: &mut Stream) -> Result<Tensor<f64>> {
    match bg {
        Backgrounds::Procedural => Ok(procedural_background(size, rng)),
        Backgrounds::Images(list) => {
            if list.is_empty() {
                return Err(Error::InvalidSpec("empty background image list".into()));
            }
            let img = &list[rng.below(list.len())];
            let (_, h, w) = img.dims3()?;
            if h < size || w < size {
                return Err(Error::InvalidSpec(format!("background {h}x{w} is smaller than {size}")));
            }
            let (y, x) = (rng.below(h - size + 1), rng.below(w - size + 1));
            Ok(Tensor::from_fn(&[3, size, size], |i| {
                let (c, r) = (i / (size * size), i % (size * size));
                img.at(&[c, y + r / size, x + r % size])
            }))
        }
    }
}

/// Regenerate one sample from its sample seed.
pub fn generate_with(spec: &DegradationSpec, sample_seed: u64, bg: &Backgrounds<'_>) -> Result<SamplePair> {
    spec.validate()?;
    let mut rng = Stream::new(sample_seed, 0);
    let background = pick_background(bg, spec.size, &mut rng)?;
    match spec.kind {
        Kind::Rain => gen_rain(&background, &spec.rain, &mut rng, sample_seed),
        Kind::Haze => gen_haze(&background, &spec.haze, &mut rng, sample_seed),
        Kind::Reflection => {
            let other = pick_background(bg, spec.size, &mut rng)?;
            gen_reflection(&background, &other, &spec.reflection, &mut rng, sample_seed)
        }
    }
}

pub fn generate(spec: &DegradationSpec, sample_seed: u64) -> Result<SamplePair> {
    generate_with(spec, sample_seed, &Backgrounds::Procedural)
}

pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    Stream::new(dataset_seed, index as u64).next_u64()
}

/// Samples `0..n` of the dataset described by `spec`, in memory.
pub fn synthesize(spec: &DegradationSpec, n: usize, bg: &Backgrounds<'_>) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(Error::InvalidSpec("dataset size must be >= 1".into()));
    }
    (0..n).map(|i| generate_with(spec, sample_seed(spec.seed, i), bg)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub kind: Kind,
    pub seed: u64,
    pub spec_hash: u32,
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {:08x}", self.index, self.kind, self.seed, self.spec_hash)
    }
}

impl FromStr for ManifestEntry {
    type Err = Error;
    fn from_str(line: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad manifest line {line:?}"));
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        Ok(ManifestEntry {
            index: parts[0].parse().map_err(|_| bad())?,
            kind: parts[1].parse()?,
            seed: parts[2].parse().map_err(|_| bad())?,
            spec_hash: u32::from_str_radix(parts[3], 16).map_err(|_| bad())?,
        })
    }
}

pub const MANIFEST: &str = "manifest.txt";

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text: String = entries.iter().map(|e| format!("{e}\n")).collect();
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

fn image_error(path: &Path, e: impl fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Write a `[3, H, W]` tensor as an 8-bit RGB PNG.
pub fn save_png(t: &Tensor<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("PNG output needs 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            px.0[ch] = (t.at(&[ch, y as usize, x as usize]).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_error(path, e))
}

pub fn load_png(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, r) = (i / (h * w), i % (h * w));
        img.get_pixel((r % w) as u32, (r / w) as u32).0[c] as f64 / 255.0
    }))
}

pub fn sample_paths(dir: &Path, index: usize) -> [PathBuf; 3] {
    ["input", "background", "noise"].map(|role| dir.join(format!("{index}_{role}.png")))
}

/// Generate `n` samples into `<root>/<split>/` and return the manifest.
pub fn make_dataset(root: &Path, split: &str, spec: &DegradationSpec, n: usize, bg: &Backgrounds<'_>) -> Result<Vec<ManifestEntry>> {
    write_dataset(&root.join(split), spec, n, bg)
}

/// Generate `n` samples as PNG triples plus a manifest directly into `dir`.
pub fn write_dataset(dir: &Path, spec: &DegradationSpec, n: usize, bg: &Backgrounds<'_>) -> Result<Vec<ManifestEntry>> {
    let dir = dir.to_path_buf();
    fs::create_dir_all(&dir)?;
    let samples = synthesize(spec, n, bg)?;
    let mut entries = Vec::with_capacity(n);
    for (index, s) in samples.iter().enumerate() {
        let [pi, pb, pn] = sample_paths(&dir, index);
        save_png(&s.input, &pi)?;
        save_png(&s.background, &pb)?;
        save_png(&s.noise, &pn)?;
        entries.push(ManifestEntry {
            index,
            kind: s.kind,
            seed: s.seed,
            spec_hash: spec.hash(),
        });
    }
    write_manifest(&dir.join(MANIFEST), &entries)?;
    Ok(entries)
}

/// Load every sample listed in `<dir>/manifest.txt` (values quantized to
/// 1/255).
pub fn load_dataset(dir: &Path) -> Result<Vec<SamplePair>> {
    read_manifest(&dir.join(MANIFEST))?
        .into_iter()
        .map(|e| {
            let [pi, pb, pn] = sample_paths(dir, e.index);
            Ok(SamplePair {
                input: load_png(&pi)?,
                background: load_png(&pb)?,
                noise: load_png(&pn)?,
                kind: e.kind,
                seed: e.seed,
                transmission: None,
            })
        })
        .collect()
}

/// All PNG files of a directory, sorted by name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<Tensor<f64>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_png(p)).collect()
}
