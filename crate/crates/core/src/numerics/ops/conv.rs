//! 2-D convolutions over single `[C, H, W]` feature maps.

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Element>(x: &[T], g: &Geometry) -> Vec<T> {
    let l = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.c_in * g.k * g.k * l];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * l;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Element>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let l = g.ho * g.wo;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * l;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T]) {
    let l = out.len() / bias.len();
    for (chunk, &b) in out.chunks_mut(l).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Element>(g: &[T], db: &mut [T]) {
    let l = g.len() / db.len();
    for (chunk, d) in g.chunks(l).zip(db.iter_mut()) {
        *d += chunk.iter().copied().sum::<T>();
    }
}

fn check_bias<T: Element>(b: Option<&Var<'_, T>>, c_out: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [c_out] {
            return Err(Error::shape(format!("bias {:?} for {c_out} outputs", b.shape())));
        }
    }
    Ok(())
}

impl<'t, T: Element> Var<'t, T> {
    /// Dense convolution. `w` is `[C_out, C_in, k, k]`.
    pub fn conv2d(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.same_tape(w);
        let (x, wv) = (self.value(), w.value());
        let (c_in, h, wd) = x.dims3()?;
        let &[c_out, wc, k, k2] = wv.shape() else {
            return Err(Error::shape(format!("conv weight {:?}", wv.shape())));
        };
        if wc != c_in || k != k2 || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d input {:?} weight {:?} stride {stride} pad {pad}",
                x.shape(),
                wv.shape()
            )));
        }
        check_bias(b, c_out)?;
        let g = Geometry {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let l = g.ho * g.wo;
        let kk = c_in * k * k;
        let mut out = vec![T::zero(); c_out * l];
        {
            let cols_owned;
            let cols: &[T] = if g.pointwise() {
                x.data()
            } else {
                cols_owned = im2col(x.data(), &g);
                &cols_owned
            };
            T::gemm(c_out, kk, l, T::one(), wv.data(), kk as isize, 1, cols, l as isize, 1, T::zero(), &mut out, l as isize, 1);
        }
        let bias = b.map(|b| b.value());
        if let Some(bv) = &bias {
            add_bias(&mut out, bv.data());
        }
        self.tape.count_macs(c_out * kk * l);
        let ids = (self.id, w.id, b.map(|b| b.id));
        let parents: Vec<usize> = [Some(ids.0), Some(ids.1), ids.2].into_iter().flatten().collect();
        Ok(self.tape.push(
            Tensor::from_parts(vec![c_out, g.ho, g.wo], out),
            &parents,
            move |gr, sink| {
                let gd = gr.data();
                let need_cols = sink.wants(ids.1) && !g.pointwise();
                let cols_owned = if need_cols { im2col(x.data(), &g) } else { Vec::new() };
                let cols: &[T] = if g.pointwise() { x.data() } else { &cols_owned };
                sink.acc(ids.1, |dw| {
                    T::gemm(c_out, l, kk, T::one(), gd, l as isize, 1, cols, 1, l as isize, T::one(), dw, kk as isize, 1);
                });
                if sink.wants(ids.0) {
                    if g.pointwise() {
                        sink.acc(ids.0, |dx| {
                            T::gemm(kk, c_out, l, T::one(), wv.data(), 1, kk as isize, gd, l as isize, 1, T::one(), dx, l as isize, 1);
                        });
                    } else {
                        let mut dcols = vec![T::zero(); kk * l];
                        T::gemm(kk, c_out, l, T::one(), wv.data(), 1, kk as isize, gd, l as isize, 1, T::zero(), &mut dcols, l as isize, 1);
                        sink.acc(ids.0, |dx| col2im_add(&dcols, &g, dx));
                    }
                }
                if let Some(ib) = ids.2 {
                    sink.acc(ib, |db| bias_grad(gd, db));
                }
            },
        ))
    }

    /// Depthwise convolution (one filter per channel), stride 1, zero padding.
    /// `w` is `[C, 1, k, k]`.
    pub fn depthwise_conv2d(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>, pad: usize) -> Result<Var<'t, T>> {
        self.same_tape(w);
        let (x, wv) = (self.value(), w.value());
        let (c, h, wd) = x.dims3()?;
        let &[wc, one, k, k2] = wv.shape() else {
            return Err(Error::shape(format!("depthwise weight {:?}", wv.shape())));
        };
        if wc != c || one != 1 || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!(
                "depthwise input {:?} weight {:?}",
                x.shape(),
                wv.shape()
            )));
        }
        check_bias(b, c)?;
        let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        // Visit every (channel, tap) pair with the valid output window for
        // that tap; `f(ch, tap, oy, ox_range, iy, ix0)`.
        let taps = move |f: &mut dyn FnMut(usize, usize, usize, usize, usize, usize, usize)| {
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let oy0 = pad.saturating_sub(ky);
                        let oy1 = (h + pad).saturating_sub(ky).min(ho);
                        let ox0 = pad.saturating_sub(kx);
                        let ox1 = (wd + pad).saturating_sub(kx).min(wo);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy + ky - pad;
                            f(ch, ky * k + kx, oy, ox0, ox1, iy, ox0 + kx - pad);
                        }
                    }
                }
            }
        };
        let mut out = vec![T::zero(); c * ho * wo];
        {
            let xd = x.data();
            let wdt = wv.data();
            taps(&mut |ch, tap, oy, ox0, ox1, iy, ix0| {
                let wt = wdt[ch * k * k + tap];
                let src = &xd[(ch * h + iy) * wd + ix0..(ch * h + iy) * wd + ix0 + (ox1 - ox0)];
                let dst = &mut out[(ch * ho + oy) * wo + ox0..(ch * ho + oy) * wo + ox1];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            });
        }
        if let Some(bv) = b.map(|b| b.value()) {
            add_bias(&mut out, bv.data());
        }
        self.tape.count_macs(c * k * k * ho * wo);
        let ids = (self.id, w.id, b.map(|b| b.id));
        let parents: Vec<usize> = [Some(ids.0), Some(ids.1), ids.2].into_iter().flatten().collect();
        Ok(self.tape.push(
            Tensor::from_parts(vec![c, ho, wo], out),
            &parents,
            move |gr, sink| {
                let gd = gr.data();
                let xd = x.data();
                let wdt = wv.data();
                sink.acc(ids.0, |dx| {
                    taps(&mut |ch, tap, oy, ox0, ox1, iy, ix0| {
                        let wt = wdt[ch * k * k + tap];
                        let src = &gd[(ch * ho + oy) * wo + ox0..(ch * ho + oy) * wo + ox1];
                        let base = (ch * h + iy) * wd + ix0;
                        for (d, &s) in dx[base..base + (ox1 - ox0)].iter_mut().zip(src) {
                            *d += wt * s;
                        }
                    });
                });
                sink.acc(ids.1, |dw| {
                    taps(&mut |ch, tap, oy, ox0, ox1, iy, ix0| {
                        let gs = &gd[(ch * ho + oy) * wo + ox0..(ch * ho + oy) * wo + ox1];
                        let base = (ch * h + iy) * wd + ix0;
                        let xs = &xd[base..base + (ox1 - ox0)];
                        dw[ch * k * k + tap] += gs.iter().zip(xs).map(|(&g, &x)| g * x).sum::<T>();
                    });
                });
                if let Some(ib) = ids.2 {
                    sink.acc(ib, |db| bias_grad(gd, db));
                }
            },
        ))
    }

    /// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x
    /// upsampling). `w` is `[C_in, C_out, 2, 2]`.
    pub fn conv_transpose2x2(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(w);
        let (x, wv) = (self.value(), w.value());
        let (c_in, h, wd) = x.dims3()?;
        let &[wc, c_out, 2, 2] = wv.shape() else {
            return Err(Error::shape(format!("transposed conv weight {:?}", wv.shape())));
        };
        if wc != c_in {
            return Err(Error::shape(format!(
                "transposed conv input {:?} weight {:?}",
                x.shape(),
                wv.shape()
            )));
        }
        check_bias(b, c_out)?;
        let l = h * wd;
        let j = c_out * 4;
        // Y[(co, dy, dx), p] = sum_ci W[ci, (co, dy, dx)] X[ci, p]
        let mut y = vec![T::zero(); j * l];
        T::gemm(j, c_in, l, T::one(), wv.data(), 1, j as isize, x.data(), l as isize, 1, T::zero(), &mut y, l as isize, 1);
        let (h2, w2) = (2 * h, 2 * wd);
        let mut out = vec![T::zero(); c_out * h2 * w2];
        for co in 0..c_out {
            for dy in 0..2 {
                for dx in 0..2 {
                    let row = &y[((co * 2 + dy) * 2 + dx) * l..][..l];
                    for iy in 0..h {
                        let dst = &mut out[(co * h2 + 2 * iy + dy) * w2..][..w2];
                        for ix in 0..wd {
                            dst[2 * ix + dx] = row[iy * wd + ix];
                        }
                    }
                }
            }
        }
        if let Some(bv) = b.map(|b| b.value()) {
            add_bias(&mut out, bv.data());
        }
        self.tape.count_macs(j * c_in * l);
        let ids = (self.id, w.id, b.map(|b| b.id));
        let parents: Vec<usize> = [Some(ids.0), Some(ids.1), ids.2].into_iter().flatten().collect();
        Ok(self.tape.push(
            Tensor::from_parts(vec![c_out, h2, w2], out),
            &parents,
            move |gr, sink| {
                let gd = gr.data();
                let mut dy_buf = vec![T::zero(); j * l];
                for co in 0..c_out {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let row = &mut dy_buf[((co * 2 + dy) * 2 + dx) * l..][..l];
                            for iy in 0..h {
                                let src = &gd[(co * h2 + 2 * iy + dy) * w2..][..w2];
                                for ix in 0..wd {
                                    row[iy * wd + ix] = src[2 * ix + dx];
                                }
                            }
                        }
                    }
                }
                sink.acc(ids.0, |dxs| {
                    T::gemm(c_in, j, l, T::one(), wv.data(), j as isize, 1, &dy_buf, l as isize, 1, T::one(), dxs, l as isize, 1);
                });
                sink.acc(ids.1, |dw| {
                    T::gemm(c_in, l, j, T::one(), x.data(), l as isize, 1, &dy_buf, 1, l as isize, T::one(), dw, j as isize, 1);
                });
                if let Some(ib) = ids.2 {
                    sink.acc(ib, |db| bias_grad(gd, db));
                }
            },
        ))
    }

    /// Mean over spatial dims: `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, h, w) = x.dims3()?;
        let l = h * w;
        let inv = T::from_f64(1.0 / l as f64);
        let out: Vec<T> = x.data().chunks(l).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        self.tape.count_macs(c * l);
        let id = self.id;
        Ok(self.tape.push(Tensor::from_parts(vec![c], out), &[id], move |g, sink| {
            sink.acc(id, |d| {
                for (chunk, &gv) in d.chunks_mut(l).zip(g.data()) {
                    let v = gv * inv;
                    chunk.iter_mut().for_each(|d| *d += v);
                }
            });
        }))
    }
}
