//! Data-movement primitives: reshape, permute, gather/scatter, concat,
//! crop, padding and resampling.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tensor::strides;
use crate::numerics::{Element, Tensor, Var};

impl<'t, T: Element> Var<'t, T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", x.shape())));
        }
        let id = self.id;
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), x.data().to_vec()),
            &[id],
            move |g, sink| sink.acc(id, |d| super::elementwise::add_into(d, g.data())),
        ))
    }

    /// `out[i] = x[map[i]]`; the adjoint scatter-adds, so `map` may repeat.
    pub(crate) fn gather_flat(&self, map: Vec<u32>, out_shape: Vec<usize>) -> Var<'t, T> {
        let x = self.value();
        debug_assert_eq!(map.len(), out_shape.iter().product::<usize>());
        let xd = x.data();
        let out: Vec<T> = map.iter().map(|&i| xd[i as usize]).collect();
        let id = self.id;
        self.tape.push(Tensor::from_parts(out_shape, out), &[id], move |g, sink| {
            sink.acc(id, |d| {
                for (&i, &gv) in map.iter().zip(g.data()) {
                    d[i as usize] += gv;
                }
            });
        })
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("permute {perm:?} of {shape:?}")));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let numel = self.numel();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; out_shape.len()];
        let mut offset = 0usize;
        for _ in 0..numel {
            map.push(offset as u32);
            for ax in (0..out_shape.len()).rev() {
                idx[ax] += 1;
                offset += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(self.gather_flat(map, out_shape))
    }

    /// Select entries `indices` along `axis`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::shape(format!("index_select axis {axis} {indices:?} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let mut map = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * d + i) * inner;
                map.extend((base..base + inner).map(|v| v as u32));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        Ok(self.gather_flat(map, out_shape))
    }

    /// Copy of `self` (`[C, ...]`) with rows `indices` replaced by the rows of
    /// `src` (`[indices.len(), ...]`).
    pub fn scatter_rows(&self, indices: &[usize], src: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(src);
        let (base, sv) = (self.value(), src.value());
        let c = base.shape()[0];
        let inner = base.numel() / c;
        let mut expect = base.shape().to_vec();
        expect[0] = indices.len();
        if sv.shape() != expect.as_slice() || indices.iter().any(|&i| i >= c) {
            return Err(Error::shape(format!(
                "scatter_rows {indices:?} of {:?} into {:?}",
                sv.shape(),
                base.shape()
            )));
        }
        let mut out = base.data().to_vec();
        for (j, &i) in indices.iter().enumerate() {
            out[i * inner..(i + 1) * inner].copy_from_slice(&sv.data()[j * inner..(j + 1) * inner]);
        }
        let indices = indices.to_vec();
        let (ib, is) = (self.id, src.id);
        Ok(self.tape.push(Tensor::from_parts(base.shape().to_vec(), out), &[ib, is], move |g, sink| {
            let gd = g.data();
            sink.acc(ib, |d| {
                super::elementwise::add_into(d, gd);
                for &i in &indices {
                    // overwritten rows carry no gradient to the base
                    for (d, &gv) in d[i * inner..(i + 1) * inner].iter_mut().zip(&gd[i * inner..(i + 1) * inner]) {
                        *d -= gv;
                    }
                }
            });
            sink.acc(is, |d| {
                for (j, &i) in indices.iter().enumerate() {
                    super::elementwise::add_into(&mut d[j * inner..(j + 1) * inner], &gd[i * inner..(i + 1) * inner]);
                }
            });
        }))
    }

    /// Spatial window `[C, y0..y0+h, x0..x0+w]` of a `[C, H, W]` map.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var<'t, T>> {
        let (c, hh, ww) = self.value().dims3()?;
        if h == 0 || w == 0 || y0 + h > hh || x0 + w > ww {
            return Err(Error::shape(format!("crop ({y0},{x0}) {h}x{w} of {hh}x{ww}")));
        }
        let mut map = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * hh + y0 + y) * ww + x0;
                map.extend((base..base + w).map(|v| v as u32));
            }
        }
        Ok(self.gather_flat(map, vec![c, h, w]))
    }

    /// Extend a `[C, H, W]` map on the bottom and right to `h x w` by
    /// mirror reflection (edge pixel not repeated); padding may exceed the
    /// input size, in which case the reflection repeats periodically.
    pub fn pad_reflect(&self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let (c, hh, ww) = self.value().dims3()?;
        if h < hh || w < ww {
            return Err(Error::shape(format!("pad_reflect {hh}x{ww} -> {h}x{w}")));
        }
        let mut map = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let sy = reflect_index(y, hh);
                for x in 0..w {
                    map.push(((ch * hh + sy) * ww + reflect_index(x, ww)) as u32);
                }
            }
        }
        Ok(self.gather_flat(map, vec![c, h, w]))
    }

    /// Bilinear resampling of a `[C, H, W]` map to `[C, h, w]` with
    /// half-pixel centers (`align_corners = false`).
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, hh, ww) = x.dims3()?;
        if h == 0 || w == 0 {
            return Err(Error::shape("resize to zero size"));
        }
        if (h, w) == (hh, ww) {
            return self.reshape(&[c, h, w]);
        }
        let ty: Rc<Vec<Tap>> = Rc::new(bilinear_taps(hh, h));
        let tx: Rc<Vec<Tap>> = Rc::new(bilinear_taps(ww, w));
        let xd = x.data();
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            let plane = &xd[ch * hh * ww..(ch + 1) * hh * ww];
            for (oy, a) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::from_f64(1.0 - a.frac), T::from_f64(a.frac));
                let (r0, r1) = (&plane[a.i0 * ww..][..ww], &plane[a.i1 * ww..][..ww]);
                let dst = &mut out[(ch * h + oy) * w..][..w];
                for (d, b) in dst.iter_mut().zip(tx.iter()) {
                    let (wx0, wx1) = (T::from_f64(1.0 - b.frac), T::from_f64(b.frac));
                    *d = wy0 * (wx0 * r0[b.i0] + wx1 * r0[b.i1]) + wy1 * (wx0 * r1[b.i0] + wx1 * r1[b.i1]);
                }
            }
        }
        let id = self.id;
        Ok(self.tape.push(Tensor::from_parts(vec![c, h, w], out), &[id], move |g, sink| {
            sink.acc(id, |dx| {
                for ch in 0..c {
                    let plane = &mut dx[ch * hh * ww..(ch + 1) * hh * ww];
                    for (oy, a) in ty.iter().enumerate() {
                        let (wy0, wy1) = (T::from_f64(1.0 - a.frac), T::from_f64(a.frac));
                        let src = &g.data()[(ch * h + oy) * w..][..w];
                        for (&gv, b) in src.iter().zip(tx.iter()) {
                            let (wx0, wx1) = (T::from_f64(1.0 - b.frac), T::from_f64(b.frac));
                            plane[a.i0 * ww + b.i0] += gv * wy0 * wx0;
                            plane[a.i0 * ww + b.i1] += gv * wy0 * wx1;
                            plane[a.i1 * ww + b.i0] += gv * wy1 * wx0;
                            plane[a.i1 * ww + b.i1] += gv * wy1 * wx1;
                        }
                    }
                }
            });
        }))
    }
}

/// Concatenate along axis 0; all trailing dims must agree.
pub fn concat<'t, T: Element>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
    let tail = first.shape()[1..].to_vec();
    let mut rows = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for p in parts {
        first.same_tape(p);
        let v = p.value();
        if v.shape()[1..] != tail[..] {
            return Err(Error::shape(format!("concat {:?} with {:?}", first.shape(), v.shape())));
        }
        rows.push(v.numel());
        data.extend_from_slice(v.data());
    }
    let total_rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut shape = vec![total_rows];
    shape.extend(tail);
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let parent_ids = ids.clone();
    Ok(first.tape.push(Tensor::from_parts(shape, data), &parent_ids, move |g, sink| {
        let mut off = 0;
        for (&id, &n) in ids.iter().zip(&rows) {
            sink.acc(id, |d| super::elementwise::add_into(d, &g.data()[off..off + n]));
            off += n;
        }
    }))
}

/// Stack rank-1 vars `[D]` into `[N, D]`.
pub fn stack_rows<'t, T: Element>(rows: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let reshaped = rows
        .iter()
        .map(|r| {
            let n = r.numel();
            r.reshape(&[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&reshaped)
}

pub(crate) fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            Tap {
                i0,
                i1,
                frac: if i1 == i0 { 0.0 } else { src - i0 as f64 },
            }
        })
        .collect()
}
