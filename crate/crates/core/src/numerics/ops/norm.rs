//! Normalizations and softmax-style reductions.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// `(outer, len, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Element> Var<'t, T> {
    /// Layer normalization over `axis` with optional affine `gamma`, `beta`
    /// (each of length `shape[axis]`).
    pub fn layer_norm(&self, axis: usize, gamma: Option<&Var<'t, T>>, beta: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("layer_norm axis {axis} for {shape:?}")));
        }
        let (outer, d, inner) = split_axis(&shape, axis);
        for p in [gamma, beta].into_iter().flatten() {
            if p.shape() != [d] {
                return Err(Error::shape(format!("layer_norm affine {:?} for width {d}", p.shape())));
            }
        }
        let eps = T::from_f64(LN_EPS);
        let inv_d = T::from_f64(1.0 / d as f64);
        let xd = x.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut mean = vec![T::zero(); inner];
        let mut var = vec![T::zero(); inner];
        for o in 0..outer {
            let base = o * d * inner;
            mean.iter_mut().for_each(|m| *m = T::zero());
            var.iter_mut().for_each(|v| *v = T::zero());
            for j in 0..d {
                let row = &xd[base + j * inner..base + (j + 1) * inner];
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_d);
            for j in 0..d {
                let row = &xd[base + j * inner..base + (j + 1) * inner];
                for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(row) {
                    let c = v - m;
                    *s += c * c;
                }
            }
            let r = &mut rstd[o * inner..(o + 1) * inner];
            for (r, &s) in r.iter_mut().zip(&var) {
                *r = T::one() / (s * inv_d + eps).sqrt();
            }
            for j in 0..d {
                let off = base + j * inner;
                for i in 0..inner {
                    xhat[off + i] = (xd[off + i] - mean[i]) * r[i];
                }
            }
        }
        let gv = gamma.map(|g| g.value());
        let bv = beta.map(|b| b.value());
        let mut out = xhat.clone();
        if gv.is_some() || bv.is_some() {
            for o in 0..outer {
                for j in 0..d {
                    let gj = gv.as_ref().map_or(T::one(), |g| g.data()[j]);
                    let bj = bv.as_ref().map_or(T::zero(), |b| b.data()[j]);
                    let off = (o * d + j) * inner;
                    out[off..off + inner].iter_mut().for_each(|v| *v = *v * gj + bj);
                }
            }
        }
        let ids = (self.id, gamma.map(|g| g.id), beta.map(|b| b.id));
        let parents: Vec<usize> = [Some(ids.0), ids.1, ids.2].into_iter().flatten().collect();
        Ok(self.tape.push(Tensor::from_parts(shape, out), &parents, move |g, sink| {
            let gd = g.data();
            if let Some(ig) = ids.1 {
                sink.acc(ig, |dg| {
                    for o in 0..outer {
                        for (j, dg) in dg.iter_mut().enumerate() {
                            let off = (o * d + j) * inner;
                            *dg += gd[off..off + inner].iter().zip(&xhat[off..off + inner]).map(|(&g, &h)| g * h).sum::<T>();
                        }
                    }
                });
            }
            if let Some(ib) = ids.2 {
                sink.acc(ib, |db| {
                    for o in 0..outer {
                        for (j, db) in db.iter_mut().enumerate() {
                            let off = (o * d + j) * inner;
                            *db += gd[off..off + inner].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            sink.acc(ids.0, |dx| {
                let mut m1 = vec![T::zero(); inner];
                let mut m2 = vec![T::zero(); inner];
                for o in 0..outer {
                    m1.iter_mut().for_each(|v| *v = T::zero());
                    m2.iter_mut().for_each(|v| *v = T::zero());
                    for j in 0..d {
                        let gj = gv.as_ref().map_or(T::one(), |g| g.data()[j]);
                        let off = (o * d + j) * inner;
                        for i in 0..inner {
                            let dh = gd[off + i] * gj;
                            m1[i] += dh;
                            m2[i] += dh * xhat[off + i];
                        }
                    }
                    let r = &rstd[o * inner..(o + 1) * inner];
                    for j in 0..d {
                        let gj = gv.as_ref().map_or(T::one(), |g| g.data()[j]);
                        let off = (o * d + j) * inner;
                        for i in 0..inner {
                            let dh = gd[off + i] * gj;
                            dx[off + i] += r[i] * (dh - m1[i] * inv_d - xhat[off + i] * m2[i] * inv_d);
                        }
                    }
                }
            });
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t, T> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = T::one() / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let saved = y.clone();
        let id = self.id;
        self.tape.push_shared(y, &[id], move |g, sink| {
            sink.acc(id, |dx| {
                for ((dx, gs), ys) in dx.chunks_mut(n).zip(g.data().chunks(n)).zip(saved.data().chunks(n)) {
                    let dot: T = gs.iter().zip(ys).map(|(&g, &y)| g * y).sum();
                    for ((d, &g), &y) in dx.iter_mut().zip(gs).zip(ys) {
                        *d += y * (g - dot);
                    }
                }
            });
        })
    }

    /// Softmax over `axis`.
    pub fn softmax_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(Error::shape(format!("softmax axis {axis} of rank {rank}")));
        }
        if axis + 1 == rank {
            return Ok(self.softmax());
        }
        let mut perm: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
        perm.push(axis);
        let mut inv = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.permute(&perm)?.softmax().permute(&inv)
    }

    /// `log(sum(exp(x)))` over the last axis, computed with a max shift.
    pub fn logsumexp(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = *shape.last().unwrap();
        let out: Vec<T> = x.data().chunks(n).map(lse).collect();
        let out_shape = if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        let id = self.id;
        self.tape.push(Tensor::from_parts(out_shape, out.clone()), &[id], move |g, sink| {
            sink.acc(id, |dx| {
                for (((dx, xs), &gv), &l) in dx.chunks_mut(n).zip(x.data().chunks(n)).zip(g.data()).zip(&out) {
                    for (d, &v) in dx.iter_mut().zip(xs) {
                        *d += gv * (v - l).exp();
                    }
                }
            });
        })
    }
}

pub(crate) fn lse<T: Element>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}
