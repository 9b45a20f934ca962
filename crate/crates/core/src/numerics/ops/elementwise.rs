//! Elementwise arithmetic, activations, broadcasts and reductions.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor, Var};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl<'t, T: Element> Var<'t, T> {
    fn binary_same_shape(&self, other: &Var<'t, T>, op: &str) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>)> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok((a, b))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.binary_same_shape(other, "add")?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.push(out, &[ia, ib], move |g, sink| {
            for id in [ia, ib] {
                sink.acc(id, |d| add_into(d, g.data()));
            }
        }))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.binary_same_shape(other, "sub")?;
        let out = a.zip_map(&b, |x, y| x - y)?;
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.push(out, &[ia, ib], move |g, sink| {
            sink.acc(ia, |d| add_into(d, g.data()));
            sink.acc(ib, |d| {
                for (d, &g) in d.iter_mut().zip(g.data()) {
                    *d -= g;
                }
            });
        }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.binary_same_shape(other, "mul")?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.push(out, &[ia, ib], move |g, sink| {
            sink.acc(ia, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g.data()).zip(b.data()) {
                    *d += g * y;
                }
            });
            sink.acc(ib, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g.data()).zip(a.data()) {
                    *d += g * x;
                }
            });
        }))
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.binary_same_shape(other, "div")?;
        let out = a.zip_map(&b, |x, y| x / y)?;
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.push(out, &[ia, ib], move |g, sink| {
            sink.acc(ia, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g.data()).zip(b.data()) {
                    *d += g / y;
                }
            });
            sink.acc(ib, |d| {
                for (((d, &g), &x), &y) in d.iter_mut().zip(g.data()).zip(a.data()).zip(b.data()) {
                    *d -= g * x / (y * y);
                }
            });
        }))
    }

    /// Elementwise map with derivative `df(x)`.
    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        let id = self.id;
        self.tape.push(y, &[id], move |g, sink| {
            sink.acc(id, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g.data()).zip(x.data()) {
                    *d += g * df(x);
                }
            });
        })
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Var<'t, T> {
        let s = T::from_f64(s);
        let id = self.id;
        let out = self.value().map(|x| x * s);
        self.tape.push(out, &[id], move |g, sink| {
            sink.acc(id, |d| {
                for (d, &g) in d.iter_mut().zip(g.data()) {
                    *d += g * s;
                }
            });
        })
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t, T> {
        let s = T::from_f64(s);
        let id = self.id;
        let out = self.value().map(|x| x + s);
        self.tape.push(out, &[id], move |g, sink| {
            sink.acc(id, |d| add_into(d, g.data()));
        })
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh form.
    pub fn gelu(&self) -> Var<'t, T> {
        let c = T::from_f64(SQRT_2_OVER_PI);
        let k = T::from_f64(GELU_CUBIC);
        let half = T::from_f64(0.5);
        let three = T::from_f64(3.0);
        self.unary(
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            move |x| {
                let u = c * (x + k * x * x * x);
                let th = u.tanh();
                let du = c * (T::one() + three * k * x * x);
                half * (T::one() + th) + half * x * (T::one() - th * th) * du
            },
        )
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(sigmoid, |x| {
            let y = sigmoid(x);
            y * (T::one() - y)
        })
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |x| x.exp())
    }

    pub fn ln(&self) -> Var<'t, T> {
        self.unary(|x| x.ln(), |x| T::one() / x)
    }

    pub fn abs(&self) -> Var<'t, T> {
        self.unary(
            |x| x.abs(),
            |x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        self.unary(|x| x.sqrt(), |x| T::from_f64(0.5) / x.sqrt())
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(|x| x * x, |x| x + x)
    }

    /// `x[c, ...] * w[c]` for `x` of shape `[C, ...]` and `w` of shape `[C]`.
    pub fn mul_channels(&self, w: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(w);
        let (x, wv) = (self.value(), w.value());
        let c = x.shape()[0];
        if wv.shape() != [c] {
            return Err(Error::shape(format!(
                "mul_channels: weights {:?} for input {:?}",
                wv.shape(),
                x.shape()
            )));
        }
        let inner = x.numel() / c;
        let mut out = x.data().to_vec();
        for (ch, chunk) in out.chunks_mut(inner).enumerate() {
            let s = wv.data()[ch];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        self.tape.count_macs(x.numel());
        let (ix, iw) = (self.id, w.id);
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[ix, iw],
            move |g, sink| {
                sink.acc(ix, |d| {
                    for (ch, (d, g)) in d.chunks_mut(inner).zip(g.data().chunks(inner)).enumerate() {
                        let s = wv.data()[ch];
                        for (d, &g) in d.iter_mut().zip(g) {
                            *d += g * s;
                        }
                    }
                });
                sink.acc(iw, |d| {
                    for (ch, (xs, gs)) in x.data().chunks(inner).zip(g.data().chunks(inner)).enumerate() {
                        d[ch] += xs.iter().zip(gs).map(|(&x, &g)| x * g).sum::<T>();
                    }
                });
            },
        ))
    }

    /// `x[c, ...] + b[c]`.
    pub fn add_channels(&self, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(b);
        let (x, bv) = (self.value(), b.value());
        let c = x.shape()[0];
        if bv.shape() != [c] {
            return Err(Error::shape(format!(
                "add_channels: bias {:?} for input {:?}",
                bv.shape(),
                x.shape()
            )));
        }
        let inner = x.numel() / c;
        let mut out = x.data().to_vec();
        for (ch, chunk) in out.chunks_mut(inner).enumerate() {
            let s = bv.data()[ch];
            chunk.iter_mut().for_each(|v| *v += s);
        }
        let (ix, ib) = (self.id, b.id);
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[ix, ib],
            move |g, sink| {
                sink.acc(ix, |d| add_into(d, g.data()));
                sink.acc(ib, |d| {
                    for (ch, gs) in g.data().chunks(inner).enumerate() {
                        d[ch] += gs.iter().copied().sum::<T>();
                    }
                });
            },
        ))
    }

    /// `x[..., j] + y[j]` where `y`'s shape is a suffix of `x`'s shape.
    pub fn add_suffix(&self, y: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(y);
        let (x, yv) = (self.value(), y.value());
        let (xs, ys) = (x.shape(), yv.shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::shape(format!("add_suffix: {xs:?} + {ys:?}")));
        }
        let inner = yv.numel();
        let mut out = x.data().to_vec();
        for chunk in out.chunks_mut(inner) {
            add_into(chunk, yv.data());
        }
        let (ix, iy) = (self.id, y.id);
        Ok(self.tape.push(
            Tensor::from_parts(xs.to_vec(), out),
            &[ix, iy],
            move |g, sink| {
                sink.acc(ix, |d| add_into(d, g.data()));
                sink.acc(iy, |d| {
                    for gs in g.data().chunks(inner) {
                        add_into(d, gs);
                    }
                });
            },
        ))
    }

    /// Multiply every element by the single element of `s`.
    pub fn mul_scalar_var(&self, s: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(s);
        let (x, sv) = (self.value(), s.value());
        if sv.numel() != 1 {
            return Err(Error::shape("mul_scalar_var needs a single-element scale"));
        }
        let k = sv.item();
        let out = x.map(|v| v * k);
        let (ix, is) = (self.id, s.id);
        Ok(self.tape.push(out, &[ix, is], move |g, sink| {
            sink.acc(ix, |d| {
                for (d, &g) in d.iter_mut().zip(g.data()) {
                    *d += g * k;
                }
            });
            sink.acc(is, |d| {
                d[0] += x.data().iter().zip(g.data()).map(|(&x, &g)| x * g).sum::<T>();
            });
        }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<'t, T> {
        let x = self.value();
        let total = x.sum();
        let id = self.id;
        self.tape.push(Tensor::scalar(total), &[id], move |g, sink| {
            let gv = g.item();
            sink.acc(id, |d| d.iter_mut().for_each(|d| *d += gv));
        })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Weighted sum `Σ w_i · x_i` of scalar vars.
pub fn weighted_sum<'t, T: Element>(terms: &[(f64, Var<'t, T>)]) -> Result<Var<'t, T>> {
    let mut iter = terms.iter();
    let (w0, v0) = iter
        .next()
        .ok_or_else(|| Error::shape("weighted_sum of nothing"))?;
    let mut acc = v0.scale(*w0);
    for (w, v) in iter {
        acc = acc.add(&v.scale(*w))?;
    }
    Ok(acc)
}
