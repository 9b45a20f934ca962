//! Batched matrix multiply with optional transposes.

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor, Var};

/// Row/column strides of `op(X)` for a row-major `rows x cols` matrix.
#[derive(Clone, Copy, Debug)]
struct Layout {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl Layout {
    fn op(stored_rows: usize, stored_cols: usize, transposed: bool) -> Self {
        if transposed {
            Layout {
                rows: stored_cols,
                cols: stored_rows,
                rs: 1,
                cs: stored_cols as isize,
            }
        } else {
            Layout {
                rows: stored_rows,
                cols: stored_cols,
                rs: stored_cols as isize,
                cs: 1,
            }
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(other, false, false)
    }

    /// `op(a) @ op(b)` where `op` optionally transposes the last two axes.
    ///
    /// `a` is `[..., M, K]`; `b` is either `[..., K, N]` with the same batch
    /// prefix, or a plain matrix shared across the batch.
    pub fn matmul_t(&self, other: &Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs matrices, got {sa:?} and {sb:?}")));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let la = Layout::op(ra, ca, ta);
        let lb = Layout::op(rb, cb, tb);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_b = batch_b.is_empty();
        if la.cols != lb.rows || (!shared_b && batch_a != batch_b) {
            return Err(Error::shape(format!(
                "matmul {sa:?}{} x {sb:?}{}",
                if ta { "^T" } else { "" },
                if tb { "^T" } else { "" }
            )));
        }
        let batch: usize = batch_a.iter().product();
        let (m, k, n) = (la.rows, la.cols, lb.cols);
        let mut out = vec![T::zero(); batch * m * n];
        let (a_step, b_step) = (ra * ca, if shared_b { 0 } else { rb * cb });
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a.data()[i * a_step..i * a_step + a_step],
                la.rs,
                la.cs,
                &b.data()[i * b_step..i * b_step + rb * cb],
                lb.rs,
                lb.cs,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        self.tape.count_macs(batch * m * k * n);
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.push(
            Tensor::from_parts(out_shape, out),
            &[ia, ib],
            move |g, sink| {
                let g = g.data();
                // d op(A) = dC @ op(B)^T, written through op(A)'s strides.
                sink.acc(ia, |da| {
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            &b.data()[i * b_step..i * b_step + rb * cb],
                            lb.cs,
                            lb.rs,
                            T::one(),
                            &mut da[i * a_step..(i + 1) * a_step],
                            la.rs,
                            la.cs,
                        );
                    }
                });
                // d op(B) = op(A)^T @ dC.
                sink.acc(ib, |db| {
                    for i in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &a.data()[i * a_step..(i + 1) * a_step],
                            la.cs,
                            la.rs,
                            &g[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            T::one(),
                            &mut db[i * b_step..i * b_step + rb * cb],
                            lb.rs,
                            lb.cs,
                        );
                    }
                });
            },
        ))
    }

    /// `x @ w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let k = *shape.last().unwrap();
        let rows = self.numel() / k;
        let y = self.reshape(&[rows, k])?.matmul(w)?;
        let y = match b {
            Some(b) => y.add_suffix(b)?,
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = y.shape()[1];
        y.reshape(&out_shape)
    }
}
