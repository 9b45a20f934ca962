//! Non-overlapping window partitioning of `[C, H, W]` maps.
//!
//! Windows are ordered row-major over the window grid and tokens row-major
//! within each window; the channel axis moves last.

use super::{Element, Tensor, Var};
use crate::error::{Error, Result};

fn check_divisible(h: usize, w: usize, win: usize) -> Result<()> {
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::NonDivisibleSpatialDims {
            height: h,
            width: w,
            window: win,
        });
    }
    Ok(())
}

/// Source offset (into `[C, H, W]`) of every element of the partitioned
/// `[num_windows, win*win, C]` layout.
fn partition_map(c: usize, h: usize, w: usize, win: usize) -> Vec<u32> {
    let (gh, gw) = (h / win, w / win);
    let mut map = Vec::with_capacity(c * h * w);
    for wy in 0..gh {
        for wx in 0..gw {
            for ty in 0..win {
                for tx in 0..win {
                    let (y, x) = (wy * win + ty, wx * win + tx);
                    for ch in 0..c {
                        map.push(((ch * h + y) * w + x) as u32);
                    }
                }
            }
        }
    }
    map
}

fn invert(map: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; map.len()];
    for (i, &m) in map.iter().enumerate() {
        inv[m as usize] = i as u32;
    }
    inv
}

/// Window size implied by a `[num_windows, T, C]` layout merged to `H x W`.
fn merge_geometry(shape: &[usize], h: usize, w: usize) -> Result<(usize, usize)> {
    let &[nw, t, c] = shape else {
        return Err(Error::shape(format!("window_merge expects [nW, T, C], got {shape:?}")));
    };
    let win = (t as f64).sqrt().round() as usize;
    if win * win != t || nw * t != h * w || h % win != 0 || w % win != 0 {
        return Err(Error::shape(format!(
            "{nw} windows of {t} tokens do not tile {h}x{w}"
        )));
    }
    Ok((win, c))
}

pub fn window_partition<T: Element>(x: &Tensor<T>, win: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    check_divisible(h, w, win)?;
    let data = partition_map(c, h, w, win)
        .into_iter()
        .map(|i| x.data()[i as usize])
        .collect();
    Tensor::new(&[h * w / (win * win), win * win, c], data)
}

pub fn window_merge<T: Element>(windows: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (win, c) = merge_geometry(windows.shape(), h, w)?;
    let data = invert(&partition_map(c, h, w, win))
        .into_iter()
        .map(|i| windows.data()[i as usize])
        .collect();
    Tensor::new(&[c, h, w], data)
}

impl<'t, T: Element> Var<'t, T> {
    pub fn window_partition(&self, win: usize) -> Result<Var<'t, T>> {
        let (c, h, w) = self.value().dims3()?;
        check_divisible(h, w, win)?;
        Ok(self.gather_flat(partition_map(c, h, w, win), vec![h * w / (win * win), win * win, c]))
    }

    pub fn window_merge(&self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let (win, c) = merge_geometry(&self.shape(), h, w)?;
        Ok(self.gather_flat(invert(&partition_map(c, h, w, win)), vec![c, h, w]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = Stream::new(seed, 0);
        Tensor::from_fn(shape, |_| s.normal())
    }

    #[test]
    fn first_window_tokens_row_major() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64);
        let p = window_partition(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4, 1]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn single_window_keeps_row_major_order() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64);
        let p = window_partition(&x, 4).unwrap();
        assert_eq!(p.shape(), &[1, 16, 1]);
        assert_eq!(p.data(), x.data());
        assert_eq!(window_merge(&p, 4, 4).unwrap(), x);
    }

    #[test]
    fn partition_shape() {
        let x = random(&[2, 8, 8], 1);
        assert_eq!(window_partition(&x, 4).unwrap().shape(), &[4, 16, 2]);
    }

    #[test]
    fn merge_inverts_partition() {
        let x = random(&[3, 8, 8], 2);
        let p = window_partition(&x, 2).unwrap();
        assert_eq!(window_merge(&p, 8, 8).unwrap(), x);
    }

    #[test]
    fn merging_permuted_windows_differs() {
        let x = Tensor::<f64>::from_fn(&[3, 8, 8], |i| i as f64);
        let p = window_partition(&x, 4).unwrap();
        let per_window = 16 * 3;
        let mut swapped = p.data().to_vec();
        let (a, b) = swapped.split_at_mut(per_window);
        a.swap_with_slice(&mut b[..per_window]);
        let swapped = Tensor::new(p.shape(), swapped).unwrap();
        assert_ne!(window_merge(&swapped, 8, 8).unwrap(), x);
    }

    #[test]
    fn rejects_non_divisible() {
        let x = random(&[1, 6, 8], 3);
        assert!(matches!(
            window_partition(&x, 4),
            Err(Error::NonDivisibleSpatialDims { .. })
        ));
    }

    #[test]
    fn merge_rejects_inconsistent_counts() {
        let x = random(&[1, 8, 8], 4);
        let p = window_partition(&x, 4).unwrap();
        assert!(matches!(window_merge(&p, 8, 16), Err(Error::ShapeMismatch(_))));
        assert!(matches!(window_merge(&p, 2, 32), Err(Error::ShapeMismatch(_))));
    }
}
