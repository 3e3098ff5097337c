//! Dense matrix kernels.
//!
//! Every output element of [`gemm`] is accumulated as
//! `((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...`, strictly in increasing `k`,
//! regardless of which tile path computes it. Results are therefore
//! bitwise-identical to the textbook triple loop and independent of the
//! vector width the compiler picks.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

const ROWS: usize = 4;
const COLS: usize = 64;

/// Strided read-only matrix view: element `(i, p)` is `data[i*rs + p*cs]`.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

impl<T: Copy> View<'_, T> {
    #[inline(always)]
    fn at(&self, i: usize, p: usize) -> T {
        self.data[i * self.rs + p * self.cs]
    }
}

/// `c = a · b` for row-major `a: n×k`, `b: k×m`, `c: n×m` (overwritten).
pub fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    gemm_view(View { data: a, rs: k, cs: 1 }, View { data: b, rs: m, cs: 1 }, c, n, k, m);
}

fn gemm_view<T: Scalar>(a: View<'_, T>, b: View<'_, T>, c: &mut [T], n: usize, k: usize, m: usize) {
    if n == 0 || m == 0 {
        return;
    }
    let mut panel = vec![T::zero(); k * COLS];
    let mut j0 = 0;
    while j0 < m {
        let w = (m - j0).min(COLS);
        let width = match w {
            1..=8 => 8,
            9..=16 => 16,
            17..=32 => 32,
            _ => COLS,
        };
        pack(b, &mut panel[..k * width], k, j0, w, width);
        match width {
            8 => tile::<T, 8>(a, &panel, c, n, k, m, j0, w),
            16 => tile::<T, 16>(a, &panel, c, n, k, m, j0, w),
            32 => tile::<T, 32>(a, &panel, c, n, k, m, j0, w),
            _ => tile::<T, COLS>(a, &panel, c, n, k, m, j0, w),
        }
        j0 += COLS;
    }
}

/// Copies columns `j0..j0+w` of `b` into a `k × width` panel, zero padded.
fn pack<T: Scalar>(b: View<'_, T>, panel: &mut [T], k: usize, j0: usize, w: usize, width: usize) {
    if w < width {
        panel.iter_mut().for_each(|x| *x = T::zero());
    }
    if b.cs == 1 {
        for p in 0..k {
            let src = &b.data[p * b.rs + j0..p * b.rs + j0 + w];
            panel[p * width..p * width + w].copy_from_slice(src);
        }
    } else {
        for jj in 0..w {
            for p in 0..k {
                panel[p * width + jj] = b.at(p, j0 + jj);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn tile<T: Scalar, const W: usize>(a: View<'_, T>, panel: &[T], c: &mut [T], n: usize, k: usize, m: usize, j0: usize, w: usize) {
    let mut i = 0;
    while i + ROWS <= n {
        let mut acc = [[T::zero(); W]; ROWS];
        for p in 0..k {
            let br: &[T; W] = panel[p * W..(p + 1) * W].try_into().unwrap();
            for (r, acc_row) in acc.iter_mut().enumerate() {
                let av = a.at(i + r, p);
                for j in 0..W {
                    acc_row[j] += av * br[j];
                }
            }
        }
        for (r, acc_row) in acc.iter().enumerate() {
            c[(i + r) * m + j0..(i + r) * m + j0 + w].copy_from_slice(&acc_row[..w]);
        }
        i += ROWS;
    }
    while i < n {
        let mut acc = [T::zero(); W];
        for p in 0..k {
            let av = a.at(i, p);
            let br: &[T; W] = panel[p * W..(p + 1) * W].try_into().unwrap();
            for j in 0..W {
                acc[j] += av * br[j];
            }
        }
        c[i * m + j0..i * m + j0 + w].copy_from_slice(&acc[..w]);
        i += 1;
    }
}

/// Row-major transpose of a `rows×cols` buffer.
pub fn transpose<T: Copy + Default>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); rows * cols];
    const B: usize = 32;
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + B).min(rows);
        let mut c0 = 0;
        while c0 < cols {
            let c1 = (c0 + B).min(cols);
            for r in r0..r1 {
                for c in c0..c1 {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
            c0 = c1;
        }
        r0 = r1;
    }
    out
}

/// `c = a · bᵀ` for `a: n×k`, `b: m×k`.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    let mut c = vec![T::zero(); n * m];
    gemm_view(View { data: a, rs: k, cs: 1 }, View { data: b, rs: 1, cs: k }, &mut c, n, k, m);
    c
}

/// `c = aᵀ · b` for `a: k×n`, `b: k×m`.
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, n: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * n);
    debug_assert_eq!(b.len(), k * m);
    let mut c = vec![T::zero(); n * m];
    gemm_view(View { data: a, rs: 1, cs: n }, View { data: b, rs: m, cs: 1 }, &mut c, n, k, m);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a[i * k + p] * b[p * m + j];
                }
                c[i * m + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_is_bitwise_naive_across_tile_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, k, m) in &[(4, 5, 3), (1, 1, 1), (7, 33, 130), (9, 64, 64), (5, 3, 65), (0, 3, 2)] {
            let a: Vec<f32> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = vec![0.0; n * m];
            gemm(&a, &b, &mut c, n, k, m);
            assert_eq!(c, naive(&a, &b, n, k, m), "{n}x{k}x{m}");
        }
    }

    #[test]
    fn transposed_variants() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 1.0, 0.0, 1.0, 0.0]; // 2x3
        assert_eq!(gemm_nt(&a, &b, 2, 3, 2), vec![4.0, 2.0, 10.0, 5.0]);
        // aᵀ·b, a viewed as 2x3 → 3x2 · 2x3
        let c = gemm_tn(&a, &b, 2, 3, 3);
        assert_eq!(c, vec![1.0, 4.0, 1.0, 2.0, 5.0, 2.0, 3.0, 6.0, 3.0]);
        assert_eq!(transpose(&a, 2, 3), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
