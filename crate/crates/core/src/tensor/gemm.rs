use super::Real;

/// `out[m×n] += op(a)[m×k] · op(b)[k×n]`.
///
/// `a` is stored `(m,k)`, or `(k,m)` when `ta`; `b` is stored `(k,n)`, or
/// `(n,k)` when `tb`. Accumulation over `k` always runs in ascending order so
/// results do not depend on unrelated rows.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o = *o + aip * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        acc = acc + x * y;
                    }
                    out[i * n + j] = out[i * n + j] + acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a[p * m + i];
                    let row = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o = *o + api * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc = acc + a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] = out[i * n + j] + acc;
                }
            }
        }
    }
}
