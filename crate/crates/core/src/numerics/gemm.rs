//! Dense product kernels.
//!
//! Every kernel here accumulates each output entry as
//! `fma(a1, b1, fma(a0, b0, 0))` in increasing inner-index order. Fused
//! multiply-add is correctly rounded by IEEE 754, so the SIMD kernels and the
//! scalar `mul_add` loop produce bit-identical results on every platform.

#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

/// `c[m×n] = A[m×k] · b[k×n]` where `A[i][p] = a[i*rs + p*cs]`.
///
/// `c` is overwritten.
pub(crate) fn gemm(a: &[f64], rs: usize, cs: usize, b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(b.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature presence checked at runtime just above.
            unsafe { avx512::gemm(a, rs, cs, b, m, k, n, c) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            unsafe { avx2::gemm(a, rs, cs, b, m, k, n, c) };
            return;
        }
    }
    gemm_scalar(a, rs, cs, b, m, k, n, c);
}

fn gemm_scalar(a: &[f64], rs: usize, cs: usize, b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        crow.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let x = a[i * rs + p * cs];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = x.mul_add(*bv, *cv);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn gemm(a: &[f64], rs: usize, cs: usize, b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
        // Column panels outermost so a `k × 16` slice of `b` stays in L1 across row blocks.
        let mut j = 0;
        while j < n {
            let w = (n - j).min(16);
            if w > 8 {
                panel::<2>(a, rs, cs, b, m, k, n, c, j, lanes(w - 8));
            } else {
                panel::<1>(a, rs, cs, b, m, k, n, c, j, lanes(w));
            }
            j += w;
        }
    }

    fn lanes(w: usize) -> __mmask8 {
        ((1u16 << w) - 1) as __mmask8
    }

    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn panel<const V: usize>(
        a: &[f64],
        rs: usize,
        cs: usize,
        b: &[f64],
        m: usize,
        k: usize,
        n: usize,
        c: &mut [f64],
        j: usize,
        last: __mmask8,
    ) {
        let mut i = 0;
        while i + 8 <= m {
            block::<8, V>(a, rs, cs, b, i, k, n, c, j, last);
            i += 8;
        }
        match m - i {
            7 => block::<7, V>(a, rs, cs, b, i, k, n, c, j, last),
            6 => block::<6, V>(a, rs, cs, b, i, k, n, c, j, last),
            5 => block::<5, V>(a, rs, cs, b, i, k, n, c, j, last),
            4 => block::<4, V>(a, rs, cs, b, i, k, n, c, j, last),
            3 => block::<3, V>(a, rs, cs, b, i, k, n, c, j, last),
            2 => block::<2, V>(a, rs, cs, b, i, k, n, c, j, last),
            1 => block::<1, V>(a, rs, cs, b, i, k, n, c, j, last),
            _ => {}
        }
    }

    /// Rows `i0..i0+R`, columns `j..j+8V` (the last vector masked by `last`).
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn block<const R: usize, const V: usize>(
        a: &[f64],
        rs: usize,
        cs: usize,
        b: &[f64],
        i0: usize,
        k: usize,
        n: usize,
        c: &mut [f64],
        j: usize,
        last: __mmask8,
    ) {
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();
        let mask = |v: usize| if v + 1 == V { last } else { 0xFF };
        let mut acc = [[_mm512_setzero_pd(); V]; R];
        for p in 0..k {
            let mut bv = [_mm512_setzero_pd(); V];
            for v in 0..V {
                bv[v] = _mm512_maskz_loadu_pd(mask(v), bp.add(p * n + j + 8 * v));
            }
            for r in 0..R {
                let x = _mm512_set1_pd(*ap.add((i0 + r) * rs + p * cs));
                for v in 0..V {
                    acc[r][v] = _mm512_fmadd_pd(x, bv[v], acc[r][v]);
                }
            }
        }
        for r in 0..R {
            for v in 0..V {
                _mm512_mask_storeu_pd(cp.add((i0 + r) * n + j + 8 * v), mask(v), acc[r][v]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn gemm(a: &[f64], rs: usize, cs: usize, b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
        let mut j = 0;
        while j < n {
            let w = (n - j).min(8);
            if w > 4 {
                panel::<2>(a, rs, cs, b, m, k, n, c, j, lanes(w - 4));
            } else {
                panel::<1>(a, rs, cs, b, m, k, n, c, j, lanes(w));
            }
            j += w;
        }
    }

    #[target_feature(enable = "avx2")]
    unsafe fn lanes(w: usize) -> __m256i {
        let on = |l: usize| if l < w { -1 } else { 0 };
        _mm256_setr_epi64x(on(0), on(1), on(2), on(3))
    }

    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn panel<const V: usize>(
        a: &[f64],
        rs: usize,
        cs: usize,
        b: &[f64],
        m: usize,
        k: usize,
        n: usize,
        c: &mut [f64],
        j: usize,
        last: __m256i,
    ) {
        let mut i = 0;
        while i + 4 <= m {
            block::<4, V>(a, rs, cs, b, i, k, n, c, j, last);
            i += 4;
        }
        match m - i {
            3 => block::<3, V>(a, rs, cs, b, i, k, n, c, j, last),
            2 => block::<2, V>(a, rs, cs, b, i, k, n, c, j, last),
            1 => block::<1, V>(a, rs, cs, b, i, k, n, c, j, last),
            _ => {}
        }
    }

    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn block<const R: usize, const V: usize>(
        a: &[f64],
        rs: usize,
        cs: usize,
        b: &[f64],
        i0: usize,
        k: usize,
        n: usize,
        c: &mut [f64],
        j: usize,
        last: __m256i,
    ) {
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();
        let full = _mm256_set1_epi64x(-1);
        let mask = |v: usize| if v + 1 == V { last } else { full };
        let mut acc = [[_mm256_setzero_pd(); V]; R];
        for p in 0..k {
            let mut bv = [_mm256_setzero_pd(); V];
            for v in 0..V {
                bv[v] = _mm256_maskload_pd(bp.add(p * n + j + 4 * v), mask(v));
            }
            for r in 0..R {
                let x = _mm256_set1_pd(*ap.add((i0 + r) * rs + p * cs));
                for v in 0..V {
                    acc[r][v] = _mm256_fmadd_pd(x, bv[v], acc[r][v]);
                }
            }
        }
        for r in 0..R {
            for v in 0..V {
                _mm256_maskstore_pd(cp.add((i0 + r) * n + j + 4 * v), mask(v), acc[r][v]);
            }
        }
    }
}
