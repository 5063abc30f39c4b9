//! Hot inner-loop kernels, compiled twice: a portable build and an AVX2
//! build selected at runtime. Each pair shares one `#[inline(always)]`
//! body; without fused-multiply-add contraction both variants produce
//! identical bits.

/// True when the AVX2 variants are usable on this machine.
#[cfg(target_arch = "x86_64")]
pub(crate) fn simd_enabled() -> bool {
    std::arch::is_x86_feature_detected!("avx2")
}

#[cfg(not(target_arch = "x86_64"))]
pub(crate) fn simd_enabled() -> bool {
    false
}

// ── Polynomial exp ───────────────────────────────────────────────────

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_16e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_70e-10;

/// exp(x) via range reduction and a 12-term Taylor polynomial; relative
/// error stays below ~5e-14, and the straight-line body vectorizes under
/// FMA. Used only inside the fused training kernel; reference paths call
/// the libm exponential.
#[inline(always)]
pub(crate) fn exp64(x: f64) -> f64 {
    if x > 709.0 {
        return f64::INFINITY;
    }
    if x < -709.0 {
        return 0.0;
    }
    let k = (x * LOG2_E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // exp(r) for |r| <= ln2/2, Horner over 1/12! .. 1
    let mut p = 2.087_675_698_786_809_9e-9; // 1/12!
    p = p * r + 2.505_210_838_544_171_9e-8; // 1/11!
    p = p * r + 2.755_731_922_398_589_1e-7; // 1/10!
    p = p * r + 2.755_731_922_398_589_4e-6; // 1/9!
    p = p * r + 2.480_158_730_158_730_2e-5; // 1/8!
    p = p * r + 1.984_126_984_126_984_1e-4; // 1/7!
    p = p * r + 1.388_888_888_888_888_9e-3; // 1/6!
    p = p * r + 8.333_333_333_333_333_3e-3; // 1/5!
    p = p * r + 4.166_666_666_666_666_6e-2; // 1/4!
    p = p * r + 1.666_666_666_666_666_7e-1; // 1/3!
    p = p * r + 5e-1;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let bits = ((k as i64 + 1023) as u64) << 52;
    p * f64::from_bits(bits)
}

// ── Linear-layer row kernels ─────────────────────────────────────────

#[inline(always)]
fn axpy_row_body(xrow: &[f64], w: &[f64], yrow: &mut [f64], n: usize) {
    for (p, &a) in xrow.iter().enumerate() {
        let wrow = &w[p * n..(p + 1) * n];
        for (yv, &wv) in yrow.iter_mut().zip(wrow) {
            *yv += a * wv;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_row_avx2(xrow: &[f64], w: &[f64], yrow: &mut [f64], n: usize) {
    axpy_row_body(xrow, w, yrow, n)
}

#[inline]
pub(crate) fn axpy_row(simd: bool, xrow: &[f64], w: &[f64], yrow: &mut [f64], n: usize) {
    #[cfg(target_arch = "x86_64")]
    if simd {
        return unsafe { axpy_row_avx2(xrow, w, yrow, n) };
    }
    let _ = simd;
    axpy_row_body(xrow, w, yrow, n)
}

#[inline(always)]
fn dot_row_body(dyrow: &[f64], w: &[f64], dxrow: &mut [f64], n: usize) {
    for (p, dxv) in dxrow.iter_mut().enumerate() {
        let wrow = &w[p * n..(p + 1) * n];
        let mut s = 0.0;
        for (&gy, &wv) in dyrow.iter().zip(wrow) {
            s += gy * wv;
        }
        *dxv = s;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_row_avx2(dyrow: &[f64], w: &[f64], dxrow: &mut [f64], n: usize) {
    dot_row_body(dyrow, w, dxrow, n)
}

#[inline]
pub(crate) fn dot_row(simd: bool, dyrow: &[f64], w: &[f64], dxrow: &mut [f64], n: usize) {
    #[cfg(target_arch = "x86_64")]
    if simd {
        return unsafe { dot_row_avx2(dyrow, w, dxrow, n) };
    }
    let _ = simd;
    dot_row_body(dyrow, w, dxrow, n)
}

#[inline(always)]
fn tn_block_body(x: &[f64], dy: &[f64], lo: usize, hi: usize, k: usize, n: usize, acc: &mut [f64]) {
    for i in lo..hi {
        let xrow = &x[i * k..(i + 1) * k];
        let dyrow = &dy[i * n..(i + 1) * n];
        for (p, &a) in xrow.iter().enumerate() {
            let dst = &mut acc[p * n..(p + 1) * n];
            for (dv, &gy) in dst.iter_mut().zip(dyrow) {
                *dv += a * gy;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tn_block_avx2(
    x: &[f64],
    dy: &[f64],
    lo: usize,
    hi: usize,
    k: usize,
    n: usize,
    acc: &mut [f64],
) {
    tn_block_body(x, dy, lo, hi, k, n, acc)
}

#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn tn_block(
    simd: bool,
    x: &[f64],
    dy: &[f64],
    lo: usize,
    hi: usize,
    k: usize,
    n: usize,
    acc: &mut [f64],
) {
    #[cfg(target_arch = "x86_64")]
    if simd {
        return unsafe { tn_block_avx2(x, dy, lo, hi, k, n, acc) };
    }
    let _ = simd;
    tn_block_body(x, dy, lo, hi, k, n, acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp64_tracks_libm() {
        let mut worst = 0.0f64;
        let mut x = -30.0;
        while x <= 30.0 {
            let a = exp64(x);
            let b = x.exp();
            let rel = ((a - b) / b).abs();
            worst = worst.max(rel);
            x += 0.000_37;
        }
        assert!(worst <= 5e-14, "max rel err {worst:e}");
        assert_eq!(exp64(0.0), 1.0);
        assert_eq!(exp64(-800.0), 0.0);
        assert!(exp64(800.0).is_infinite());
        // tiny arguments keep full precision
        for &z in &[1e-12, -1e-12, 1e-8, -1e-8] {
            let rel = ((exp64(z) - z.exp()) / z.exp()).abs();
            assert!(rel <= 1e-15, "z={z}: {rel:e}");
        }
    }

    #[test]
    fn simd_and_generic_rows_agree() {
        if !simd_enabled() {
            return;
        }
        let (k, n) = (13, 29);
        let x: Vec<f64> = (0..k).map(|i| (i as f64 * 0.7).sin()).collect();
        let w: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut y1 = vec![0.0; n];
        let mut y2 = vec![0.0; n];
        axpy_row(false, &x, &w, &mut y1, n);
        axpy_row(true, &x, &w, &mut y2, n);
        assert_eq!(y1, y2);
    }
}
