//! Selective state-space math: zero-order-hold discretization, the linear
//! recurrence scan (sequential and chunked), and the time-invariant
//! convolution-kernel form of the same system.
//!
//! The state-transition matrix is elementwise-diagonal: entry (d, n) is an
//! independent scalar coefficient, so exp(Δ·A) is an elementwise
//! exponential. Shapes follow the convention
//!   A [D, N], B/C [B, L, N], Δ/x [B, L, D], Ā/B̄ [B, L, D, N].

use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Primitive, Var};
use crate::ops::for_each_row;
use crate::tensor::Tensor;

/// |Δ·A| below this uses the series expansion of (e^z − 1)/z.
pub const SERIES_THRESHOLD: f64 = 1e-8;

/// Wider threshold for the derivative of (e^z − 1)/z, whose closed form
/// cancels catastrophically already around |z| ~ 1e-6.
const PHI_PRIME_SERIES_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscretizeMode {
    /// B̄ = ((e^z − 1)/z)·Δ·B with z = Δ·A.
    ExactZoh,
    /// Simplified B̄ = Δ·B; Ā is unchanged.
    Euler,
}

/// Discretized transition/input coefficients, both [B, L, D, N].
#[derive(Debug, Clone)]
pub struct DiscretizedPair {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
}

/// Three-term series for (e^z − 1)/z near zero.
#[inline]
pub fn phi_series(z: f64) -> f64 {
    1.0 + z / 2.0 + z * z / 6.0
}

/// (e^z − 1)/z evaluated through expm1 so small z stays accurate.
#[inline]
pub fn phi_exact(z: f64) -> f64 {
    z.exp_m1() / z
}

/// Production path: series under the threshold, exact formula above it.
#[inline]
pub fn phi(z: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        phi_series(z)
    } else {
        phi_exact(z)
    }
}

/// d/dz of (e^z − 1)/z, reusing a precomputed e^z when available.
#[inline]
fn phi_prime(z: f64, ez: f64) -> f64 {
    if z.abs() < PHI_PRIME_SERIES_THRESHOLD {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (ez * (z - 1.0) + 1.0) / (z * z)
    }
}

/// Composition of the affine maps h ↦ a·h + b: applying (a1, b1) first and
/// (a2, b2) second collapses to a single map.
#[inline]
pub fn compose(a1: f64, b1: f64, a2: f64, b2: f64) -> (f64, f64) {
    (a1 * a2, a2 * b1 + b2)
}

/// Log-parameterized shared transition matrix: a_log[d, n] = ln(n + 1), so
/// A = −exp(a_log) starts at −(n + 1) and stays strictly negative under
/// gradient steps.
pub fn shared_a_log_init(d: usize, n: usize) -> Tensor {
    let mut data = vec![0.0; d * n];
    for row in data.chunks_mut(n) {
        for (ni, v) in row.iter_mut().enumerate() {
            *v = ((ni + 1) as f64).ln();
        }
    }
    Tensor::new(vec![d, n], data).unwrap()
}

fn check_scan_shapes(
    op: &'static str,
    pair_shape: &[usize],
    c: &Tensor,
    x: &Tensor,
) -> Result<(usize, usize, usize, usize)> {
    if pair_shape.len() != 4 {
        return Err(CoreError::dimension(
            op,
            format!("discretized pair must be [B, L, D, N], got {:?}", pair_shape),
        ));
    }
    let (b, l, d, n) = (pair_shape[0], pair_shape[1], pair_shape[2], pair_shape[3]);
    if c.shape() != [b, l, n] || x.shape() != [b, l, d] {
        return Err(CoreError::dimension(
            op,
            format!(
                "pair {:?} expects C [{}, {}, {}] and x [{}, {}, {}], got C {:?}, x {:?}",
                pair_shape, b, l, n, b, l, d,
                c.shape(),
                x.shape()
            ),
        ));
    }
    Ok((b, l, d, n))
}

// ── Pure kernels ─────────────────────────────────────────────────────

/// Zero-order-hold discretization of (A, B) under per-position steps Δ.
pub fn zoh_discretize(
    a: &Tensor,
    b_mat: &Tensor,
    delta: &Tensor,
    mode: DiscretizeMode,
) -> Result<DiscretizedPair> {
    let a_s = a.shape();
    if a_s.len() != 2 {
        return Err(CoreError::dimension(
            "zoh_discretize",
            format!("A must be [D, N], got {:?}", a_s),
        ));
    }
    let (d, n) = (a_s[0], a_s[1]);
    let ds = delta.shape();
    if ds.len() != 3 || ds[2] != d {
        return Err(CoreError::dimension(
            "zoh_discretize",
            format!("delta must be [B, L, {}], got {:?}", d, ds),
        ));
    }
    let (batch, len) = (ds[0], ds[1]);
    if b_mat.shape() != [batch, len, n] {
        return Err(CoreError::dimension(
            "zoh_discretize",
            format!("B must be [{}, {}, {}], got {:?}", batch, len, n, b_mat.shape()),
        ));
    }
    if let Some(&bad) = delta.data().iter().find(|&&v| v <= 0.0) {
        return Err(CoreError::Contract(format!(
            "zoh_discretize requires strictly positive delta, found {}",
            bad
        )));
    }

    let ad = a.data();
    let bd = b_mat.data();
    let dd = delta.data();
    let mut a_bar = vec![0.0; batch * len * d * n];
    let mut b_bar = vec![0.0; batch * len * d * n];
    let rows = batch * len;
    let work = rows * d * n;
    // pair of row slices over the same (b, l) index
    let pairs: Vec<(&mut [f64], &mut [f64])> = a_bar
        .chunks_mut(d * n)
        .zip(b_bar.chunks_mut(d * n))
        .collect();
    let body = |(r, (arow, brow)): (usize, (&mut [f64], &mut [f64]))| {
        let drow = &dd[r * d..(r + 1) * d];
        let brow_in = &bd[r * n..(r + 1) * n];
        for di in 0..d {
            let dt = drow[di];
            let arow_in = &ad[di * n..(di + 1) * n];
            let adst = &mut arow[di * n..(di + 1) * n];
            let bdst = &mut brow[di * n..(di + 1) * n];
            match mode {
                DiscretizeMode::ExactZoh => {
                    for ni in 0..n {
                        let z = dt * arow_in[ni];
                        let e = z.exp();
                        adst[ni] = e;
                        // φ from the exponential already in hand; the series
                        // covers the cancellation region
                        let p = if z.abs() < SERIES_THRESHOLD {
                            phi_series(z)
                        } else {
                            (e - 1.0) / z
                        };
                        bdst[ni] = p * dt * brow_in[ni];
                    }
                }
                DiscretizeMode::Euler => {
                    for ni in 0..n {
                        let z = dt * arow_in[ni];
                        adst[ni] = z.exp();
                        bdst[ni] = dt * brow_in[ni];
                    }
                }
            }
        }
    };
    if work >= 1 << 15 {
        pairs.into_par_iter().enumerate().for_each(body);
    } else {
        pairs.into_iter().enumerate().for_each(body);
    }

    Ok(DiscretizedPair {
        a_bar: Tensor::new(vec![batch, len, d, n], a_bar)?,
        b_bar: Tensor::new(vec![batch, len, d, n], b_bar)?,
    })
}

fn scan_kernel(
    a_bar: &[f64],
    b_bar: &[f64],
    c: &[f64],
    x: &[f64],
    b: usize,
    l: usize,
    d: usize,
    n: usize,
    y: &mut [f64],
    mut hist: Option<&mut [f64]>,
) {
    let dn = d * n;
    let run = |bi: usize, yb: &mut [f64], hb: Option<&mut [f64]>| {
        let mut h = vec![0.0; dn];
        let ab = &a_bar[bi * l * dn..(bi + 1) * l * dn];
        let bb = &b_bar[bi * l * dn..(bi + 1) * l * dn];
        let cb = &c[bi * l * n..(bi + 1) * l * n];
        let xb = &x[bi * l * d..(bi + 1) * l * d];
        let mut hb = hb;
        for t in 0..l {
            let crow = &cb[t * n..(t + 1) * n];
            for di in 0..d {
                let xv = xb[t * d + di];
                let arow = &ab[t * dn + di * n..t * dn + (di + 1) * n];
                let brow = &bb[t * dn + di * n..t * dn + (di + 1) * n];
                let hrow = &mut h[di * n..(di + 1) * n];
                let mut acc = 0.0;
                for ni in 0..n {
                    hrow[ni] = arow[ni] * hrow[ni] + brow[ni] * xv;
                    acc += crow[ni] * hrow[ni];
                }
                yb[t * d + di] = acc;
            }
            if let Some(hb) = hb.as_deref_mut() {
                hb[t * dn..(t + 1) * dn].copy_from_slice(&h);
            }
        }
    };
    match hist.as_deref_mut() {
        Some(hist) => {
            let items: Vec<((usize, &mut [f64]), &mut [f64])> = y
                .chunks_mut(l * d)
                .enumerate()
                .zip(hist.chunks_mut(l * dn))
                .collect();
            if b * l * dn >= 1 << 15 {
                items
                    .into_par_iter()
                    .for_each(|((bi, yb), hb)| run(bi, yb, Some(hb)));
            } else {
                items
                    .into_iter()
                    .for_each(|((bi, yb), hb)| run(bi, yb, Some(hb)));
            }
        }
        None => {
            if b * l * dn >= 1 << 15 {
                y.par_chunks_mut(l * d)
                    .enumerate()
                    .for_each(|(bi, yb)| run(bi, yb, None));
            } else {
                y.chunks_mut(l * d)
                    .enumerate()
                    .for_each(|(bi, yb)| run(bi, yb, None));
            }
        }
    }
}

/// Step the recurrence h_t = Ā_t·h_{t−1} + B̄_t·x_t from zero state and
/// read out y_t = Σ_n C_t·h_t.
pub fn scan_sequential(pair: &DiscretizedPair, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (b, l, d, _n) = check_scan_shapes("scan_sequential", pair.a_bar.shape(), c, x)?;
    let mut y = vec![0.0; b * l * d];
    scan_kernel(
        pair.a_bar.data(),
        pair.b_bar.data(),
        c.data(),
        x.data(),
        b,
        l,
        d,
        pair.a_bar.shape()[3],
        &mut y,
        None,
    );
    Tensor::new(vec![b, l, d], y)
}

/// As `scan_sequential`, additionally returning the full state history
/// [B, L, D, N] (flat), which backward passes and stability checks consume.
pub fn scan_sequential_with_state(
    pair: &DiscretizedPair,
    c: &Tensor,
    x: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let (b, l, d, n) = check_scan_shapes("scan_sequential", pair.a_bar.shape(), c, x)?;
    let mut y = vec![0.0; b * l * d];
    let mut hist = vec![0.0; b * l * d * n];
    scan_kernel(
        pair.a_bar.data(),
        pair.b_bar.data(),
        c.data(),
        x.data(),
        b,
        l,
        d,
        n,
        &mut y,
        Some(&mut hist),
    );
    Ok((Tensor::new(vec![b, l, d], y)?, hist))
}

/// Same recurrence evaluated chunk-wise: local affine prefixes are built
/// independently per chunk (parallelizable), carries are composed across
/// chunk boundaries in order, and outputs are read out per chunk. The
/// cross-chunk reduction order is fixed, so results are reproducible for a
/// given chunk size.
pub fn scan_chunked(
    pair: &DiscretizedPair,
    c: &Tensor,
    x: &Tensor,
    chunk: usize,
) -> Result<Tensor> {
    if chunk < 1 {
        return Err(CoreError::Configuration(
            "scan_chunked requires chunk >= 1".into(),
        ));
    }
    let (b, l, d, n) = check_scan_shapes("scan_chunked", pair.a_bar.shape(), c, x)?;
    let dn = d * n;
    let n_chunks = l.div_ceil(chunk);
    let ab = pair.a_bar.data();
    let bb = pair.b_bar.data();
    let cd = c.data();
    let xd = x.data();

    // Phase 1: per-chunk affine prefixes (a, b) such that
    // h_t = prefix_a_t · h_carry + prefix_b_t within the chunk.
    let mut prefix_a = vec![0.0; b * l * dn];
    let mut prefix_b = vec![0.0; b * l * dn];
    {
        let jobs: Vec<(usize, (&mut [f64], &mut [f64]))> = prefix_a
            .chunks_mut(chunk * dn)
            .zip(prefix_b.chunks_mut(chunk * dn))
            .enumerate()
            .map(|(j, pair)| (j, pair))
            .collect();
        let chunks_per_batch = n_chunks;
        let body = |(j, (pa, pb)): (usize, (&mut [f64], &mut [f64]))| {
            let bi = j / chunks_per_batch;
            let ci = j % chunks_per_batch;
            let t0 = ci * chunk;
            let t1 = (t0 + chunk).min(l);
            for (local_t, t) in (t0..t1).enumerate() {
                let off = bi * l * dn + t * dn;
                for di in 0..d {
                    let xv = xd[bi * l * d + t * d + di];
                    for ni in 0..n {
                        let e = di * n + ni;
                        let at = ab[off + e];
                        let bt = bb[off + e] * xv;
                        if local_t == 0 {
                            pa[e] = at;
                            pb[e] = bt;
                        } else {
                            let prev_a = pa[(local_t - 1) * dn + e];
                            let prev_b = pb[(local_t - 1) * dn + e];
                            let (na, nb) = compose(prev_a, prev_b, at, bt);
                            pa[local_t * dn + e] = na;
                            pb[local_t * dn + e] = nb;
                        }
                    }
                }
            }
        };
        if b * l * dn >= 1 << 15 {
            jobs.into_par_iter().for_each(body);
        } else {
            jobs.into_iter().for_each(body);
        }
    }

    // Phase 2: carry states across chunk boundaries, in order.
    let mut carries = vec![0.0; b * n_chunks * dn]; // state entering each chunk
    for bi in 0..b {
        for ci in 1..n_chunks {
            let t_last = ((ci - 1) * chunk + chunk).min(l) - 1;
            let pa = &prefix_a[(bi * l + t_last) * dn..(bi * l + t_last + 1) * dn];
            let pb = &prefix_b[(bi * l + t_last) * dn..(bi * l + t_last + 1) * dn];
            let (before, after) = carries.split_at_mut((bi * n_chunks + ci) * dn);
            let prev = &before[(bi * n_chunks + ci - 1) * dn..];
            let next = &mut after[..dn];
            for e in 0..dn {
                next[e] = pa[e] * prev[e] + pb[e];
            }
        }
    }

    // Phase 3: outputs per chunk from carry + local prefix.
    let mut y = vec![0.0; b * l * d];
    {
        let jobs: Vec<(usize, &mut [f64])> = y
            .chunks_mut(chunk * d)
            .enumerate()
            .collect();
        let chunks_per_batch = n_chunks;
        let body = |(j, yc): (usize, &mut [f64])| {
            let bi = j / chunks_per_batch;
            let ci = j % chunks_per_batch;
            let t0 = ci * chunk;
            let t1 = (t0 + chunk).min(l);
            let carry = &carries[(bi * n_chunks + ci) * dn..(bi * n_chunks + ci + 1) * dn];
            for (local_t, t) in (t0..t1).enumerate() {
                let crow = &cd[bi * l * n + t * n..bi * l * n + (t + 1) * n];
                let pa = &prefix_a[(bi * l + t) * dn..(bi * l + t + 1) * dn];
                let pb = &prefix_b[(bi * l + t) * dn..(bi * l + t + 1) * dn];
                for di in 0..d {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let e = di * n + ni;
                        let h = pa[e] * carry[e] + pb[e];
                        acc += crow[ni] * h;
                    }
                    yc[local_t * d + di] = acc;
                }
            }
        };
        if b * l * dn >= 1 << 15 {
            jobs.into_par_iter().for_each(body);
        } else {
            jobs.into_iter().for_each(body);
        }
    }
    Tensor::new(vec![b, l, d], y)
}

/// Convolution kernel of the time-invariant system: K̄[d, j] = Σ_n
/// C[n]·Ā[d, n]^j·B̄[d, n] for j = 0..k−1.
pub fn lti_kernel(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, k: usize) -> Result<Tensor> {
    if k < 1 {
        return Err(CoreError::Configuration("lti_kernel requires k >= 1".into()));
    }
    let s = a_bar.shape();
    if s.len() != 2 || b_bar.shape() != s || c.shape() != [s[1]] {
        return Err(CoreError::dimension(
            "lti_kernel",
            format!(
                "A_bar {:?}, B_bar {:?}, C {:?} (want [D,N], [D,N], [N])",
                a_bar.shape(),
                b_bar.shape(),
                c.shape()
            ),
        ));
    }
    let (d, n) = (s[0], s[1]);
    let ad = a_bar.data();
    let bd = b_bar.data();
    let cd = c.data();
    let mut out = vec![0.0; d * k];
    for di in 0..d {
        let mut state: Vec<f64> = bd[di * n..(di + 1) * n].to_vec();
        for j in 0..k {
            let mut acc = 0.0;
            for ni in 0..n {
                acc += cd[ni] * state[ni];
            }
            out[di * k + j] = acc;
            if j + 1 < k {
                for (sv, &av) in state.iter_mut().zip(&ad[di * n..(di + 1) * n]) {
                    *sv *= av;
                }
            }
        }
    }
    Tensor::new(vec![d, k], out)
}

/// Causal per-channel convolution: y[b,t,d] = Σ_{j=0}^{t} kernel[d,j]·x[b,t−j,d].
/// Kernels longer than the sequence are truncated with a warning.
pub fn lti_conv_apply(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ks = kernel.shape();
    if xs.len() != 3 || ks.len() != 2 || ks[0] != xs[2] {
        return Err(CoreError::dimension(
            "lti_conv_apply",
            format!("input {:?} vs kernel {:?} (want [B,L,D] and [D,k])", xs, ks),
        ));
    }
    let (b, l, d) = (xs[0], xs[1], xs[2]);
    let mut klen = ks[1];
    if klen > l {
        log::warn!(
            "lti_conv_apply: kernel length {} exceeds sequence length {}; truncating",
            klen,
            l
        );
        klen = l;
    }
    let xd = x.data();
    let kd = kernel.data();
    let full_k = ks[1];
    let mut y = vec![0.0; b * l * d];
    for_each_row(&mut y, l * d, b * l * d * klen, |bi, yb| {
        let xb = &xd[bi * l * d..(bi + 1) * l * d];
        for t in 0..l {
            let dst = &mut yb[t * d..(t + 1) * d];
            for j in 0..klen.min(t + 1) {
                let src = &xb[(t - j) * d..(t - j + 1) * d];
                for di in 0..d {
                    dst[di] += kd[di * full_k + j] * src[di];
                }
            }
        }
    });
    Tensor::new(vec![b, l, d], y)
}

// ── Recorded (differentiable) forms ──────────────────────────────────

struct ZohDiscretize {
    mode: DiscretizeMode,
    rows: usize, // B·L
    d: usize,
    n: usize,
}

impl Primitive for ZohDiscretize {
    fn name(&self) -> &'static str {
        "zoh_discretize"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (rows, d, n) = (self.rows, self.d, self.n);
        let dn = d * n;
        let a = inputs[0].data();
        let b_in = inputs[1].data();
        let delta = inputs[2].data();
        let a_bar = outputs[0].data();
        let ga = out_grads[0];
        let gb = out_grads[1];
        let mode = self.mode;
        let exact = mode == DiscretizeMode::ExactZoh;

        // z = Δ·A, Ā = e^z, B̄ = φ(z)·Δ·B (exact) or Δ·B (euler). The saved
        // e^z supplies every factor, so backward needs no transcendentals:
        // φ = (e^z − 1)/z away from zero, series below the threshold.
        //
        // One streaming pass over row blocks produces dΔ and dB in place
        // (single writer per row) plus block-local dA partials, which are
        // combined in block order for schedule-independent results.
        const BLOCK: usize = 64;
        let n_blocks = rows.div_ceil(BLOCK);
        let want_da = needs[0];
        let want_db = needs[1];
        let want_dd = needs[2];

        let mut db = want_db.then(|| vec![0.0; rows * n]);
        let mut ddelta = want_dd.then(|| vec![0.0; rows * d]);

        let block_body = |bi: usize, db_blk: Option<&mut [f64]>, dd_blk: Option<&mut [f64]>| -> Option<Vec<f64>> {
            let lo = bi * BLOCK;
            let hi = (lo + BLOCK).min(rows);
            let mut da_acc = want_da.then(|| vec![0.0; dn]);
            let mut db_blk = db_blk;
            let mut dd_blk = dd_blk;
            for r in lo..hi {
                for di in 0..d {
                    let dt = delta[r * d + di];
                    let arow = &a[di * n..(di + 1) * n];
                    let base = r * dn + di * n;
                    let mut dd_sum = 0.0;
                    for ni in 0..n {
                        let idx = base + ni;
                        let z = dt * arow[ni];
                        let ez = a_bar[idx];
                        let mut dz = 0.0;
                        if let Some(ga) = ga {
                            dz += ga[idx] * ez;
                        }
                        if let Some(gb) = gb {
                            let g = gb[idx];
                            if exact {
                                let bv = b_in[r * n + ni];
                                dz += g * phi_prime(z, ez) * dt * bv;
                                let p = if z.abs() < SERIES_THRESHOLD {
                                    phi_series(z)
                                } else {
                                    (ez - 1.0) / z
                                };
                                dd_sum += g * p * bv;
                                if let Some(blk) = db_blk.as_deref_mut() {
                                    blk[(r - lo) * n + ni] += g * p * dt;
                                }
                            } else {
                                let bv = b_in[r * n + ni];
                                dd_sum += g * bv;
                                if let Some(blk) = db_blk.as_deref_mut() {
                                    blk[(r - lo) * n + ni] += g * dt;
                                }
                            }
                        }
                        dd_sum += dz * arow[ni];
                        if let Some(acc) = da_acc.as_deref_mut() {
                            acc[di * n + ni] += dz * dt;
                        }
                    }
                    if let Some(blk) = dd_blk.as_deref_mut() {
                        blk[(r - lo) * d + di] = dd_sum;
                    }
                }
            }
            da_acc
        };

        let da_partials: Vec<Option<Vec<f64>>> = {
            // slice the row-major outputs into per-block windows
            let mut db_chunks: Vec<Option<&mut [f64]>> = match db.as_deref_mut() {
                Some(buf) => buf.chunks_mut(BLOCK * n).map(Some).collect(),
                None => (0..n_blocks).map(|_| None).collect(),
            };
            let mut dd_chunks: Vec<Option<&mut [f64]>> = match ddelta.as_deref_mut() {
                Some(buf) => buf.chunks_mut(BLOCK * d).map(Some).collect(),
                None => (0..n_blocks).map(|_| None).collect(),
            };
            let jobs: Vec<(usize, (Option<&mut [f64]>, Option<&mut [f64]>))> = db_chunks
                .drain(..)
                .zip(dd_chunks.drain(..))
                .enumerate()
                .collect();
            if rows * dn >= 1 << 15 {
                jobs.into_par_iter()
                    .map(|(bi, (dbb, ddb))| block_body(bi, dbb, ddb))
                    .collect()
            } else {
                jobs.into_iter()
                    .map(|(bi, (dbb, ddb))| block_body(bi, dbb, ddb))
                    .collect()
            }
        };

        let da = want_da.then(|| {
            let mut da = vec![0.0; dn];
            for part in da_partials.into_iter().flatten() {
                for (o, v) in da.iter_mut().zip(part) {
                    *o += v;
                }
            }
            da
        });

        vec![da, db, ddelta]
    }
}

struct SelectiveScan {
    b: usize,
    l: usize,
    d: usize,
    n: usize,
    /// State history [B, L, D, N] captured during the forward pass.
    hist: Vec<f64>,
}

impl Primitive for SelectiveScan {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (b, l, d, n) = (self.b, self.l, self.d, self.n);
        let dn = d * n;
        let gy = out_grads[0].expect("scan output grad");
        let a_bar = inputs[0].data();
        let b_bar = inputs[1].data();
        let c = inputs[2].data();
        let x = inputs[3].data();
        let hist = &self.hist;

        let mut da = vec![0.0; b * l * dn];
        let mut db = vec![0.0; b * l * dn];
        let mut dc = vec![0.0; b * l * n];
        let mut dx = vec![0.0; b * l * d];

        let run = |bi: usize, dab: &mut [f64], dbb: &mut [f64], dcb: &mut [f64], dxb: &mut [f64]| {
            let ab = &a_bar[bi * l * dn..(bi + 1) * l * dn];
            let bb = &b_bar[bi * l * dn..(bi + 1) * l * dn];
            let cb = &c[bi * l * n..(bi + 1) * l * n];
            let xb = &x[bi * l * d..(bi + 1) * l * d];
            let gyb = &gy[bi * l * d..(bi + 1) * l * d];
            let hb = &hist[bi * l * dn..(bi + 1) * l * dn];
            let mut gh = vec![0.0; dn];
            for t in (0..l).rev() {
                let crow = &cb[t * n..(t + 1) * n];
                for di in 0..d {
                    let g = gyb[t * d + di];
                    let off = t * dn + di * n;
                    let ghrow = &mut gh[di * n..(di + 1) * n];
                    // dC[t, n] += Σ_d gy[t, d]·h_t[d, n]
                    {
                        let hrow = &hb[off..off + n];
                        let dcrow = &mut dcb[t * n..(t + 1) * n];
                        for ni in 0..n {
                            dcrow[ni] += g * hrow[ni];
                            ghrow[ni] += g * crow[ni];
                        }
                    }
                    let xv = xb[t * d + di];
                    let arow = &ab[off..off + n];
                    let brow = &bb[off..off + n];
                    let darow = &mut dab[off..off + n];
                    let dbrow = &mut dbb[off..off + n];
                    let mut gx = 0.0;
                    if t == 0 {
                        for ni in 0..n {
                            // h_{-1} = 0, so Ā receives no gradient at t = 0.
                            dbrow[ni] = ghrow[ni] * xv;
                            gx += ghrow[ni] * brow[ni];
                            ghrow[ni] *= arow[ni];
                        }
                    } else {
                        let hprev = &hb[(t - 1) * dn + di * n..(t - 1) * dn + (di + 1) * n];
                        for ni in 0..n {
                            darow[ni] = ghrow[ni] * hprev[ni];
                            dbrow[ni] = ghrow[ni] * xv;
                            gx += ghrow[ni] * brow[ni];
                            ghrow[ni] *= arow[ni];
                        }
                    }
                    dxb[t * d + di] = gx;
                }
            }
        };

        {
            let jobs: Vec<((((usize, &mut [f64]), &mut [f64]), &mut [f64]), &mut [f64])> = da
                .chunks_mut(l * dn)
                .enumerate()
                .zip(db.chunks_mut(l * dn))
                .zip(dc.chunks_mut(l * n))
                .zip(dx.chunks_mut(l * d))
                .collect();
            let body = |((((bi, dab), dbb), dcb), dxb): ((((usize, &mut [f64]), &mut [f64]), &mut [f64]), &mut [f64])| {
                run(bi, dab, dbb, dcb, dxb)
            };
            if b * l * dn >= 1 << 15 {
                jobs.into_par_iter().for_each(body);
            } else {
                jobs.into_iter().for_each(body);
            }
        }

        vec![
            needs[0].then_some(da),
            needs[1].then_some(db),
            needs[2].then_some(dc),
            needs[3].then_some(dx),
        ]
    }
}

/// Discretization and scan fused into one primitive: Ā/B̄ are produced
/// per timestep inside the recurrence instead of being materialized as
/// [B, L, D, N] tensors. Mathematically identical to `zoh_discretize`
/// followed by the sequential scan; this is the training hot path.
struct SelectiveSsm {
    mode: DiscretizeMode,
    b: usize,
    l: usize,
    d: usize,
    n: usize,
    /// e^z per element, captured during the forward pass.
    a_bar: Vec<f64>,
    /// State history [B, L, D, N].
    hist: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn fused_seq_fwd_body(
    a: &[f64],
    b_mat: &[f64],
    c: &[f64],
    delta: &[f64],
    x: &[f64],
    exact: bool,
    bi: usize,
    l: usize,
    d: usize,
    n: usize,
    yb: &mut [f64],
    mut store: Option<(&mut [f64], &mut [f64])>,
) {
    let dn = d * n;
    let mut h = vec![0.0; dn];
    let bbase = bi * l;
    for t in 0..l {
        let r = bbase + t;
        let drow = &delta[r * d..(r + 1) * d];
        let brow = &b_mat[r * n..(r + 1) * n];
        let crow = &c[r * n..(r + 1) * n];
        let xrow = &x[r * d..(r + 1) * d];
        for di in 0..d {
            let dt = drow[di];
            let xv = xrow[di];
            let arow = &a[di * n..(di + 1) * n];
            let hrow = &mut h[di * n..(di + 1) * n];
            let mut acc = 0.0;
            if exact {
                if let Some((ab, _)) = store.as_mut() {
                    let adst = &mut ab[t * dn + di * n..t * dn + (di + 1) * n];
                    for ni in 0..n {
                        let z = dt * arow[ni];
                        let e = crate::kernels::exp64(z);
                        adst[ni] = e;
                        let p = if z.abs() < SERIES_THRESHOLD {
                            phi_series(z)
                        } else {
                            (e - 1.0) / z
                        };
                        hrow[ni] = e * hrow[ni] + p * dt * brow[ni] * xv;
                        acc += crow[ni] * hrow[ni];
                    }
                } else {
                    for ni in 0..n {
                        let z = dt * arow[ni];
                        let e = crate::kernels::exp64(z);
                        let p = if z.abs() < SERIES_THRESHOLD {
                            phi_series(z)
                        } else {
                            (e - 1.0) / z
                        };
                        hrow[ni] = e * hrow[ni] + p * dt * brow[ni] * xv;
                        acc += crow[ni] * hrow[ni];
                    }
                }
            } else if let Some((ab, _)) = store.as_mut() {
                let adst = &mut ab[t * dn + di * n..t * dn + (di + 1) * n];
                for ni in 0..n {
                    let e = crate::kernels::exp64(dt * arow[ni]);
                    adst[ni] = e;
                    hrow[ni] = e * hrow[ni] + dt * brow[ni] * xv;
                    acc += crow[ni] * hrow[ni];
                }
            } else {
                for ni in 0..n {
                    let e = crate::kernels::exp64(dt * arow[ni]);
                    hrow[ni] = e * hrow[ni] + dt * brow[ni] * xv;
                    acc += crow[ni] * hrow[ni];
                }
            }
            yb[t * d + di] = acc;
        }
        if let Some((_, hb)) = store.as_mut() {
            hb[t * dn..(t + 1) * dn].copy_from_slice(&h);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn fused_seq_fwd_avx2(
    a: &[f64],
    b_mat: &[f64],
    c: &[f64],
    delta: &[f64],
    x: &[f64],
    exact: bool,
    bi: usize,
    l: usize,
    d: usize,
    n: usize,
    yb: &mut [f64],
    store: Option<(&mut [f64], &mut [f64])>,
) {
    fused_seq_fwd_body(a, b_mat, c, delta, x, exact, bi, l, d, n, yb, store)
}

#[allow(clippy::too_many_arguments)]
fn fused_seq_fwd(
    simd: bool,
    a: &[f64],
    b_mat: &[f64],
    c: &[f64],
    delta: &[f64],
    x: &[f64],
    exact: bool,
    bi: usize,
    l: usize,
    d: usize,
    n: usize,
    yb: &mut [f64],
    store: Option<(&mut [f64], &mut [f64])>,
) {
    #[cfg(target_arch = "x86_64")]
    if simd {
        return unsafe {
            fused_seq_fwd_avx2(a, b_mat, c, delta, x, exact, bi, l, d, n, yb, store)
        };
    }
    let _ = simd;
    fused_seq_fwd_body(a, b_mat, c, delta, x, exact, bi, l, d, n, yb, store)
}

struct FusedBwdArgs<'a> {
    a: &'a [f64],
    b_mat: &'a [f64],
    c: &'a [f64],
    delta: &'a [f64],
    x: &'a [f64],
    gy: &'a [f64],
    a_bar: &'a [f64],
    hist: &'a [f64],
    exact: bool,
    l: usize,
    d: usize,
    n: usize,
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn fused_seq_bwd_body(
    args: &FusedBwdArgs<'_>,
    bi: usize,
    dbb: &mut [f64],
    dcb: &mut [f64],
    ddb: &mut [f64],
    dxb: &mut [f64],
) -> Vec<f64> {
    let (l, d, n) = (args.l, args.d, args.n);
    let dn = d * n;
    let mut da_local = vec![0.0; dn];
    let mut gh = vec![0.0; dn];
    let bbase = bi * l;
    for t in (0..l).rev() {
        let r = bbase + t;
        let drow = &args.delta[r * d..(r + 1) * d];
        let brow = &args.b_mat[r * n..(r + 1) * n];
        let crow = &args.c[r * n..(r + 1) * n];
        let xrow = &args.x[r * d..(r + 1) * d];
        let gyrow = &args.gy[r * d..(r + 1) * d];
        let ht = &args.hist[r * dn..(r + 1) * dn];
        for di in 0..d {
            let g = gyrow[di];
            let dt = drow[di];
            let xv = xrow[di];
            let arow = &args.a[di * n..(di + 1) * n];
            let ghrow = &mut gh[di * n..(di + 1) * n];
            let htrow = &ht[di * n..(di + 1) * n];
            let abrow = &args.a_bar[r * dn + di * n..r * dn + (di + 1) * n];
            let dcrow = &mut dcb[t * n..(t + 1) * n];
            let dbrow = &mut dbb[t * n..(t + 1) * n];
            let darow = &mut da_local[di * n..(di + 1) * n];
            let mut gx = 0.0;
            let mut gdt = 0.0;
            if t > 0 {
                let hprev = &args.hist[(r - 1) * dn + di * n..(r - 1) * dn + (di + 1) * n];
                for ni in 0..n {
                    let ghv = ghrow[ni] + g * crow[ni];
                    dcrow[ni] += g * htrow[ni];
                    let e = abrow[ni];
                    let z = dt * arow[ni];
                    let g_abar = ghv * hprev[ni];
                    let g_bbar = ghv * xv;
                    let bv = brow[ni];
                    let (b_bar, mut dz, d_dt, d_b) = if args.exact {
                        let p = if z.abs() < SERIES_THRESHOLD {
                            phi_series(z)
                        } else {
                            (e - 1.0) / z
                        };
                        (
                            p * dt * bv,
                            g_bbar * phi_prime(z, e) * dt * bv,
                            g_bbar * p * bv,
                            g_bbar * p * dt,
                        )
                    } else {
                        (dt * bv, 0.0, g_bbar * bv, g_bbar * dt)
                    };
                    dz += g_abar * e;
                    gx += ghv * b_bar;
                    gdt += dz * arow[ni] + d_dt;
                    dbrow[ni] += d_b;
                    darow[ni] += dz * dt;
                    ghrow[ni] = ghv * e;
                }
            } else {
                for ni in 0..n {
                    let ghv = ghrow[ni] + g * crow[ni];
                    dcrow[ni] += g * htrow[ni];
                    let e = abrow[ni];
                    let z = dt * arow[ni];
                    let g_bbar = ghv * xv;
                    let bv = brow[ni];
                    let (b_bar, dz, d_dt, d_b) = if args.exact {
                        let p = if z.abs() < SERIES_THRESHOLD {
                            phi_series(z)
                        } else {
                            (e - 1.0) / z
                        };
                        (
                            p * dt * bv,
                            g_bbar * phi_prime(z, e) * dt * bv,
                            g_bbar * p * bv,
                            g_bbar * p * dt,
                        )
                    } else {
                        (dt * bv, 0.0, g_bbar * bv, g_bbar * dt)
                    };
                    gx += ghv * b_bar;
                    gdt += dz * arow[ni] + d_dt;
                    dbrow[ni] += d_b;
                    darow[ni] += dz * dt;
                    ghrow[ni] = ghv * e;
                }
            }
            dxb[t * d + di] = gx;
            ddb[t * d + di] = gdt;
        }
    }
    da_local
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn fused_seq_bwd_avx2(
    args: &FusedBwdArgs<'_>,
    bi: usize,
    dbb: &mut [f64],
    dcb: &mut [f64],
    ddb: &mut [f64],
    dxb: &mut [f64],
) -> Vec<f64> {
    fused_seq_bwd_body(args, bi, dbb, dcb, ddb, dxb)
}

fn fused_seq_bwd(
    simd: bool,
    args: &FusedBwdArgs<'_>,
    bi: usize,
    dbb: &mut [f64],
    dcb: &mut [f64],
    ddb: &mut [f64],
    dxb: &mut [f64],
) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    if simd {
        return unsafe { fused_seq_bwd_avx2(args, bi, dbb, dcb, ddb, dxb) };
    }
    let _ = simd;
    fused_seq_bwd_body(args, bi, dbb, dcb, ddb, dxb)
}

#[allow(clippy::type_complexity)]
fn fused_ssm_forward(
    a: &[f64],
    b_mat: &[f64],
    c: &[f64],
    delta: &[f64],
    x: &[f64],
    mode: DiscretizeMode,
    b: usize,
    l: usize,
    d: usize,
    n: usize,
    store: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dn = d * n;
    let exact = mode == DiscretizeMode::ExactZoh;
    let simd = crate::kernels::simd_enabled();
    let mut y = vec![0.0; b * l * d];
    let (mut a_bar, mut hist) = if store {
        (vec![0.0; b * l * dn], vec![0.0; b * l * dn])
    } else {
        (Vec::new(), Vec::new())
    };
    if store {
        let jobs: Vec<((usize, &mut [f64]), (&mut [f64], &mut [f64]))> = y
            .chunks_mut(l * d)
            .enumerate()
            .zip(a_bar.chunks_mut(l * dn).zip(hist.chunks_mut(l * dn)))
            .collect();
        let body = |((bi, yb), (ab, hb)): ((usize, &mut [f64]), (&mut [f64], &mut [f64]))| {
            fused_seq_fwd(simd, a, b_mat, c, delta, x, exact, bi, l, d, n, yb, Some((ab, hb)));
        };
        if b * l * dn >= 1 << 15 {
            jobs.into_par_iter().for_each(body);
        } else {
            jobs.into_iter().for_each(body);
        }
    } else {
        let body = |(bi, yb): (usize, &mut [f64])| {
            fused_seq_fwd(simd, a, b_mat, c, delta, x, exact, bi, l, d, n, yb, None);
        };
        if b * l * dn >= 1 << 15 {
            y.par_chunks_mut(l * d).enumerate().for_each(body);
        } else {
            y.chunks_mut(l * d).enumerate().for_each(body);
        }
    }
    (y, a_bar, hist)
}

impl Primitive for SelectiveSsm {
    fn name(&self) -> &'static str {
        "selective_ssm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (b, l, d, n) = (self.b, self.l, self.d, self.n);
        let dn = d * n;
        let args = FusedBwdArgs {
            a: inputs[0].data(),
            b_mat: inputs[1].data(),
            c: inputs[2].data(),
            delta: inputs[3].data(),
            x: inputs[4].data(),
            gy: out_grads[0].expect("selective_ssm output grad"),
            a_bar: &self.a_bar,
            hist: &self.hist,
            exact: self.mode == DiscretizeMode::ExactZoh,
            l,
            d,
            n,
        };
        let simd = crate::kernels::simd_enabled();

        let mut db = vec![0.0; b * l * n];
        let mut dc = vec![0.0; b * l * n];
        let mut ddelta = vec![0.0; b * l * d];
        let mut dx = vec![0.0; b * l * d];

        // One reverse sweep per batch element; per-batch dA partials are
        // combined in batch order afterwards.
        let da_partials: Vec<Vec<f64>> = {
            let jobs: Vec<((((usize, &mut [f64]), &mut [f64]), &mut [f64]), &mut [f64])> = db
                .chunks_mut(l * n)
                .enumerate()
                .zip(dc.chunks_mut(l * n))
                .zip(ddelta.chunks_mut(l * d))
                .zip(dx.chunks_mut(l * d))
                .collect();
            let body = |((((bi, dbb), dcb), ddb), dxb): (
                (((usize, &mut [f64]), &mut [f64]), &mut [f64]),
                &mut [f64],
            )|
             -> Vec<f64> { fused_seq_bwd(simd, &args, bi, dbb, dcb, ddb, dxb) };
            if b * l * dn >= 1 << 15 {
                jobs.into_par_iter().map(body).collect()
            } else {
                jobs.into_iter().map(body).collect()
            }
        };

        let da = needs[0].then(|| {
            let mut da = vec![0.0; dn];
            for part in da_partials {
                for (o, v) in da.iter_mut().zip(part) {
                    *o += v;
                }
            }
            da
        });

        vec![
            da,
            needs[1].then_some(db),
            needs[2].then_some(dc),
            needs[3].then_some(ddelta),
            needs[4].then_some(dx),
        ]
    }
}

impl Graph {
    /// Fused selective-SSM step: equivalent to `zoh_discretize` followed by
    /// `selective_scan`, without materializing the discretized pair.
    pub fn selective_ssm(
        &mut self,
        a: Var,
        b_mat: Var,
        c: Var,
        delta: Var,
        x: Var,
        mode: DiscretizeMode,
    ) -> Result<Var> {
        let a_s = self.value(a).shape().to_vec();
        if a_s.len() != 2 {
            return Err(CoreError::dimension(
                "selective_ssm",
                format!("A must be [D, N], got {:?}", a_s),
            ));
        }
        let (d, n) = (a_s[0], a_s[1]);
        let ds = self.value(delta).shape().to_vec();
        if ds.len() != 3 || ds[2] != d {
            return Err(CoreError::dimension(
                "selective_ssm",
                format!("delta must be [B, L, {}], got {:?}", d, ds),
            ));
        }
        let (batch, len) = (ds[0], ds[1]);
        if self.value(b_mat).shape() != [batch, len, n]
            || self.value(c).shape() != [batch, len, n]
            || self.value(x).shape() != [batch, len, d]
        {
            return Err(CoreError::dimension(
                "selective_ssm",
                format!(
                    "B {:?}, C {:?}, x {:?} inconsistent with A {:?} and delta {:?}",
                    self.value(b_mat).shape(),
                    self.value(c).shape(),
                    self.value(x).shape(),
                    a_s,
                    ds
                ),
            ));
        }
        if let Some(&bad) = self.value(delta).data().iter().find(|&&v| v <= 0.0) {
            return Err(CoreError::Contract(format!(
                "selective_ssm requires strictly positive delta, found {}",
                bad
            )));
        }
        let track = self.grad_enabled()
            && [a, b_mat, c, delta, x]
                .iter()
                .any(|v| self.value(*v).requires_grad());
        let (y, a_bar, hist) = fused_ssm_forward(
            self.value(a).data(),
            self.value(b_mat).data(),
            self.value(c).data(),
            self.value(delta).data(),
            self.value(x).data(),
            mode,
            batch,
            len,
            d,
            n,
            track,
        );
        let prim = SelectiveSsm {
            mode,
            b: batch,
            l: len,
            d,
            n,
            a_bar,
            hist,
        };
        let out = Tensor::new(vec![batch, len, d], y)?;
        Ok(self.record1(Box::new(prim), &[a, b_mat, c, delta, x], out))
    }
}

impl Graph {
    /// Recorded ZOH discretization; returns (Ā, B̄) vars of shape [B, L, D, N].
    pub fn zoh_discretize(
        &mut self,
        a: Var,
        b_mat: Var,
        delta: Var,
        mode: DiscretizeMode,
    ) -> Result<(Var, Var)> {
        let pair = zoh_discretize(self.value(a), self.value(b_mat), self.value(delta), mode)?;
        let shape = pair.a_bar.shape();
        let prim = ZohDiscretize {
            mode,
            rows: shape[0] * shape[1],
            d: shape[2],
            n: shape[3],
        };
        let vars = self.record(
            Box::new(prim),
            &[a, b_mat, delta],
            vec![pair.a_bar, pair.b_bar],
        );
        Ok((vars[0], vars[1]))
    }

    /// Recorded sequential scan of the discretized recurrence.
    pub fn selective_scan(&mut self, a_bar: Var, b_bar: Var, c: Var, x: Var) -> Result<Var> {
        if self.value(a_bar).shape() != self.value(b_bar).shape() {
            return Err(CoreError::dimension(
                "selective_scan",
                format!(
                    "A_bar {:?} vs B_bar {:?}",
                    self.value(a_bar).shape(),
                    self.value(b_bar).shape()
                ),
            ));
        }
        let (b, l, d, n) = check_scan_shapes(
            "selective_scan",
            self.value(a_bar).shape(),
            self.value(c),
            self.value(x),
        )?;
        let mut y = vec![0.0; b * l * d];
        let mut hist = vec![0.0; b * l * d * n];
        scan_kernel(
            self.value(a_bar).data(),
            self.value(b_bar).data(),
            self.value(c).data(),
            self.value(x).data(),
            b,
            l,
            d,
            n,
            &mut y,
            Some(&mut hist),
        );
        let y = Tensor::new(vec![b, l, d], y)?;
        let prim = SelectiveScan { b, l, d, n, hist };
        Ok(self.record1(Box::new(prim), &[a_bar, b_bar, c, x], y))
    }
}
