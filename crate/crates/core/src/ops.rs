//! Built-in differentiable primitives and their kernels.
//!
//! Heavy kernels (matmul and friends) parallelize over disjoint output rows,
//! so results are bit-identical regardless of thread count.

use std::sync::Once;

use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Primitive, Var};
use crate::tensor::Tensor;

/// Below this many flops a kernel stays on one thread.
const PAR_MIN_WORK: usize = 1 << 15;

static MALLOC_TUNING: Once = Once::new();

/// Keep multi-megabyte tensor buffers on the main heap so freed blocks are
/// reused across steps instead of being mmapped and unmapped every pass.
pub(crate) fn tune_allocator() {
    MALLOC_TUNING.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    });
}

/// Run `f(row_index, row)` over fixed-size chunks of `out`, in parallel when
/// the total work is worth it. Each row has exactly one writer.
pub(crate) fn for_each_row<F>(out: &mut [f64], row_len: usize, total_work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(out.len() % row_len, 0);
    if total_work >= PAR_MIN_WORK {
        out.par_chunks_mut(row_len).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        for (i, c) in out.chunks_mut(row_len).enumerate() {
            f(i, c);
        }
    }
}

// ── Dense kernels ────────────────────────────────────────────────────

/// out[m,n] = x[m,k] · w[k,n]
pub(crate) fn matmul(x: &[f64], w: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let simd = crate::kernels::simd_enabled();
    for_each_row(out, n, m * k * n, |i, yrow| {
        yrow.iter_mut().for_each(|v| *v = 0.0);
        crate::kernels::axpy_row(simd, &x[i * k..(i + 1) * k], w, yrow, n);
    });
}

/// out[k,n] = xᵀ[k,m] · dy[m,n]  (weight gradient of a linear layer)
///
/// Row blocks accumulate local partials that are combined in block order,
/// so the result does not depend on thread scheduling.
pub(crate) fn matmul_tn(x: &[f64], dy: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    const BLOCK: usize = 128;
    let n_blocks = m.div_ceil(BLOCK);
    if m * k * n < PAR_MIN_WORK || n_blocks == 1 {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let xrow = &x[i * k..(i + 1) * k];
            let dyrow = &dy[i * n..(i + 1) * n];
            for (p, &a) in xrow.iter().enumerate() {
                let dst = &mut out[p * n..(p + 1) * n];
                for (dv, &gy) in dst.iter_mut().zip(dyrow) {
                    *dv += a * gy;
                }
            }
        }
        return;
    }
    let simd = crate::kernels::simd_enabled();
    let partials: Vec<Vec<f64>> = (0..n_blocks)
        .into_par_iter()
        .map(|bi| {
            let lo = bi * BLOCK;
            let hi = (lo + BLOCK).min(m);
            let mut acc = vec![0.0; k * n];
            crate::kernels::tn_block(simd, x, dy, lo, hi, k, n, &mut acc);
            acc
        })
        .collect();
    out.iter_mut().for_each(|v| *v = 0.0);
    for acc in partials {
        for (o, v) in out.iter_mut().zip(acc) {
            *o += v;
        }
    }
}

/// out[m,k] = dy[m,n] · wᵀ[n,k]  (input gradient of a linear layer)
pub(crate) fn matmul_nt(dy: &[f64], w: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let simd = crate::kernels::simd_enabled();
    for_each_row(out, k, m * k * n, |i, dxrow| {
        crate::kernels::dot_row(simd, &dy[i * n..(i + 1) * n], w, dxrow, n);
    });
}

// ── Scalar math ──────────────────────────────────────────────────────

/// Overflow-safe softplus: max(x,0) + ln(1 + exp(−|x|)), strictly positive.
#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid (the softplus derivative).
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus: y such that softplus(y) == x for x > 0.
#[inline]
pub fn softplus_inverse(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    // ln(e^x − 1), rewritten to avoid overflow for large x.
    x + (-(-x).exp_m1()).ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// ── Elementwise primitives ───────────────────────────────────────────

struct Add;

impl Primitive for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("add output grad");
        needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

struct Mul;

impl Primitive for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("mul output grad");
        let da = needs[0].then(|| {
            g.iter()
                .zip(inputs[1].data())
                .map(|(gi, bi)| gi * bi)
                .collect()
        });
        let db = needs[1].then(|| {
            g.iter()
                .zip(inputs[0].data())
                .map(|(gi, ai)| gi * ai)
                .collect()
        });
        vec![da, db]
    }
}

struct Neg;

impl Primitive for Neg {
    fn name(&self) -> &'static str {
        "neg"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("neg output grad");
        vec![Some(g.iter().map(|v| -v).collect())]
    }
}

struct Exp;

impl Primitive for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("exp output grad");
        // d exp(x)/dx = exp(x), already available as the output.
        vec![Some(
            g.iter()
                .zip(outputs[0].data())
                .map(|(gi, yi)| gi * yi)
                .collect(),
        )]
    }
}

struct Softplus {
    /// Sigmoid of the input, captured during the forward pass.
    sig: Vec<f64>,
}

impl Primitive for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("softplus output grad");
        vec![Some(
            g.iter().zip(&self.sig).map(|(gi, si)| gi * si).collect(),
        )]
    }
}

struct Gelu {
    /// tanh of the inner polynomial, captured during the forward pass.
    tanh_u: Vec<f64>,
}

impl Primitive for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("gelu output grad");
        vec![Some(
            g.iter()
                .zip(inputs[0].data())
                .zip(&self.tanh_u)
                .map(|((gi, &xi), &t)| {
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * xi * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xi * xi);
                    gi * d
                })
                .collect(),
        )]
    }
}

struct Scale(f64);

impl Primitive for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("scale output grad");
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

struct BiasAdd {
    width: usize,
}

impl Primitive for BiasAdd {
    fn name(&self) -> &'static str {
        "bias_add"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("bias_add output grad");
        let dx = needs[0].then(|| g.to_vec());
        let db = needs[1].then(|| {
            let mut db = vec![0.0; self.width];
            for row in g.chunks(self.width) {
                for (dv, &gy) in db.iter_mut().zip(row) {
                    *dv += gy;
                }
            }
            db
        });
        vec![dx, db]
    }
}

// ── Linear ───────────────────────────────────────────────────────────

struct Linear {
    rows: usize,
    din: usize,
    dout: usize,
}

impl Primitive for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("linear output grad");
        let (m, k, n) = (self.rows, self.din, self.dout);
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; m * k];
            matmul_nt(g, inputs[1].data(), m, k, n, &mut dx);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; k * n];
            matmul_tn(inputs[0].data(), g, m, k, n, &mut dw);
            dw
        });
        let mut grads = vec![dx, dw];
        if inputs.len() == 3 {
            let db = needs[2].then(|| {
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (dv, &gy) in db.iter_mut().zip(row) {
                        *dv += gy;
                    }
                }
                db
            });
            grads.push(db);
        }
        grads
    }
}

// ── Depthwise 1-D convolution ────────────────────────────────────────

struct Conv1dDepthwise {
    batch: usize,
    len: usize,
    channels: usize,
    ksize: usize,
}

impl Conv1dDepthwise {
    /// Kernel transposed to [K, D] so the channel loop is contiguous.
    fn kernel_t(&self, kernel: &[f64]) -> Vec<f64> {
        let (d, k) = (self.channels, self.ksize);
        let mut kt = vec![0.0; d * k];
        for di in 0..d {
            for j in 0..k {
                kt[j * d + di] = kernel[di * k + j];
            }
        }
        kt
    }
}

impl Primitive for Conv1dDepthwise {
    fn name(&self) -> &'static str {
        "conv1d_depthwise"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("conv1d output grad");
        let (b, l, d, k) = (self.batch, self.len, self.channels, self.ksize);
        let c = (k - 1) / 2;
        let kt = self.kernel_t(inputs[1].data());

        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; b * l * d];
            for_each_row(&mut dx, l * d, b * l * d * k, |bi, dxb| {
                let gb = &g[bi * l * d..(bi + 1) * l * d];
                for li in 0..l {
                    let dst = &mut dxb[li * d..(li + 1) * d];
                    for j in 0..k {
                        // y[t] drew from x[t + j - c]; invert the offset.
                        let src = li as isize + c as isize - j as isize;
                        if src < 0 || src >= l as isize {
                            continue;
                        }
                        let grow = &gb[src as usize * d..(src as usize + 1) * d];
                        let krow = &kt[j * d..(j + 1) * d];
                        for ((dv, &gy), &kv) in dst.iter_mut().zip(grow).zip(krow) {
                            *dv += gy * kv;
                        }
                    }
                }
            });
            dx
        });

        let dk = needs[1].then(|| {
            let x = inputs[0].data();
            let mut dkt = vec![0.0; k * d];
            for bi in 0..b {
                let xb = &x[bi * l * d..(bi + 1) * l * d];
                let gb = &g[bi * l * d..(bi + 1) * l * d];
                for li in 0..l {
                    let grow = &gb[li * d..(li + 1) * d];
                    for j in 0..k {
                        let src = li as isize + j as isize - c as isize;
                        if src < 0 || src >= l as isize {
                            continue;
                        }
                        let xrow = &xb[src as usize * d..(src as usize + 1) * d];
                        let drow = &mut dkt[j * d..(j + 1) * d];
                        for ((dv, &gy), &xv) in drow.iter_mut().zip(grow).zip(xrow) {
                            *dv += gy * xv;
                        }
                    }
                }
            }
            // back to [D, K]
            let mut dk = vec![0.0; d * k];
            for di in 0..d {
                for j in 0..k {
                    dk[di * k + j] = dkt[j * d + di];
                }
            }
            dk
        });

        vec![dx, dk]
    }
}

// ── Reductions and shape ops ─────────────────────────────────────────

struct MeanAxis {
    outer: usize,
    mid: usize,
    inner: usize,
}

impl Primitive for MeanAxis {
    fn name(&self) -> &'static str {
        "mean_axis"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("mean output grad");
        let (o, m, i) = (self.outer, self.mid, self.inner);
        let scale = 1.0 / m as f64;
        let mut dx = vec![0.0; o * m * i];
        for oi in 0..o {
            let grow = &g[oi * i..(oi + 1) * i];
            for mi in 0..m {
                let dst = &mut dx[(oi * m + mi) * i..(oi * m + mi + 1) * i];
                for (dv, &gy) in dst.iter_mut().zip(grow) {
                    *dv = gy * scale;
                }
            }
        }
        vec![Some(dx)]
    }
}

struct ConcatLast {
    widths: Vec<usize>,
    rows: usize,
}

impl Primitive for ConcatLast {
    fn name(&self) -> &'static str {
        "concat_last"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("concat output grad");
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        self.widths
            .iter()
            .zip(needs)
            .map(|(&w, &need)| {
                let res = need.then(|| {
                    let mut dx = vec![0.0; self.rows * w];
                    for r in 0..self.rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        dx[r * w..(r + 1) * w].copy_from_slice(src);
                    }
                    dx
                });
                offset += w;
                res
            })
            .collect()
    }
}

struct SumAll;

impl Primitive for SumAll {
    fn name(&self) -> &'static str {
        "sum_all"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("sum output grad")[0];
        vec![Some(vec![g; inputs[0].numel()])]
    }
}

// ── Classification ───────────────────────────────────────────────────

struct LogSoftmax {
    rows: usize,
    cols: usize,
}

impl Primitive for LogSoftmax {
    fn name(&self) -> &'static str {
        "log_softmax"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("log_softmax output grad");
        let y = outputs[0].data();
        let (r, c) = (self.rows, self.cols);
        let mut dx = vec![0.0; r * c];
        for ri in 0..r {
            let grow = &g[ri * c..(ri + 1) * c];
            let yrow = &y[ri * c..(ri + 1) * c];
            let gsum: f64 = grow.iter().sum();
            let dst = &mut dx[ri * c..(ri + 1) * c];
            for ((dv, &gy), &yv) in dst.iter_mut().zip(grow).zip(yrow) {
                *dv = gy - yv.exp() * gsum;
            }
        }
        vec![Some(dx)]
    }
}

struct CrossEntropy {
    targets: Vec<usize>,
    log_probs: Vec<f64>,
    cols: usize,
}

impl Primitive for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("cross_entropy output grad")[0];
        let b = self.targets.len();
        let c = self.cols;
        let scale = g / b as f64;
        let mut dx = vec![0.0; b * c];
        for (ri, &t) in self.targets.iter().enumerate() {
            let lp = &self.log_probs[ri * c..(ri + 1) * c];
            let dst = &mut dx[ri * c..(ri + 1) * c];
            for (ci, (dv, &l)) in dst.iter_mut().zip(lp).enumerate() {
                let p = l.exp();
                *dv = (p - if ci == t { 1.0 } else { 0.0 }) * scale;
            }
        }
        vec![Some(dx)]
    }
}

struct Embedding {
    ids: Vec<u32>,
    vocab: usize,
    dim: usize,
}

impl Primitive for Embedding {
    fn name(&self) -> &'static str {
        "embedding"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = out_grads[0].expect("embedding output grad");
        let mut dt = vec![0.0; self.vocab * self.dim];
        for (i, &id) in self.ids.iter().enumerate() {
            let src = &g[i * self.dim..(i + 1) * self.dim];
            let dst = &mut dt[id as usize * self.dim..(id as usize + 1) * self.dim];
            for (dv, &gy) in dst.iter_mut().zip(src) {
                *dv += gy;
            }
        }
        vec![Some(dt)]
    }
}

// ── Graph-level API ──────────────────────────────────────────────────

fn check_same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(CoreError::dimension(
            op,
            format!("{:?} vs {:?}", g.value(a).shape(), g.value(b).shape()),
        ));
    }
    Ok(())
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self, "add", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.record1(Box::new(Add), &[a, b], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self, "mul", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.record1(Box::new(Mul), &[a, b], out))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|x| -x).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.record1(Box::new(Neg), &[a], out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|x| x.exp()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.record1(Box::new(Exp), &[a], out)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let mut data = Vec::with_capacity(n);
        let mut sig = Vec::with_capacity(n);
        for &x in self.value(a).iter() {
            data.push(softplus_scalar(x));
            sig.push(sigmoid(x));
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.record1(Box::new(Softplus { sig }), &[a], out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let mut data = Vec::with_capacity(n);
        let mut tanh_u = Vec::with_capacity(n);
        for &x in self.value(a).iter() {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            data.push(0.5 * x * (1.0 + t));
            tanh_u.push(t);
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.record1(Box::new(Gelu { tanh_u }), &[a], out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.record1(Box::new(Scale(c)), &[a], out)
    }

    /// Broadcast a [W] vector over the last axis of x.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let width = *xs.last().unwrap_or(&0);
        if self.value(b).shape() != [width] {
            return Err(CoreError::dimension(
                "bias_add",
                format!("{:?} vs {:?}", xs, self.value(b).shape()),
            ));
        }
        let bd = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(width) {
            for (yv, &bv) in row.iter_mut().zip(&bd) {
                *yv += bv;
            }
        }
        let out = Tensor::new(xs, data)?;
        Ok(self.record1(Box::new(BiasAdd { width }), &[x, b], out))
    }

    /// y[..., j] = Σ_i x[..., i]·w[i, j] (+ b[j]); bias is the only
    /// broadcast in the crate.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(CoreError::dimension(
                "linear",
                format!("input {:?} vs weight {:?}", xs, ws),
            ));
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / din;
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [dout] {
                return Err(CoreError::dimension(
                    "linear",
                    format!("bias {:?} vs weight {:?}", bs, ws),
                ));
            }
        }
        let mut data = vec![0.0; rows * dout];
        matmul(self.value(x).data(), self.value(w).data(), rows, din, dout, &mut data);
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            for row in data.chunks_mut(dout) {
                for (yv, &bv) in row.iter_mut().zip(&bd) {
                    *yv += bv;
                }
            }
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = dout;
        let out = Tensor::new(out_shape, data)?;
        let prim = Box::new(Linear { rows, din, dout });
        let inputs: Vec<Var> = match bias {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        Ok(self.record1(prim, &inputs, out))
    }

    /// Per-channel 1-D convolution along the middle axis of an [B, L, D]
    /// tensor, zero-padded so the output length equals the input length.
    /// The kernel is [D, K] with odd K.
    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 3 || ks.len() != 2 || xs[2] != ks[0] {
            return Err(CoreError::dimension(
                "conv1d_depthwise",
                format!("input {:?} vs kernel {:?}", xs, ks),
            ));
        }
        let (b, l, d, k) = (xs[0], xs[1], xs[2], ks[1]);
        if k % 2 == 0 {
            return Err(CoreError::Configuration(format!(
                "conv1d_depthwise kernel width must be odd, got {}",
                k
            )));
        }
        let c = (k - 1) / 2;
        let prim = Conv1dDepthwise {
            batch: b,
            len: l,
            channels: d,
            ksize: k,
        };
        let kt = prim.kernel_t(self.value(kernel).data());
        let xd = self.value(x).data();
        let mut data = vec![0.0; b * l * d];
        for_each_row(&mut data, l * d, b * l * d * k, |bi, yb| {
            let xb = &xd[bi * l * d..(bi + 1) * l * d];
            for li in 0..l {
                let dst = &mut yb[li * d..(li + 1) * d];
                for j in 0..k {
                    let src = li as isize + j as isize - c as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    let xrow = &xb[src as usize * d..(src as usize + 1) * d];
                    let krow = &kt[j * d..(j + 1) * d];
                    for ((yv, &xv), &kv) in dst.iter_mut().zip(xrow).zip(krow) {
                        *yv += xv * kv;
                    }
                }
            }
        });
        let out = Tensor::new(xs, data)?;
        Ok(self.record1(Box::new(prim), &[x, kernel], out))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() {
            return Err(CoreError::dimension(
                "mean_axis",
                format!("axis {} out of range for shape {:?}", axis, xs),
            ));
        }
        let outer: usize = xs[..axis].iter().product();
        let mid = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        let scale = 1.0 / mid as f64;
        for oi in 0..outer {
            let dst = &mut data[oi * inner..(oi + 1) * inner];
            for mi in 0..mid {
                let src = &xd[(oi * mid + mi) * inner..(oi * mid + mi + 1) * inner];
                for (dv, &xv) in dst.iter_mut().zip(src) {
                    *dv += xv;
                }
            }
            dst.iter_mut().for_each(|v| *v *= scale);
        }
        let mut out_shape = xs.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.record1(Box::new(MeanAxis { outer, mid, inner }), &[x], out))
    }

    /// Concatenate along the last axis; all leading dims must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(CoreError::Contract("concat_last needs at least one input".into()));
        }
        let lead = self.value(xs[0]).shape()[..self.value(xs[0]).shape().len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(CoreError::dimension(
                    "concat_last",
                    format!("{:?} vs {:?}", self.value(xs[0]).shape(), s),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut out_shape = lead;
        out_shape.push(total);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.record1(Box::new(ConcatLast { widths, rows }), xs, out))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        self.record1(Box::new(SumAll), &[x], Tensor::scalar(s))
    }

    /// Row-stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let cols = *xs.last().ok_or_else(|| {
            CoreError::dimension("log_softmax", "rank-0 input".to_string())
        })?;
        let rows = self.value(x).numel() / cols;
        let xd = self.value(x).data();
        let mut data = vec![0.0; rows * cols];
        for ri in 0..rows {
            let row = &xd[ri * cols..(ri + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for (dv, &v) in data[ri * cols..(ri + 1) * cols].iter_mut().zip(row) {
                *dv = v - lse;
            }
        }
        let out = Tensor::new(xs, data)?;
        Ok(self.record1(Box::new(LogSoftmax { rows, cols }), &[x], out))
    }

    /// Mean negative log-likelihood of integer targets under the logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 {
            return Err(CoreError::dimension(
                "cross_entropy",
                format!("expected [batch, classes], got {:?}", shape),
            ));
        }
        let (b, c) = (shape[0], shape[1]);
        if targets.len() != b {
            return Err(CoreError::dimension(
                "cross_entropy",
                format!("{} targets for batch {}", targets.len(), b),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(CoreError::Contract(format!(
                "target {} out of range for {} classes",
                t, c
            )));
        }
        let xd = self.value(logits).data();
        let mut log_probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for ri in 0..b {
            let row = &xd[ri * c..(ri + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for (dv, &v) in log_probs[ri * c..(ri + 1) * c].iter_mut().zip(row) {
                *dv = v - lse;
            }
            loss -= log_probs[ri * c + targets[ri]];
        }
        loss /= b as f64;
        let prim = Box::new(CrossEntropy {
            targets: targets.to_vec(),
            log_probs,
            cols: c,
        });
        Ok(self.record1(prim, &[logits], Tensor::scalar(loss)))
    }

    /// Row lookup: ids index the first axis of `table` [V, E]; output is
    /// [batch, len, E].
    pub fn embedding(&mut self, table: Var, ids: &[u32], batch: usize, len: usize) -> Result<Var> {
        let ts = self.value(table).shape().to_vec();
        if ts.len() != 2 {
            return Err(CoreError::dimension(
                "embedding",
                format!("table must be [vocab, dim], got {:?}", ts),
            ));
        }
        if ids.len() != batch * len {
            return Err(CoreError::dimension(
                "embedding",
                format!("{} ids for batch {} x len {}", ids.len(), batch, len),
            ));
        }
        let (v, e) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(CoreError::Contract(format!(
                "token id {} out of range for vocab {}",
                bad, v
            )));
        }
        let td = self.value(table).data();
        let mut data = vec![0.0; ids.len() * e];
        for (i, &id) in ids.iter().enumerate() {
            data[i * e..(i + 1) * e].copy_from_slice(&td[id as usize * e..(id as usize + 1) * e]);
        }
        let out = Tensor::new(vec![batch, len, e], data)?;
        let prim = Box::new(Embedding {
            ids: ids.to_vec(),
            vocab: v,
            dim: e,
        });
        Ok(self.record1(prim, &[table], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn linear_identity_weights() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let w = g.input(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.linear(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_sum_with_bias() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let w = g.input(&Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap());
        let b = g.input(&Tensor::new(vec![1], vec![1.0]).unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(&[2, 3]));
        let w = g.input(&Tensor::zeros(&[4, 5]));
        let err = g.linear(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(vec![1, 4, 2], (0..8).map(|v| v as f64).collect()).unwrap());
        let k = g.input(&Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let y = g.conv1d_depthwise(x, k).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv1d_ones_kernel_boundary() {
        // all-ones input, [1,1,1] kernel: interior 3, zero-padded edges 2.
        let mut g = Graph::new();
        let x = g.input(&Tensor::full(&[1, 5, 1], 1.0));
        let k = g.input(&Tensor::full(&[1, 3], 1.0));
        let y = g.conv1d_depthwise(x, k).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(&[1, 4, 2]));
        let k = g.input(&Tensor::zeros(&[2, 4]));
        assert!(matches!(
            g.conv1d_depthwise(x, k),
            Err(CoreError::Configuration(_))
        ));
    }

    #[test]
    fn softplus_reference_points() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(vec![3], vec![0.0, 100.0, -100.0]).unwrap());
        let y = g.softplus(x);
        let d = g.value(y).data();
        assert!((d[0] - LN2).abs() < 1e-15);
        assert!((d[1] - 100.0).abs() < 1e-12);
        assert!(d[2] > 0.0 && d[2].is_finite());
        assert!((d[2] - 3.72e-44).abs() < 1e-45, "got {:e}", d[2]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::new(vec![3], vec![2.0, -1.0, 0.5]).unwrap());
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_across_two_branches() {
        // y = A·x used twice, summed: grad wrt A is the sum of both branches.
        let a_t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x_t = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();

        let mut g = Graph::new();
        let a = g.param(&a_t);
        let x = g.input(&x_t);
        let y1 = g.linear(x, a, None).unwrap();
        let y2 = g.linear(x, a, None).unwrap();
        let both = g.add(y1, y2).unwrap();
        let loss = g.sum_all(both);
        g.backward(loss).unwrap();
        let combined = g.grad(a).unwrap().to_vec();

        let mut g1 = Graph::new();
        let a1 = g1.param(&a_t);
        let x1 = g1.input(&x_t);
        let y = g1.linear(x1, a1, None).unwrap();
        let loss1 = g1.sum_all(y);
        g1.backward(loss1).unwrap();
        let single = g1.grad(a1).unwrap();

        for (c, s) in combined.iter().zip(single) {
            assert!((c - 2.0 * s).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap());
        let y = g.log_softmax(x).unwrap();
        for row in g.value(y).data().chunks(3) {
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!((g.value(l).item() - LN2).abs() < 1e-15);
    }

    #[test]
    fn embedding_looks_up_rows() {
        let mut g = Graph::new();
        let t = g.param(&Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let e = g.embedding(t, &[2, 0], 1, 2).unwrap();
        assert_eq!(g.value(e).data(), &[4.0, 5.0, 0.0, 1.0]);
        let s = g.sum_all(e);
        g.backward(s).unwrap();
        assert_eq!(g.grad(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_axis_pools_sequences() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2]);
        assert_eq!(g.value(y).data(), &[2.0, 3.0]);
    }

    #[test]
    fn concat_last_roundtrips_grads() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = g.param(&Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.sum_all(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }
}
