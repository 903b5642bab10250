//! Dense kernels behind the tape operations.
//!
//! Every kernel splits its work into fixed-size chunks whose partial results
//! are combined in chunk order, so the output does not depend on whether the
//! chunks ran in parallel.

use crate::par;

/// Output rows per task for row-partitioned products.
const ROW_CHUNK: usize = 256;
/// Summation rows per partial for reductions over the event axis.
const REDUCE_CHUNK: usize = 1024;
/// Events per partial histogram.
const HIST_CHUNK: usize = 2048;
/// Sigmoid arguments beyond this magnitude are treated as saturated.
const SIGMOID_CUTOFF: f64 = 40.0;

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    assert!(c.len() >= m * n);
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a (n×k) · b (k×m)`.
pub fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    if m == 0 {
        return out;
    }
    par::for_each_chunk_mut(&mut out, ROW_CHUNK * m, |ci, chunk| {
        let r0 = ci * ROW_CHUNK;
        let rows = chunk.len() / m;
        gemm(rows, k, m, &a[r0 * k..], k, 1, b, m, 1, chunk);
    });
    out
}

/// `a (n×k) · bᵀ` with `b` stored as (m×k).
pub fn matmul_nt(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    if m == 0 {
        return out;
    }
    par::for_each_chunk_mut(&mut out, ROW_CHUNK * m, |ci, chunk| {
        let r0 = ci * ROW_CHUNK;
        let rows = chunk.len() / m;
        gemm(rows, k, m, &a[r0 * k..], k, 1, b, 1, k, chunk);
    });
    out
}

/// `aᵀ · g` with `a` stored as (n×k) and `g` as (n×m); result (k×m).
pub fn matmul_tn(a: &[f64], n: usize, k: usize, g: &[f64], m: usize) -> Vec<f64> {
    let partials = par::map_ranges(n, REDUCE_CHUNK, |r| {
        let mut c = vec![0.0; k * m];
        gemm(
            k,
            r.len(),
            m,
            &a[r.start * k..],
            1,
            k,
            &g[r.start * m..],
            m,
            1,
            &mut c,
        );
        c
    });
    par::sum_partials(partials, k * m)
}

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Uniform binning with a sigmoid edge width expressed in bin widths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftBins {
    pub lo: f64,
    pub width: f64,
    pub bins: usize,
    pub temperature: f64,
}

impl SoftBins {
    /// Edge index window `[k_lo, k_hi]` whose sigmoids are not saturated.
    #[inline]
    fn window(&self, t: f64) -> (isize, isize) {
        let reach = SIGMOID_CUTOFF * self.temperature;
        let k_lo = ((t - reach).ceil() as isize).max(0);
        let k_hi = ((t + reach).floor() as isize).min(self.bins as isize);
        (k_lo, k_hi)
    }

    #[inline]
    fn edge_sigmoid(&self, t: f64, k: isize, k_lo: isize, k_hi: isize) -> f64 {
        if k < k_lo {
            1.0
        } else if k > k_hi {
            0.0
        } else {
            sigmoid((t - k as f64) / self.temperature)
        }
    }

    /// Bin fraction sums for one event (unnormalized, unit weight), added to `acc`.
    #[inline]
    fn accumulate(&self, x: f64, weight: f64, acc: &mut [f64]) {
        let t = (x - self.lo) / self.width;
        let (k_lo, k_hi) = self.window(t);
        let b0 = (k_lo - 1).max(0);
        let b1 = k_hi.min(self.bins as isize - 1);
        let mut s_left = self.edge_sigmoid(t, b0, k_lo, k_hi);
        for b in b0..=b1 {
            let s_right = self.edge_sigmoid(t, b + 1, k_lo, k_hi);
            acc[b as usize] += weight * (s_left - s_right);
            s_left = s_right;
        }
    }

    /// d(Σ_b g_b·frac_b)/dx for one event before the weight/norm factor.
    #[inline]
    fn event_grad(&self, x: f64, g: &[f64]) -> f64 {
        let t = (x - self.lo) / self.width;
        let (k_lo, k_hi) = self.window(t);
        let mut acc = 0.0;
        for k in k_lo..=k_hi {
            let s = sigmoid((t - k as f64) / self.temperature);
            let ds = s * (1.0 - s);
            let g_k = if (k as usize) < self.bins {
                g[k as usize]
            } else {
                0.0
            };
            let g_prev = if k >= 1 { g[k as usize - 1] } else { 0.0 };
            acc += ds * (g_k - g_prev);
        }
        acc / (self.width * self.temperature)
    }
}

/// Normalizing mass: the weight sum, or the event count when unweighted.
pub fn soft_hist_norm(n: usize, weights: Option<&[f64]>) -> f64 {
    match weights {
        Some(w) => w.iter().sum(),
        None => n as f64,
    }
}

/// Soft bin fractions `(1/norm)·Σ_i w_i [σ((x_i−l_b)/τw) − σ((x_i−u_b)/τw)]`.
pub fn soft_hist_forward(x: &[f64], weights: Option<&[f64]>, bins: &SoftBins) -> Vec<f64> {
    let norm = soft_hist_norm(x.len(), weights);
    let partials = par::map_ranges(x.len(), HIST_CHUNK, |r| {
        let mut acc = vec![0.0; bins.bins];
        for i in r {
            let w = weights.map_or(1.0, |w| w[i]);
            if w != 0.0 {
                bins.accumulate(x[i], w, &mut acc);
            }
        }
        acc
    });
    let mut out = par::sum_partials(partials, bins.bins);
    if norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// Gradient of `Σ_b grad_out_b · frac_b` with respect to every event value.
pub fn soft_hist_backward(
    x: &[f64],
    weights: Option<&[f64]>,
    bins: &SoftBins,
    grad_out: &[f64],
) -> Vec<f64> {
    let norm = soft_hist_norm(x.len(), weights);
    let mut out = vec![0.0; x.len()];
    if norm <= 0.0 {
        return out;
    }
    par::for_each_chunk_mut(&mut out, HIST_CHUNK, |ci, chunk| {
        let base = ci * HIST_CHUNK;
        for (o, slot) in chunk.iter_mut().enumerate() {
            let i = base + o;
            let w = weights.map_or(1.0, |w| w[i]);
            if w != 0.0 {
                *slot = w / norm * bins.event_grad(x[i], grad_out);
            }
        }
    });
    out
}
