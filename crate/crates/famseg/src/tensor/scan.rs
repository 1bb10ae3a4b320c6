//! Selective state-space scan kernel.
//!
//! The channels of a `[L,d]` sequence are split into contiguous heads; every
//! channel j carries its own state vector h ∈ R^S driven by the shared
//! per-token projections and its head's scalar decay:
//!
//! ```text
//!   h_t[s] = a_t[head(j)] * h_{t-1}[s] + B_t[s] * x_t[j]
//!   y_t[j] = sum_s C_t[s] * h_t[s] + D[head(j)] * x_t[j]
//! ```

use crate::error::{FamError, Result};

/// Linear-time scan. Returns the output sequence and the post-update state
/// history (layout `[L, S, d]`) needed by the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    x: &[f64],
    decay: &[f64],
    b_in: &[f64],
    c_out: &[f64],
    d_skip: &[f64],
    l: usize,
    d: usize,
    heads: usize,
    s: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let hd = d / heads;
    let mut hist = vec![0.0; l * s * d];
    let mut y = vec![0.0; l * d];
    let mut state = vec![0.0; s * d];
    for t in 0..l {
        for si in 0..s {
            let b = b_in[t * s + si];
            let row = &mut state[si * d..(si + 1) * d];
            for j in 0..d {
                let a = decay[t * heads + j / hd];
                row[j] = a * row[j] + b * x[t * d + j];
            }
        }
        hist[t * s * d..(t + 1) * s * d].copy_from_slice(&state);
        for j in 0..d {
            let mut acc = d_skip[j / hd] * x[t * d + j];
            for si in 0..s {
                acc += c_out[t * s + si] * state[si * d + j];
            }
            if !acc.is_finite() {
                return Err(FamError::NonFinite { op: "selective_scan", at: Some(t) });
            }
            y[t * d + j] = acc;
        }
    }
    Ok((y, hist))
}

/// Forward scan without history, for callers that only need outputs.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward_kernel(
    x: &[f64],
    decay: &[f64],
    b_in: &[f64],
    c_out: &[f64],
    d_skip: &[f64],
    l: usize,
    d: usize,
    heads: usize,
    s: usize,
) -> Result<Vec<f64>> {
    forward(x, decay, b_in, c_out, d_skip, l, d, heads, s).map(|(y, _)| y)
}

/// Reverse pass. Returns (dx, d_decay, dB, dC, dD).
#[allow(clippy::too_many_arguments)]
pub fn backward(
    gy: &[f64],
    x: &[f64],
    decay: &[f64],
    b_in: &[f64],
    c_out: &[f64],
    d_skip: &[f64],
    hist: &[f64],
    l: usize,
    d: usize,
    heads: usize,
    s: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = d / heads;
    let mut dx = vec![0.0; l * d];
    let mut da = vec![0.0; l * heads];
    let mut db = vec![0.0; l * s];
    let mut dc = vec![0.0; l * s];
    let mut dd = vec![0.0; heads];
    // dL/dh_t, carried backwards through the recurrence
    let mut acc = vec![0.0; s * d];
    for t in (0..l).rev() {
        // decay the carry from step t+1 and add the direct output term
        for si in 0..s {
            let row = &mut acc[si * d..(si + 1) * d];
            let c = c_out[t * s + si];
            if t + 1 < l {
                for j in 0..d {
                    let a_next = decay[(t + 1) * heads + j / hd];
                    row[j] = a_next * row[j] + c * gy[t * d + j];
                }
            } else {
                for j in 0..d {
                    row[j] = c * gy[t * d + j];
                }
            }
        }
        for j in 0..d {
            let g = j / hd;
            let gyv = gy[t * d + j];
            dd[g] += gyv * x[t * d + j];
            let mut dxj = d_skip[g] * gyv;
            for si in 0..s {
                let a = acc[si * d + j];
                dxj += b_in[t * s + si] * a;
                db[t * s + si] += a * x[t * d + j];
                dc[t * s + si] += gyv * hist[(t * s + si) * d + j];
                if t > 0 {
                    da[t * heads + g] += a * hist[((t - 1) * s + si) * d + j];
                }
            }
            dx[t * d + j] += dxj;
        }
    }
    (dx, da, db, dc, dd)
}
