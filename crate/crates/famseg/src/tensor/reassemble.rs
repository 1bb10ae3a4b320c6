//! Content-aware reassembly kernel.
//!
//! Output pixel (i,j) of an upsampled map reads the k×k input neighborhood
//! centered at its source location (i/scale, j/scale) and combines it with
//! the predicted kernel stored for that output slot; kernels are shared
//! across channels. Out-of-bounds taps contribute zero.

/// Valid source range along one axis for a tap offset `dk` (0..k) with
/// radius r: positions p with `p + dk - r` inside `[0, len)`.
fn tap_range(len: usize, k: usize, dk: usize) -> (usize, usize) {
    let r = (k - 1) / 2;
    let lo = r.saturating_sub(dk);
    let hi = (len + r).saturating_sub(dk).min(len);
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
pub fn forward(
    input: &[f64],
    kernels: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    scale: usize,
) -> Vec<f64> {
    let r = (k - 1) / 2;
    let (oh, ow) = (h * scale, w * scale);
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for di in 0..scale {
            for dj in 0..scale {
                let slot = di * scale + dj;
                for du in 0..k {
                    let (h_lo, h_hi) = tap_range(h, k, du);
                    for dv in 0..k {
                        let (w_lo, w_hi) = tap_range(w, k, dv);
                        let kbase = ((ni * scale * scale + slot) * k * k + du * k + dv) * h * w;
                        for ci in 0..c {
                            let ibase = (ni * c + ci) * h * w;
                            let obase = (ni * c + ci) * oh * ow;
                            for y0 in h_lo..h_hi {
                                let yi = y0 + du - r;
                                let krow = kbase + y0 * w;
                                let irow = ibase + yi * w;
                                let orow = obase + (y0 * scale + di) * ow + dj;
                                for x0 in w_lo..w_hi {
                                    let xi = x0 + dv - r;
                                    out[orow + x0 * scale] += kernels[krow + x0] * input[irow + xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn backward_input(
    gout: &[f64],
    kernels: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    scale: usize,
) -> Vec<f64> {
    let r = (k - 1) / 2;
    let (oh, ow) = (h * scale, w * scale);
    let mut din = vec![0.0; n * c * h * w];
    for ni in 0..n {
        for di in 0..scale {
            for dj in 0..scale {
                let slot = di * scale + dj;
                for du in 0..k {
                    let (h_lo, h_hi) = tap_range(h, k, du);
                    for dv in 0..k {
                        let (w_lo, w_hi) = tap_range(w, k, dv);
                        let kbase = ((ni * scale * scale + slot) * k * k + du * k + dv) * h * w;
                        for ci in 0..c {
                            let ibase = (ni * c + ci) * h * w;
                            let obase = (ni * c + ci) * oh * ow;
                            for y0 in h_lo..h_hi {
                                let yi = y0 + du - r;
                                let krow = kbase + y0 * w;
                                let irow = ibase + yi * w;
                                let orow = obase + (y0 * scale + di) * ow + dj;
                                for x0 in w_lo..w_hi {
                                    let xi = x0 + dv - r;
                                    din[irow + xi] += kernels[krow + x0] * gout[orow + x0 * scale];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

#[allow(clippy::too_many_arguments)]
pub fn backward_kernels(
    gout: &[f64],
    input: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    scale: usize,
) -> Vec<f64> {
    let r = (k - 1) / 2;
    let (oh, ow) = (h * scale, w * scale);
    let mut dker = vec![0.0; n * scale * scale * k * k * h * w];
    for ni in 0..n {
        for di in 0..scale {
            for dj in 0..scale {
                let slot = di * scale + dj;
                for du in 0..k {
                    let (h_lo, h_hi) = tap_range(h, k, du);
                    for dv in 0..k {
                        let (w_lo, w_hi) = tap_range(w, k, dv);
                        let kbase = ((ni * scale * scale + slot) * k * k + du * k + dv) * h * w;
                        for ci in 0..c {
                            let ibase = (ni * c + ci) * h * w;
                            let obase = (ni * c + ci) * oh * ow;
                            for y0 in h_lo..h_hi {
                                let yi = y0 + du - r;
                                let krow = kbase + y0 * w;
                                let irow = ibase + yi * w;
                                let orow = obase + (y0 * scale + di) * ow + dj;
                                for x0 in w_lo..w_hi {
                                    let xi = x0 + dv - r;
                                    dker[krow + x0] += input[irow + xi] * gout[orow + x0 * scale];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dker
}
