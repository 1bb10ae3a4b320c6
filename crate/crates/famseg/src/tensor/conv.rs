//! Direct 2-d convolution kernels (forward, input grad, weight grad).
//!
//! Loop order keeps the innermost traversal contiguous over output width so
//! the compiler can vectorize; zero padding is handled by clamping the
//! output-column range per (kh, kw) tap instead of testing bounds per pixel.

/// floor(a/b) for b > 0 and possibly negative a.
fn div_floor(a: i64, b: i64) -> i64 {
    let q = a / b;
    if a % b != 0 && (a < 0) != (b < 0) {
        q - 1
    } else {
        q
    }
}

fn div_ceil(a: i64, b: i64) -> i64 {
    -div_floor(-a, b)
}

/// Valid output-column range for one kernel tap: all `ow` with
/// `0 <= ow*sw + kw - pw < w`.
fn col_range(w: usize, ow_count: usize, sw: usize, kw: usize, pw: usize) -> (usize, usize) {
    let lo = div_ceil(pw as i64 - kw as i64, sw as i64).max(0) as usize;
    let hi_incl = div_floor(w as i64 - 1 + pw as i64 - kw as i64, sw as i64);
    if hi_incl < lo as i64 {
        (0, 0)
    } else {
        (lo, (hi_incl as usize + 1).min(ow_count))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn forward(
    input: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (o, cg, kh, kw): (usize, usize, usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    groups: usize,
) -> Vec<f64> {
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let og = o / groups;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for g in 0..groups {
            for oi in 0..og {
                let oc = g * og + oi;
                let ob = (ni * o + oc) * oh * ow;
                for ci in 0..cg {
                    let ic = g * cg + ci;
                    let ib = (ni * c + ic) * h * w;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = weight[((oc * cg + ci) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (lo, hi) = col_range(w, ow, sw, kx, pw);
                            for yo in 0..oh {
                                let yi = (yo * sh + ky) as i64 - ph as i64;
                                if yi < 0 || yi >= h as i64 {
                                    continue;
                                }
                                let irow = ib + yi as usize * w;
                                let orow = ob + yo * ow;
                                let mut iw = lo * sw + kx - pw;
                                for xo in lo..hi {
                                    out[orow + xo] += wv * input[irow + iw];
                                    iw += sw;
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
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (o, cg, kh, kw): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    groups: usize,
) -> Vec<f64> {
    let og = o / groups;
    let mut din = vec![0.0; n * c * h * w];
    for ni in 0..n {
        for g in 0..groups {
            for oi in 0..og {
                let oc = g * og + oi;
                let ob = (ni * o + oc) * oh * ow;
                for ci in 0..cg {
                    let ic = g * cg + ci;
                    let ib = (ni * c + ic) * h * w;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = weight[((oc * cg + ci) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (lo, hi) = col_range(w, ow, sw, kx, pw);
                            for yo in 0..oh {
                                let yi = (yo * sh + ky) as i64 - ph as i64;
                                if yi < 0 || yi >= h as i64 {
                                    continue;
                                }
                                let irow = ib + yi as usize * w;
                                let orow = ob + yo * ow;
                                let mut iw = lo * sw + kx - pw;
                                for xo in lo..hi {
                                    din[irow + iw] += wv * gout[orow + xo];
                                    iw += sw;
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
pub fn backward_weight(
    gout: &[f64],
    input: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (o, cg, kh, kw): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    groups: usize,
) -> Vec<f64> {
    let og = o / groups;
    let mut dw = vec![0.0; o * cg * kh * kw];
    for ni in 0..n {
        for g in 0..groups {
            for oi in 0..og {
                let oc = g * og + oi;
                let ob = (ni * o + oc) * oh * ow;
                for ci in 0..cg {
                    let ic = g * cg + ci;
                    let ib = (ni * c + ic) * h * w;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let (lo, hi) = col_range(w, ow, sw, kx, pw);
                            let mut acc = 0.0;
                            for yo in 0..oh {
                                let yi = (yo * sh + ky) as i64 - ph as i64;
                                if yi < 0 || yi >= h as i64 {
                                    continue;
                                }
                                let irow = ib + yi as usize * w;
                                let orow = ob + yo * ow;
                                let mut iw = lo * sw + kx - pw;
                                for xo in lo..hi {
                                    acc += gout[orow + xo] * input[irow + iw];
                                    iw += sw;
                                }
                            }
                            dw[((oc * cg + ci) * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    dw
}
