//! Softmax and group normalization kernels.

pub fn softmax_forward(x: &[f64], outer: usize, alen: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * alen * inner + i;
            let mut maxv = f64::NEG_INFINITY;
            for a in 0..alen {
                maxv = maxv.max(x[base + a * inner]);
            }
            let mut z = 0.0;
            for a in 0..alen {
                let e = (x[base + a * inner] - maxv).exp();
                out[base + a * inner] = e;
                z += e;
            }
            for a in 0..alen {
                out[base + a * inner] /= z;
            }
        }
    }
    out
}

pub fn softmax_backward(y: &[f64], g: &[f64], outer: usize, alen: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * alen * inner + i;
            let mut dot = 0.0;
            for a in 0..alen {
                dot += g[base + a * inner] * y[base + a * inner];
            }
            for a in 0..alen {
                let idx = base + a * inner;
                dx[idx] = y[idx] * (g[idx] - dot);
            }
        }
    }
    dx
}

/// Forward group norm with per-channel affine. `hw` is the flattened
/// spatial extent of one channel.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: f64,
) -> Vec<f64> {
    let cg = c / groups;
    let m = (cg * hw) as f64;
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * cg) * hw;
            let slice = &x[start..start + cg * hw];
            let mean = slice.iter().sum::<f64>() / m;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let istd = 1.0 / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let (gm, bt) = (gamma[ch], beta[ch]);
                for k in 0..hw {
                    let idx = start + ci * hw + k;
                    out[idx] = gm * (x[idx] - mean) * istd + bt;
                }
            }
        }
    }
    out
}

/// Returns (dx, dgamma, dbeta); dx is all zeros when `need_dx` is false.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    x: &[f64],
    gamma: &[f64],
    g: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: f64,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let m = (cg * hw) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * cg) * hw;
            let slice = &x[start..start + cg * hw];
            let mean = slice.iter().sum::<f64>() / m;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let istd = 1.0 / (var + eps).sqrt();

            // per-channel affine grads use x_hat = (x - mean) * istd
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for k in 0..hw {
                    let idx = start + ci * hw + k;
                    let xh = (x[idx] - mean) * istd;
                    dgamma[ch] += g[idx] * xh;
                    dbeta[ch] += g[idx];
                }
            }
            if !need_dx {
                continue;
            }
            // dx via the layer-norm formula over the group with g~ = g * gamma
            let mut sum_gt = 0.0;
            let mut sum_gt_xh = 0.0;
            for ci in 0..cg {
                let gm = gamma[gi * cg + ci];
                for k in 0..hw {
                    let idx = start + ci * hw + k;
                    let gt = g[idx] * gm;
                    sum_gt += gt;
                    sum_gt_xh += gt * (x[idx] - mean) * istd;
                }
            }
            let mean_gt = sum_gt / m;
            let mean_gt_xh = sum_gt_xh / m;
            for ci in 0..cg {
                let gm = gamma[gi * cg + ci];
                for k in 0..hw {
                    let idx = start + ci * hw + k;
                    let xh = (x[idx] - mean) * istd;
                    let gt = g[idx] * gm;
                    dx[idx] = istd * (gt - mean_gt - xh * mean_gt_xh);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
