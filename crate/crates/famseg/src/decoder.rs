//! Feature-aware decoder: content-aware reassembly upsampling, skip fusion
//! over the late encoder stages, refinement convolutions, and the 1×1
//! classifier head.
//!
//! The upsampler predicts one k×k reassembly kernel per output location
//! from channel-compressed features, softmax-normalizes it over its taps,
//! and reassembles the original (uncompressed) features with it. Kernels
//! are shared across channels, so the operator is channel-equivariant and
//! maps constant fields to themselves.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FamError, Result};
use crate::nn::{norm_groups, Bound, ParamStore, GN_EPS};
use crate::tensor::{Tape, TensorId};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FamSpec {
    pub c_in: usize,
    /// Compressed channel count fed to the kernel reorganizer.
    pub c_compressed: usize,
    /// Reassembly kernel size (odd).
    pub k_up: usize,
    /// Kernel reorganizer conv size (odd).
    pub k_enc: usize,
    pub scale: usize,
}

impl FamSpec {
    pub fn for_channels(c_in: usize, k_up: usize, k_enc: usize) -> Self {
        FamSpec { c_in, c_compressed: (c_in / 4).max(8).min(c_in), k_up, k_enc, scale: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_up % 2 == 0 {
            return Err(FamError::Invalid { op: "fam_upsample", detail: format!("k_up {} must be odd", self.k_up) });
        }
        if self.k_enc % 2 == 0 {
            return Err(FamError::Invalid { op: "fam_upsample", detail: format!("k_enc {} must be odd", self.k_enc) });
        }
        if self.c_compressed > self.c_in {
            return Err(FamError::Invalid {
                op: "fam_upsample",
                detail: format!("compressed channels {} exceed input {}", self.c_compressed, self.c_in),
            });
        }
        if self.scale < 2 {
            return Err(FamError::Invalid { op: "fam_upsample", detail: "scale must be >= 2".into() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    /// 1-indexed encoder stages fused during decoding, ascending.
    pub fuse_stages: Vec<usize>,
    pub refine_channels: usize,
    pub num_classes: usize,
    pub k_up: usize,
    pub k_enc: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { fuse_stages: vec![2, 3, 4], refine_channels: 32, num_classes: 3, k_up: 5, k_enc: 3 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fuse_stages.is_empty() || self.fuse_stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FamError::Config(format!("fuse_stages must be ascending and non-empty: {:?}", self.fuse_stages)));
        }
        if *self.fuse_stages.last().unwrap() > 4 || self.fuse_stages[0] < 1 {
            return Err(FamError::Config(format!("fuse_stages out of 1..=4: {:?}", self.fuse_stages)));
        }
        if self.num_classes < 2 {
            return Err(FamError::Config("num_classes must be >= 2".into()));
        }
        if self.refine_channels == 0 {
            return Err(FamError::Config("refine_channels must be >= 1".into()));
        }
        Ok(())
    }

    fn fam_spec(&self) -> FamSpec {
        FamSpec::for_channels(self.refine_channels, self.k_up, self.k_enc)
    }

    /// Upsampling steps from the deepest fused stage back to full resolution.
    fn total_ups(&self) -> usize {
        // deepest fused stage sits at stride 4 * 2^(stage-1)
        let deepest = *self.fuse_stages.last().unwrap();
        deepest + 1
    }
}

fn register_fam(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, spec: &FamSpec) {
    let kk = spec.scale * spec.scale * spec.k_up * spec.k_up;
    store.register_conv(rng, &format!("{prefix}.comp.w"), vec![spec.c_compressed, spec.c_in, 1, 1], spec.c_in);
    store.register_const(&format!("{prefix}.comp.b"), vec![spec.c_compressed], 0.0);
    store.register_conv(
        rng,
        &format!("{prefix}.pred.w"),
        vec![kk, spec.c_compressed, spec.k_enc, spec.k_enc],
        spec.c_compressed * spec.k_enc * spec.k_enc,
    );
    store.register_const(&format!("{prefix}.pred.b"), vec![kk], 0.0);
}

pub fn register_decoder(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &DecoderConfig,
    stage_channels: &[usize],
) -> Result<()> {
    cfg.validate()?;
    let r = cfg.refine_channels;
    let spec = cfg.fam_spec();
    let deepest = *cfg.fuse_stages.last().unwrap();
    store.register_conv(rng, "dec.proj_in.w", vec![r, stage_channels[deepest - 1], 1, 1], stage_channels[deepest - 1]);
    for (lvl, &s) in cfg.fuse_stages.iter().rev().skip(1).enumerate() {
        register_fam(store, rng, &format!("dec.lvl{lvl}.fam"), &spec);
        store.register_conv(rng, &format!("dec.lvl{lvl}.skip.w"), vec![r, stage_channels[s - 1], 1, 1], stage_channels[s - 1]);
        store.register_conv(rng, &format!("dec.lvl{lvl}.refine.w"), vec![r, r, 3, 3], r * 9);
        store.register_const(&format!("dec.lvl{lvl}.gn.g"), vec![r], 1.0);
        store.register_const(&format!("dec.lvl{lvl}.gn.b"), vec![r], 0.0);
    }
    let remaining = cfg.total_ups() - (cfg.fuse_stages.len() - 1);
    for u in 0..remaining {
        register_fam(store, rng, &format!("dec.up{u}.fam"), &spec);
    }
    store.register_conv(rng, "dec.cls.w", vec![cfg.num_classes, r, 1, 1], r);
    store.register_const("dec.cls.b", vec![cfg.num_classes], 0.0);
    Ok(())
}

/// Normalized reassembly kernels for `x`: channel compression, kernel
/// reorganizer conv, softmax over the k² taps. Shape
/// `[N, scale², k², H, W]`; every kernel is non-negative and sums to one.
pub fn fam_kernels(tape: &mut Tape, bound: &Bound, prefix: &str, x: TensorId, spec: &FamSpec) -> Result<TensorId> {
    spec.validate()?;
    let shape = tape.shape(x).to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c != spec.c_in {
        return Err(FamError::Shape {
            op: "fam_upsample",
            detail: format!("expected {} channels, got {}", spec.c_in, c),
        });
    }
    let comp_w = bound.id(&format!("{prefix}.comp.w"))?;
    let comp_b = bound.id(&format!("{prefix}.comp.b"))?;
    let compressed = tape.conv2d(x, comp_w, (1, 1), (0, 0), 1)?;
    let compressed = tape.bias_channel(compressed, comp_b)?;
    let pred_w = bound.id(&format!("{prefix}.pred.w"))?;
    let pred_b = bound.id(&format!("{prefix}.pred.b"))?;
    let pad = (spec.k_enc - 1) / 2;
    let logits = tape.conv2d(compressed, pred_w, (1, 1), (pad, pad), 1)?;
    let logits = tape.bias_channel(logits, pred_b)?;
    let view = tape.reshape(logits, vec![n, spec.scale * spec.scale, spec.k_up * spec.k_up, h, w])?;
    tape.softmax(view, 2)
}

/// Content-aware 2× upsampling: compress channels, predict per-location
/// reassembly kernels, softmax-normalize each kernel over its k² taps, and
/// reassemble the input neighborhoods. Channel count is preserved.
pub fn fam_upsample(tape: &mut Tape, bound: &Bound, prefix: &str, x: TensorId, spec: &FamSpec) -> Result<TensorId> {
    let kernels = fam_kernels(tape, bound, prefix, x, spec)?;
    tape.reassemble(x, kernels, spec.k_up, spec.scale)
}

/// Decode the encoder stages into class logits at image resolution.
///
/// Starting from the deepest fused stage: project to the decoder width,
/// then per shallower fused stage upsample, add its 1×1-projected skip, and
/// refine with a 3×3 conv + norm + GELU; finally upsample to full
/// resolution and classify with a 1×1 conv. Only `fuse_stages` are read.
pub fn decode(tape: &mut Tape, bound: &Bound, cfg: &DecoderConfig, stages: &[TensorId]) -> Result<TensorId> {
    cfg.validate()?;
    let deepest = *cfg.fuse_stages.last().unwrap();
    if stages.len() < deepest {
        return Err(FamError::Shape {
            op: "decode",
            detail: format!("{} stages supplied, fuse_stages needs {}", stages.len(), deepest),
        });
    }
    let spec = cfg.fam_spec();
    let proj = bound.id("dec.proj_in.w")?;
    let mut cur = tape.conv2d(stages[deepest - 1], proj, (1, 1), (0, 0), 1)?;
    for (lvl, &s) in cfg.fuse_stages.iter().rev().skip(1).enumerate() {
        cur = fam_upsample(tape, bound, &format!("dec.lvl{lvl}.fam"), cur, &spec)?;
        let skip_w = bound.id(&format!("dec.lvl{lvl}.skip.w"))?;
        let skip = tape.conv2d(stages[s - 1], skip_w, (1, 1), (0, 0), 1)?;
        cur = tape.add(cur, skip)?;
        let refine = bound.id(&format!("dec.lvl{lvl}.refine.w"))?;
        cur = tape.conv2d(cur, refine, (1, 1), (1, 1), 1)?;
        let g = bound.id(&format!("dec.lvl{lvl}.gn.g"))?;
        let b = bound.id(&format!("dec.lvl{lvl}.gn.b"))?;
        cur = tape.group_norm(cur, g, b, norm_groups(cfg.refine_channels), GN_EPS)?;
        cur = tape.gelu(cur)?;
    }
    let remaining = cfg.total_ups() - (cfg.fuse_stages.len() - 1);
    for u in 0..remaining {
        cur = fam_upsample(tape, bound, &format!("dec.up{u}.fam"), cur, &spec)?;
    }
    let cls_w = bound.id("dec.cls.w")?;
    let cls_b = bound.id("dec.cls.b")?;
    let logits = tape.conv2d(cur, cls_w, (1, 1), (0, 0), 1)?;
    tape.bias_channel(logits, cls_b)
}

/// Per-pixel argmax over the class axis; ties break toward the lowest
/// class index. Input `[N,C,H,W]` logits as raw data, output `N·H·W` class
/// bytes.
pub fn predict_mask(logits: &[f64], shape: &[usize]) -> Vec<u8> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let mut mask = vec![0u8; n * hw];
    for ni in 0..n {
        for pi in 0..hw {
            let mut best = 0usize;
            let mut best_v = logits[(ni * c) * hw + pi];
            for ci in 1..c {
                let v = logits[(ni * c + ci) * hw + pi];
                if v > best_v {
                    best_v = v;
                    best = ci;
                }
            }
            mask[ni * hw + pi] = best as u8;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rngv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn fam_store(spec: &FamSpec, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        register_fam(&mut store, &mut rng, "f", spec);
        store
    }

    /// Zero-padded k×k box filter followed by 2× nearest upsampling, written
    /// directly from the closed form.
    fn box_then_nearest(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
        let r = (k as i64 - 1) / 2;
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    let (h0, w0) = ((i / 2) as i64, (j / 2) as i64);
                    let mut acc = 0.0;
                    for du in -r..=r {
                        for dv in -r..=r {
                            let (yy, xx) = (h0 + du, w0 + dv);
                            if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                                acc += x[(ci * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                    out[(ci * 2 * h + i) * 2 * w + j] = acc * inv;
                }
            }
        }
        out
    }

    #[test]
    fn uniform_kernels_equal_box_filter_then_nearest() {
        let spec = FamSpec { c_in: 3, c_compressed: 3, k_up: 5, k_enc: 3, scale: 2 };
        let mut store = fam_store(&spec, 60);
        // zero reorganizer weights and equal biases: every logit identical,
        // so every kernel is uniform 1/k²
        store.get_mut("f.pred.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut("f.pred.b").unwrap().data.iter_mut().for_each(|v| *v = 0.37);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let (c, h, w) = (3, 6, 5);
        let xdata = rngv(&mut rng, c * h * w);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let x = tape.constant(xdata.clone(), vec![1, c, h, w]).unwrap();
        let y = fam_upsample(&mut tape, &bound, "f", x, &spec).unwrap();
        assert_eq!(tape.shape(y), &[1, c, 2 * h, 2 * w]);
        let want = box_then_nearest(&xdata, c, h, w, 5);
        assert!(max_abs_diff(tape.data(y), &want) <= 1e-12);
    }

    #[test]
    fn center_delta_kernels_equal_nearest_neighbor() {
        let spec = FamSpec { c_in: 2, c_compressed: 2, k_up: 5, k_enc: 3, scale: 2 };
        let mut store = fam_store(&spec, 62);
        store.get_mut("f.pred.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        // +40 logit on the center tap of every slot approximates a delta
        let k = spec.k_up;
        let center = (k / 2) * k + k / 2;
        let bias = store.get_mut("f.pred.b").unwrap();
        bias.data.iter_mut().for_each(|v| *v = 0.0);
        for slot in 0..4 {
            bias.data[slot * k * k + center] = 40.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let (c, h, w) = (2, 4, 4);
        let xdata = rngv(&mut rng, c * h * w);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let x = tape.constant(xdata.clone(), vec![1, c, h, w]).unwrap();
        let y = fam_upsample(&mut tape, &bound, "f", x, &spec).unwrap();
        let nearest = tape.nearest_upsample(x, 2).unwrap();
        assert!(max_abs_diff(tape.data(y), tape.data(nearest)) <= 1e-6);
    }

    #[test]
    fn kernels_are_normalized_and_interior_constants_preserved() {
        let spec = FamSpec { c_in: 4, c_compressed: 8.min(4), k_up: 5, k_enc: 3, scale: 2 };
        let store = fam_store(&spec, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        for _ in 0..10 {
            let (h, w) = (5, 6);
            let xdata = rngv(&mut rng, 4 * h * w);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape).unwrap();
            let x = tape.constant(xdata, vec![1, 4, h, w]).unwrap();
            let ker = fam_kernels(&mut tape, &bound, "f", x, &spec).unwrap();
            let kk = spec.k_up * spec.k_up;
            let data = tape.data(ker);
            for slot in 0..4 {
                for pos in 0..h * w {
                    let mut sum = 0.0;
                    for tap in 0..kk {
                        let v = data[(slot * kk + tap) * h * w + pos];
                        assert!(v >= 0.0);
                        sum += v;
                    }
                    assert!((sum - 1.0).abs() <= 1e-6, "kernel sum {sum}");
                }
            }
        }
        // constant field: interior outputs (full neighborhoods) keep the
        // constant exactly by partition of unity; zero padding attenuates
        // only the border ring
        let (h, w) = (8, 8);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let x = tape.constant(vec![0.73; 4 * h * w], vec![1, 4, h, w]).unwrap();
        let y = fam_upsample(&mut tape, &bound, "f", x, &spec).unwrap();
        let r = spec.k_up / 2; // source pixels at least r from every edge
        for ci in 0..4 {
            for i in 2 * r..2 * h - 2 * r {
                for j in 2 * r..2 * w - 2 * r {
                    let v = tape.data(y)[(ci * 2 * h + i) * 2 * w + j];
                    assert!((v - 0.73).abs() <= 1e-9, "interior constant broken: {v}");
                }
            }
        }
    }

    #[test]
    fn fam_locality_is_exact() {
        // output (i,j) reads only the k_up×k_up input neighborhood of its
        // source location; the kernel reorganizer's k_enc×k_enc field is
        // contained in it for k_enc <= k_up
        let spec = FamSpec { c_in: 2, c_compressed: 2, k_up: 5, k_enc: 3, scale: 2 };
        let store = fam_store(&spec, 66);
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let (c, h, w) = (2, 9, 9);
        let xdata = rngv(&mut rng, c * h * w);
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape).unwrap();
            let x = tape.constant(data, vec![1, c, h, w]).unwrap();
            let y = fam_upsample(&mut tape, &bound, "f", x, &spec).unwrap();
            tape.data(y).to_vec()
        };
        let base = run(xdata.clone());
        // perturb input (8,8); outputs sourced at (0..=1, 0..=1) have their
        // full neighborhood within rows/cols 0..=3 and cannot change
        let mut pert = xdata.clone();
        pert[(0 * h + 8) * w + 8] += 2.0;
        let out = run(pert);
        for ci in 0..c {
            for i in 0..4 {
                for j in 0..4 {
                    let idx = (ci * 2 * h + i) * 2 * w + j;
                    assert_eq!(base[idx], out[idx], "locality violated at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn fam_channel_equivariance_with_symmetric_compressor() {
        // kernels are shared across channels; with a channel-symmetric
        // compressor the predicted kernels are permutation-invariant and
        // the whole operator commutes with channel permutation
        let spec = FamSpec { c_in: 3, c_compressed: 2, k_up: 3, k_enc: 3, scale: 2 };
        let mut store = fam_store(&spec, 68);
        {
            let comp = store.get_mut("f.comp.w").unwrap();
            // every output channel averages the inputs
            comp.data.iter_mut().for_each(|v| *v = 1.0 / 3.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let (c, h, w) = (3, 4, 5);
        let xdata = rngv(&mut rng, c * h * w);
        let perm = [2usize, 0, 1];
        let mut permuted = vec![0.0; c * h * w];
        for ci in 0..c {
            permuted[ci * h * w..(ci + 1) * h * w]
                .copy_from_slice(&xdata[perm[ci] * h * w..(perm[ci] + 1) * h * w]);
        }
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape).unwrap();
            let x = tape.constant(data, vec![1, c, h, w]).unwrap();
            let y = fam_upsample(&mut tape, &bound, "f", x, &spec).unwrap();
            tape.data(y).to_vec()
        };
        let base = run(xdata);
        let permuted_out = run(permuted);
        let ohw = 4 * h * w;
        for ci in 0..c {
            assert!(
                max_abs_diff(&permuted_out[ci * ohw..(ci + 1) * ohw], &base[perm[ci] * ohw..(perm[ci] + 1) * ohw])
                    <= 1e-12
            );
        }
    }

    fn decoder_store(cfg: &DecoderConfig, stage_channels: &[usize], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        register_decoder(&mut store, &mut rng, cfg, stage_channels).unwrap();
        store
    }

    fn fake_stages(tape: &mut Tape, rng: &mut ChaCha8Rng, channels: &[usize], img: usize) -> Vec<TensorId> {
        (0..4)
            .map(|i| {
                let s = img / EncoderStride::at(i);
                let c = channels[i];
                let data = rngv(rng, c * s * s);
                tape.constant(data, vec![1, c, s, s]).unwrap()
            })
            .collect()
    }

    struct EncoderStride;
    impl EncoderStride {
        fn at(i: usize) -> usize {
            4 << i
        }
    }

    #[test]
    fn decode_full_resolution_logits() {
        let cfg = DecoderConfig { refine_channels: 8, ..DecoderConfig::default() };
        let channels = [8, 16, 24, 32];
        let store = decoder_store(&cfg, &channels, 70);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let stages = fake_stages(&mut tape, &mut rng, &channels, 64);
        let logits = decode(&mut tape, &bound, &cfg, &stages).unwrap();
        assert_eq!(tape.shape(logits), &[1, 3, 64, 64]);
    }

    #[test]
    fn decode_reads_only_fused_stages() {
        let cfg = DecoderConfig { refine_channels: 8, ..DecoderConfig::default() };
        let channels = [8, 16, 24, 32];
        let store = decoder_store(&cfg, &channels, 72);
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let run = |stage1_offset: f64| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape).unwrap();
            let mut rng2 = ChaCha8Rng::seed_from_u64(99);
            let mut stages = fake_stages(&mut tape, &mut rng2, &channels, 32);
            if stage1_offset != 0.0 {
                let s = tape.add_scalar(stages[0], stage1_offset).unwrap();
                stages[0] = s;
            }
            let logits = decode(&mut tape, &bound, &cfg, &stages).unwrap();
            tape.data(logits).to_vec()
        };
        let _ = &mut rng;
        assert_eq!(run(0.0), run(5.0), "stage 1 is not fused and must not affect logits");
    }

    #[test]
    fn decode_fusion_off_uses_deepest_only() {
        let cfg_on = DecoderConfig { refine_channels: 8, ..DecoderConfig::default() };
        let cfg_off = DecoderConfig { fuse_stages: vec![4], refine_channels: 8, ..DecoderConfig::default() };
        let channels = [8, 16, 24, 32];
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let store_off = decoder_store(&cfg_off, &channels, 75);
        let mut tape = Tape::new();
        let bound = store_off.bind(&mut tape).unwrap();
        let stages = fake_stages(&mut tape, &mut rng, &channels, 32);
        let logits = decode(&mut tape, &bound, &cfg_off, &stages).unwrap();
        assert_eq!(tape.shape(logits), &[1, 3, 32, 32]);
        // fusion-off registers no skip/refine parameters
        assert!(store_off.names().all(|n| !n.contains(".skip.") && !n.contains(".refine.")));
        let store_on = decoder_store(&cfg_on, &channels, 75);
        assert!(store_on.names().any(|n| n.contains(".skip.")));
    }

    #[test]
    fn decode_rejects_short_stage_list() {
        let cfg = DecoderConfig { refine_channels: 8, ..DecoderConfig::default() };
        let channels = [8, 16, 24, 32];
        let store = decoder_store(&cfg, &channels, 76);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let stages = fake_stages(&mut tape, &mut rng, &channels, 32);
        assert!(decode(&mut tape, &bound, &cfg, &stages[..3]).is_err());
    }

    #[test]
    fn gradcheck_tiny_decode() {
        use crate::tensor::gradcheck;
        // two fused stages of an 8x8 image, 2 classes
        let cfg = DecoderConfig {
            fuse_stages: vec![1, 2],
            refine_channels: 4,
            num_classes: 2,
            k_up: 3,
            k_enc: 3,
        };
        let channels = [3, 4, 4, 4];
        let store = decoder_store(&cfg, &channels, 78);
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let mut inputs: Vec<(Vec<f64>, Vec<usize>)> = vec![
            (rngv(&mut rng, 3 * 2 * 2), vec![1, 3, 2, 2]),
            (rngv(&mut rng, 4), vec![1, 4, 1, 1]),
        ];
        let names: Vec<String> = store.names().cloned().collect();
        for name in &names {
            let p = store.get(name).unwrap();
            inputs.push((p.data.clone(), p.shape.clone()));
        }
        let cfg2 = cfg.clone();
        let names2 = names.clone();
        let rep = gradcheck::gradcheck_inputs(
            move |tape, ids| {
                let mut map = std::collections::BTreeMap::new();
                for (i, name) in names2.iter().enumerate() {
                    map.insert(name.clone(), ids[i + 2]);
                }
                let bound = Bound::from_ids(map);
                decode(tape, &bound, &cfg2, &[ids[0], ids[1]])
            },
            &inputs,
            gradcheck::DEFAULT_H,
            gradcheck::DEFAULT_TOL,
            24,
        )
        .unwrap();
        assert!(rep.passed(), "decode gradcheck err {}", rep.max_rel_err);
    }

    #[test]
    fn predict_mask_rules() {
        // favoring class 0 at one pixel
        let logits = vec![1.0, 0.0, 0.0];
        assert_eq!(predict_mask(&logits, &[1, 3, 1, 1]), vec![0]);
        // exact tie: lowest class index wins
        let logits = vec![0.5, 0.5, 0.5];
        assert_eq!(predict_mask(&logits, &[1, 3, 1, 1]), vec![0]);
        // brute-force oracle on random logits + positive-scale invariance
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let (n, c, h, w) = (2, 3, 4, 5);
        let logits = rngv(&mut rng, n * c * h * w);
        let got = predict_mask(&logits, &[n, c, h, w]);
        for ni in 0..n {
            for pi in 0..h * w {
                let mut best = 0;
                for ci in 1..c {
                    if logits[(ni * c + ci) * h * w + pi] > logits[(ni * c + best) * h * w + pi] {
                        best = ci;
                    }
                }
                assert_eq!(got[ni * h * w + pi] as usize, best);
            }
        }
        let scaled: Vec<f64> = logits.iter().map(|v| v * 17.3).collect();
        assert_eq!(predict_mask(&scaled, &[n, c, h, w]), got);
    }
}
