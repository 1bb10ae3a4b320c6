//! Encoder: stem, multi-branch depthwise strip-convolution stages, and
//! residual stages whose Bottle-block shortcuts can be scan-filtered.
//!
//! Stage layout for a stride-32 deepest map: a two-conv stem brings the
//! image to stride 4, shallow stages run strip blocks at strides 4 and 8,
//! deep stages open with a downsampling Convolution block and continue with
//! Bottle blocks at strides 16 and 32. The deepest map is fused with the
//! other late stages by an aggregated depth convolution and optionally
//! enhanced by a low-rank non-negative factorization of its flattened
//! features.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FamError, Result};
use crate::mamba::{self, MambaConfig, ShortcutFilter};
use crate::nn::{conv_gn_gelu, norm_groups, register_conv_gn, Bound, ParamStore, GN_EPS};
use crate::tensor::{StripAxis, Tape, TensorId};

const NMF_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StripBlockSpec {
    pub channels: usize,
    pub branch_kernels: Vec<usize>,
    pub use_stem_5x5: bool,
}

impl StripBlockSpec {
    pub fn new(channels: usize, branch_kernels: Vec<usize>, use_stem_5x5: bool) -> Result<Self> {
        if channels == 0 {
            return Err(FamError::Invalid { op: "strip_block", detail: "channels must be > 0".into() });
        }
        if branch_kernels.is_empty() || branch_kernels.iter().any(|k| k % 2 == 0 || *k == 0) {
            return Err(FamError::Invalid {
                op: "strip_block",
                detail: format!("branch kernels must be odd and non-empty, got {:?}", branch_kernels),
            });
        }
        Ok(StripBlockSpec { channels, branch_kernels, use_stem_5x5 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidualKind {
    ConvolutionBlock,
    BottleBlock,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualBlockSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub kind: ResidualKind,
    pub stride: usize,
    pub shortcut_filter: ShortcutFilter,
}

impl ResidualBlockSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ResidualKind::ConvolutionBlock => {
                if self.stride != 2 {
                    return Err(FamError::Invalid {
                        op: "residual_block",
                        detail: "Convolution block downsamples: stride must be 2".into(),
                    });
                }
            }
            ResidualKind::BottleBlock => {
                if self.stride != 1 || self.in_channels != self.out_channels {
                    return Err(FamError::Invalid {
                        op: "residual_block",
                        detail: "Bottle block keeps shape: stride 1 and in == out".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    /// Leading stages built from strip blocks; the rest are residual stages.
    pub strip_stages: usize,
    /// How many of the deepest stage maps feed the aggregated fusion.
    pub fuse_last_n: usize,
    pub hamburger: bool,
    pub mamba: bool,
    pub branch_kernels: Vec<usize>,
    pub use_stem_5x5: bool,
    pub hamburger_rank: usize,
    pub hamburger_iters: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_channels: vec![32, 64, 160, 256],
            stage_depths: vec![2, 2, 2, 2],
            strip_stages: 2,
            fuse_last_n: 3,
            hamburger: true,
            mamba: true,
            branch_kernels: vec![7],
            use_stem_5x5: true,
            hamburger_rank: 8,
            hamburger_iters: 6,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n != 4 || self.stage_depths.len() != 4 {
            return Err(FamError::Config("encoder needs exactly 4 stages".into()));
        }
        if self.fuse_last_n == 0 || self.fuse_last_n > n {
            return Err(FamError::Config(format!("fuse_last_n {} out of range", self.fuse_last_n)));
        }
        if self.strip_stages == 0 || self.strip_stages > n {
            return Err(FamError::Config(format!("strip_stages {} out of range", self.strip_stages)));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(FamError::Config("stage depths must be >= 1".into()));
        }
        if self.branch_kernels.is_empty() || self.branch_kernels.iter().any(|k| k % 2 == 0) {
            return Err(FamError::Config(format!("branch kernels must be odd: {:?}", self.branch_kernels)));
        }
        if self.hamburger_rank == 0 {
            return Err(FamError::Invalid { op: "hamburger_enhance", detail: "rank must be >= 1".into() });
        }
        Ok(())
    }

    pub fn mid_channels(out: usize) -> usize {
        (out / 2).max(4)
    }

    /// Spatial stride of stage i (0-based) relative to the input image.
    pub fn stage_stride(i: usize) -> usize {
        4 << i
    }
}

/// Parameter and multiply count of one strip pair versus the K×K standard
/// convolution it replaces, per output position grid Ho×Wo.
pub fn strip_param_count(k: u64, ho: u64, wo: u64) -> (u64, u64) {
    (k * ho * wo * k, 2 * ho * wo * k)
}

// ---------------------------------------------------------------------------
// parameter registration

fn register_strip_block(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, spec: &StripBlockSpec) {
    let c = spec.channels;
    store.register_const(&format!("{prefix}.gn.g"), vec![c], 1.0);
    store.register_const(&format!("{prefix}.gn.b"), vec![c], 0.0);
    if spec.use_stem_5x5 {
        store.register_conv(rng, &format!("{prefix}.stem.w"), vec![c, 1, 5, 5], 25);
    }
    for &k in &spec.branch_kernels {
        store.register_conv(rng, &format!("{prefix}.k{k}h.w"), vec![c, 1, 1, k], k);
        store.register_conv(rng, &format!("{prefix}.k{k}v.w"), vec![c, 1, k, 1], k);
    }
    store.register_conv(rng, &format!("{prefix}.mix.w"), vec![c, c, 1, 1], c);
}

fn register_residual_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    spec: &ResidualBlockSpec,
    mamba_cfg: &MambaConfig,
) {
    register_conv_gn(store, rng, &format!("{prefix}.reduce"), vec![spec.mid_channels, spec.in_channels, 1, 1], spec.mid_channels);
    register_conv_gn(store, rng, &format!("{prefix}.mid"), vec![spec.mid_channels, spec.mid_channels, 3, 3], spec.mid_channels);
    store.register_conv(
        rng,
        &format!("{prefix}.expand.w"),
        vec![spec.out_channels, spec.mid_channels, 1, 1],
        spec.mid_channels,
    );
    match spec.kind {
        ResidualKind::ConvolutionBlock => {
            store.register_conv(
                rng,
                &format!("{prefix}.proj.w"),
                vec![spec.out_channels, spec.in_channels, 1, 1],
                spec.in_channels,
            );
        }
        ResidualKind::BottleBlock => {
            if spec.shortcut_filter == ShortcutFilter::Mamba {
                mamba::register_filter(store, rng, &format!("{prefix}.mamba"), spec.out_channels, mamba_cfg);
            }
        }
    }
}

/// Block specs for stage `i` (0-based), in execution order.
pub fn stage_blocks(cfg: &EncoderConfig, i: usize) -> Vec<ResidualBlockSpec> {
    let c = cfg.stage_channels[i];
    let c_prev = cfg.stage_channels[i - 1];
    let mid = EncoderConfig::mid_channels(c);
    let filter = if cfg.mamba { ShortcutFilter::Mamba } else { ShortcutFilter::Identity };
    let mut blocks = vec![ResidualBlockSpec {
        in_channels: c_prev,
        mid_channels: mid,
        out_channels: c,
        kind: ResidualKind::ConvolutionBlock,
        stride: 2,
        shortcut_filter: ShortcutFilter::Identity,
    }];
    for _ in 1..cfg.stage_depths[i] {
        blocks.push(ResidualBlockSpec {
            in_channels: c,
            mid_channels: mid,
            out_channels: c,
            kind: ResidualKind::BottleBlock,
            stride: 1,
            shortcut_filter: filter,
        });
    }
    blocks
}

pub fn register_encoder(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &EncoderConfig,
    mamba_cfg: &MambaConfig,
) -> Result<()> {
    cfg.validate()?;
    let ch = &cfg.stage_channels;
    register_conv_gn(store, rng, "enc.stem.c0", vec![ch[0], 3, 3, 3], ch[0]);
    register_conv_gn(store, rng, "enc.stem.c1", vec![ch[0], ch[0], 3, 3], ch[0]);
    for i in 0..4 {
        if i < cfg.strip_stages {
            if i > 0 {
                register_conv_gn(store, rng, &format!("enc.down{i}"), vec![ch[i], ch[i - 1], 3, 3], ch[i]);
            }
            let spec = StripBlockSpec::new(ch[i], cfg.branch_kernels.clone(), cfg.use_stem_5x5)?;
            for b in 0..cfg.stage_depths[i] {
                register_strip_block(store, rng, &format!("enc.s{}.b{}", i + 1, b), &spec);
            }
        } else {
            for (b, spec) in stage_blocks(cfg, i).iter().enumerate() {
                spec.validate()?;
                register_residual_block(store, rng, &format!("enc.s{}.b{}", i + 1, b), spec, mamba_cfg);
            }
        }
    }
    let fused: usize = ch[4 - cfg.fuse_last_n..].iter().sum();
    store.register_conv(rng, "enc.fuse.dw.w", vec![fused, 1, 3, 3], 9);
    store.register_conv(rng, "enc.fuse.mix.w", vec![ch[3], fused, 1, 1], fused);
    if cfg.hamburger {
        store.register_conv(rng, "enc.ham.mix.w", vec![ch[3], ch[3], 1, 1], ch[3]);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// forward

/// Stem 5×5 depthwise conv, per-branch horizontal/vertical strip passes,
/// branch stacking onto the stem features, and a 1×1 channel mix. Linear in
/// the input; shape preserved.
pub fn strip_block_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: TensorId,
    spec: &StripBlockSpec,
) -> Result<TensorId> {
    let c = spec.channels;
    let got_c = tape.shape(x)[1];
    if got_c != c {
        return Err(FamError::Shape {
            op: "strip_block",
            detail: format!("expected {} channels, got {}", c, got_c),
        });
    }
    let stem = if spec.use_stem_5x5 {
        let w = bound.id(&format!("{prefix}.stem.w"))?;
        tape.conv2d(x, w, (1, 1), (2, 2), c)?
    } else {
        x
    };
    let mut total = stem;
    for &k in &spec.branch_kernels {
        let wh = bound.id(&format!("{prefix}.k{k}h.w"))?;
        let wv = bound.id(&format!("{prefix}.k{k}v.w"))?;
        let h = tape.strip_conv(stem, wh, StripAxis::Horizontal, k)?;
        let hv = tape.strip_conv(h, wv, StripAxis::Vertical, k)?;
        total = tape.add(total, hv)?;
    }
    let mix = bound.id(&format!("{prefix}.mix.w"))?;
    tape.conv2d(total, mix, (1, 1), (0, 0), 1)
}

/// Residual strip unit used inside shallow stages:
/// `x + gelu(strip_block(group_norm(x)))`.
fn strip_unit(tape: &mut Tape, bound: &Bound, prefix: &str, x: TensorId, spec: &StripBlockSpec) -> Result<TensorId> {
    let g = bound.id(&format!("{prefix}.gn.g"))?;
    let b = bound.id(&format!("{prefix}.gn.b"))?;
    let n = tape.group_norm(x, g, b, norm_groups(spec.channels), GN_EPS)?;
    let s = strip_block_forward(tape, bound, prefix, n, spec)?;
    let a = tape.gelu(s)?;
    tape.add(x, a)
}

/// 1×1 reduce, 3×3 (stride per spec), 1×1 expand main path plus the block's
/// shortcut: a strided 1×1 projection for the Convolution block, identity or
/// the scan filter for the Bottle block.
pub fn residual_block_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: TensorId,
    spec: &ResidualBlockSpec,
    mamba_cfg: &MambaConfig,
) -> Result<TensorId> {
    spec.validate()?;
    let y = conv_gn_gelu(tape, bound, &format!("{prefix}.reduce"), x, (1, 1), (0, 0), 1, spec.mid_channels)?;
    let y = conv_gn_gelu(
        tape,
        bound,
        &format!("{prefix}.mid"),
        y,
        (spec.stride, spec.stride),
        (1, 1),
        1,
        spec.mid_channels,
    )?;
    let expand = bound.id(&format!("{prefix}.expand.w"))?;
    let main = tape.conv2d(y, expand, (1, 1), (0, 0), 1)?;
    let shortcut = match spec.kind {
        ResidualKind::ConvolutionBlock => {
            let proj = bound.id(&format!("{prefix}.proj.w"))?;
            tape.conv2d(x, proj, (2, 2), (0, 0), 1)?
        }
        ResidualKind::BottleBlock => {
            mamba::bottle_shortcut(tape, bound, &format!("{prefix}.mamba"), x, spec.shortcut_filter, mamba_cfg)?
        }
    };
    tape.add(main, shortcut)
}

/// Resample every feature to the smallest (last) map, concatenate channels,
/// and mix with a depthwise 3×3 followed by a 1×1 projection to the last
/// feature's channel count.
pub fn aggregated_depth_conv(tape: &mut Tape, bound: &Bound, features: &[TensorId]) -> Result<TensorId> {
    if features.is_empty() {
        return Err(FamError::Invalid { op: "aggregated_depth_conv", detail: "empty feature list".into() });
    }
    let last_shape = tape.shape(*features.last().unwrap()).to_vec();
    let (th, tw) = (last_shape[2], last_shape[3]);
    let mut resampled = Vec::with_capacity(features.len());
    for &f in features {
        let s = tape.shape(f);
        if s[2] == th && s[3] == tw {
            resampled.push(f);
        } else {
            resampled.push(tape.nearest_resize(f, th, tw)?);
        }
    }
    let cat = if resampled.len() == 1 { resampled[0] } else { tape.concat(&resampled, 1)? };
    let ctot = tape.shape(cat)[1];
    let dw = bound.id("enc.fuse.dw.w")?;
    let y = tape.conv2d(cat, dw, (1, 1), (1, 1), ctot)?;
    let mix = bound.id("enc.fuse.mix.w")?;
    tape.conv2d(y, mix, (1, 1), (0, 0), 1)
}

/// Low-rank enhancement of the deepest map: T multiplicative-update steps of
/// a non-negative factorization D·C of the ReLU-flattened features from an
/// all-ones initialization, then `1×1 conv(x + reconstruction)`. Identity
/// when disabled. The effective rank is clamped to `min(C, H·W) - 1`.
pub fn hamburger_enhance(
    tape: &mut Tape,
    bound: &Bound,
    x: TensorId,
    rank: usize,
    iters: usize,
    enabled: bool,
) -> Result<TensorId> {
    if !enabled {
        return Ok(x);
    }
    if rank == 0 {
        return Err(FamError::Invalid { op: "hamburger_enhance", detail: "rank must be >= 1".into() });
    }
    if iters == 0 {
        return Err(FamError::Invalid { op: "hamburger_enhance", detail: "iters must be >= 1".into() });
    }
    let shape = tape.shape(x).to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let r = rank.min(c.min(hw).saturating_sub(1)).max(1);
    let xr = tape.relu(x)?;
    let mut planes = Vec::with_capacity(n);
    for sample in 0..n {
        let seq = tape.spatial_to_seq(xr, sample, crate::tensor::ScanDir::LeftRight)?;
        let xm = tape.transpose2d(seq)?; // [C, HW]
        let mut bases = tape.constant(vec![1.0; c * r], vec![c, r])?;
        let mut codes = tape.constant(vec![1.0; r * hw], vec![r, hw])?;
        for _ in 0..iters {
            // codes <- codes * (basesT x) / (basesT bases codes + eps)
            let bt = tape.transpose2d(bases)?;
            let num = tape.matmul(bt, xm)?;
            let btb = tape.matmul(bt, bases)?;
            let den = tape.matmul(btb, codes)?;
            let den = tape.add_scalar(den, NMF_EPS)?;
            let ratio = tape.div(num, den)?;
            codes = tape.mul(codes, ratio)?;
            // bases <- bases * (x codesT) / (bases codes codesT + eps)
            let ct = tape.transpose2d(codes)?;
            let num = tape.matmul(xm, ct)?;
            let cct = tape.matmul(codes, ct)?;
            let den = tape.matmul(bases, cct)?;
            let den = tape.add_scalar(den, NMF_EPS)?;
            let ratio = tape.div(num, den)?;
            bases = tape.mul(bases, ratio)?;
        }
        let recon = tape.matmul(bases, codes)?;
        let rt = tape.transpose2d(recon)?; // [HW, C]
        planes.push(tape.seq_to_spatial(rt, crate::tensor::ScanDir::LeftRight, h, w)?);
    }
    let recon = if planes.len() == 1 { planes[0] } else { tape.concat(&planes, 0)? };
    let sum = tape.add(x, recon)?;
    let mix = bound.id("enc.ham.mix.w")?;
    tape.conv2d(sum, mix, (1, 1), (0, 0), 1)
}

/// Full encoder pass. Returns the four stage maps at strides 4/8/16/32; the
/// deepest entry carries the aggregated fusion and optional enhancement.
pub fn encoder_forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    mamba_cfg: &MambaConfig,
    image: TensorId,
) -> Result<Vec<TensorId>> {
    cfg.validate()?;
    let shape = tape.shape(image).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(FamError::Shape {
            op: "encoder_forward",
            detail: format!("expected [N,3,H,W] image, got {:?}", shape),
        });
    }
    if shape[2] % 32 != 0 || shape[3] % 32 != 0 {
        return Err(FamError::Shape {
            op: "encoder_forward",
            detail: format!("spatial size {}x{} not divisible by 32", shape[2], shape[3]),
        });
    }
    let ch = &cfg.stage_channels;
    let mut x = conv_gn_gelu(tape, bound, "enc.stem.c0", image, (2, 2), (1, 1), 1, ch[0])?;
    x = conv_gn_gelu(tape, bound, "enc.stem.c1", x, (2, 2), (1, 1), 1, ch[0])?;
    let mut stages = Vec::with_capacity(4);
    for i in 0..4 {
        if i < cfg.strip_stages {
            if i > 0 {
                x = conv_gn_gelu(tape, bound, &format!("enc.down{i}"), x, (2, 2), (1, 1), 1, ch[i])?;
            }
            let spec = StripBlockSpec::new(ch[i], cfg.branch_kernels.clone(), cfg.use_stem_5x5)?;
            for b in 0..cfg.stage_depths[i] {
                x = strip_unit(tape, bound, &format!("enc.s{}.b{}", i + 1, b), x, &spec)?;
            }
        } else {
            for (b, spec) in stage_blocks(cfg, i).iter().enumerate() {
                x = residual_block_forward(tape, bound, &format!("enc.s{}.b{}", i + 1, b), x, spec, mamba_cfg)?;
            }
        }
        stages.push(x);
    }
    let from = 4 - cfg.fuse_last_n;
    let fused = aggregated_depth_conv(tape, bound, &stages[from..])?;
    let deepest = hamburger_enhance(tape, bound, fused, cfg.hamburger_rank, cfg.hamburger_iters, cfg.hamburger)?;
    stages[3] = deepest;
    Ok(stages)
}
