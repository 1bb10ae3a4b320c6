//! Selective state-space shortcut filter.
//!
//! A feature map is flattened into sequences along a configurable set of
//! scan directions; each direction runs the linear-time selective scan
//! ([`Tape::selective_scan`]), the per-direction results are merged by mean,
//! and a learned 1×1 projection is added residually. Placed on the Bottle
//! block shortcut it filters the raw features that would otherwise bypass
//! the main path unprocessed.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FamError, Result};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{ScanDir, Tape, TensorId};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MambaConfig {
    /// State vector length per channel.
    pub state_dim: usize,
    /// Channels per head; heads = max(1, C / head_channels).
    pub head_channels: usize,
    /// Scan directions, merged by mean. Must be non-empty.
    pub directions: Vec<String>,
}

impl Default for MambaConfig {
    fn default() -> Self {
        MambaConfig {
            state_dim: 16,
            head_channels: 16,
            directions: ScanDir::ALL.iter().map(|d| d.tag().to_string()).collect(),
        }
    }
}

impl MambaConfig {
    pub fn parsed_directions(&self) -> Result<Vec<ScanDir>> {
        if self.directions.is_empty() {
            return Err(FamError::Invalid { op: "mamba_filter_2d", detail: "empty direction set".into() });
        }
        self.directions
            .iter()
            .map(|s| {
                ScanDir::parse(s).ok_or_else(|| FamError::Config(format!("unknown scan direction `{s}`")))
            })
            .collect()
    }

    pub fn heads_for(&self, channels: usize) -> usize {
        (channels / self.head_channels).max(1)
    }
}

/// Whether a Bottle-block shortcut passes features through untouched or
/// through the scan filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShortcutFilter {
    Identity,
    Mamba,
}

/// Register the per-site filter parameters under `prefix`:
/// token→decay/B/C projections, per-head skip coefficients, and the 1×1
/// output projection (zero-init so the filter starts as the bare scan).
pub fn register_filter(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    channels: usize,
    cfg: &MambaConfig,
) {
    let heads = cfg.heads_for(channels);
    let s = cfg.state_dim;
    store.register_conv(rng, &format!("{prefix}.wa"), vec![channels, heads], channels);
    store.register_const(&format!("{prefix}.ba"), vec![heads], 0.0);
    store.register_conv(rng, &format!("{prefix}.wb"), vec![channels, s], channels);
    store.register_const(&format!("{prefix}.bb"), vec![s], 0.0);
    store.register_conv(rng, &format!("{prefix}.wc"), vec![channels, s], channels);
    store.register_const(&format!("{prefix}.bc"), vec![s], 0.0);
    store.register_const(&format!("{prefix}.d"), vec![heads], 1.0);
    store.register_const(&format!("{prefix}.proj.w"), vec![channels, channels, 1, 1], 0.0);
}

/// Multi-directional scan filter over an NCHW feature map; shape preserved.
pub fn mamba_filter_2d(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: TensorId,
    cfg: &MambaConfig,
) -> Result<TensorId> {
    let dirs = cfg.parsed_directions()?;
    let shape = tape.shape(x).to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c % cfg.heads_for(c) != 0 {
        return Err(FamError::Invalid {
            op: "mamba_filter_2d",
            detail: format!("{} channels not divisible into {} heads", c, cfg.heads_for(c)),
        });
    }
    let heads = cfg.heads_for(c);
    let wa = bound.id(&format!("{prefix}.wa"))?;
    let ba = bound.id(&format!("{prefix}.ba"))?;
    let wb = bound.id(&format!("{prefix}.wb"))?;
    let bb = bound.id(&format!("{prefix}.bb"))?;
    let wc = bound.id(&format!("{prefix}.wc"))?;
    let bc = bound.id(&format!("{prefix}.bc"))?;
    let d = bound.id(&format!("{prefix}.d"))?;
    let proj = bound.id(&format!("{prefix}.proj.w"))?;

    let mut per_sample = Vec::with_capacity(n);
    for sample in 0..n {
        let mut acc: Option<TensorId> = None;
        for &dir in &dirs {
            let seq = tape.spatial_to_seq(x, sample, dir)?;
            let a_raw = tape.matmul(seq, wa)?;
            let a_raw = tape.bias_last_dim(a_raw, ba)?;
            let decay = tape.sigmoid(a_raw)?;
            let b_in = tape.matmul(seq, wb)?;
            let b_in = tape.bias_last_dim(b_in, bb)?;
            let c_out = tape.matmul(seq, wc)?;
            let c_out = tape.bias_last_dim(c_out, bc)?;
            let y = tape.selective_scan(seq, decay, b_in, c_out, d, heads, cfg.state_dim)?;
            let plane = tape.seq_to_spatial(y, dir, h, w)?;
            acc = Some(match acc {
                None => plane,
                Some(prev) => tape.add(prev, plane)?,
            });
        }
        let merged = tape.scale(acc.expect("non-empty directions"), 1.0 / dirs.len() as f64)?;
        per_sample.push(merged);
    }
    let merged = if per_sample.len() == 1 {
        per_sample[0]
    } else {
        tape.concat(&per_sample, 0)?
    };
    let projected = tape.conv2d(merged, proj, (1, 1), (0, 0), 1)?;
    tape.add(merged, projected)
}

/// Bottle-block shortcut: identity passthrough or the scan filter.
pub fn bottle_shortcut(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: TensorId,
    flag: ShortcutFilter,
    cfg: &MambaConfig,
) -> Result<TensorId> {
    match flag {
        ShortcutFilter::Identity => Ok(x),
        ShortcutFilter::Mamba => mamba_filter_2d(tape, bound, prefix, x, cfg),
    }
}
