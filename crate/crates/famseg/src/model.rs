//! Whole-network assembly: configuration, parameter initialization, and the
//! image-to-logits forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, DecoderConfig};
use crate::encoder::{encoder_forward, register_encoder, EncoderConfig};
use crate::error::Result;
use crate::mamba::MambaConfig;
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Tape, TensorId};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mamba: MambaConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            mamba: MambaConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small profile for fast tests: every capability on, minute-scale sizes.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                stage_channels: vec![4, 8, 8, 8],
                stage_depths: vec![1, 1, 2, 2],
                hamburger_rank: 2,
                hamburger_iters: 3,
                ..EncoderConfig::default()
            },
            mamba: MambaConfig { state_dim: 4, head_channels: 4, ..MambaConfig::default() },
            decoder: DecoderConfig { refine_channels: 8, ..DecoderConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.mamba.parsed_directions()?;
        Ok(())
    }

    /// Initialize every parameter of the network from the seed.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        register_encoder(&mut store, &mut rng, &self.encoder, &self.mamba)?;
        crate::decoder::register_decoder(&mut store, &mut rng, &self.decoder, &self.encoder.stage_channels)?;
        Ok(store)
    }

    /// Image `[N,3,H,W]` to class logits `[N,num_classes,H,W]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: TensorId) -> Result<TensorId> {
        let stages = encoder_forward(tape, bound, &self.encoder, &self.mamba, image)?;
        decode(tape, bound, &self.decoder, &stages)
    }
}
