use serde::{Deserialize, Serialize};

use lavo::layer::LavoConfig;

use crate::{LmError, Result};

/// 256 byte values plus one padding id.
pub const VOCAB_SIZE: usize = 257;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub num_bases: usize,
    pub window: usize,
    pub ctx_len: usize,
    pub use_epe: bool,
    pub use_dissection: bool,
    /// Let the optimiser update the position tables. Off keeps them at zero.
    pub train_pos: bool,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            heads: 2,
            num_bases: 16,
            window: 16,
            ctx_len: 256,
            use_epe: true,
            use_dissection: true,
            train_pos: true,
            lr: 3e-4,
            steps: 2000,
            batch: 8,
            seed: 42,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size != VOCAB_SIZE {
            return Err(LmError::Config(format!("vocab_size must be {VOCAB_SIZE}, got {}", self.vocab_size)));
        }
        if self.ctx_len < self.window {
            return Err(LmError::Config(format!("ctx_len {} is shorter than the window {}", self.ctx_len, self.window)));
        }
        if self.n_layers == 0 || self.batch == 0 {
            return Err(LmError::Config("n_layers and batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LmError::Config(format!("learning rate {} is not a finite non-negative number", self.lr)));
        }
        self.layer_config(0).validate()?;
        Ok(())
    }

    /// Attention config of block `index`; every block gets its own seed.
    pub fn layer_config(&self, index: usize) -> LavoConfig {
        let mut cfg = LavoConfig::new(self.d_model, self.heads, self.num_bases, self.window)
            .with_seed(self.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1)));
        cfg.use_epe = self.use_epe;
        cfg.use_dissection = self.use_dissection;
        cfg.train_pos = self.train_pos && self.use_epe;
        cfg
    }
}
