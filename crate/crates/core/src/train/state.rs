use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::losses::LossWeights;

use super::adam::AdamState;

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything beyond the weights needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed optimization steps.
    pub step: u64,
    pub adam_g: AdamState,
    pub adam_d_global: AdamState,
    pub adam_d_local: AdamState,
    pub rng: RngState,
    pub weights: LossWeights,
    pub last_loss: Option<f64>,
    pub best_loss: Option<f64>,
}
