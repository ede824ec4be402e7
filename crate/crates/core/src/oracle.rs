use crate::error::Result;
use crate::vocab::TokenId;

/// Anything that can propose a distribution for a `[MASK]` placed in a sentence.
///
/// Used by mask-and-generate corruption (backed by the plain-MLM model) and by
/// evaluation-set construction (backed by the synthetic grammar).
pub trait PredictionOracle: Sync {
    /// Probability distribution over the whole vocabulary for the `[MASK]` at
    /// `position` of `seq`.
    fn masked_distribution(&self, seq: &[TokenId], position: usize) -> Result<Vec<f64>>;
}
