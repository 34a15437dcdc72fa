//! Loss functions: consistency contrastive loss, codebook diversity and CTC.

pub mod contrastive;
pub mod ctc;

pub use contrastive::{
    consistency_contrastive_loss, contrastive_loss, cosine_sim, diversity_loss,
    diversity_with_grad, evaluate_terms, evaluate_terms_with_grad, plan_terms, sample_negatives,
    CclBreakdown, ContrastiveTerm, LossConfig, Slot,
};
pub use ctc::{ctc_loss, ctc_loss_with_grad, greedy_ctc_decode, Vocabulary, BLANK, WORD_BOUNDARY};
