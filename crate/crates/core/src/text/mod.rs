//! Text branch: digit/pause vocabulary, CTC, and the Transformer
//! encoder-decoder that yields the text embedding under a weighted triple
//! loss (classification, CTC, decoder cross entropy).

mod ctc;
mod model;
mod tokens;
mod train;

pub use ctc::{ctc_forward_backward, ctc_loss, ctc_loss_batch, min_frames, CtcResult};
pub use model::{
    DecoderTargets, LossBreakdown, LossWeights, TextExample, TextExtractor, TextExtractorConfig, TextForward, TextLossVars,
};
pub use tokens::{
    TextLabel, Token, TokenSeq, BLANK_ID, CTC_VOCAB, DECODER_VOCAB, EOS_ID, PAUSE_ID, SOS_ID,
};
pub(crate) use model::argmax_rows;
pub use train::{text_accuracy, train_text, TextEpochLog, TrainConfig, TrainedText};
