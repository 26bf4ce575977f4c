//! Synthetic digit-string corpus: parametric speakers, tone-rendered
//! utterances, manifests, splits and trial lists.

mod corpus;
mod synth;

pub use corpus::{
    build_corpus, load_corpus, make_trials, split_train_eval, synthesize_corpus, utt_id, AugTag, Corpus, CorpusConfig,
    CorpusManifest, TrialPolicy, UtteranceRecord, MANIFEST_FILE,
};
pub use synth::{
    plan_tokens, synth_speaker, synth_speakers, synth_utterance, timing, SpeakerProfile, TokenPlan, DIGIT_TONES,
    F0_RANGE, FORMANT_SHIFT_RANGE, MIN_F0_GAP_HZ, MIN_FORMANT_GAP, PITCH_EXPONENT, REFERENCE_F0,
    RESONANCE_GAIN_RANGE, SYNTH_RATE,
};
