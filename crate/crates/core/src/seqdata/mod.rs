//! The synthetic codec-token TTS task.
//!
//! An utterance is a [`TokenGrid`]: `T` frames of `n_q` codes. Each text
//! token emits [`FRAMES_PER_TOKEN`] frames through a fixed mixing function
//! of (token, speaker, frame offset, codebook); codebook 0 carries content
//! and codebook 1 alternates between the speaker's two code groups. Every group is
//! shared by several speakers, so an unseen speaker is a new combination of
//! codes the model has already produced. A seeded
//! fraction of codes is replaced by uniform noise.

mod dataset;
mod grid;
mod splice;
mod synth;

pub use dataset::{build_splits, Dataset, DatasetHeader, Split, SplitConfig, TextDistribution};
pub use grid::TokenGrid;
pub use splice::{splice, splice_prefix, Segment, SplicedSequence};
pub use synth::{
    clean_code, clean_frame, clean_grid, decode_content_code, is_attested_frame, is_attested_transition,
    speaker_groups, synth_example, Example, Grammar,
};

/// Text vocabulary size.
pub const TEXT_VOCAB: usize = 32;
/// Audio codes per codebook, including the reserved end-of-sequence code.
pub const AUDIO_VOCAB: usize = 64;
/// Reserved code filling every column of the terminal frame.
pub const EOS_CODE: u32 = (AUDIO_VOCAB - 1) as u32;
/// Codes usable for audio content.
pub const CONTENT_CODES: u32 = EOS_CODE;
pub const N_Q: usize = 2;
pub const FRAMES_PER_TOKEN: usize = 2;
/// Length of the reference clip in frames.
pub const REF_FRAMES: usize = 6;
pub const P_NOISE: f64 = 0.05;
/// Codebook-1 code groups; a speaker is an unordered pair of groups.
pub const SPEAKER_GROUPS: u32 = 6;
/// Codes per group.
pub const GROUP_WIDTH: u32 = 2;
/// Number of speakers the generator knows about: every pair of groups.
pub const SPEAKER_UNIVERSE: u32 = SPEAKER_GROUPS * (SPEAKER_GROUPS - 1) / 2;
