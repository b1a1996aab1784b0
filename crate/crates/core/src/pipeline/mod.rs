//! Frame-pair codec built from the motion and residual networks, its
//! container format, the rate-distortion objective and staged training.

pub mod bitstream;
mod codec;
mod loss;
mod train;

pub use bitstream::{PFrameBitstream, Section, SectionKind};
pub use codec::{
    decode_pframe, decode_stream, encode_pframe, predict, warp_only_prediction, EncodeStats, Encoded, SectionStats,
    FLOW_BLOCK, FLOW_RADIUS, PAD_MULTIPLE,
};
pub use loss::{rd_loss, RdTerms};
pub use train::{evaluate_rd, train, RdSummary, StepRecord, TrainingConfig};
