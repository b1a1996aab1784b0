//! Image quality metric, colour conversions, frame files and synthetic data.

pub mod color;
pub mod io;
pub mod ms_ssim;
pub mod synth;

pub use color::{rgb_to_yuv, yuv420_to_444, yuv444_to_420, yuv_to_rgb, Yuv420};
pub use io::{read_frame, read_raw_video, RawVideoSpec, Subsampling};
pub use ms_ssim::{ms_ssim, ms_ssim_tensors, ms_ssim_var};
pub use synth::{random_crop_pair, synth_dataset, SynthPair};
