//! Waveform I/O, STFT/mel analysis, and mel-to-waveform reconstruction.

pub mod griffin_lim;
pub mod mel;
pub mod stft;
pub mod wav;

pub use griffin_lim::griffin_lim;
pub use mel::{mel_spectrogram, MelSpectrogram};
pub use stft::StftConfig;
pub use wav::{read_wav, write_wav, Waveform, SAMPLE_RATE};
