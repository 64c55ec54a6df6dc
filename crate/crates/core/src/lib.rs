//! Speaker-embedding toolkit for forensic voice comparison.
//!
//! The pipeline: WAV recordings are conditioned ([`audio`]), turned into
//! fixed-height spectrogram patches ([`spectrogram`]), embedded into a
//! 1024-dimensional Euclidean space by a small CNN ([`net`]) trained with the
//! triplet loss ([`triplet`]), and finally scored: embedding-space cluster
//! quality ([`quality`]), likelihood-ratio approximations for forensic cases
//! ([`forensic`]), and biometric evaluation — EER, DET/ROC, AUC, sensitivity
//! ([`evalrep`]). Corpus handling and a synthetic-speaker generator live in
//! [`dataset`]; the command-line surface in [`cli`].

pub mod audio;
pub mod cli;
pub mod dataset;
pub mod evalrep;
pub mod forensic;
pub mod net;
pub mod quality;
pub mod spectrogram;
pub mod triplet;

#[cfg(test)]
pub(crate) mod testutil;
