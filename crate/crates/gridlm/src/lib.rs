//! Topographic transformer language modeling on 2D unit grids.
//!
//! The crate trains a GPT-style byte-level transformer whose attention and
//! MLP outputs are bijectively mapped onto 2D grids and regularized with a
//! spatial smoothness loss, then analyzes the trained model the way an fMRI
//! study would: simulated voxel readout, condition contrasts with Welch
//! t-tests and FDR correction, greedy cluster growing, and Moran's I
//! spatial autocorrelation.
//!
//! Module map:
//! - [`grid`]: unit-to-cell layouts, ℓ∞ distances, neighborhood sampling
//! - [`autodiff`]: dense-tensor tape with reverse-mode gradients
//! - [`model`]: the transformer with per-sublayer spatial hooks
//! - [`spatial_loss`]: per-neighborhood smoothness loss and the combined objective
//! - [`trainer`]: corpus ingestion, AdamW loop, early stopping, checkpoints
//! - [`readout`]: Gaussian FWHM smoothing simulating fMRI sampling
//! - [`analysis`]: stimulus contrasts, FDR, cluster growing, response profiles
//! - [`spatstats`]: Moran's I under Queen/Rook/generic adjacency
//! - [`export`]: CSV / PGM / JSON artifact formats shared with the CLI

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod export;
pub mod grid;
pub mod model;
pub mod readout;
pub mod seeds;
pub mod spatial_loss;
pub mod spatstats;
pub mod synthtext;
pub mod trainer;
