//! Separable dictionary learning: dictionary pairs `(D1, D2)` that model an
//! `m×m` patch as `D1 X D2ᵀ` with a sparse code `X`.
//!
//! - [`sparse2d`]: 2D-OMP, thresholding for orthonormal pairs, and a 1D reference coder.
//! - [`dictupdate`]: partial sums and closed-form dictionary updates.
//! - [`trainer`]: the master–worker training loop over a pluggable transport.
//! - [`denoise`]: overlapping-patch denoising, PSNR and SSIM.
//! - [`data`]: patch sets, images, sharding and file formats.

pub mod data;
pub mod denoise;
pub mod dictupdate;
pub mod numerics;
pub mod rng;
pub mod sparse2d;
pub mod trainer;

pub use data::{DataError, GrayImage, PatchSet, Shard, SynthSpec};
pub use denoise::{denoise_image, psnr, ssim, DenoiseConfig, DenoiseError, DenoiseReport, DenoiseStats};
pub use dictupdate::{DictMode, DictionaryPair, NormScaling, PartialBody, PartialSums, Side, UpdateError};
pub use numerics::{Mat, NumericsError};
pub use sparse2d::{omp2d, threshold_code, CodingError, CodingStop, Entry, Omp2d, SparseCode, SparseCoder};
pub use trainer::{
    objective, reduce_partials, rmse, train, train_with_shards, InitPolicy, RunMetrics, TrainConfig, TrainError,
    TrainOutput,
};
