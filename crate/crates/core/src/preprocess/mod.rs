//! Image loading, contrast enhancement and conversion to model input.

mod ben_graham;
mod clahe;
pub mod filter;
mod pipeline;
mod raster;

pub use ben_graham::{ben_graham, BenGrahamParams};
pub use clahe::{clahe, clip_histogram, tile_bounds, tile_histograms, ClaheParams};
pub use pipeline::{
    fuse, preprocess_pipeline, preprocess_stages, resize, PreprocessConfig, Stages,
};
pub use raster::ImageU8;
