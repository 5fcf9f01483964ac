//! Synthetic stereo data, photometric styles, and file formats.

pub mod io;
pub mod manifest;
pub mod rds;
pub mod style;

pub use io::{read_disparity, write_disparity, DisparityFormat, LoadedDisparity};
pub use rds::{
    generate_corpus_sample, generate_rds, sample_rng, DisparityPlane, LayerShape, SceneLayer, SceneParams,
    SceneSpec, StereoSample,
};
pub use style::{apply_style, AsymmetricJitter, DomainStyle};
