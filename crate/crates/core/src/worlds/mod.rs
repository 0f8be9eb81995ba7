//! Synthetic worlds: analytic mixtures and toy grid-video corpora.

mod dataset;
mod gmm;
mod toy;

pub use dataset::{split_corpora, Corpora, DatasetFile, Record, ADAPT_TEST_FRACTION, DATASET_MAGIC, DATASET_VERSION};
pub use gmm::{gen_gmm_samples, log_sum_exp, GmmSpec};
pub use toy::{
    gen_toy_videos, Dynamics, Polarity, RenderParams, ShapeKind, Texture, ToyVideoSpec, SHAPE_BOX, TOY_VOCAB,
};
