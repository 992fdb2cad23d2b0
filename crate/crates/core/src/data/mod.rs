//! Dataset ingestion, augmentation, contrastive samplers and the synthetic
//! benchmark generator.

pub mod augment;
pub mod image;
pub mod sampler;
pub mod synthetic;

pub use self::augment::{AugmentationConfig, GeometricMode, PhotometricConfig};
pub use self::image::{load_image_dir, ImageBuffer, LoadedImages, DEFAULT_RESOLUTION};
pub use self::sampler::{
    sample_descriptor_batch, sample_detector_batch, DescriptorNeighborhoodBatch, DetectorPairBatch, PairGeometry,
};
pub use self::synthetic::{generate_synthetic_benchmark, synthetic_scene, synthetic_scenes, BenchmarkMode};
