//! Raw per-image features from pluggable backends, and their assembly into
//! the paired region and grid feature sets.

mod backend;
mod projector;

pub use backend::{
    synthesize_features, word_embedding, write_feature_cache, FeatureBackend, FeatureRecord,
    FileCacheBackend, ProviderManifest, RawImageFeatures, SyntheticBackend, MANIFEST_FILE,
};
pub use projector::{FeatureBundle, FeatureProjector, GRID_ELEMENTS, REGION_ELEMENTS};
