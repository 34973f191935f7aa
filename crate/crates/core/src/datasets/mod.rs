//! Synthetic scene/instruction data, dataset files and the word vocabulary.

mod io;
mod scene;
mod vocab;

pub use io::{check_image_ids, load_dataset, parse_dataset, save_dataset, SamplePair};
pub use scene::{
    generate_synthetic_dataset, write_scene_sidecars, GeneratorConfig, ReceptacleAttributes, Scene,
    SceneIndex, SplitRatios, SyntheticDataset, TargetAttributes,
};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};
