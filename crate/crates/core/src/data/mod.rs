//! Scene tiling, filtering, collocation, temporal splits, multi-timestep
//! sampling, the patch container and a synthetic scene generator.

pub mod collocate;
pub mod container;
pub mod manifest;
pub mod multitime;
pub mod pipeline;
pub mod scene;
pub mod split;
pub mod synth;

pub use collocate::{collocate_labels, DEFAULT_TOLERANCE_S};
pub use container::{decode_sample, encode_sample, fnv1a, read_container, read_verified, sample_file_name, write_container};
pub use manifest::{Manifest, ManifestEntry};
pub use multitime::{choose_triple, sample_multi_timestep};
pub use pipeline::{fire_splits, multi_timestep_samples, split_samples, tile_and_filter};
pub use scene::{crop, filter_patch, fire_train_filter, tile_scene, Location, PatchSample, Scene, Tile, PATCH_SIZE};
pub use split::{assign_split, parse_year_range, SplitRules};
pub use synth::{masks_sample, scene_from_samples, scene_sample, synth_generate, SynthConfig, SynthScene};
