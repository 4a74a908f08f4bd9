//! Frame ingestion, clip sampling, multi-crop views and synthetic videos.

pub mod augment;
pub mod pnm;
pub mod synthetic;
pub mod video;

pub use augment::{base_crop, choose_crop_window, make_views, CropWindow, View, ViewConfig, ViewGeometry, ViewSet};
pub use synthetic::{gen_synthetic_clip, read_shape_split, write_shape_split, SyntheticClip, SyntheticConfig};
pub use video::{sample_clip, sample_clip_cut_aware, ClipSpec, VideoSource};
