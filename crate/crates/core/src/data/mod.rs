//! Sessions, bags, splits and dataset sources.

mod bags;
mod ingest;
mod mixed;
mod split;
mod synth;
mod types;

pub use bags::{build_bags, Bag, BagConfig, BagDataset, FrameKey, PlacementPolicy, SessionInfo};
pub use ingest::{ingest, ingest_session, write_sessions, written_config, ColumnMap, IngestConfig, IngestReport};
pub use mixed::{mixed_streams, VirtualStream};
pub use split::{
    bag_minutes, class_distribution, label_streams, loso_folds, stratified_split, FoldIndices, SplitConfig, SplitSpec,
    Stream,
};
pub use synth::{destination, synth_generate, ModeTemplate, SynthConfig, SynthOutput};
pub use types::{Mode, Placement, Session};
