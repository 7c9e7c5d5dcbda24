//! Segmentation, the training regimes, the learning-rate schedule and
//! overlapped-window inference.
//!
//! With one worker every step is deterministic given the dataset and the run
//! seed. Extra workers only parallelize feature extraction and per-clip
//! inference, which are independent per clip, so they do not change results.

mod config;
mod data;
mod infer;
mod trainer;

pub use config::{lr_at, AudioFormat, Regime, TrainConfig};
pub use data::{
    assemble_batch, assign_splits, load_clips, secs_to_frames, segment_clips, with_workers, Batch,
    ClipData, Segment, FRAME_RATE,
};
pub use infer::{
    infer_clip, inference_windows, window_batch, ClipInference, OverlapAccumulator, SegmentOutput,
    SegmentPredictor, INFER_BATCH,
};
pub use trainer::{
    init_branch, model_seed, train_branch, train_regime, train_tracking_best, train_two_stage,
    BestSnapshot, Progress, TrainData, TrainOutput,
};
