//! Synthetic spatial scenes: plane-wave FOA encoding, free-field tetrahedral
//! array simulation, a class-templated event bank and frame labels.
//!
//! Generation is seed-deterministic. Each clip derives its own RNG stream
//! from `(master seed, clip index)` via [`derive_seed`], so clips can be
//! rendered in any order or in parallel without changing the output.

mod doa;
mod events;
mod render;
mod scene;

pub use doa::{sh_vector, DoaAngle};
pub use events::{class_carrier_hz, class_names, synth_event_signal, EVENT_RMS, MAX_CLASSES};
pub use render::{
    encode_foa, simulate_mic_array, MicArrayGeometry, PlaneWaveSource, DEFAULT_D_MAX, DELAY_GUARD,
};
pub use scene::{
    derive_seed, doa_grid, synthesize_scene, EventSpec, FrameLabels, Scene, SceneGenerator,
    SceneSpec, LABEL_HOP, MAX_POLYPHONY,
};
