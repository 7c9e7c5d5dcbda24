use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{DoaAngle, EventSpec, FrameLabels, SceneSpec};

/// One row of a label CSV. Times in seconds, angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEvent {
    pub class_id: usize,
    pub onset_s: f64,
    pub offset_s: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

impl LabelEvent {
    pub fn from_event(e: &EventSpec) -> Self {
        Self {
            class_id: e.class_id,
            onset_s: e.onset,
            offset_s: e.offset,
            azimuth_deg: e.doa.azimuth().to_degrees(),
            elevation_deg: e.doa.elevation().to_degrees(),
        }
    }

    pub fn to_event(&self) -> Result<EventSpec> {
        Ok(EventSpec {
            class_id: self.class_id,
            onset: self.onset_s,
            offset: self.offset_s,
            doa: DoaAngle::from_degrees(self.azimuth_deg, self.elevation_deg)?,
            gain: 1.0,
        })
    }
}

/// Event rows of a scene, in scene order.
pub fn labels_from_scene(spec: &SceneSpec) -> Vec<LabelEvent> {
    spec.events.iter().map(LabelEvent::from_event).collect()
}

pub fn write_labels_csv(path: &Path, events: &[LabelEvent]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    for e in events {
        wr.serialize(e)?;
    }
    if events.is_empty() {
        wr.write_record([
            "class_id",
            "onset_s",
            "offset_s",
            "azimuth_deg",
            "elevation_deg",
        ])?;
    }
    let bytes = wr
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    super::atomic_write(path, &bytes)
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<LabelEvent>> {
    let bytes = super::read_bytes(path)?;
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Rasterizes label rows into frame targets.
pub fn events_to_labels(
    events: &[LabelEvent],
    n_frames: usize,
    n_classes: usize,
    frame_rate: f64,
) -> Result<FrameLabels> {
    let specs = events
        .iter()
        .map(LabelEvent::to_event)
        .collect::<Result<Vec<_>>>()?;
    FrameLabels::from_events(&specs, n_frames, n_classes, frame_rate)
}
