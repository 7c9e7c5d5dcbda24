//! Scene descriptions, rendering into both formats, and frame labels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::events::{synth_event_signal, EVENT_RMS, MAX_CLASSES};
use super::render::{encode_foa, simulate_mic_array, MicArrayGeometry, PlaneWaveSource};
use super::DoaAngle;
use crate::dsp::Waveform;
use crate::error::{ensure, Error, Result};

/// Samples per label frame at 32 kHz (100 frames per second).
pub const LABEL_HOP: usize = 320;

/// Most events allowed to sound at once.
pub const MAX_POLYPHONY: usize = 2;

/// Deterministic seed for item `index` of a stream rooted at `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub class_id: usize,
    /// Seconds.
    pub onset: f64,
    /// Seconds, exclusive.
    pub offset: f64,
    pub doa: DoaAngle,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Seconds.
    pub duration: f64,
    pub events: Vec<EventSpec>,
    pub noise_snr_db: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Checks timing, class range, polyphony and same-class overlap.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        ensure!(
            self.duration > 0.0,
            InvalidScene,
            "duration must be positive"
        );
        for (k, e) in self.events.iter().enumerate() {
            ensure!(
                0.0 <= e.onset && e.onset < e.offset && e.offset <= self.duration + 1e-9,
                InvalidScene,
                "event {k} spans [{}, {}) outside [0, {}]",
                e.onset,
                e.offset,
                self.duration
            );
            ensure!(
                e.class_id < n_classes,
                InvalidScene,
                "event {k} has class {} but only {n_classes} classes exist",
                e.class_id
            );
            ensure!(
                e.gain.is_finite() && e.gain >= 0.0,
                InvalidScene,
                "event {k} gain {}",
                e.gain
            );
        }
        let poly = self.max_polyphony();
        ensure!(
            poly <= MAX_POLYPHONY,
            InvalidScene,
            "polyphony {poly} exceeds {MAX_POLYPHONY}"
        );
        for (a, ea) in self.events.iter().enumerate() {
            for eb in &self.events[a + 1..] {
                ensure!(
                    !(ea.class_id == eb.class_id && ea.onset < eb.offset && eb.onset < ea.offset),
                    InvalidScene,
                    "two overlapping events of class {}",
                    ea.class_id
                );
            }
        }
        Ok(())
    }

    /// Largest number of simultaneously active events, from an exact sweep over boundaries.
    pub fn max_polyphony(&self) -> usize {
        let mut edges: Vec<(f64, i32)> = self
            .events
            .iter()
            .flat_map(|e| [(e.onset, 1), (e.offset, -1)])
            .collect();
        // offsets sort before onsets at the same instant: intervals are half-open
        edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (mut cur, mut best) = (0i32, 0i32);
        for (_, d) in edges {
            cur += d;
            best = best.max(cur);
        }
        best as usize
    }
}

/// Frame-level targets: `sed` is `frames x classes` in {0,1}, `doa` is
/// `frames x classes x 2` (azimuth, elevation in radians), zero where inactive.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    n_frames: usize,
    n_classes: usize,
    sed: Vec<f32>,
    doa: Vec<f32>,
}

impl FrameLabels {
    pub fn empty(n_frames: usize, n_classes: usize) -> Self {
        Self {
            n_frames,
            n_classes,
            sed: vec![0.0; n_frames * n_classes],
            doa: vec![0.0; n_frames * n_classes * 2],
        }
    }

    /// Rasterizes events at `frame_rate`: frame `f` is active iff `onset <= f / frame_rate < offset`.
    pub fn from_events(
        events: &[EventSpec],
        n_frames: usize,
        n_classes: usize,
        frame_rate: f64,
    ) -> Result<Self> {
        let mut labels = Self::empty(n_frames, n_classes);
        for e in events {
            ensure!(
                e.class_id < n_classes,
                InvalidScene,
                "class {} out of range",
                e.class_id
            );
            let first = (e.onset * frame_rate - 1e-9).ceil().max(0.0) as usize;
            let end = ((e.offset * frame_rate - 1e-9).ceil().max(0.0) as usize).min(n_frames);
            for f in first..end {
                labels.set_active(f, e.class_id, e.doa);
            }
        }
        Ok(labels)
    }

    pub fn set_active(&mut self, frame: usize, class: usize, doa: DoaAngle) {
        let idx = frame * self.n_classes + class;
        self.sed[idx] = 1.0;
        self.doa[2 * idx] = doa.azimuth() as f32;
        self.doa[2 * idx + 1] = doa.elevation() as f32;
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn sed(&self) -> &[f32] {
        &self.sed
    }

    pub fn doa(&self) -> &[f32] {
        &self.doa
    }

    pub fn is_active(&self, frame: usize, class: usize) -> bool {
        self.sed[frame * self.n_classes + class] > 0.5
    }

    pub fn active_count(&self, frame: usize) -> usize {
        (0..self.n_classes)
            .filter(|&c| self.is_active(frame, c))
            .count()
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let n = self.n_classes;
        Self {
            n_frames: len,
            n_classes: n,
            sed: self.sed[start * n..(start + len) * n].to_vec(),
            doa: self.doa[start * n * 2..(start + len) * n * 2].to_vec(),
        }
    }

    /// Reassembles labels from raw arrays.
    pub fn from_parts(
        n_frames: usize,
        n_classes: usize,
        sed: Vec<f32>,
        doa: Vec<f32>,
    ) -> Result<Self> {
        ensure!(
            sed.len() == n_frames * n_classes && doa.len() == 2 * sed.len(),
            Shape,
            "label arrays do not match {n_frames}x{n_classes}"
        );
        Ok(Self {
            n_frames,
            n_classes,
            sed,
            doa,
        })
    }
}

/// One rendered scene in both formats.
#[derive(Debug, Clone)]
pub struct Scene {
    pub foa: Waveform,
    pub mic: Waveform,
    pub labels: FrameLabels,
}

/// Renders `spec` into FOA and mic-array audio with labels at `fs / LABEL_HOP` frames per second.
pub fn synthesize_scene(
    spec: &SceneSpec,
    geom: &MicArrayGeometry,
    fs: u32,
    n_classes: usize,
) -> Result<Scene> {
    spec.validate(n_classes)?;
    let sources = spec
        .events
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, k as u64));
            let start = (e.onset * fs as f64).round();
            let len = (e.offset * fs as f64).round() - start;
            let mut signal = synth_event_signal(e.class_id, len / fs as f64, fs, &mut rng)?;
            signal.iter_mut().for_each(|v| *v *= e.gain as f32);
            Ok(PlaneWaveSource {
                signal,
                doa: e.doa,
                onset: start / fs as f64,
                class_id: e.class_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let foa = encode_foa(&sources, spec.duration, fs)?;
    let mic = simulate_mic_array(&sources, geom, spec.duration, fs)?;
    let foa = add_noise(foa, spec.noise_snr_db, derive_seed(spec.seed, u64::MAX));
    let mic = add_noise(mic, spec.noise_snr_db, derive_seed(spec.seed, u64::MAX - 1));

    let n_frames = foa.len() / LABEL_HOP;
    let labels = FrameLabels::from_events(
        &spec.events,
        n_frames,
        n_classes,
        fs as f64 / LABEL_HOP as f64,
    )?;
    Ok(Scene { foa, mic, labels })
}

/// Adds white Gaussian noise at `snr_db` below the mixture's mean power.
/// A silent mixture is referenced to the power of one unit-gain event.
fn add_noise(w: Waveform, snr_db: f64, seed: u64) -> Waveform {
    let p = w.mean_power();
    let reference = if p > 0.0 { p } else { EVENT_RMS * EVENT_RMS };
    let sigma = (reference / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = w.sample_rate();
    let channels = w
        .into_channels()
        .into_iter()
        .map(|ch| {
            ch.into_iter()
                .map(|v| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    v + (sigma * n) as f32
                })
                .collect()
        })
        .collect();
    Waveform::new(channels, fs).expect("shape preserved")
}

/// Random scene generator: two event tracks, DOAs on a 10 degree grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGenerator {
    pub n_classes: usize,
    pub duration: f64,
    pub min_event_secs: f64,
    pub max_event_secs: f64,
    pub max_gap_secs: f64,
    /// Probability that the second track is used at all for a given event slot.
    pub overlap_prob: f64,
    pub noise_snr_db: f64,
    pub min_gain: f64,
    pub max_gain: f64,
}

impl Default for SceneGenerator {
    fn default() -> Self {
        Self {
            n_classes: MAX_CLASSES,
            duration: 10.0,
            min_event_secs: 0.5,
            max_event_secs: 2.5,
            max_gap_secs: 1.0,
            overlap_prob: 0.5,
            noise_snr_db: 20.0,
            min_gain: 0.6,
            max_gain: 1.0,
        }
    }
}

/// Azimuths -180..170 and elevations -40..40 in 10 degree steps (324 directions).
pub fn doa_grid() -> Vec<DoaAngle> {
    let mut grid = Vec::with_capacity(324);
    for az in (-180..180).step_by(10) {
        for el in (-40..=40).step_by(10) {
            grid.push(DoaAngle::from_degrees(az as f64, el as f64).expect("grid angles in range"));
        }
    }
    grid
}

impl SceneGenerator {
    pub fn generate(&self, seed: u64) -> Result<SceneSpec> {
        ensure!(
            (1..=MAX_CLASSES).contains(&self.n_classes),
            InvalidArgument,
            "class count {} outside 1..={MAX_CLASSES}",
            self.n_classes
        );
        ensure!(
            0.0 < self.min_event_secs && self.min_event_secs <= self.max_event_secs,
            InvalidArgument,
            "bad event length range"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = doa_grid();
        let q = |t: f64| (t * 100.0).round() / 100.0;
        let mut events: Vec<EventSpec> = Vec::new();

        for track in 0..MAX_POLYPHONY {
            let mut t = q(rng.gen_range(0.0..=self.max_gap_secs));
            loop {
                let len = q(rng.gen_range(self.min_event_secs..=self.max_event_secs));
                if t + self.min_event_secs > self.duration {
                    break;
                }
                let (onset, offset) = (t, q((t + len).min(self.duration)));
                let gap = q(rng.gen_range(0.1..=self.max_gap_secs.max(0.1)));
                t = q(offset + gap);
                if track > 0 && !rng.gen_bool(self.overlap_prob) {
                    continue;
                }
                let overlapping: Vec<&EventSpec> = events
                    .iter()
                    .filter(|e| e.onset < offset && onset < e.offset)
                    .collect();
                let classes: Vec<usize> = (0..self.n_classes)
                    .filter(|c| overlapping.iter().all(|e| e.class_id != *c))
                    .collect();
                let Some(&class_id) = classes.choose(&mut rng) else {
                    continue;
                };
                let doa = loop {
                    let d = *grid.choose(&mut rng).expect("grid nonempty");
                    if overlapping.iter().all(|e| e.doa != d) {
                        break d;
                    }
                };
                events.push(EventSpec {
                    class_id,
                    onset,
                    offset,
                    doa,
                    gain: rng.gen_range(self.min_gain..=self.max_gain),
                });
            }
        }
        events.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        let spec = SceneSpec {
            duration: self.duration,
            events,
            noise_snr_db: self.noise_snr_db,
            seed,
        };
        spec.validate(self.n_classes).map_err(|e| match e {
            Error::InvalidScene(m) => Error::InvalidScene(format!("generator bug: {m}")),
            other => other,
        })?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(class_id: usize, onset: f64, offset: f64, az_deg: f64) -> EventSpec {
        EventSpec {
            class_id,
            onset,
            offset,
            doa: DoaAngle::from_degrees(az_deg, 0.0).unwrap(),
            gain: 1.0,
        }
    }

    #[test]
    fn single_event_labels_rows_100_to_199() {
        let spec = SceneSpec {
            duration: 3.0,
            events: vec![event(1, 1.0, 2.0, 30.0)],
            noise_snr_db: 30.0,
            seed: 5,
        };
        let scene = synthesize_scene(&spec, &MicArrayGeometry::default(), 32000, 3).unwrap();
        let l = &scene.labels;
        assert_eq!(l.n_frames(), 300);
        for f in 0..300 {
            for c in 0..3 {
                let want = c == 1 && (100..200).contains(&f);
                assert_eq!(l.is_active(f, c), want, "frame {f} class {c}");
            }
        }
        assert_eq!(scene.foa.n_channels(), 4);
        assert_eq!(scene.mic.n_channels(), 4);
        assert_eq!(scene.mic.len(), 96000);
    }

    #[test]
    fn overlap_yields_two_active_with_own_doas() {
        let spec = SceneSpec {
            duration: 2.0,
            events: vec![event(0, 0.2, 1.2, -90.0), event(2, 0.8, 1.8, 45.0)],
            noise_snr_db: 30.0,
            seed: 1,
        };
        let l = synthesize_scene(&spec, &MicArrayGeometry::default(), 32000, 3)
            .unwrap()
            .labels;
        for f in 80..120 {
            assert_eq!(l.active_count(f), 2);
            assert!((l.doa()[(f * 3) * 2] as f64 - (-90f64).to_radians()).abs() < 1e-6);
            assert!((l.doa()[(f * 3 + 2) * 2] as f64 - 45f64.to_radians()).abs() < 1e-6);
        }
        assert_eq!(l.active_count(50), 1);
        assert_eq!(l.active_count(190), 0);
    }

    #[test]
    fn rejects_triple_polyphony_and_same_class_overlap() {
        let mut spec = SceneSpec {
            duration: 2.0,
            events: vec![
                event(0, 0.0, 1.0, 0.0),
                event(1, 0.5, 1.5, 10.0),
                event(2, 0.7, 0.9, 20.0),
            ],
            noise_snr_db: 20.0,
            seed: 0,
        };
        assert!(matches!(spec.validate(3), Err(Error::InvalidScene(_))));
        spec.events = vec![event(0, 0.0, 1.0, 0.0), event(0, 0.5, 1.5, 10.0)];
        assert!(spec.validate(3).is_err());
        // back-to-back events do not overlap
        spec.events = vec![event(0, 0.0, 1.0, 0.0), event(0, 1.0, 1.5, 10.0)];
        assert!(spec.validate(3).is_ok());
    }

    #[test]
    fn generator_never_exceeds_polyphony() {
        let gen = SceneGenerator {
            n_classes: 3,
            ..SceneGenerator::default()
        };
        let mut overlapping_specs = 0;
        for seed in 0..400 {
            let spec = gen.generate(seed).unwrap();
            let labels = FrameLabels::from_events(&spec.events, 1000, 3, 100.0).unwrap();
            let worst = (0..1000).map(|f| labels.active_count(f)).max().unwrap();
            assert!(worst <= 2, "seed {seed} has polyphony {worst}");
            if worst == 2 {
                overlapping_specs += 1;
            }
        }
        assert!(overlapping_specs > 100);
    }

    #[test]
    fn reproducible_audio_and_labels() {
        let gen = SceneGenerator {
            n_classes: 3,
            duration: 2.0,
            ..SceneGenerator::default()
        };
        let spec = gen.generate(42).unwrap();
        assert_eq!(spec, gen.generate(42).unwrap());
        let a = synthesize_scene(&spec, &MicArrayGeometry::default(), 32000, 3).unwrap();
        let b = synthesize_scene(&spec, &MicArrayGeometry::default(), 32000, 3).unwrap();
        assert_eq!(a.foa, b.foa);
        assert_eq!(a.mic, b.mic);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn noise_level_follows_snr() {
        let spec = SceneSpec {
            duration: 1.0,
            events: vec![event(0, 0.0, 1.0, 0.0)],
            noise_snr_db: 10.0,
            seed: 3,
        };
        let clean = SceneSpec {
            noise_snr_db: 200.0,
            ..spec.clone()
        };
        let noisy = synthesize_scene(&spec, &MicArrayGeometry::default(), 32000, 1).unwrap();
        let quiet = synthesize_scene(&clean, &MicArrayGeometry::default(), 32000, 1).unwrap();
        let diff: f64 = noisy
            .mic
            .channels()
            .iter()
            .zip(quiet.mic.channels())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)))
            .sum::<f64>()
            / (4.0 * 32000.0);
        let ratio_db = 10.0 * (quiet.mic.mean_power() / diff).log10();
        assert!((ratio_db - 10.0).abs() < 0.2, "{ratio_db}");
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(0, i)).collect();
        assert_eq!(s.len(), 1000);
        assert_ne!(derive_seed(1, 0), derive_seed(0, 1));
    }
}
