use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::Waveform;
use crate::error::{ensure, Error, Result};

/// Writes 32-bit float WAV, interleaved.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: w.n_channels() as u16,
        sample_rate: w.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut wr = WavWriter::new(&mut buf, spec)?;
        for i in 0..w.len() {
            for c in w.channels() {
                wr.write_sample(c[i])?;
            }
        }
        wr.finalize()?;
    }
    super::atomic_write(path, &buf.into_inner())
}

/// Reads float or integer PCM WAV into `[-1, 1]` floats.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = super::read_bytes(path)?;
    let mut rd = WavReader::new(std::io::Cursor::new(bytes))?;
    let spec = rd.spec();
    let n = spec.channels as usize;
    ensure!(
        n > 0,
        UnsupportedAudio,
        "{} has no channels",
        path.display()
    );
    let samples: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => rd.samples::<f32>().collect::<Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
            rd.samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()?
        }
    };
    if samples.len() % n != 0 {
        return Err(Error::Corrupt {
            path: path.into(),
            reason: "sample count is not a multiple of the channel count".into(),
        });
    }
    let frames = samples.len() / n;
    let mut channels = vec![Vec::with_capacity(frames); n];
    for (k, s) in samples.into_iter().enumerate() {
        channels[k % n].push(s);
    }
    Waveform::new(channels, spec.sample_rate)
        .map_err(|e| Error::UnsupportedAudio(format!("{}: {e}", path.display())))
}
