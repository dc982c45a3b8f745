use std::path::Path;

use hound::{SampleFormat, WavSpec};

use super::{AudioError, Result, Waveform};

/// Reads a mono WAV file holding 16-bit PCM or 32-bit float samples.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AudioError::InvalidArgument(format!(
            "expected mono audio, got {} channels",
            spec.channels
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (fmt, bits) => {
            return Err(AudioError::InvalidArgument(format!(
                "unsupported sample format {fmt:?}/{bits} bit"
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 32-bit float mono WAV.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_and_pcm16() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.25, -0.5, 1.0], 8000).unwrap();
        write_wav(&p, &w).unwrap();
        assert_eq!(read_wav(&p).unwrap(), w);

        let p16 = dir.path().join("b.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&p16, spec).unwrap();
        for s in [0i16, 16384, -32768] {
            wr.write_sample(s).unwrap();
        }
        wr.finalize().unwrap();
        let back = read_wav(&p16).unwrap();
        assert_eq!(back.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(back.sample_rate, 16000);
    }

    #[test]
    fn stereo_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(AudioError::InvalidArgument(_))));
    }
}
