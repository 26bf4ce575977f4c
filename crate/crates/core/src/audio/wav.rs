use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io)
            if matches!(io.kind(), std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::Other) =>
        {
            Error::Format(format!("{}: truncated or malformed: {}", path.display(), io))
        }
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::Format(format!("{}: {}", path.display(), msg)),
        hound::Error::Unsupported => Error::Unsupported(format!("{}: unsupported WAVE variant", path.display())),
        other => Error::Format(format!("{}: {}", path.display(), other)),
    }
}

/// Reads a 16-bit PCM RIFF/WAVE file. Multi-channel files contribute their
/// first channel. Samples are scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Unsupported(format!(
            "{}: {:?} {}-bit samples (need 16-bit PCM)",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let mut samples = Vec::with_capacity(reader.len() as usize / channels);
    for (i, s) in reader.samples::<i16>().enumerate() {
        let s = s.map_err(|e| map_hound(path, e))?;
        if i % channels == 0 {
            samples.push(s as f64 / 32768.0);
        }
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono 16-bit PCM. Amplitudes are rounded to the nearest step of
/// 1/32768 and saturate at the 16-bit range.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in w.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, spec: hound::WavSpec, samples: &[i32]) {
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            match spec.bits_per_sample {
                8 => w.write_sample(s as i8).unwrap(),
                16 => w.write_sample(s as i16).unwrap(),
                _ => w.write_sample(s).unwrap(),
            }
        }
        w.finalize().unwrap();
    }

    fn spec(channels: u16, rate: u32, bits: u16) -> hound::WavSpec {
        hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: bits,
            sample_format: hound::SampleFormat::Int,
        }
    }

    #[test]
    fn scaling_and_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, spec(1, 16000, 16), &[16384, -32768, 0, 32767]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples()[0], 0.5);
        assert_eq!(w.samples()[1], -1.0);
        assert_eq!(w.samples()[2], 0.0);
        assert_eq!(w.sample_rate(), 16000);
    }

    #[test]
    fn one_second_at_44k1() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        write_raw(&p, spec(1, 44100, 16), &vec![7; 44100]);
        assert_eq!(load_wav(&p).unwrap().len(), 44100);
    }

    #[test]
    fn stereo_takes_first_channel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        write_raw(&p, spec(2, 8000, 16), &[100, -5, 200, -6]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples(), &[100.0 / 32768.0, 200.0 / 32768.0]);
    }

    #[test]
    fn rejects_other_encodings_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.wav");
        write_raw(&p, spec(1, 8000, 24), &[1, 2, 3]);
        assert!(matches!(load_wav(&p), Err(Error::Unsupported(_))));

        let p = dir.path().join("e.wav");
        std::fs::write(&p, b"RIFF\x10\x00\x00\x00WAVEjunkjunkjunk").unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Format(_))));

        let p = dir.path().join("f.wav");
        std::fs::write(&p, b"not a wave file at all").unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Format(_))));

        assert!(matches!(load_wav(dir.path().join("missing.wav")), Err(Error::Io { .. })));
    }

    #[test]
    fn save_load_round_trip_is_exact_on_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.wav");
        let w = Waveform::new(vec![0.5, -1.0, 0.25, 3.0 / 32768.0], 16000).unwrap();
        save_wav(&p, &w).unwrap();
        assert_eq!(load_wav(&p).unwrap(), w);
    }
}
