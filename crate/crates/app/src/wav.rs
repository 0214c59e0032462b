//! WAV decoding into interleaved PCM.

use std::io::Cursor;

use mtldr_core::features::audio::Pcm;

use crate::error::{AppError, Result};

/// Decodes 16-bit integer or 32-bit float WAV bytes. Integer samples are
/// scaled by 1/32768.
pub fn decode_wav(bytes: &[u8]) -> Result<Pcm> {
    let mut reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| AppError::Data(format!("wav: {e}")))?;
    let spec = reader.spec();
    let bad = |e: hound::Error| AppError::Data(format!("wav: {e}"));
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            reader.samples::<i16>().map(|s| s.map(|v| v as f64 / 32768.0)).collect::<Result<_, _>>().map_err(bad)?
        }
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(bad)?
        }
        (fmt, bits) => return Err(AppError::Data(format!("wav: unsupported {bits}-bit {fmt:?} samples"))),
    };
    Ok(Pcm { samples, channels: spec.channels, rate: spec.sample_rate })
}

/// Encodes mono samples in [-1, 1] as 16-bit PCM.
pub fn encode_wav(samples: &[f64], rate: u32) -> Vec<u8> {
    let spec = hound::WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).expect("in-memory wav writer");
        for &s in samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v).expect("in-memory write");
        }
        w.finalize().expect("in-memory finalize");
    }
    buf.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantization() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).sin() * 0.9).collect();
        let pcm = decode_wav(&encode_wav(&x, 8000)).unwrap();
        assert_eq!((pcm.channels, pcm.rate, pcm.samples.len()), (1, 8000, 100));
        for (a, b) in x.iter().zip(&pcm.samples) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(decode_wav(b"not a wav").is_err());
    }
}
