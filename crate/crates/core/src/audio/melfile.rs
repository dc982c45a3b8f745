//! Flat binary spectrogram file: `"S2STMEL1"`, then `T`, `80`, sample rate and
//! hop as little-endian `u32`, then `T x 80` little-endian `f32` row-major.

use std::io::{Read, Write};
use std::path::Path;

use super::{AudioError, MelOrigin, MelSpectrogram, Result, N_MELS};

pub const MEL_MAGIC: &[u8; 8] = b"S2STMEL1";

pub fn write_mel(mel: &MelSpectrogram, w: &mut impl Write) -> Result<()> {
    w.write_all(MEL_MAGIC)?;
    for v in [
        mel.n_frames() as u32,
        N_MELS as u32,
        mel.sample_rate,
        mel.hop_length,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in mel.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mel(r: &mut impl Read, origin: MelOrigin) -> Result<MelSpectrogram> {
    let trunc = |_| AudioError::Format("truncated mel file".into());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != MEL_MAGIC {
        return Err(AudioError::Format("bad magic".into()));
    }
    let mut hdr = [0u32; 4];
    for h in hdr.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(trunc)?;
        *h = u32::from_le_bytes(b);
    }
    let [t, c, sr, hop] = hdr;
    if c as usize != N_MELS {
        return Err(AudioError::Format(format!("expected {N_MELS} channels, got {c}")));
    }
    let mut raw = vec![0u8; t as usize * N_MELS * 4];
    r.read_exact(&mut raw).map_err(trunc)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    MelSpectrogram::new(data, sr, hop, origin)
}

pub fn write_mel_file(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_mel(mel, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn read_mel_file(path: impl AsRef<Path>, origin: MelOrigin) -> Result<MelSpectrogram> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_mel(&mut f, origin)
}
