use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use super::{KSpaceData, RadialTrajectory};
use crate::error::{Error, Result};

pub const KSPACE_MAGIC: &[u8; 4] = b"KSP1";

/// Writes `magic, u32 n_spokes, u32 n_readout, u64 start_index, f64 angles[n_spokes],
/// f64 (re, im)[n_spokes * n_readout]`, all little-endian.
pub fn write_kspace(path: &Path, data: &KSpaceData) -> Result<()> {
    let traj = data.trajectory();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(20 + 8 * traj.n_spokes() + 16 * data.samples().len());
    buf.extend_from_slice(KSPACE_MAGIC);
    buf.extend_from_slice(&(traj.n_spokes() as u32).to_le_bytes());
    buf.extend_from_slice(&(traj.n_readout() as u32).to_le_bytes());
    buf.extend_from_slice(&traj.start_index().to_le_bytes());
    for a in traj.spoke_angles() {
        buf.extend_from_slice(&a.to_le_bytes());
    }
    for s in data.samples() {
        buf.extend_from_slice(&s.re.to_le_bytes());
        buf.extend_from_slice(&s.im.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_kspace(path: &Path) -> Result<KSpaceData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[0..4] != KSPACE_MAGIC {
        return Err(Error::format(path, "missing KSP1 header"));
    }
    let n_spokes = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n_readout = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let start_index = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let n_samples = n_spokes * n_readout;
    let expected = 20 + 8 * n_spokes + 16 * n_samples;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected, bytes.len()),
        ));
    }
    let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let angles = (0..n_spokes).map(|j| f64_at(20 + 8 * j)).collect();
    let base = 20 + 8 * n_spokes;
    let samples = (0..n_samples)
        .map(|m| Complex64::new(f64_at(base + 16 * m), f64_at(base + 16 * m + 8)))
        .collect();
    let traj = RadialTrajectory::from_angles(angles, n_readout, start_index)
        .map_err(|e| Error::format(path, e.to_string()))?;
    KSpaceData::new(samples, traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::golden_angle_trajectory;

    #[test]
    fn round_trip_is_bit_exact() {
        let traj = golden_angle_trajectory(3, 8, 42).unwrap();
        let samples = (0..traj.len())
            .map(|i| Complex64::new((i as f64).sqrt(), -(i as f64) / 7.0))
            .collect();
        let data = KSpaceData::new(samples, traj).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ksp");
        write_kspace(&p, &data).unwrap();
        let back = read_kspace(&p).unwrap();
        assert_eq!(back, data);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"KSP1");
        assert_eq!(bytes.len(), 20 + 3 * 8 + 24 * 16);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ksp");
        std::fs::write(&p, b"KSP1\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_kspace(&p), Err(Error::Format { .. })));
    }
}
