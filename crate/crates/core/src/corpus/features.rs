//! Per-clip feature grids and the `CTFV` binary format.
//!
//! Layout (little-endian): magic `CTFV`, version `u32`, then `N`, `H`, `W`, `C`
//! as `u32`, followed by `N·H·W·C` `f32` values, frame-major and row-major
//! within each frame.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CTFV";
pub const VERSION: u32 = 1;
const HEADER_BYTES: u64 = 24;

/// Longest clip kept by the loader; longer clips are uniformly subsampled.
pub const N_MAX: usize = 40;

/// One video as `N` spatial feature grids of shape `H × W × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClip {
    pub id: String,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureClip {
    pub fn new(id: impl Into<String>, frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::usage("a clip needs at least one frame"));
        }
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim(format!("degenerate frame shape {height}×{width}×{channels}")));
        }
        if data.len() != frames * height * width * channels {
            return Err(Error::dim(format!(
                "{frames} frames of {height}×{width}×{channels} need {} values, got {}",
                frames * height * width * channels,
                data.len()
            )));
        }
        Ok(FeatureClip { id: id.into(), frames, height, width, channels, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, n: usize) -> &[f32] {
        let len = self.frame_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Frame `n` as a `[H, W, C]` tensor.
    pub fn frame_tensor<T: Scalar>(&self, n: usize) -> Tensor<T> {
        let data = self.frame(n).iter().map(|&v| T::of(v as f64)).collect();
        Tensor::new(vec![self.height, self.width, self.channels], data).expect("validated clip")
    }

    /// Keeps the frames at `indices`, in order.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            if i >= self.frames {
                return Err(Error::dim(format!("frame {i} of a {}-frame clip", self.frames)));
            }
            data.extend_from_slice(self.frame(i));
        }
        Self::new(self.id.clone(), indices.len(), self.height, self.width, self.channels, data)
    }
}

/// Frame indices `floor(i·n / n_max)` for `i < n_max` when `n > n_max`, else all frames.
pub fn subsample_indices(n: usize, n_max: usize) -> Vec<usize> {
    if n <= n_max {
        (0..n).collect()
    } else {
        (0..n_max).map(|i| i * n / n_max).collect()
    }
}

pub fn write_features<W: Write>(clip: &FeatureClip, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [clip.frames, clip.height, clip.width, clip.channels] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for &v in &clip.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a `CTFV` stream. Nothing is returned unless the whole payload is present.
pub fn read_features<R: Read>(mut r: R, id: impl Into<String>) -> Result<FeatureClip> {
    let mut header = [0u8; HEADER_BYTES as usize];
    let got = read_full(&mut r, &mut header)?;
    if got < 4 || &header[..4] != MAGIC {
        return Err(Error::format(0, "bad magic (expected CTFV)"));
    }
    if got < HEADER_BYTES as usize {
        return Err(Error::format(got as u64, "truncated header"));
    }
    let field = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = field(0);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let (n, h, w, c) = (field(1) as usize, field(2) as usize, field(3) as usize, field(4) as usize);
    if n == 0 || h == 0 || w == 0 || c == 0 {
        return Err(Error::format(8, format!("degenerate extents {n}×{h}×{w}×{c}")));
    }
    let count = n * h * w * c;
    let mut raw = vec![0u8; count * 4];
    let got = read_full(&mut r, &mut raw)?;
    if got < raw.len() {
        return Err(Error::format(HEADER_BYTES + got as u64, format!("truncated payload: expected {} bytes", raw.len())));
    }
    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    FeatureClip::new(id, n, h, w, c, data)
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            k => filled += k,
        }
    }
    Ok(filled)
}

/// Loads a feature file, subsampling to at most `N_MAX` frames.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureClip> {
    let path = path.as_ref();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let clip = read_features(BufReader::new(File::open(path)?), id)?;
    if clip.frames > N_MAX {
        clip.select_frames(&subsample_indices(clip.frames, N_MAX))
    } else {
        Ok(clip)
    }
}

pub fn save_features(clip: &FeatureClip, path: impl AsRef<Path>) -> Result<()> {
    write_features(clip, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(n: usize) -> FeatureClip {
        let data = (0..n * 2 * 2 * 3).map(|i| (i as f32).sin() * 1e3).collect();
        FeatureClip::new("c", n, 2, 2, 3, data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = clip(8);
        let mut buf = Vec::new();
        write_features(&c, &mut buf).unwrap();
        let back = read_features(&buf[..], "c").unwrap();
        assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back, c);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut buf = Vec::new();
        write_features(&clip(2), &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match read_features(&buf[..], "c") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, buf.len() as u64),
            other => panic!("expected format error, got {other:?}"),
        }
        match read_features(&buf[..10], "c") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut buf = Vec::new();
        write_features(&clip(1), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_features(&bad[..], "c"), Err(Error::Format { offset: 0, .. })));
        let mut bad = buf;
        bad[4] = 9;
        assert!(matches!(read_features(&bad[..], "c"), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn subsampling_uses_floor_striding() {
        assert_eq!(subsample_indices(5, 40), vec![0, 1, 2, 3, 4]);
        let idx = subsample_indices(100, 40);
        assert_eq!(idx.len(), 40);
        assert_eq!(&idx[..4], &[0, 2, 5, 7]);
        assert_eq!(idx[39], 97);
    }

    #[test]
    fn long_clips_are_subsampled_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.ctfv");
        let c = clip(50);
        save_features(&c, &path).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(loaded.frames(), N_MAX);
        assert_eq!(loaded.frame(1), c.frame(50 / 40));
        assert_eq!(loaded.id, "long");
    }
}
