//! Bit-exact binary persistence for frame sets and label sidecars, plus
//! chronological splits, class balancing, and seeded shuffles.
//!
//! Container layout (all little-endian):
//! magic "XEVD" | version u16 | nx u32 | ny u32 | frame_count u64 |
//! sample_dt f64 | dtype u8 (0 = f32 scalar) | t0 f64 |
//! source_tag (u32 length + UTF-8) | frames as nx*ny f32, row-major.

use crate::labeling::{WhenLabels, WhereEntry, WhereLabels};
use crate::sim::FrameSet;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

pub const CONTAINER_MAGIC: &[u8; 4] = b"XEVD";
pub const CONTAINER_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("empty split: train_fraction {fraction} leaves {side} side empty")]
    EmptySplit { fraction: f64, side: &'static str },
    #[error("label frame_index {index} out of range for {frame_count} frames")]
    LabelOutOfRange { index: usize, frame_count: usize },
    #[error("balancing needs at least 2 classes present, found {0}")]
    TooFewClasses(usize),
}

fn format_err(offset: u64, message: impl Into<String>) -> StoreError {
    StoreError::Format {
        offset,
        message: message.into(),
    }
}

/// Header size in bytes for a given source tag.
pub fn header_len(source_tag: &str) -> u64 {
    4 + 2 + 4 + 4 + 8 + 8 + 1 + 8 + 4 + source_tag.len() as u64
}

pub fn write_frames(frames: &FrameSet, path: &Path) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    let (ny, nx) = frames.frame_shape();
    w.write_all(CONTAINER_MAGIC)?;
    w.write_u16::<LittleEndian>(CONTAINER_VERSION)?;
    w.write_u32::<LittleEndian>(nx as u32)?;
    w.write_u32::<LittleEndian>(ny as u32)?;
    w.write_u64::<LittleEndian>(frames.frames.len() as u64)?;
    w.write_f64::<LittleEndian>(frames.sample_dt)?;
    w.write_u8(DTYPE_F32)?;
    w.write_f64::<LittleEndian>(frames.t0)?;
    w.write_u32::<LittleEndian>(frames.source_tag.len() as u32)?;
    w.write_all(frames.source_tag.as_bytes())?;
    for frame in &frames.frames {
        debug_assert_eq!(frame.dim(), (ny, nx));
        for &v in frame.as_slice().expect("row-major frame") {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<FrameSet, StoreError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| format_err(0, "truncated before magic"))?;
    if &magic != CONTAINER_MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}")));
    }
    let version = r
        .read_u16::<LittleEndian>()
        .map_err(|_| format_err(4, "truncated version"))?;
    if version != CONTAINER_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let nx = r.read_u32::<LittleEndian>().map_err(|_| format_err(6, "truncated nx"))? as usize;
    let ny = r.read_u32::<LittleEndian>().map_err(|_| format_err(10, "truncated ny"))? as usize;
    let frame_count = r
        .read_u64::<LittleEndian>()
        .map_err(|_| format_err(14, "truncated frame_count"))? as usize;
    let sample_dt = r
        .read_f64::<LittleEndian>()
        .map_err(|_| format_err(22, "truncated sample_dt"))?;
    let dtype = r.read_u8().map_err(|_| format_err(30, "truncated dtype"))?;
    if dtype != DTYPE_F32 {
        return Err(format_err(30, format!("unsupported dtype code {dtype}")));
    }
    let t0 = r
        .read_f64::<LittleEndian>()
        .map_err(|_| format_err(31, "truncated t0"))?;
    let tag_len = r
        .read_u32::<LittleEndian>()
        .map_err(|_| format_err(39, "truncated source_tag length"))? as usize;
    let mut tag_bytes = vec![0u8; tag_len];
    r.read_exact(&mut tag_bytes)
        .map_err(|_| format_err(43, "truncated source_tag"))?;
    let source_tag = String::from_utf8(tag_bytes)
        .map_err(|_| format_err(43, "source_tag is not valid UTF-8"))?;
    if nx == 0 || ny == 0 || frame_count == 0 {
        return Err(format_err(6, "zero nx, ny, or frame_count"));
    }

    let header = header_len(&source_tag);
    let mut frames = Vec::with_capacity(frame_count);
    let mut buf = vec![0u8; nx * ny * 4];
    for i in 0..frame_count {
        let offset = header + (i * nx * ny * 4) as u64;
        r.read_exact(&mut buf)
            .map_err(|_| format_err(offset, format!("truncated frame {i} of {frame_count}")))?;
        let mut frame = Vec::with_capacity(nx * ny);
        for chunk in buf.chunks_exact(4) {
            frame.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        frames.push(Array2::from_shape_vec((ny, nx), frame).unwrap());
    }
    // Declared count must match payload exactly.
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err(
            header + (frame_count * nx * ny * 4) as u64,
            "trailing bytes after declared frames",
        ));
    }
    Ok(FrameSet {
        frames,
        sample_dt,
        t0,
        source_tag,
    })
}

/// Plain-text label sidecar: header line, then `frame_index,label,duplicate`
/// per entry. Byte-stable for a given entry list.
pub fn write_sidecar(entries: &[WhereEntry], path: &Path) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "frame_index,label,duplicate")?;
    for e in entries {
        writeln!(
            w,
            "{},{},{}",
            e.frame_index,
            e.class_label,
            u8::from(e.duplicate)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Vec<WhereEntry>, StoreError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "frame_index,label,duplicate" {
        return Err(format_err(0, format!("bad sidecar header {header:?}")));
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let mut parts = line.split(',');
        let parse = |s: Option<&str>| -> Result<usize, StoreError> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| format_err(0, format!("bad sidecar line {}", lineno + 2)))
        };
        let frame_index = parse(parts.next())?;
        let class_label = parse(parts.next())?;
        let duplicate = parse(parts.next())? != 0;
        entries.push(WhereEntry {
            frame_index,
            class_label,
            duplicate,
        });
    }
    Ok(entries)
}

/// Frames paired with integer labels and provenance; entries keep frame
/// order unless explicitly shuffled.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub frames: Arc<FrameSet>,
    pub entries: Vec<WhereEntry>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        frames: Arc<FrameSet>,
        entries: Vec<WhereEntry>,
        n_classes: usize,
    ) -> Result<Self, StoreError> {
        let frame_count = frames.frames.len();
        for e in &entries {
            if e.frame_index >= frame_count {
                return Err(StoreError::LabelOutOfRange {
                    index: e.frame_index,
                    frame_count,
                });
            }
        }
        Ok(LabeledDataset {
            frames,
            entries,
            n_classes,
        })
    }

    pub fn from_when(frames: Arc<FrameSet>, labels: &WhenLabels) -> Result<Self, StoreError> {
        let entries = labels
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| WhereEntry {
                frame_index: i,
                class_label: l as usize,
                duplicate: false,
            })
            .collect();
        Self::new(frames, entries, 2)
    }

    pub fn from_where(frames: Arc<FrameSet>, labels: &WhereLabels) -> Result<Self, StoreError> {
        Self::new(frames, labels.entries.clone(), labels.n_classes)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.n_classes];
        for e in &self.entries {
            hist[e.class_label] += 1;
        }
        hist
    }

    /// Materializes the entries as a (len, 1, ny, nx) tensor plus class
    /// labels. `scale` divides every pixel — pass the same value for train
    /// and test splits so they share a normalization.
    pub fn to_tensor(&self, scale: f32) -> (crate::net::Tensor4<f32>, Vec<usize>) {
        assert!(scale > 0.0 && scale.is_finite(), "bad scale {scale}");
        let (ny, nx) = self.frames.frame_shape();
        let mut data = ndarray::Array4::zeros((self.entries.len(), 1, ny, nx));
        let mut labels = Vec::with_capacity(self.entries.len());
        for (slot, e) in self.entries.iter().enumerate() {
            let frame = &self.frames.frames[e.frame_index];
            data.index_axis_mut(ndarray::Axis(0), slot)
                .index_axis_move(ndarray::Axis(0), 0)
                .assign(&frame.mapv(|v| v / scale));
            labels.push(e.class_label);
        }
        (crate::net::Tensor4 { data }, labels)
    }

    fn with_entries(&self, entries: Vec<WhereEntry>) -> LabeledDataset {
        LabeledDataset {
            frames: Arc::clone(&self.frames),
            entries,
            n_classes: self.n_classes,
        }
    }
}

/// Splits by entry order (never randomly) to avoid temporal leakage;
/// boundary index is floor(count * fraction).
pub fn chronological_split(
    ds: &LabeledDataset,
    train_fraction: f64,
) -> Result<(LabeledDataset, LabeledDataset), StoreError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(StoreError::EmptySplit {
            fraction: train_fraction,
            side: "either",
        });
    }
    let boundary = (ds.len() as f64 * train_fraction).floor() as usize;
    if boundary == 0 {
        return Err(StoreError::EmptySplit {
            fraction: train_fraction,
            side: "train",
        });
    }
    if boundary >= ds.len() {
        return Err(StoreError::EmptySplit {
            fraction: train_fraction,
            side: "test",
        });
    }
    let train = ds.with_entries(ds.entries[..boundary].to_vec());
    let test = ds.with_entries(ds.entries[boundary..].to_vec());
    Ok((train, test))
}

/// Downsamples majority classes uniformly at random (seeded) to the
/// minority count; order of surviving entries is preserved.
pub fn balance_downsample(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset, StoreError> {
    let hist = ds.class_histogram();
    let present: Vec<usize> = hist.iter().copied().filter(|&c| c > 0).collect();
    if present.len() < 2 {
        return Err(StoreError::TooFewClasses(present.len()));
    }
    let minority = present.iter().copied().min().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; ds.len()];
    for (class, &count) in hist.iter().enumerate() {
        if count <= minority {
            continue;
        }
        let positions: Vec<usize> = ds
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.class_label == class)
            .map(|(i, _)| i)
            .collect();
        let mut chosen = positions.clone();
        chosen.shuffle(&mut rng);
        for &drop in &chosen[minority..] {
            keep[drop] = false;
        }
    }
    let entries = ds
        .entries
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| *e)
        .collect();
    Ok(ds.with_entries(entries))
}

/// Deterministic Fisher-Yates permutation of the entries.
pub fn seeded_shuffle(ds: &LabeledDataset, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = ds.entries.clone();
    entries.shuffle(&mut rng);
    ds.with_entries(entries)
}
