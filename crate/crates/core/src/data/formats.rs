//! Little-endian binary interchange files: multi-view images (`MVI1`),
//! precomputed patch features (`PVF1`) and retrieval embeddings (`EMB1`).

use std::io::{ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MVI_MAGIC: &[u8; 4] = b"MVI1";
pub const PVF_MAGIC: &[u8; 4] = b"PVF1";
pub const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Reader that tracks its byte offset so format errors can point at it.
pub(crate) struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        ByteReader { inner, offset: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(Error::Format {
                offset: self.offset,
                msg: format!("truncated: needed {} more bytes", buf.len()),
            }),
            Err(e) => Err(e.into()),
        }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.bytes(4)?;
        if got != expected {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format {
                offset: self.offset,
                msg: "trailing bytes after last record".into(),
            }),
        }
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s(w: &mut impl Write, vals: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    Ok(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// One 3D model as `N` ordered grayscale views of `res x res` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample {
    pub label: usize,
    pub model_id: u32,
    /// View-major, then row-major pixels in `[0, 1]`.
    pub pixels: Vec<f32>,
}

impl MultiViewSample {
    pub fn view<'a>(&'a self, z: usize, res: usize) -> &'a [f32] {
        &self.pixels[z * res * res..(z + 1) * res * res]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MviDataset {
    pub num_views: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<MultiViewSample>,
}

impl MviDataset {
    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let per = self.num_views * self.height * self.width;
        w.write_all(MVI_MAGIC)?;
        for v in [self.samples.len(), self.num_views, self.height, self.width] {
            put_u32(&mut w, v)?;
        }
        for s in &self.samples {
            if s.pixels.len() != per {
                return Err(Error::Config(format!(
                    "model {} has {} pixels, expected {per}",
                    s.model_id,
                    s.pixels.len()
                )));
            }
            put_u32(&mut w, s.label)?;
            put_u32(&mut w, s.model_id as usize)?;
            put_f32s(&mut w, &s.pixels)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read(r: impl Read) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.magic(MVI_MAGIC)?;
        let count = r.u32()? as usize;
        let (num_views, height, width) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let per = num_views * height * width;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let label = r.u32()? as usize;
            let model_id = r.u32()?;
            let pixels = r.f32s(per)?;
            samples.push(MultiViewSample {
                label,
                model_id,
                pixels,
            });
        }
        r.expect_end()?;
        Ok(MviDataset {
            num_views,
            height,
            width,
            samples,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(open(path.as_ref())?)
    }
}

/// Externally computed patch features for one model, `N x P x P x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEntry {
    pub label: usize,
    pub model_id: u32,
    pub features: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PvfDataset {
    pub num_views: usize,
    pub grid: usize,
    pub dim: usize,
    pub entries: Vec<PatchEntry>,
}

impl PvfDataset {
    /// Patches per model, `P * P * N`.
    pub fn patches_per_model(&self) -> usize {
        self.grid * self.grid * self.num_views
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let per = self.patches_per_model() * self.dim;
        w.write_all(PVF_MAGIC)?;
        for v in [self.entries.len(), self.num_views, self.grid, self.dim] {
            put_u32(&mut w, v)?;
        }
        for e in &self.entries {
            if e.features.len() != per {
                return Err(Error::Config(format!(
                    "model {} has {} values, expected {per}",
                    e.model_id,
                    e.features.len()
                )));
            }
            put_u32(&mut w, e.label)?;
            put_u32(&mut w, e.model_id as usize)?;
            put_f32s(&mut w, &e.features)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read(r: impl Read) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.magic(PVF_MAGIC)?;
        let count = r.u32()? as usize;
        let (num_views, grid, dim) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let per = num_views * grid * grid * dim;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let label = r.u32()? as usize;
            let model_id = r.u32()?;
            let features = r.f32s(per)?;
            entries.push(PatchEntry {
                label,
                model_id,
                features,
            });
        }
        r.expect_end()?;
        Ok(PvfDataset {
            num_views,
            grid,
            dim,
            entries,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(open(path.as_ref())?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub model_id: u32,
    pub label: usize,
    pub predicted_class: usize,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(EMB_MAGIC)?;
        put_u32(&mut w, self.records.len())?;
        put_u32(&mut w, self.dim)?;
        for rec in &self.records {
            if rec.embedding.len() != self.dim {
                return Err(Error::Config(format!(
                    "embedding of model {} has dim {}, expected {}",
                    rec.model_id,
                    rec.embedding.len(),
                    self.dim
                )));
            }
            put_u32(&mut w, rec.label)?;
            put_u32(&mut w, rec.model_id as usize)?;
            put_u32(&mut w, rec.predicted_class)?;
            put_f32s(&mut w, &rec.embedding)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read(r: impl Read) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.magic(EMB_MAGIC)?;
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let label = r.u32()? as usize;
            let model_id = r.u32()?;
            let predicted_class = r.u32()? as usize;
            let embedding = r.f32s(dim)?;
            records.push(EmbeddingRecord {
                model_id,
                label,
                predicted_class,
                embedding,
            });
        }
        r.expect_end()?;
        Ok(EmbeddingSet { dim, records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(open(path.as_ref())?)
    }
}
