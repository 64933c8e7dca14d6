//! Training and evaluation inputs: rendered views (MVI) or precomputed patch
//! features (PVF), told apart by their magic bytes.

use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pcnn::data::{formats, EmbeddingSet, MviDataset, PvfDataset};
use pcnn::retrieval;
use pcnn::train::{train, TrainConfig, TrainReport};
use pcnn::{InputSpec, Pcnn};

pub enum Dataset {
    Views(MviDataset),
    Patches(PvfDataset),
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let mut magic = [0u8; 4];
        std::fs::File::open(path)
            .and_then(|mut f| f.read_exact(&mut magic))
            .with_context(|| format!("cannot read dataset {}", path.display()))?;
        let loaded = match &magic {
            m if m == formats::MVI_MAGIC => MviDataset::load(path).map(Dataset::Views),
            m if m == formats::PVF_MAGIC => PvfDataset::load(path).map(Dataset::Patches),
            other => bail!(
                "{} is neither a view (MVI1) nor a patch feature (PVF1) file (magic {:?})",
                path.display(),
                String::from_utf8_lossy(other)
            ),
        };
        loaded.with_context(|| format!("cannot load dataset {}", path.display()))
    }

    pub fn input(&self) -> Result<InputSpec> {
        Ok(match self {
            Dataset::Views(d) => {
                if d.height != d.width {
                    bail!("views must be square, got {}x{}", d.height, d.width);
                }
                InputSpec::Images { res: d.height }
            }
            Dataset::Patches(d) => InputSpec::Patches {
                grid: d.grid,
                dim: d.dim,
            },
        })
    }

    pub fn num_views(&self) -> usize {
        match self {
            Dataset::Views(d) => d.num_views,
            Dataset::Patches(d) => d.num_views,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Views(d) => d.samples.len(),
            Dataset::Patches(d) => d.entries.len(),
        }
    }

    pub fn num_classes(&self) -> usize {
        let labels: Box<dyn Iterator<Item = usize>> = match self {
            Dataset::Views(d) => Box::new(d.samples.iter().map(|s| s.label)),
            Dataset::Patches(d) => Box::new(d.entries.iter().map(|e| e.label)),
        };
        labels.max().map_or(0, |m| m + 1)
    }

    pub fn train(&self, model: &mut Pcnn, cfg: &TrainConfig) -> pcnn::Result<TrainReport> {
        match self {
            Dataset::Views(d) => train(model, &d.samples, cfg),
            Dataset::Patches(d) => train(model, &d.entries, cfg),
        }
    }

    pub fn embed(&self, model: &Pcnn) -> pcnn::Result<EmbeddingSet> {
        match self {
            Dataset::Views(d) => retrieval::embed(model, &d.samples),
            Dataset::Patches(d) => retrieval::embed(model, &d.entries),
        }
    }
}
