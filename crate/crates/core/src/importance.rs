//! Second-order Taylor importance of every adapter scalar.
//!
//! For scalar `φ_j` with mean per-example gradient `g_j` and diagonal Fisher
//! estimate `F_j` (mean squared per-example gradient), the estimated loss
//! change from removing it is `I_j = |g_j·φ_j − ½·F_j·φ_j²|`.

use std::fmt;
use std::path::Path;

use crate::binio::{FormatError, Reader, Writer};
use crate::corpus::LossSequence;
use crate::lora::AdapterSet;
use crate::model::{Model, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum ImportanceError {
    #[error("negative Fisher estimate {0}")]
    NegativeFisher(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("example {0} has no scored positions")]
    EmptyMask(String),
    #[error("table covers {found} addresses, adapters have {expected}")]
    AddressCount { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetTag {
    System1,
    System2,
}

impl DatasetTag {
    fn code(self) -> u8 {
        match self {
            DatasetTag::System1 => 1,
            DatasetTag::System2 => 2,
        }
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetTag::System1 => "system1",
            DatasetTag::System2 => "system2",
        })
    }
}

/// `|g·φ − ½·F·φ²|`.
pub fn score_param(phi: f64, g: f64, fisher: f64) -> Result<f64, ImportanceError> {
    if fisher < 0.0 || fisher.is_nan() {
        return Err(ImportanceError::NegativeFisher(fisher));
    }
    Ok((g * phi - 0.5 * fisher * phi * phi).abs())
}

/// Per-address `(g, F, I)` in parameter-address order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub tag: DatasetTag,
    /// Number of examples averaged.
    pub n: usize,
    pub g: Vec<f64>,
    pub fisher: Vec<f64>,
    pub importance: Vec<f64>,
}

impl ImportanceTable {
    /// Builds a table from the first two moments and a parameter snapshot.
    pub fn from_moments(
        tag: DatasetTag,
        n: usize,
        g: Vec<f64>,
        fisher: Vec<f64>,
        phi: &[f64],
    ) -> Result<Self, ImportanceError> {
        if g.len() != phi.len() || fisher.len() != phi.len() {
            return Err(ImportanceError::AddressCount {
                expected: phi.len(),
                found: g.len().min(fisher.len()),
            });
        }
        let importance = phi
            .iter()
            .zip(g.iter().zip(&fisher))
            .map(|(&p, (&gj, &fj))| score_param(p, gj, fj))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            tag,
            n,
            g,
            fisher,
            importance,
        })
    }

    pub fn len(&self) -> usize {
        self.importance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.importance.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.importance.iter().sum()
    }

    pub fn ensure_covers(&self, adapters: &AdapterSet) -> Result<(), ImportanceError> {
        if self.len() != adapters.len() {
            return Err(ImportanceError::AddressCount {
                expected: adapters.len(),
                found: self.len(),
            });
        }
        Ok(())
    }

    /// Scores recomputed from the stored moments and `phi`.
    pub fn recompute(&self, phi: &[f64]) -> Result<Vec<f64>, ImportanceError> {
        Ok(Self::from_moments(self.tag, self.n, self.g.clone(), self.fisher.clone(), phi)?.importance)
    }
}

/// Per-example adapter gradients reduced in dataset order: `g` is their
/// mean and `F` the mean of their squares. The model and adapters are only read.
pub fn accumulate(
    model: &Model,
    adapters: &AdapterSet,
    dataset: &[LossSequence],
    tag: DatasetTag,
) -> Result<ImportanceTable, ImportanceError> {
    if dataset.is_empty() {
        return Err(ImportanceError::EmptyDataset);
    }
    if let Some(bad) = dataset.iter().find(|s| !s.mask.iter().any(|&m| m)) {
        return Err(ImportanceError::EmptyMask(bad.id.clone()));
    }
    let n_params = adapters.len();
    let mut sum = vec![0.0; n_params];
    let mut sum_sq = vec![0.0; n_params];
    for seq in dataset {
        let (_, grad) = model.adapter_loss_grad(adapters, seq)?;
        for ((s, q), d) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(grad) {
            *s += d;
            *q += d * d;
        }
    }
    let n = dataset.len() as f64;
    let g = sum.into_iter().map(|s| s / n).collect();
    let fisher = sum_sq.into_iter().map(|q| q / n).collect();
    ImportanceTable::from_moments(tag, dataset.len(), g, fisher, adapters.values())
}

const MAGIC: [u8; 4] = *b"DSIM";
const VERSION: u32 = 1;

/// Header: magic, version, tag u8, N u64, address count u64; then `(g, F, I)`
/// triples of f64 per address.
pub fn encode(table: &ImportanceTable) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u8(table.tag.code());
    w.u64(table.n as u64);
    w.u64(table.len() as u64);
    for j in 0..table.len() {
        w.f64(table.g[j]);
        w.f64(table.fisher[j]);
        w.f64(table.importance[j]);
    }
    w.into_bytes()
}

pub fn decode(bytes: &[u8]) -> Result<ImportanceTable, FormatError> {
    let mut r = Reader::open(bytes, MAGIC, VERSION)?;
    let tag = match r.u8()? {
        1 => DatasetTag::System1,
        2 => DatasetTag::System2,
        other => return Err(FormatError::Invalid(format!("unknown dataset tag {other}"))),
    };
    let n = r.u64()? as usize;
    let count = r.u64()? as usize;
    r.require(count * 24)?;
    let (mut g, mut fisher, mut importance) = (
        Vec::with_capacity(count),
        Vec::with_capacity(count),
        Vec::with_capacity(count),
    );
    for _ in 0..count {
        g.push(r.f64()?);
        fisher.push(r.f64()?);
        importance.push(r.f64()?);
    }
    r.finish()?;
    if fisher.iter().any(|&f| f < 0.0) {
        return Err(FormatError::Invalid("negative Fisher entry".into()));
    }
    Ok(ImportanceTable {
        tag,
        n,
        g,
        fisher,
        importance,
    })
}

pub fn dump(table: &ImportanceTable, path: &Path) -> Result<(), FormatError> {
    crate::binio::write_atomic(path, &encode(table))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ImportanceTable, FormatError> {
    decode(&std::fs::read(path)?)
}

/// Loads a table and checks it against the adapter layout in use.
pub fn load_for(path: &Path, adapters: &AdapterSet) -> Result<ImportanceTable, ImportanceError> {
    let t = load(path)?;
    t.ensure_covers(adapters)?;
    Ok(t)
}

/// CSV with one row per address: `layer,site,matrix,index,g,F,I`.
pub fn export_csv(table: &ImportanceTable, adapters: &AdapterSet, path: &Path) -> Result<(), ImportanceError> {
    table.ensure_covers(adapters)?;
    let mut out = String::from("layer,site,matrix,index,g,F,I\n");
    for (j, addr) in adapters.addresses().enumerate() {
        out.push_str(&format!(
            "{},{},{:?},{},{},{},{}\n",
            addr.layer, addr.site, addr.matrix, addr.flat_index, table.g[j], table.fisher[j], table.importance[j]
        ));
    }
    crate::binio::write_atomic(path, out.as_bytes()).map_err(FormatError::from)?;
    Ok(())
}
