//! Datasets, the synthetic cluster generator and the on-disk formats:
//! `TDML` embedding files, CSV import/export and model checkpoints.

mod binary;
mod checkpoint;
mod csv_io;
mod embeddings;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use csv_io::{export_csv, import_csv};
pub use embeddings::{read_embeddings, write_embeddings, EMBEDDING_MAGIC, EMBEDDING_VERSION};

use crate::error::{Error, Result};
use crate::numerics::FeatureMap;
use crate::ClassId;

/// Input payload of one record.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Vector(Vec<f64>),
    Map(FeatureMap),
}

impl Payload {
    /// Number of scalar features.
    pub fn len(&self) -> usize {
        match self {
            Payload::Vector(v) => v.len(),
            Payload::Map(m) => m.as_slice().len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Payload::Vector(v) => v,
            Payload::Map(m) => m.as_slice(),
        }
    }
}

/// A labeled input sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub label: String,
    pub payload: Payload,
}

impl Record {
    pub fn new(id: impl Into<String>, label: impl Into<String>, payload: Payload) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            payload,
        }
    }
}

/// A labeled vector as stored in embedding files.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: String,
    pub vector: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, label: impl Into<String>, vector: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            vector,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub split: Split,
}

impl Dataset {
    /// Checks id uniqueness and payload uniformity.
    pub fn new(records: Vec<Record>, split: Split) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::invalid(format!("duplicate record id {:?}", r.id)));
            }
        }
        if let Some(first) = records.first() {
            let uniform = records.iter().all(|r| match (&first.payload, &r.payload) {
                (Payload::Vector(a), Payload::Vector(b)) => a.len() == b.len(),
                (Payload::Map(a), Payload::Map(b)) => a.channels() == b.channels(),
                _ => false,
            });
            if !uniform {
                return Err(Error::invalid("records mix payload kinds or dimensions"));
            }
        }
        Ok(Self { records, split })
    }

    pub fn from_embeddings(records: Vec<EmbeddingRecord>, split: Split) -> Result<Self> {
        let records = records
            .into_iter()
            .map(|r| Record::new(r.id, r.label, Payload::Vector(r.vector)))
            .collect();
        Self::new(records, split)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Dense class ids in sorted label order, plus the label table.
    pub fn class_ids(&self) -> (Vec<ClassId>, Vec<String>) {
        class_ids(self.records.iter().map(|r| r.label.as_str()))
    }

    /// Reshapes vector payloads of length `h·w·c` into `h×w×c` maps.
    pub fn reshape_to_maps(&self, height: usize, width: usize) -> Result<Dataset> {
        let records = self
            .records
            .iter()
            .map(|r| {
                let Payload::Vector(v) = &r.payload else {
                    return Err(Error::invalid(format!("record {:?} is already a map", r.id)));
                };
                let cells = height * width;
                if cells == 0 || v.len() % cells != 0 {
                    return Err(Error::invalid(format!(
                        "record {:?}: length {} does not divide into a {height}x{width} grid",
                        r.id,
                        v.len()
                    )));
                }
                let map = FeatureMap::new(height, width, v.len() / cells, v.clone())?;
                Ok(Record::new(r.id.clone(), r.label.clone(), Payload::Map(map)))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(records, self.split)
    }

    /// Flattens every payload into an embedding record.
    pub fn to_embedding_records(&self) -> Vec<EmbeddingRecord> {
        self.records
            .iter()
            .map(|r| EmbeddingRecord::new(r.id.clone(), r.label.clone(), r.payload.as_slice().to_vec()))
            .collect()
    }

    pub fn load(path: &Path, split: Split) -> Result<Self> {
        Self::from_embeddings(read_embeddings(path)?, split)
    }
}

/// Maps labels to dense ids ordered by label.
pub fn class_ids<'a>(labels: impl Iterator<Item = &'a str> + Clone) -> (Vec<ClassId>, Vec<String>) {
    let mut table: BTreeMap<&str, ClassId> = labels.clone().map(|l| (l, 0)).collect();
    for (i, v) in table.values_mut().enumerate() {
        *v = i as ClassId;
    }
    let ids = labels.map(|l| table[l]).collect();
    (ids, table.into_keys().map(str::to_owned).collect())
}

/// Parameters of [`generate_clusters`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Radius of the sphere the class centers are drawn from.
    pub separation: f64,
    /// Standard deviation of the isotropic noise around each center.
    pub spread: f64,
    pub seed: u64,
    /// Fraction of each class assigned to the training split.
    pub split_fraction: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            per_class: 100,
            dim: 32,
            separation: 4.0,
            spread: 1.0,
            seed: 7,
            split_fraction: 0.5,
        }
    }
}

/// Gaussian clusters around centers uniform on a sphere, split per class
/// into training and test sets.
pub fn generate_clusters(spec: &ClusterSpec) -> Result<(Dataset, Dataset)> {
    if spec.num_classes < 2 || spec.per_class < 2 || spec.dim == 0 {
        return Err(Error::invalid(
            "need at least 2 classes, 2 records per class and a positive dimension",
        ));
    }
    if !(spec.split_fraction > 0.0 && spec.split_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction must lie strictly between 0 and 1, got {}",
            spec.split_fraction
        )));
    }
    if !(spec.separation >= 0.0 && spec.spread >= 0.0) {
        return Err(Error::invalid("separation and spread must be non-negative"));
    }
    let noise = Normal::new(0.0, spec.spread).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_train = ((spec.per_class as f64 * spec.split_fraction).round() as usize).clamp(1, spec.per_class - 1);
    let width = (spec.num_classes - 1).to_string().len().max(2);

    let mut train = Vec::with_capacity(spec.num_classes * n_train);
    let mut test = Vec::with_capacity(spec.num_classes * (spec.per_class - n_train));
    for class in 0..spec.num_classes {
        let center = loop {
            let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = crate::numerics::norm(&v);
            if n > 1e-9 {
                break v.into_iter().map(|x| x * spec.separation / n).collect::<Vec<f64>>();
            }
        };
        let label = format!("c{class:0width$}");
        for i in 0..spec.per_class {
            let vector = center.iter().map(|c| c + noise.sample(&mut rng)).collect();
            let record = Record::new(format!("{label}-{i:04}"), label.clone(), Payload::Vector(vector));
            if i < n_train {
                train.push(record);
            } else {
                test.push(record);
            }
        }
    }
    Ok((Dataset::new(train, Split::Train)?, Dataset::new(test, Split::Test)?))
}
