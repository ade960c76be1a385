//! Exhaustive squared-Euclidean search over a fixed set of embeddings.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::dataio::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Matrix};

#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    labels: Vec<String>,
    vectors: Matrix,
    /// Position of each id in ascending id order, the tie-break key.
    id_rank: Vec<u32>,
    by_id: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub label: String,
    pub distance: f64,
}

/// Hits in ascending distance, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    pub hits: Vec<Hit>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.id.as_str())
    }
}

pub fn build_index(records: &[EmbeddingRecord]) -> Result<EmbeddingIndex> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("cannot build an index from zero records"))?;
    let dim = first.vector.len();
    if dim == 0 {
        return Err(Error::invalid("cannot index zero-dimensional vectors"));
    }
    let mut by_id = HashMap::with_capacity(records.len());
    let mut data = Vec::with_capacity(records.len() * dim);
    for (i, r) in records.iter().enumerate() {
        if r.vector.len() != dim {
            return Err(Error::invalid(format!(
                "record {:?} has dimension {}, expected {dim}",
                r.id,
                r.vector.len()
            )));
        }
        if by_id.insert(r.id.clone(), i).is_some() {
            return Err(Error::invalid(format!("duplicate id {:?}", r.id)));
        }
        data.extend_from_slice(&r.vector);
    }
    let vectors = Matrix::from_vec(records.len(), dim, data)?;

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].id.cmp(&records[b].id));
    let mut id_rank = vec![0u32; records.len()];
    for (rank, &i) in order.iter().enumerate() {
        id_rank[i] = rank as u32;
    }

    Ok(EmbeddingIndex {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        labels: records.iter().map(|r| r.label.clone()).collect(),
        vectors,
        id_rank,
        by_id,
    })
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// The `k` nearest records to `query` (all of them if fewer remain),
    /// skipping `exclude_id` when given.
    pub fn query(&self, query: &[f64], k: usize, exclude_id: Option<&str>) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let exclude = exclude_id.and_then(|id| self.position(id));
        let ranked = self.rank(query, exclude, Some(k))?;
        Ok(RankedList {
            hits: ranked
                .into_iter()
                .map(|(distance, i)| Hit {
                    id: self.ids[i].clone(),
                    label: self.labels[i].clone(),
                    distance,
                })
                .collect(),
        })
    }

    /// `(distance, position)` pairs in ranking order, truncated to `limit`.
    pub(crate) fn rank(&self, query: &[f64], exclude: Option<usize>, limit: Option<usize>) -> Result<Vec<(f64, usize)>> {
        if query.len() != self.dim() {
            return Err(Error::invalid(format!(
                "query has dimension {}, index has {}",
                query.len(),
                self.dim()
            )));
        }
        let mut scored: Vec<(f64, usize)> = self
            .vectors
            .iter_rows()
            .enumerate()
            .filter(|&(i, _)| Some(i) != exclude)
            .map(|(i, row)| (sq_dist(query, row), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            a.0.total_cmp(&b.0).then(self.id_rank[a.1].cmp(&self.id_rank[b.1]))
        };
        match limit {
            Some(k) if k < scored.len() => {
                scored.select_nth_unstable_by(k - 1, cmp);
                scored.truncate(k);
            }
            _ => {}
        }
        scored.sort_unstable_by(cmp);
        Ok(scored)
    }
}
