//! Retrieval quality: ANMRR, mean average precision and precision at k.
//!
//! Every record in the query set is ranked against the whole database with
//! itself removed, so a query's ground-truth count NG is the number of other
//! database records sharing its label.
//!
//! ANMRR follows the MPEG-7 definition. For a query with NG relevant items
//! and cut-off `K = min(4·NG, 2·GTM)`, a relevant item at rank `r` scores
//! `r` when `r ≤ K` and `1.25·K` otherwise. With AVR the mean score,
//! `NMRR = (AVR − 0.5 − NG/2) / (1.25·K − 0.5 − NG/2)` and ANMRR is its mean
//! over queries. GTM is the largest NG in the query set unless fixed.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataio::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::retrieval::EmbeddingIndex;

/// The precision cut-offs reported by [`evaluate`].
pub const CUTOFFS: [usize; 5] = [5, 10, 50, 100, 1000];

/// Ranking outcome of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query_id: String,
    pub query_label: String,
    /// 1-based ranks of the relevant candidates, ascending.
    relevant_ranks: Vec<usize>,
    candidates: usize,
}

impl QueryOutcome {
    /// Builds an outcome from the labels of the full ranked candidate list.
    pub fn from_ranked_labels<S: AsRef<str>>(query_id: impl Into<String>, query_label: impl Into<String>, ranked: &[S]) -> Self {
        let query_label = query_label.into();
        let relevant_ranks = ranked
            .iter()
            .enumerate()
            .filter(|(_, l)| l.as_ref() == query_label)
            .map(|(i, _)| i + 1)
            .collect();
        Self {
            query_id: query_id.into(),
            query_label,
            relevant_ranks,
            candidates: ranked.len(),
        }
    }

    /// Builds an outcome from per-rank relevance flags.
    pub fn from_relevance(query_id: impl Into<String>, query_label: impl Into<String>, relevant: &[bool]) -> Self {
        Self {
            query_id: query_id.into(),
            query_label: query_label.into(),
            relevant_ranks: relevant.iter().enumerate().filter(|(_, &r)| r).map(|(i, _)| i + 1).collect(),
            candidates: relevant.len(),
        }
    }

    /// Ground-truth count NG.
    pub fn ground_truth(&self) -> usize {
        self.relevant_ranks.len()
    }

    pub fn candidates(&self) -> usize {
        self.candidates
    }

    pub fn relevant_ranks(&self) -> &[usize] {
        &self.relevant_ranks
    }
}

/// Relevant items among the first `k` results, divided by `k` (not by the
/// list length or NG).
pub fn precision_at_k(outcome: &QueryOutcome, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let hits = outcome.relevant_ranks.partition_point(|&r| r <= k);
    hits as f64 / k as f64
}

pub fn average_precision(outcome: &QueryOutcome) -> Result<f64> {
    let ng = outcome.ground_truth();
    if ng == 0 {
        return Err(Error::UndefinedQuery {
            ids: vec![outcome.query_id.clone()],
        });
    }
    let sum: f64 = outcome
        .relevant_ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| (i + 1) as f64 / r as f64)
        .sum();
    Ok(sum / ng as f64)
}

/// Constants of the NMRR cut-off and penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnmrrParams {
    /// `K` is at most this multiple of NG.
    pub ng_factor: usize,
    /// `K` is at most this multiple of GTM; `None` drops the GTM bound.
    pub gtm_factor: Option<usize>,
    /// Score assigned to relevant items ranked beyond `K`, as a multiple of `K`.
    pub miss_penalty: f64,
}

impl Default for AnmrrParams {
    fn default() -> Self {
        Self {
            ng_factor: 4,
            gtm_factor: Some(2),
            miss_penalty: 1.25,
        }
    }
}

pub fn nmrr(outcome: &QueryOutcome, gtm: usize, params: &AnmrrParams) -> Result<f64> {
    let ng = outcome.ground_truth();
    if ng == 0 {
        return Err(Error::UndefinedQuery {
            ids: vec![outcome.query_id.clone()],
        });
    }
    if gtm < ng {
        return Err(Error::invalid(format!("GTM {gtm} is below the query's NG {ng}")));
    }
    let mut cutoff = params.ng_factor * ng;
    if let Some(f) = params.gtm_factor {
        cutoff = cutoff.min(f * gtm);
    }
    let k = cutoff as f64;
    let penalty = params.miss_penalty * k;
    let total: f64 = outcome
        .relevant_ranks
        .iter()
        .map(|&r| if r <= cutoff { r as f64 } else { penalty })
        .sum();
    let ng_f = ng as f64;
    let avr = total / ng_f;
    let mrr = avr - 0.5 - 0.5 * ng_f;
    let denom = penalty - 0.5 - 0.5 * ng_f;
    if denom <= 0.0 {
        return Err(Error::invalid(format!("NMRR cut-off {cutoff} is too small for NG {ng}")));
    }
    Ok((mrr / denom).clamp(0.0, 1.0))
}

/// How GTM is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GtmScope {
    /// Largest NG over the evaluated queries.
    #[default]
    QuerySet,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub anmrr: AnmrrParams,
    pub gtm: GtmScope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub anmrr: f64,
    pub map: f64,
    /// Mean precision at each of [`CUTOFFS`].
    pub p_at: BTreeMap<usize, f64>,
    pub per_class_anmrr: BTreeMap<String, f64>,
    pub queries: usize,
    pub gtm: usize,
}

impl MetricsReport {
    /// Flat `name value` lines with four decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ANMRR {:.4}", self.anmrr);
        let _ = writeln!(out, "mAP {:.4}", self.map);
        for (k, v) in &self.p_at {
            let _ = writeln!(out, "P@{k} {v:.4}");
        }
        let _ = writeln!(out, "queries {}", self.queries);
        for (class, v) in &self.per_class_anmrr {
            let _ = writeln!(out, "ANMRR[{class}] {v:.4}");
        }
        out
    }
}

/// Ranks every query against the index (excluding the query's own id) and
/// aggregates the metrics.
pub fn evaluate(index: &EmbeddingIndex, queries: &[EmbeddingRecord]) -> Result<MetricsReport> {
    evaluate_with(index, queries, &EvalOptions::default())
}

pub fn evaluate_with(index: &EmbeddingIndex, queries: &[EmbeddingRecord], options: &EvalOptions) -> Result<MetricsReport> {
    if index.is_empty() {
        return Err(Error::invalid("cannot evaluate against an empty index"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("no queries to evaluate"));
    }
    let mut label_counts: HashMap<&str, usize> = HashMap::new();
    for l in index.labels() {
        *label_counts.entry(l.as_str()).or_default() += 1;
    }
    let exclusions: Vec<Option<usize>> = queries.iter().map(|q| index.position(&q.id)).collect();
    let undefined: Vec<String> = queries
        .iter()
        .zip(&exclusions)
        .filter(|(q, excl)| {
            let count = label_counts.get(q.label.as_str()).copied().unwrap_or(0);
            let own = excl.is_some_and(|i| index.labels()[i] == q.label);
            count - usize::from(own) == 0
        })
        .map(|(q, _)| q.id.clone())
        .collect();
    if !undefined.is_empty() {
        return Err(Error::UndefinedQuery { ids: undefined });
    }

    let outcomes: Vec<QueryOutcome> = queries
        .par_iter()
        .zip(exclusions.par_iter())
        .map(|(q, &excl)| {
            let ranked = index.rank(&q.vector, excl, None)?;
            let relevant: Vec<bool> = ranked.iter().map(|&(_, i)| index.labels()[i] == q.label).collect();
            Ok(QueryOutcome::from_relevance(q.id.clone(), q.label.clone(), &relevant))
        })
        .collect::<Result<_>>()?;

    let gtm = match options.gtm {
        GtmScope::QuerySet => outcomes.iter().map(QueryOutcome::ground_truth).max().unwrap_or(0),
        GtmScope::Fixed(g) => g,
    };

    // fixed-order reduction
    let n = outcomes.len() as f64;
    let mut anmrr = 0.0;
    let mut map = 0.0;
    // hit counts stay integral so P@k is a single rounded division
    let mut hits = [0u64; CUTOFFS.len()];
    let mut per_class: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for o in &outcomes {
        let score = nmrr(o, gtm, &options.anmrr)?;
        anmrr += score;
        map += average_precision(o)?;
        for (h, &k) in hits.iter_mut().zip(&CUTOFFS) {
            *h += o.relevant_ranks.partition_point(|&r| r <= k) as u64;
        }
        let entry = per_class.entry(o.query_label.clone()).or_default();
        entry.0 += score;
        entry.1 += 1;
    }

    Ok(MetricsReport {
        anmrr: anmrr / n,
        map: map / n,
        p_at: CUTOFFS.iter().zip(hits).map(|(&k, h)| (k, h as f64 / (k as f64 * n))).collect(),
        per_class_anmrr: per_class.into_iter().map(|(c, (s, m))| (c, s / m as f64)).collect(),
        queries: outcomes.len(),
        gtm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::build_index;
    use proptest::prelude::*;

    fn outcome(relevant: &[bool]) -> QueryOutcome {
        QueryOutcome::from_relevance("q", "a", relevant)
    }

    fn with_ranks(ranks: &[usize], len: usize) -> QueryOutcome {
        let mut rel = vec![false; len];
        ranks.iter().for_each(|&r| rel[r - 1] = true);
        outcome(&rel)
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_k(&outcome(&[true; 5]), 5), 1.0);
        let perfect = with_ranks(&(1..=49).collect::<Vec<_>>(), 1049);
        assert_eq!(format!("{:.4}", precision_at_k(&perfect, 1000)), "0.0490");
        assert_eq!(precision_at_k(&perfect, 1000), 49.0 / 1000.0);
        let perfect = with_ranks(&(1..=159).collect::<Vec<_>>(), 6079);
        assert_eq!(format!("{:.4}", precision_at_k(&perfect, 1000)), "0.1590");
        // short list still divides by k
        assert_eq!(precision_at_k(&outcome(&[true, true]), 10), 0.2);
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&with_ranks(&[1, 2, 3], 5)).unwrap(), 1.0);
        let ap = average_precision(&with_ranks(&[1, 3], 5)).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((average_precision(&with_ranks(&[10], 12)).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(average_precision(&outcome(&[false, false])), Err(Error::UndefinedQuery { .. })));
    }

    #[test]
    fn nmrr_examples() {
        let p = AnmrrParams::default();
        assert_eq!(nmrr(&with_ranks(&[1, 2, 3, 4], 20), 4, &p).unwrap(), 0.0);
        assert_eq!(nmrr(&with_ranks(&[9, 10, 11, 12], 20), 4, &p).unwrap(), 1.0);
        let v = nmrr(&with_ranks(&[1, 3, 15, 16], 20), 4, &p).unwrap();
        assert!((v - 3.5 / 7.5).abs() < 1e-12);
        assert!(nmrr(&with_ranks(&[1, 2], 4), 1, &p).is_err());
    }

    #[test]
    fn ranked_labels_constructor() {
        let o = QueryOutcome::from_ranked_labels("q", "x", &["x", "y", "x"]);
        assert_eq!(o.relevant_ranks(), &[1, 3]);
        assert_eq!(o.ground_truth(), 2);
        assert_eq!(o.candidates(), 3);
    }

    fn one_hot(classes: usize, per_class: usize) -> Vec<EmbeddingRecord> {
        (0..classes * per_class)
            .map(|i| {
                let c = i / per_class;
                let mut v = vec![0.0; classes];
                v[c] = 1.0;
                EmbeddingRecord::new(format!("r{i:05}"), format!("c{c:02}"), v)
            })
            .collect()
    }

    #[test]
    fn perfect_separation() {
        let recs = one_hot(4, 6);
        let index = build_index(&recs).unwrap();
        let report = evaluate(&index, &recs).unwrap();
        assert_eq!(report.anmrr, 0.0);
        assert_eq!(report.map, 1.0);
        assert_eq!(report.p_at[&5], 1.0);
        assert_eq!(report.p_at[&10], 0.5);
        assert_eq!(report.gtm, 5);
        assert!(report.per_class_anmrr.values().all(|&v| v == 0.0));
        let text = report.to_text();
        assert!(text.starts_with("ANMRR 0.0000\nmAP 1.0000\nP@5 1.0000\nP@10 0.5000\n"), "{text}");
    }

    #[test]
    fn missing_class_is_reported() {
        let recs = one_hot(2, 3);
        let index = build_index(&recs).unwrap();
        let stray = EmbeddingRecord::new("zz", "nowhere", vec![1.0, 0.0]);
        match evaluate(&index, &[recs[0].clone(), stray]) {
            Err(Error::UndefinedQuery { ids }) => assert_eq!(ids, vec!["zz"]),
            other => panic!("expected undefined query, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn metric_invariants(relevant in prop::collection::vec(any::<bool>(), 1..60), extra_gtm in 0usize..10) {
            let o = outcome(&relevant);
            prop_assume!(o.ground_truth() > 0);
            let ng = o.ground_truth();
            let gtm = ng + extra_gtm;
            let p = AnmrrParams::default();
            let score = nmrr(&o, gtm, &p).unwrap();
            prop_assert!((0.0..=1.0).contains(&score));
            let perfect = relevant.iter().take(ng).all(|&r| r);
            prop_assert_eq!(score == 0.0, perfect);
            for k in [1, 5, 10] {
                let want = if perfect { ng.min(k) as f64 / k as f64 } else { precision_at_k(&o, k) };
                prop_assert_eq!(precision_at_k(&o, k), want);
            }

            // swapping the first irrelevant item ahead of a relevant one after it
            if let Some(first_miss) = relevant.iter().position(|&r| !r) {
                if let Some(offset) = relevant[first_miss..].iter().position(|&r| r) {
                    let mut better = relevant.clone();
                    better.swap(first_miss, first_miss + offset);
                    let b = outcome(&better);
                    prop_assert!(average_precision(&b).unwrap() >= average_precision(&o).unwrap());
                    prop_assert!(nmrr(&b, gtm, &p).unwrap() <= score);
                }
            }
        }
    }
}
