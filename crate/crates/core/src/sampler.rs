//! Class-balanced P×K mini-batches and flip augmentation.
//!
//! An epoch is a sequence of rounds. In every round each class contributes
//! one chunk of K records, and the shuffled classes are grouped P at a time
//! into batches. A class with at least K records walks through a fresh
//! shuffled permutation of its records every epoch, K at a time, so each of
//! its records is drawn at least once per epoch. The number of rounds is
//! `max_c ⌈size_c / K⌉`.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::Payload;
use crate::error::{Error, Result};
use crate::ClassId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    /// Record indices per mini-batch; each holds exactly P classes × K records.
    pub batches: Vec<Vec<usize>>,
    /// Classes with fewer than K records, sampled with replacement.
    pub undersized_classes: Vec<ClassId>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Derives an independent stream seed from a base seed and a tag path.
pub(crate) fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut state = seed;
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    state
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_CLASS_ORDER: u64 = 1;
const TAG_PERMUTATION: u64 = 2;
const TAG_FILLER: u64 = 3;

pub fn make_pk_batches(labels: &[ClassId], p: usize, k: usize, seed: u64, epoch: u64) -> Result<BatchPlan> {
    if p < 2 || k < 2 {
        return Err(Error::invalid(format!("P and K must both be at least 2, got P={p}, K={k}")));
    }
    let mut members: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    if members.len() < p {
        return Err(Error::invalid(format!(
            "P={p} classes per batch requested but only {} classes present",
            members.len()
        )));
    }
    if p * k > labels.len() {
        return Err(Error::invalid(format!(
            "a {p}x{k} batch needs {} records but only {} are available",
            p * k,
            labels.len()
        )));
    }

    let classes: Vec<ClassId> = members.keys().copied().collect();
    let undersized: Vec<ClassId> = members
        .iter()
        .filter(|(_, m)| m.len() < k)
        .map(|(&c, _)| c)
        .collect();
    if !undersized.is_empty() {
        log::warn!(
            "{} class(es) have fewer than K={k} records and are sampled with replacement: {:?}",
            undersized.len(),
            undersized
        );
    }

    // per-class chunk streams for this epoch
    let mut streams: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (&class, m) in &members {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch, TAG_PERMUTATION, class as u64]));
        let stream = if m.len() >= k {
            let mut perm = m.clone();
            perm.shuffle(&mut rng);
            // pad the tail chunk with distinct records absent from it
            let rem = perm.len() % k;
            if rem != 0 {
                let tail: Vec<usize> = perm[perm.len() - rem..].to_vec();
                let mut pool: Vec<usize> = m.iter().copied().filter(|i| !tail.contains(i)).collect();
                pool.shuffle(&mut rng);
                perm.extend_from_slice(&pool[..k - rem]);
            }
            perm
        } else {
            (0..k).map(|_| m[rng.random_range(0..m.len())]).collect()
        };
        streams.insert(class, stream);
    }
    let rounds = streams.values().map(|s| s.len() / k).max().unwrap_or(1);

    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch, TAG_CLASS_ORDER]));
    let mut filler_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch, TAG_FILLER]));
    let mut batches = Vec::new();
    for round in 0..rounds {
        let mut order = classes.clone();
        order.shuffle(&mut order_rng);
        for group in order.chunks(p) {
            let mut batch_classes = group.to_vec();
            if batch_classes.len() < p {
                let mut others: Vec<ClassId> = classes.iter().copied().filter(|c| !group.contains(c)).collect();
                others.shuffle(&mut filler_rng);
                batch_classes.extend_from_slice(&others[..p - group.len()]);
            }
            let mut batch = Vec::with_capacity(p * k);
            for (slot, class) in batch_classes.iter().enumerate() {
                if slot < group.len() {
                    let stream = &streams[class];
                    let chunk = round % (stream.len() / k);
                    batch.extend_from_slice(&stream[chunk * k..(chunk + 1) * k]);
                } else {
                    batch.extend(filler_chunk(&members[class], k, &mut filler_rng));
                }
            }
            batches.push(batch);
        }
    }

    Ok(BatchPlan {
        batches,
        undersized_classes: undersized,
    })
}

fn filler_chunk(members: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if members.len() >= k {
        members.choose_multiple(rng, k).copied().collect()
    } else {
        (0..k).map(|_| members[rng.random_range(0..members.len())]).collect()
    }
}

/// Applies a horizontal and/or vertical flip to a map payload. Vector
/// payloads pass through unchanged.
pub fn augment_flip(payload: &Payload, horizontal: bool, vertical: bool) -> Payload {
    match payload {
        Payload::Map(m) => {
            let mut out = if horizontal { m.flip_horizontal() } else { m.clone() };
            if vertical {
                out = out.flip_vertical();
            }
            Payload::Map(out)
        }
        Payload::Vector(_) => {
            if horizontal || vertical {
                log::warn!("flip augmentation requested on a vector payload; ignored");
            }
            payload.clone()
        }
    }
}

/// Draws the two fair flip bits and applies them.
pub fn augment_flip_random<R: Rng + ?Sized>(payload: &Payload, rng: &mut R) -> Payload {
    let horizontal = rng.random_bool(0.5);
    let vertical = rng.random_bool(0.5);
    augment_flip(payload, horizontal, vertical)
}
