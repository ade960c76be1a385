//! Adam optimizer and the training loop tying sampler, model and loss
//! together.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Dataset, Payload, Record};
use crate::error::{Error, Result};
use crate::loss::{batch_all_loss, Normalization, TripletBatchView};
use crate::model::{backward, forward, init_params, ModelConfig, ParamSet};
use crate::sampler::{augment_flip_random, derive_seed, make_pk_batches};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment accumulators, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// Gradients are checked for finiteness before anything is modified.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() || params.len() != state.second_moment.len() {
        return Err(Error::invalid(format!(
            "Adam shapes disagree: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = *config;
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// [`adam_step`] over a whole parameter set.
pub fn adam_step_params(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if params.config() != grads.config() {
        return Err(Error::invalid("gradient layout does not match the parameters"));
    }
    let mut flat = params.flatten();
    adam_step(&mut flat, &grads.flatten(), state, config)?;
    for (dst, src) in params.values_mut().zip(flat) {
        *dst = src;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Classes per batch.
    pub classes_per_batch: usize,
    /// Records per class in a batch.
    pub samples_per_class: usize,
    pub normalization: Normalization,
    pub seed: u64,
    /// Random horizontal/vertical flips for map inputs.
    pub augment: bool,
    /// Print one `epoch=<n> loss=<x> active=<f>` line per epoch to stderr.
    pub log_progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            adam: AdamConfig::default(),
            epochs: 30,
            classes_per_batch: 10,
            samples_per_class: 3,
            normalization: Normalization::Sum,
            seed: 0,
            augment: true,
            log_progress: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid(format!("margin must be non-negative, got {}", self.margin)));
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.adam.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("at least one epoch is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Active triplets over valid triplets, pooled across the epoch.
    pub active_fraction: f64,
    pub batches: usize,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }
}

/// Trains a freshly initialized network.
pub fn train(dataset: &Dataset, model_config: &ModelConfig, config: &TrainConfig) -> Result<(ParamSet, TrainHistory)> {
    let params = init_params(model_config, config.seed)?;
    train_from(dataset, params, config, |_, _| Ok(()))
}

/// Trains starting from `params`, calling `on_epoch` after every epoch with
/// the stats and the current parameters.
pub fn train_from<F>(
    dataset: &Dataset,
    mut params: ParamSet,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(ParamSet, TrainHistory)>
where
    F: FnMut(&EpochStats, &ParamSet) -> Result<()>,
{
    config.validate()?;
    let (labels, table) = dataset.class_ids();
    if table.len() < 2 {
        return Err(Error::NoValidTriplet(format!(
            "training data has {} class(es); triplets need at least two",
            table.len()
        )));
    }
    let mut state = AdamState::new(params.len());
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let plan = make_pk_batches(
            &labels,
            config.classes_per_batch,
            config.samples_per_class,
            config.seed,
            epoch as u64,
        )?;
        let mut loss_sum = 0.0;
        let (mut active, mut valid) = (0u64, 0u64);
        for (b, indices) in plan.batches.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[epoch as u64, b as u64, 0xF11D]));
            let batch: Vec<Record> = indices
                .iter()
                .map(|&i| {
                    let r = &dataset.records[i];
                    if config.augment && matches!(r.payload, Payload::Map(_)) {
                        Record::new(r.id.clone(), r.label.clone(), augment_flip_random(&r.payload, &mut rng))
                    } else {
                        r.clone()
                    }
                })
                .collect();
            let batch_labels = indices.iter().map(|&i| labels[i]).collect();

            let (embeddings, trace) = forward(&params, &batch)?;
            let view = TripletBatchView::new(embeddings, batch_labels)?;
            let loss = batch_all_loss(&view, config.margin, config.normalization)?;
            if !loss.total_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: b });
            }
            let (grads, _) = backward(&params, &trace, &loss.grad)?;
            adam_step_params(&mut params, &grads, &mut state, &config.adam)?;

            loss_sum += loss.total_loss;
            active += loss.active_triplets;
            valid += loss.valid_triplets;
        }

        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / plan.len() as f64,
            active_fraction: active as f64 / valid.max(1) as f64,
            batches: plan.len(),
            wall_time: started.elapsed(),
        };
        if config.log_progress {
            eprintln!(
                "epoch={} loss={:.6} active={:.4}",
                stats.epoch, stats.mean_loss, stats.active_fraction
            );
        }
        on_epoch(&stats, &params)?;
        history.epochs.push(stats);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_clusters, ClusterSpec};
    use crate::model::embed;

    #[test]
    fn zero_gradient_first_step_is_identity() {
        let mut p = vec![0.3, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.3, -1.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[0.5], &mut s, &cfg).unwrap();
        // m̂ = g, v̂ = g², so Δ = lr·g/(|g| + ε)
        let expected = 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].abs() - expected).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        for _ in 0..1000 {
            let g = 2.0 * p[0];
            adam_step(&mut p, &[g], &mut s, &cfg).unwrap();
        }
        assert!(p[0].abs() < 0.01, "theta = {}", p[0]);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut p = vec![0.5, 0.25];
        let mut s = AdamState::new(2);
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &[1.0, -3.0], &mut s, &cfg).unwrap();
        assert_eq!(p, vec![0.5, 0.25]);
        assert_eq!(s.step, 1);
        assert!(s.first_moment.iter().all(|&m| m != 0.0));
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let err = adam_step(&mut p, &[0.0, f64::NAN], &mut s, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1 }));
        assert_eq!(s.step, 0);
        assert!(adam_step(&mut p, &[0.0], &mut s, &AdamConfig::default()).is_err());
    }

    fn small_run(seed: u64) -> (ParamSet, TrainHistory) {
        let (train_set, _) = generate_clusters(&ClusterSpec {
            per_class: 20,
            dim: 8,
            ..ClusterSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            classes_per_batch: 4,
            samples_per_class: 3,
            seed,
            log_progress: false,
            ..TrainConfig::default()
        };
        train(&train_set, &ModelConfig::dense(8, &[8, 4]), &cfg).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let (p1, h1) = small_run(5);
        let (p2, h2) = small_run(5);
        let bits = |p: &ParamSet| p.values().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p1), bits(&p2));
        let losses = |h: &TrainHistory| h.epochs.iter().map(|e| (e.mean_loss.to_bits(), e.active_fraction.to_bits())).collect::<Vec<_>>();
        assert_eq!(losses(&h1), losses(&h2));
        assert_eq!(h1.len(), 3);
        assert!(h1.epochs.iter().all(|e| e.mean_loss.is_finite() && e.mean_loss >= 0.0));
    }

    #[test]
    fn loss_decreases_on_clusters() {
        let (train_set, _) = generate_clusters(&ClusterSpec::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            classes_per_batch: 4,
            samples_per_class: 4,
            seed: 1,
            log_progress: false,
            ..TrainConfig::default()
        };
        let (_, h) = train(&train_set, &ModelConfig::dense(32, &[32, 16]), &cfg).unwrap();
        assert!(h.epochs.last().unwrap().mean_loss < h.epochs[0].mean_loss);
    }

    #[test]
    fn shared_weights_make_embeddings_order_independent() {
        let (params, _) = small_run(2);
        let (train_set, _) = generate_clusters(&ClusterSpec {
            per_class: 4,
            dim: 8,
            ..ClusterSpec::default()
        })
        .unwrap();
        let batch: Vec<Record> = train_set.records[..6].to_vec();
        let mut reversed = batch.clone();
        reversed.reverse();
        let a = embed(&params, &batch).unwrap();
        let b = embed(&params, &reversed).unwrap();
        for i in 0..6 {
            assert_eq!(a.row(i), b.row(5 - i));
        }
    }

    #[test]
    fn single_class_dataset_fails() {
        let records = (0..6)
            .map(|i| Record::new(format!("r{i}"), "only", Payload::Vector(vec![i as f64, 1.0])))
            .collect();
        let ds = Dataset::new(records, crate::dataio::Split::Train).unwrap();
        let cfg = TrainConfig {
            classes_per_batch: 2,
            samples_per_class: 2,
            log_progress: false,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&ds, &ModelConfig::dense(2, &[2]), &cfg),
            Err(Error::NoValidTriplet(_))
        ));
    }
}
