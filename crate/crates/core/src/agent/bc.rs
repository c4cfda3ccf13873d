//! Behavior-cloning baseline: a softmax classifier over the five actions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{ForwardCache, Mlp};
use super::optim::Adam;
use crate::action::Action;
use crate::env::OBS_DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of samples held out for the accuracy report.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 20,
            holdout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BcReport {
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub holdout_accuracy: f64,
    /// Mean cross-entropy per update.
    pub losses: Vec<f64>,
    pub single_class: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorClassifier {
    pub net: Mlp,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl BehaviorClassifier {
    pub fn new(hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![OBS_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(Action::COUNT);
        Self {
            net: Mlp::new(&sizes, false, rng),
        }
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.net.forward(x))
    }

    pub fn predict(&self, x: &[f64]) -> Action {
        let logits = self.net.forward(x);
        let mut best = 0;
        for i in 1..logits.len() {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        Action::from_index(best).expect("five outputs")
    }

    pub fn accuracy(&self, samples: &[([f64; OBS_DIM], Action)]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let hits = samples.iter().filter(|(x, a)| self.predict(x) == *a).count();
        hits as f64 / samples.len() as f64
    }

    /// Mean cross-entropy over `batch`; gradients are accumulated into `grads`.
    fn loss_and_grads(&self, batch: &[&([f64; OBS_DIM], Action)], grads: &mut Mlp) -> f64 {
        let n = batch.len() as f64;
        let mut cache = ForwardCache::default();
        let mut loss = 0.0;
        for (x, a) in batch {
            self.net.forward_cached(x, &mut cache);
            let p = softmax(cache.output());
            loss -= p[a.index()].max(1e-300).ln() / n;
            let mut d = p;
            d[a.index()] -= 1.0;
            d.iter_mut().for_each(|v| *v /= n);
            self.net.backward(&cache, &d, grads);
        }
        loss
    }
}

/// Train a classifier on `(features, action)` pairs and report held-out
/// accuracy. Samples are shuffled once before the split.
pub fn clone_behavior(samples: &[([f64; OBS_DIM], Action)], config: &BcConfig) -> (BehaviorClassifier, BcReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut clf = BehaviorClassifier::new(&config.hidden, &mut rng);

    let first = samples.first().map(|s| s.1);
    let single_class = samples.iter().all(|s| Some(s.1) == first);
    if single_class {
        log::warn!("behavior cloning on a single-class dataset; the classifier is degenerate");
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((samples.len() as f64) * config.holdout).round() as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold.min(samples.len()));
    let holdout: Vec<_> = hold_idx.iter().map(|&i| samples[i]).collect();
    let mut train: Vec<&([f64; OBS_DIM], Action)> = train_idx.iter().map(|&i| &samples[i]).collect();

    let shapes: Vec<usize> = clf.net.param_slices().iter().map(|s| s.len()).collect();
    let mut opt = Adam::new(config.learning_rate, 1e-8, &shapes);
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(config.batch_size.max(1)) {
            let mut grads = clf.net.zeros_like();
            losses.push(clf.loss_and_grads(batch, &mut grads));
            opt.step(&mut clf.net.param_slices_mut(), &grads.param_slices());
        }
    }

    let report = BcReport {
        train_samples: train.len(),
        holdout_samples: holdout.len(),
        holdout_accuracy: clf.accuracy(&holdout),
        losses,
        single_class,
    };
    (clf, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Action is a step function of feature 0; the other features carry
    /// small nuisance noise.
    fn separable(n: usize, seed: u64) -> Vec<([f64; OBS_DIM], Action)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut x = [0.0; OBS_DIM];
                x[0] = rng.random_range(-1.0..1.0);
                for v in &mut x[1..] {
                    *v = rng.random_range(-0.1..0.1);
                }
                let bucket = (((x[0] + 1.0) / 2.0 * 5.0) as usize).min(4);
                (x, Action::from_index(bucket).unwrap())
            })
            .collect()
    }

    #[test]
    fn learns_separable_rule() {
        let data = separable(20_000, 1);
        let cfg = BcConfig {
            epochs: 80,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let (_, report) = clone_behavior(&data, &cfg);
        assert!(report.holdout_accuracy > 0.99, "accuracy {}", report.holdout_accuracy);
        assert!(!report.single_class);
    }

    #[test]
    fn untrained_is_near_chance() {
        let data = separable(5000, 2);
        let mut accs = Vec::new();
        for seed in 0..10 {
            let clf = BehaviorClassifier::new(&[16], &mut ChaCha8Rng::seed_from_u64(seed));
            accs.push(clf.accuracy(&data));
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.2).abs() < 0.1, "mean accuracy {mean}");
    }

    #[test]
    fn loss_decreases_early() {
        let data = separable(2000, 3);
        let cfg = BcConfig {
            epochs: 4,
            batch_size: 64,
            ..Default::default()
        };
        let (_, report) = clone_behavior(&data, &cfg);
        assert!(report.losses.len() >= 100);
        let head: f64 = report.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = report.losses[90..100].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn single_class_still_trains() {
        let data: Vec<_> = separable(200, 4).into_iter().map(|(x, _)| (x, Action::NP2)).collect();
        let (clf, report) = clone_behavior(&data, &BcConfig { epochs: 60, ..Default::default() });
        assert!(report.single_class);
        assert_eq!(clf.predict(&data[0].0), Action::NP2);
    }
}
