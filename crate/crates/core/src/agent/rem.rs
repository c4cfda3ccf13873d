use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{ForwardCache, Mlp};
use super::optim::{clip_global_norm, Adam};
use super::{AgentError, Result};
use crate::action::Action;
use crate::env::{Transition, OBS_DIM};

const A: usize = Action::COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleLayout {
    /// K complete networks.
    Independent,
    /// One hidden trunk feeding K linear heads.
    SharedTrunk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Discount factor, in [0, 1].
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Ensemble size.
    pub k: usize,
    pub hidden: Vec<usize>,
    pub layout: EnsembleLayout,
    /// Updates between target-network copies.
    pub target_sync: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub huber_delta: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            learning_rate: 1e-4,
            batch_size: 256,
            k: 4,
            hidden: vec![64, 64],
            layout: EnsembleLayout::Independent,
            target_sync: 2000,
            grad_clip: 10.0,
            huber_delta: 1.0,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.k == 0 {
            return bad("ensemble size k must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.target_sync == 0 {
            return bad("target_sync must be positive");
        }
        if !(self.huber_delta > 0.0) {
            return bad("huber_delta must be positive");
        }
        if self.layout == EnsembleLayout::SharedTrunk && self.hidden.is_empty() {
            return bad("a shared trunk needs at least one hidden layer");
        }
        Ok(())
    }
}

pub fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

pub fn huber_grad(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

/// Random point on the probability simplex: uniform draws normalized by
/// their sum. `K = 1` returns `[1.0]` without consuming randomness.
pub fn sample_alphas<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    assert!(k >= 1, "ensemble size must be at least 1");
    if k == 1 {
        return vec![1.0];
    }
    let draws: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + f64::MIN_POSITIVE).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn greedy_action(q: &[f64; A]) -> Action {
    let mut best = 0;
    for i in 1..A {
        if q[i] > q[best] {
            best = i;
        }
    }
    Action::from_index(best).expect("index < 5")
}

#[derive(Debug, Clone, Default)]
pub struct QNetworkCache {
    trunk: ForwardCache,
    heads: Vec<ForwardCache>,
}

/// K action-value heads, optionally behind a shared trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    pub trunk: Option<Mlp>,
    pub heads: Vec<Mlp>,
}

fn to_q(v: &[f64]) -> [f64; A] {
    let mut q = [0.0; A];
    q.copy_from_slice(v);
    q
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], k: usize, layout: EnsembleLayout, rng: &mut R) -> Self {
        match layout {
            EnsembleLayout::Independent => {
                let mut sizes = vec![input];
                sizes.extend_from_slice(hidden);
                sizes.push(A);
                Self {
                    trunk: None,
                    heads: (0..k).map(|_| Mlp::new(&sizes, false, rng)).collect(),
                }
            }
            EnsembleLayout::SharedTrunk => {
                let mut sizes = vec![input];
                sizes.extend_from_slice(hidden);
                let trunk = Mlp::new(&sizes, true, rng);
                let width = *sizes.last().expect("non-empty");
                Self {
                    trunk: Some(trunk),
                    heads: (0..k).map(|_| Mlp::new(&[width, A], false, rng)).collect(),
                }
            }
        }
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn layout(&self) -> EnsembleLayout {
        if self.trunk.is_some() {
            EnsembleLayout::SharedTrunk
        } else {
            EnsembleLayout::Independent
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.as_ref().unwrap_or(&self.heads[0]).input_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            trunk: self.trunk.as_ref().map(Mlp::zeros_like),
            heads: self.heads.iter().map(Mlp::zeros_like).collect(),
        }
    }

    /// Output of every head.
    pub fn head_outputs(&self, x: &[f64]) -> Vec<[f64; A]> {
        let features = match &self.trunk {
            Some(t) => t.forward(x),
            None => x.to_vec(),
        };
        self.heads.iter().map(|h| to_q(&h.forward(&features))).collect()
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut QNetworkCache) -> Vec<[f64; A]> {
        cache.heads.resize(self.heads.len(), ForwardCache::default());
        let features: &[f64] = match &self.trunk {
            Some(t) => {
                t.forward_cached(x, &mut cache.trunk);
                cache.trunk.output()
            }
            None => x,
        };
        let mut out = Vec::with_capacity(self.heads.len());
        for (h, c) in self.heads.iter().zip(cache.heads.iter_mut()) {
            h.forward_cached(features, c);
            out.push(to_q(c.output()));
        }
        out
    }

    /// Accumulate gradients for `d_heads[k] = ∂L/∂Q_k(s, ·)`.
    pub fn backward(&self, cache: &QNetworkCache, d_heads: &[[f64; A]], grads: &mut QNetwork) {
        let mut d_features: Option<Vec<f64>> = None;
        for (k, head) in self.heads.iter().enumerate() {
            if d_heads[k].iter().all(|d| *d == 0.0) {
                continue;
            }
            let d_in = head.backward(&cache.heads[k], &d_heads[k], &mut grads.heads[k]);
            if self.trunk.is_some() {
                match &mut d_features {
                    Some(acc) => acc.iter_mut().zip(&d_in).for_each(|(a, d)| *a += d),
                    None => d_features = Some(d_in),
                }
            }
        }
        if let (Some(trunk), Some(d)) = (&self.trunk, d_features) {
            trunk.backward(&cache.trunk, &d, grads.trunk.as_mut().expect("same layout"));
        }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        if let Some(t) = &self.trunk {
            out.extend(t.param_slices());
        }
        for h in &self.heads {
            out.extend(h.param_slices());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        if let Some(t) = &mut self.trunk {
            out.extend(t.param_slices_mut());
        }
        for h in &mut self.heads {
            out.extend(h.param_slices_mut());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.trunk.as_ref().map_or(true, Mlp::is_finite) && self.heads.iter().all(Mlp::is_finite)
    }
}

/// Convex combination `Σ_k α_k Q_k(s, ·)`.
pub fn rem_q(net: &QNetwork, alphas: &[f64], x: &[f64]) -> [f64; A] {
    combine(&net.head_outputs(x), alphas)
}

fn combine(heads: &[[f64; A]], alphas: &[f64]) -> [f64; A] {
    let mut q = [0.0; A];
    for (h, a) in heads.iter().zip(alphas) {
        for i in 0..A {
            q[i] += a * h[i];
        }
    }
    q
}

/// Greedy action under the uniform mixture (mean over heads).
pub fn greedy_policy(net: &QNetwork, x: &[f64]) -> Action {
    let heads = net.head_outputs(x);
    let k = heads.len() as f64;
    let mut mean = [0.0; A];
    for h in &heads {
        for i in 0..A {
            mean[i] += h[i];
        }
    }
    for v in &mut mean {
        *v /= k;
    }
    greedy_action(&mean)
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Per-sample |y − Q(s, a)|.
    pub td_errors: Vec<f64>,
    pub grads: QNetwork,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub loss: f64,
    pub td_errors: Vec<f64>,
    pub grad_norm: f64,
}

/// Online and target Q-networks with their optimizer.
#[derive(Debug, Clone)]
pub struct QEnsemble {
    pub config: TrainConfig,
    pub online: QNetwork,
    pub target: QNetwork,
    pub optimizer: Adam,
    pub updates: u64,
}

impl QEnsemble {
    pub fn new<R: Rng + ?Sized>(config: TrainConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let online = QNetwork::new(OBS_DIM, &config.hidden, config.k, config.layout, rng);
        let shapes: Vec<usize> = online.param_slices().iter().map(|s| s.len()).collect();
        let optimizer = Adam::new(config.learning_rate, config.adam_eps, &shapes);
        Ok(Self {
            target: online.clone(),
            online,
            optimizer,
            config,
            updates: 0,
        })
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }

    /// Importance-weighted Huber loss of the REM target and its gradient with
    /// respect to the online parameters.
    ///
    /// `y = r + γ·(1 − terminal)·max_a Σ_k α_k Q̄_k(s', a)` and
    /// `L = (1/B) Σ_i w_i · huber(y_i − Σ_k α_k Q_k(s_i, a_i))`.
    pub fn loss_and_grads(&self, batch: &[Transition], weights: &[f64], alphas: &[f64]) -> Result<LossOutput> {
        if batch.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        assert_eq!(batch.len(), weights.len(), "one importance weight per sample");
        assert_eq!(alphas.len(), self.online.k(), "one mixture weight per head");
        let n = batch.len() as f64;
        let delta = self.config.huber_delta;
        let mut grads = self.online.zeros_like();
        let mut cache = QNetworkCache::default();
        let mut loss = 0.0;
        let mut td_errors = Vec::with_capacity(batch.len());
        for (t, w) in batch.iter().zip(weights) {
            let heads = self.online.forward_cached(&t.obs, &mut cache);
            let a = t.action.index();
            let q_sa = combine(&heads, alphas)[a];
            let bootstrap = if t.terminal {
                0.0
            } else {
                let next = rem_q(&self.target, alphas, &t.next_obs);
                next.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            };
            let y = t.reward + self.config.gamma * bootstrap;
            let td = y - q_sa;
            loss += w * huber(td, delta) / n;
            td_errors.push(td.abs());
            // ∂L/∂Q_k(s,a) = −(w/B)·huber'(td)·α_k
            let g = -w * huber_grad(td, delta) / n;
            let d_heads: Vec<[f64; A]> = alphas
                .iter()
                .map(|alpha| {
                    let mut d = [0.0; A];
                    d[a] = g * alpha;
                    d
                })
                .collect();
            self.online.backward(&cache, &d_heads, &mut grads);
        }
        Ok(LossOutput { loss, td_errors, grads })
    }

    /// One gradient update; the target network is refreshed every
    /// `target_sync` updates.
    pub fn train_step(&mut self, batch: &[Transition], weights: &[f64], alphas: &[f64]) -> Result<TrainStats> {
        let LossOutput {
            loss,
            td_errors,
            mut grads,
        } = self.loss_and_grads(batch, weights, alphas)?;
        if !loss.is_finite() {
            return Err(AgentError::NonFiniteLoss {
                update: self.updates,
                loss,
            });
        }
        let grad_norm = clip_global_norm(&mut grads.param_slices_mut(), self.config.grad_clip);
        self.optimizer.step(&mut self.online.param_slices_mut(), &grads.param_slices());
        self.updates += 1;
        if self.updates % self.config.target_sync == 0 {
            self.sync_target();
        }
        Ok(TrainStats {
            loss,
            td_errors,
            grad_norm,
        })
    }

    pub fn greedy(&self, x: &[f64]) -> Action {
        greedy_policy(&self.online, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_heads(values: &[f64]) -> QNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = QNetwork::new(3, &[4], values.len(), EnsembleLayout::Independent, &mut rng);
        for (h, v) in net.heads.iter_mut().zip(values) {
            let last = h.layers.last_mut().unwrap();
            last.weights.iter_mut().for_each(|w| *w = 0.0);
            last.bias.iter_mut().for_each(|b| *b = *v);
        }
        net
    }

    #[test]
    fn alphas_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_alphas(1, &mut rng), vec![1.0]);
        for k in 2..10 {
            let a = sample_alphas(k, &mut rng);
            assert_eq!(a.len(), k);
            assert!(a.iter().all(|x| *x >= 0.0));
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let a = sample_alphas(4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_alphas(4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn rem_q_convex_combination() {
        let net = constant_heads(&[1.0, 2.0]);
        let q = rem_q(&net, &[0.3, 0.7], &[0.1, 0.2, 0.3]);
        for v in q {
            assert!((v - 1.7).abs() < 1e-12);
        }
        let single = constant_heads(&[4.5]);
        assert_eq!(rem_q(&single, &[1.0], &[0.0; 3]), [4.5; 5]);
    }

    #[test]
    fn greedy_tie_break_and_argmax() {
        let net = constant_heads(&[1.0, 3.0]);
        assert_eq!(greedy_policy(&net, &[0.0; 3]), Action::NP1);
        assert_eq!(greedy_action(&[0.0, 5.0, 1.0, 1.0, 1.0]), Action::NP2);
        assert_eq!(greedy_action(&[0.0, 5.0, 1.0, 1.0, 5.0]), Action::NP2);
    }

    #[test]
    fn huber_pieces() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(-3.0, 1.0), 2.5);
        assert_eq!(huber_grad(0.5, 1.0), 0.5);
        assert_eq!(huber_grad(-3.0, 1.0), -1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { k: 0, ..Default::default() }.validate().is_err());
    }

    fn tiny_config(k: usize, layout: EnsembleLayout) -> TrainConfig {
        TrainConfig {
            gamma: 0.0,
            learning_rate: 1e-2,
            batch_size: 1,
            k,
            hidden: vec![8],
            layout,
            target_sync: 10,
            ..Default::default()
        }
    }

    #[test]
    fn zero_discount_moves_q_toward_reward() {
        for layout in [EnsembleLayout::Independent, EnsembleLayout::SharedTrunk] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut ens = QEnsemble::new(tiny_config(2, layout), &mut rng).unwrap();
            let t = Transition {
                obs: [0.2; OBS_DIM],
                action: Action::NP3,
                reward: 0.5,
                next_obs: [0.0; OBS_DIM],
                terminal: false,
            };
            let alphas = [0.4, 0.6];
            let before = (rem_q(&ens.online, &alphas, &t.obs)[2] - 0.5).abs();
            ens.train_step(&[t], &[1.0], &alphas).unwrap();
            let after = (rem_q(&ens.online, &alphas, &t.obs)[2] - 0.5).abs();
            assert!(after < before, "{layout:?}: {before} -> {after}");
        }
    }

    #[test]
    fn target_frozen_between_syncs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ens = QEnsemble::new(tiny_config(3, EnsembleLayout::Independent), &mut rng).unwrap();
        let x = [0.1; OBS_DIM];
        let frozen = ens.target.head_outputs(&x);
        let t = Transition {
            obs: x,
            action: Action::NOP,
            reward: 1.0,
            next_obs: x,
            terminal: false,
        };
        for i in 1..=9 {
            ens.train_step(&[t], &[1.0], &[0.2, 0.3, 0.5]).unwrap();
            assert_eq!(ens.target.head_outputs(&x), frozen, "update {i}");
        }
        ens.train_step(&[t], &[1.0], &[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(ens.target, ens.online);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ens = QEnsemble::new(tiny_config(1, EnsembleLayout::Independent), &mut rng).unwrap();
        let before = ens.online.clone();
        let t = Transition {
            obs: [0.0; OBS_DIM],
            action: Action::NP1,
            reward: f64::NAN,
            next_obs: [0.0; OBS_DIM],
            terminal: true,
        };
        assert!(matches!(ens.train_step(&[t], &[1.0], &[1.0]), Err(AgentError::NonFiniteLoss { .. })));
        assert_eq!(ens.online, before);
    }
}
