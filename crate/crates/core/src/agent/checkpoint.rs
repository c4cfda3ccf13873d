//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PSCK" u32:version
//! u32:len TrainConfig-as-JSON      u32:len free-form config echo (JSON)
//! u8:layout u32:k u32:input u32:n_hidden n_hidden×u32
//! u64:updates
//! online network, target network:
//!     per MLP (trunk first when shared, then heads):
//!         u32:n_layers, per layer u32:out u32:in out·in×f64 (row-major) out×f64
//! u64:adam_t, per parameter slice u64:len len×f64 (m) len×f64 (v)
//! rng: 32-byte seed, u64 stream, u128 word position
//! ```

use std::io::{Read, Write};

use rand_chacha::ChaCha8Rng;

use super::mlp::{Dense, Mlp};
use super::rem::{EnsembleLayout, QEnsemble, QNetwork, TrainConfig};
use crate::action::Action;

const MAGIC: &[u8; 4] = b"PSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything needed to resume training or run the greedy policy.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub ensemble: QEnsemble,
    pub rng: ChaCha8Rng,
    /// Configuration the run was started with, echoed verbatim.
    pub config_echo: String,
}

struct W<T>(T);

impl<T: Write> W<T> {
    fn put(&mut self, b: &[u8]) -> Result<()> {
        Ok(self.0.write_all(b)?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.put(&v.to_le_bytes())
    }
    fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        for v in vs {
            self.put(&v.to_le_bytes())?;
        }
        Ok(())
    }
    fn text(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.put(s.as_bytes())
    }
    fn mlp(&mut self, m: &Mlp) -> Result<()> {
        self.u32(m.layers.len() as u32)?;
        for l in &m.layers {
            self.u32(l.out_dim as u32)?;
            self.u32(l.in_dim as u32)?;
            self.f64s(&l.weights)?;
            self.f64s(&l.bias)?;
        }
        Ok(())
    }
    fn network(&mut self, n: &QNetwork) -> Result<()> {
        if let Some(t) = &n.trunk {
            self.mlp(t)?;
        }
        for h in &n.heads {
            self.mlp(h)?;
        }
        Ok(())
    }
}

struct R<T>(T);

impl<T: Read> R<T> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.take()?))).collect()
    }
    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 26 {
            return Err(CheckpointError::Corrupt("oversized text block".into()));
        }
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b)?;
        String::from_utf8(b).map_err(|_| CheckpointError::Corrupt("text block is not UTF-8".into()))
    }
    /// Read an MLP and check it against the expected layer sizes.
    fn mlp(&mut self, sizes: &[usize], relu_output: bool) -> Result<Mlp> {
        let n = self.u32()? as usize;
        if n + 1 != sizes.len() {
            return Err(CheckpointError::Corrupt(format!("expected {} layers, found {n}", sizes.len() - 1)));
        }
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let out_dim = self.u32()? as usize;
            let in_dim = self.u32()? as usize;
            if in_dim != sizes[i] || out_dim != sizes[i + 1] {
                return Err(CheckpointError::Corrupt(format!(
                    "layer {i} is {in_dim}→{out_dim}, configuration says {}→{}",
                    sizes[i],
                    sizes[i + 1]
                )));
            }
            let weights = self.f64s(in_dim * out_dim)?;
            let bias = self.f64s(out_dim)?;
            layers.push(Dense {
                in_dim,
                out_dim,
                weights,
                bias,
            });
        }
        Ok(Mlp { layers, relu_output })
    }
    fn network(&mut self, input: usize, hidden: &[usize], k: usize, layout: EnsembleLayout) -> Result<QNetwork> {
        match layout {
            EnsembleLayout::Independent => {
                let mut sizes = vec![input];
                sizes.extend_from_slice(hidden);
                sizes.push(Action::COUNT);
                let heads = (0..k).map(|_| self.mlp(&sizes, false)).collect::<Result<_>>()?;
                Ok(QNetwork { trunk: None, heads })
            }
            EnsembleLayout::SharedTrunk => {
                let mut sizes = vec![input];
                sizes.extend_from_slice(hidden);
                let trunk = self.mlp(&sizes, true)?;
                let width = *sizes.last().expect("non-empty");
                let heads = (0..k)
                    .map(|_| self.mlp(&[width, Action::COUNT], false))
                    .collect::<Result<_>>()?;
                Ok(QNetwork {
                    trunk: Some(trunk),
                    heads,
                })
            }
        }
    }
}

pub fn save_checkpoint<T: Write>(ckpt: &Checkpoint, sink: T) -> Result<()> {
    let ens = &ckpt.ensemble;
    let mut w = W(sink);
    w.put(MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    let cfg = serde_json::to_string(&ens.config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    w.text(&cfg)?;
    w.text(&ckpt.config_echo)?;
    w.put(&[match ens.online.layout() {
        EnsembleLayout::Independent => 0,
        EnsembleLayout::SharedTrunk => 1,
    }])?;
    w.u32(ens.online.k() as u32)?;
    w.u32(ens.online.input_dim() as u32)?;
    w.u32(ens.config.hidden.len() as u32)?;
    for h in &ens.config.hidden {
        w.u32(*h as u32)?;
    }
    w.u64(ens.updates)?;
    w.network(&ens.online)?;
    w.network(&ens.target)?;
    w.u64(ens.optimizer.t)?;
    for (m, v) in ens.optimizer.m.iter().zip(&ens.optimizer.v) {
        w.u64(m.len() as u64)?;
        w.f64s(m)?;
        w.f64s(v)?;
    }
    w.put(&ckpt.rng.get_seed())?;
    w.u64(ckpt.rng.get_stream())?;
    w.put(&ckpt.rng.get_word_pos().to_le_bytes())?;
    w.0.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Read>(source: T) -> Result<Checkpoint> {
    let mut r = R(source);
    if &r.take::<4>()? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let config: TrainConfig =
        serde_json::from_str(&r.text()?).map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    let config_echo = r.text()?;
    let layout = match r.u8()? {
        0 => EnsembleLayout::Independent,
        1 => EnsembleLayout::SharedTrunk,
        other => return Err(CheckpointError::Corrupt(format!("unknown layout tag {other}"))),
    };
    let k = r.u32()? as usize;
    let input = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    let hidden: Vec<usize> = (0..n_hidden).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    if hidden != config.hidden || k != config.k || layout != config.layout {
        return Err(CheckpointError::Corrupt("network shape disagrees with the stored configuration".into()));
    }
    let updates = r.u64()?;
    let online = r.network(input, &hidden, k, layout)?;
    let target = r.network(input, &hidden, k, layout)?;

    let mut optimizer = super::optim::Adam::new(config.learning_rate, config.adam_eps, &[]);
    optimizer.t = r.u64()?;
    for expected in online.param_slices().iter().map(|s| s.len()) {
        let n = r.u64()? as usize;
        if n != expected {
            return Err(CheckpointError::Corrupt("optimizer state shape mismatch".into()));
        }
        optimizer.m.push(r.f64s(n)?);
        optimizer.v.push(r.f64s(n)?);
    }

    let seed = r.take::<32>()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take()?);
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    Ok(Checkpoint {
        ensemble: QEnsemble {
            config,
            online,
            target,
            optimizer,
            updates,
        },
        rng,
        config_echo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Transition, OBS_DIM};
    use rand::{Rng, SeedableRng};

    fn trained(layout: EnsembleLayout) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = TrainConfig {
            k: 3,
            hidden: vec![6, 5],
            layout,
            ..Default::default()
        };
        let mut ens = QEnsemble::new(cfg, &mut rng).unwrap();
        let t = Transition {
            obs: [0.3; OBS_DIM],
            action: Action::NP4,
            reward: 1.0,
            next_obs: [0.1; OBS_DIM],
            terminal: false,
        };
        ens.train_step(&[t, t], &[1.0, 0.5], &[0.2, 0.3, 0.5]).unwrap();
        let _: f64 = rng.random();
        Checkpoint {
            ensemble: ens,
            rng,
            config_echo: "{\"note\":\"test\"}".into(),
        }
    }

    #[test]
    fn round_trip_restores_everything() {
        for layout in [EnsembleLayout::Independent, EnsembleLayout::SharedTrunk] {
            let ckpt = trained(layout);
            let mut bytes = Vec::new();
            save_checkpoint(&ckpt, &mut bytes).unwrap();
            let mut back = load_checkpoint(bytes.as_slice()).unwrap();
            assert_eq!(back.ensemble.online, ckpt.ensemble.online);
            assert_eq!(back.ensemble.target, ckpt.ensemble.target);
            assert_eq!(back.ensemble.optimizer, ckpt.ensemble.optimizer);
            assert_eq!(back.ensemble.updates, 1);
            assert_eq!(back.ensemble.config, ckpt.ensemble.config);
            assert_eq!(back.config_echo, ckpt.config_echo);
            let mut orig_rng = ckpt.rng.clone();
            assert_eq!(back.rng.random::<u64>(), orig_rng.random::<u64>());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(load_checkpoint(&b"NOPE"[..]), Err(CheckpointError::BadMagic)));
        let mut bytes = Vec::new();
        save_checkpoint(&trained(EnsembleLayout::Independent), &mut bytes).unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 7;
        assert!(matches!(load_checkpoint(wrong_version.as_slice()), Err(CheckpointError::UnsupportedVersion(7))));
        bytes.truncate(bytes.len() / 2);
        assert!(load_checkpoint(bytes.as_slice()).is_err());
    }
}
