//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "DWPPOCKP" | version u32
//! shape table: input u32, shared u32, n_actor u32, widths.., n_critic u32, widths..
//! iteration u64 | env_steps u64 | lr_halved u8
//! ppo config: clip_eps lr f64, n_envs horizon minibatch epochs u64,
//!             discount gae_lambda value_coef entropy_coef max_grad_norm f64
//! adam: lr beta1 beta2 eps f64, t u64
//! rng: seed [u8; 32], stream u64, word_pos u128
//! n_params u64 | params f64 × n | adam m f64 × n | adam v f64 × n
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{RlError, Result};
use crate::loss::PpoConfig;
use crate::network::NetworkShape;
use crate::optim::Adam;

pub const MAGIC: &[u8; 8] = b"DWPPOCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub shape: NetworkShape,
    pub params: Vec<f64>,
    pub adam: Adam,
    pub config: PpoConfig,
    pub iteration: u64,
    pub env_steps: u64,
    pub lr_halved: bool,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + 24 * self.params.len());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let u32le = |b: &mut Vec<u8>, v: usize| b.extend_from_slice(&(v as u32).to_le_bytes());
        u32le(&mut b, self.shape.input);
        u32le(&mut b, self.shape.shared);
        u32le(&mut b, self.shape.actor.len());
        self.shape.actor.iter().for_each(|&w| u32le(&mut b, w));
        u32le(&mut b, self.shape.critic.len());
        self.shape.critic.iter().for_each(|&w| u32le(&mut b, w));
        b.extend_from_slice(&self.iteration.to_le_bytes());
        b.extend_from_slice(&self.env_steps.to_le_bytes());
        b.push(self.lr_halved as u8);

        let c = &self.config;
        let f = |b: &mut Vec<u8>, v: f64| b.extend_from_slice(&v.to_le_bytes());
        let u = |b: &mut Vec<u8>, v: usize| b.extend_from_slice(&(v as u64).to_le_bytes());
        f(&mut b, c.clip_eps);
        f(&mut b, c.lr);
        u(&mut b, c.n_envs);
        u(&mut b, c.horizon);
        u(&mut b, c.minibatch);
        u(&mut b, c.epochs);
        for v in [c.discount, c.gae_lambda, c.value_coef, c.entropy_coef, c.max_grad_norm] {
            f(&mut b, v);
        }
        for v in [self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps] {
            f(&mut b, v);
        }
        b.extend_from_slice(&self.adam.t.to_le_bytes());
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        u(&mut b, self.params.len());
        for v in self.params.iter().chain(&self.adam.m).chain(&self.adam.v) {
            f(&mut b, *v);
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| RlError::BadMagic)? != MAGIC {
            return Err(RlError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(RlError::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let input = r.u32()? as usize;
        let shared = r.u32()? as usize;
        let actor = r.widths()?;
        let critic = r.widths()?;
        let shape = NetworkShape {
            input,
            shared,
            actor,
            critic,
        };
        shape
            .validate()
            .map_err(|_| RlError::CheckpointShape("zero layer width".into()))?;
        let iteration = r.u64()?;
        let env_steps = r.u64()?;
        let lr_halved = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(RlError::CorruptCheckpoint(format!("flag byte {other}"))),
        };
        let config = PpoConfig {
            clip_eps: r.f64()?,
            lr: r.f64()?,
            n_envs: r.u64()? as usize,
            horizon: r.u64()? as usize,
            minibatch: r.u64()? as usize,
            epochs: r.u64()? as usize,
            discount: r.f64()?,
            gae_lambda: r.f64()?,
            value_coef: r.f64()?,
            entropy_coef: r.f64()?,
            max_grad_norm: r.f64()?,
        };
        let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let t = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let n = r.u64()? as usize;
        let expected = shape.param_count();
        if n != expected {
            return Err(RlError::CheckpointShape(format!(
                "shape table implies {expected} parameters, file declares {n}"
            )));
        }
        if r.remaining() != 24 * n {
            return Err(RlError::CorruptCheckpoint(format!(
                "expected {} payload bytes, found {}",
                24 * n,
                r.remaining()
            )));
        }
        let params = r.f64s(n)?;
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        Ok(Self {
            shape,
            params,
            adam: Adam {
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            },
            config,
            iteration,
            env_steps,
            lr_halved,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| RlError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| RlError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Observation width is the only contract with an environment.
    pub fn check_observation_dim(&self, obs_dim: usize) -> Result<()> {
        if self.shape.input != obs_dim {
            return Err(RlError::CheckpointShape(format!(
                "policy takes {} inputs, environment provides {obs_dim}",
                self.shape.input
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(RlError::CorruptCheckpoint(format!("truncated at byte {}", self.bytes.len())));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn widths(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        if n > 64 {
            return Err(RlError::CheckpointShape(format!("{n} hidden layers")));
        }
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }
}
