//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "CFMCKPT\0"
//! version    u32      = 1
//! state_dim, cond_dim, hidden_width, hidden_layers   u64 each
//! activation u8       0 = relu, 1 = swish
//! flags      u8       bit 0: sampling uses EMA weights
//! iteration  u64
//! rng        32-byte ChaCha seed, u64 stream, u128 word position
//! adam       u64 step, f64 lr, beta1, beta2, eps
//! ema decay  f64
//! n          u64      parameter count
//! params, adam m, adam v, ema shadow   n f64 each
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{Activation, EmaState, MlpConfig, OptimState, ParameterArray};

const MAGIC: &[u8; 8] = b"CFMCKPT\0";
const VERSION: u32 = 1;

/// Serializable position of the training generator.
#[derive(Debug, Clone, PartialEq, Eq)]
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

/// Everything needed to resume training or to sample from a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mlp: MlpConfig,
    pub params: ParameterArray,
    pub opt: OptimState,
    pub ema: EmaState,
    pub iteration: u64,
    pub rng: RngState,
    pub sample_with_ema: bool,
}

impl Checkpoint {
    /// Weights used for sampling: the EMA shadow or the raw parameters.
    pub fn sampling_params(&self) -> &[f64] {
        if self.sample_with_ema {
            &self.ema.shadow
        } else {
            &self.params.values
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.params.len();
        let mut out = Vec::with_capacity(160 + 32 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            self.mlp.state_dim,
            self.mlp.cond_dim,
            self.mlp.hidden_width,
            self.mlp.hidden_layers,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.push(self.mlp.activation.code());
        out.push(u8::from(self.sample_with_ema));
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.opt.step.to_le_bytes());
        for v in [
            self.opt.lr,
            self.opt.beta1,
            self.opt.beta2,
            self.opt.eps,
            self.ema.decay,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for block in [
            &self.params.values,
            &self.opt.m,
            &self.opt.v,
            &self.ema.shadow,
        ] {
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.bad("bad magic"));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(r.bad(&format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = r.u64()? as usize;
        }
        let activation = Activation::from_code(r.u8()?).ok_or_else(|| r.bad("bad activation"))?;
        let mlp = MlpConfig {
            state_dim: dims[0],
            cond_dim: dims[1],
            hidden_width: dims[2],
            hidden_layers: dims[3],
            activation,
        };
        mlp.validate()?;
        let sample_with_ema = r.u8()? & 1 == 1;
        let iteration = r.u64()?;
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        let step = r.u64()?;
        let (lr, beta1, beta2, eps, decay) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let n = r.u64()? as usize;
        if n != mlp.param_count() {
            return Err(r.bad(&format!(
                "parameter count {n} does not match architecture ({})",
                mlp.param_count()
            )));
        }
        let params = r.f64s(n)?;
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        let shadow = r.f64s(n)?;
        if r.pos != bytes.len() {
            return Err(r.bad("trailing bytes"));
        }
        Ok(Self {
            mlp,
            params: ParameterArray { values: params },
            opt: OptimState {
                m,
                v,
                step,
                lr,
                beta1,
                beta2,
                eps,
            },
            ema: EmaState { shadow, decay },
            iteration,
            rng,
            sample_with_ema,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bad(&self, reason: &str) -> Error {
        Error::Format {
            path: "<checkpoint>".into(),
            reason: format!("{reason} (at byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(self.bad("truncated"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mlp = MlpConfig {
            state_dim: 1,
            cond_dim: 1,
            hidden_width: 3,
            hidden_layers: 2,
            activation: Activation::Swish,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = mlp.init_params(&mut rng);
        rng.next_u64();
        let mut opt = OptimState::new(params.len(), 1e-3);
        opt.m[0] = 0.25;
        opt.step = 17;
        let ema = EmaState::new(&params.values, 0.99).unwrap();
        Checkpoint {
            mlp,
            opt,
            ema,
            iteration: 17,
            rng: RngState::capture(&rng),
            params,
            sample_with_ema: true,
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn restored_rng_continues_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..7 {
            rng.next_u32();
        }
        let mut restored = RngState::capture(&rng).restore();
        for _ in 0..10 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
