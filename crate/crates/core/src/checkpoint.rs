//! Binary checkpoint format.
//!
//! Little-endian throughout. Layout:
//!   magic "WSED", version u32
//!   model config: categories u32, mel_bins u32, channels u32 x4, profile str
//!   train config echo: alpha f64, lr f64, batch u32, epochs u32, seed u64,
//!       pooling str, gwrp_decay f64
//!   dsp config: sample_rate u32, window u32, hop u32, n_mels u32
//!   normalization: n_mels u32, mean f64 x n, std f64 x n
//!   named tensors: count u32, then name str + dtype u8 (0 = f64) +
//!       rank u8 + extents u32 x rank + payload
//!   bn stats: count u32, then name str + initialized u8 + channels u32 +
//!       running mean/var payloads
//!   adam: step u64, lr/beta1/beta2/eps f64, then m and v payloads aligned
//!       with the named tensor order
//!   epochs_done u32
//!   rng: 32-byte seed + u128 word position
//!
//! Strings are u16 length + UTF-8. Save -> load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autograd::{AdamConfig, BnStats, Tensor};
use crate::dsp::DspConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"WSED";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {got} (expected {VERSION})")]
    UnsupportedVersion { got: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub dsp: DspConfig,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub tensors: Vec<(String, Tensor)>,
    pub bn: Vec<(String, BnStats)>,
    pub adam_step: u64,
    pub adam_config: AdamConfig,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub epochs_done: u32,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.0.write_all(&[v])
    }
    fn u16(&mut self, v: u16) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u128(&mut self, v: u128) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64s(&mut self, vs: &[f64]) -> std::io::Result<()> {
        for v in vs {
            self.f64(*v)?;
        }
        Ok(())
    }
    fn str(&mut self, s: &str) -> std::io::Result<()> {
        assert!(s.len() <= u16::MAX as usize, "string too long for checkpoint");
        self.u16(s.len() as u16)?;
        self.0.write_all(s.as_bytes())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let len = self.u16()? as usize;
        let mut buf = vec![0u8; len];
        self.0.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| CheckpointError::Corrupt("non-utf8 string".into()))
    }
}

impl Checkpoint {
    pub fn write_to(&self, w: impl Write) -> Result<(), CheckpointError> {
        let mut w = Writer(w);
        w.0.write_all(MAGIC)?;
        w.u32(VERSION)?;

        let mc = &self.model_config;
        w.u32(mc.categories as u32)?;
        w.u32(mc.mel_bins as u32)?;
        for ch in mc.channels {
            w.u32(ch as u32)?;
        }
        w.str(&mc.profile)?;

        let tc = &self.train_config;
        w.f64(tc.alpha)?;
        w.f64(tc.lr)?;
        w.u32(tc.batch as u32)?;
        w.u32(tc.epochs as u32)?;
        w.u64(tc.seed)?;
        w.str(tc.pooling.name())?;
        w.f64(tc.gwrp_decay())?;

        w.u32(self.dsp.sample_rate)?;
        w.u32(self.dsp.window as u32)?;
        w.u32(self.dsp.hop as u32)?;
        w.u32(self.dsp.n_mels as u32)?;

        w.u32(self.norm_mean.len() as u32)?;
        w.f64s(&self.norm_mean)?;
        w.f64s(&self.norm_std)?;

        w.u32(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.str(name)?;
            w.u8(0)?; // dtype: f64
            w.u8(t.shape().len() as u8)?;
            for &e in t.shape() {
                w.u32(e as u32)?;
            }
            w.f64s(t.data())?;
        }

        w.u32(self.bn.len() as u32)?;
        for (name, stats) in &self.bn {
            w.str(name)?;
            w.u8(stats.initialized as u8)?;
            w.u32(stats.running_mean.len() as u32)?;
            w.f64s(&stats.running_mean)?;
            w.f64s(&stats.running_var)?;
        }

        w.u64(self.adam_step)?;
        w.f64(self.adam_config.lr)?;
        w.f64(self.adam_config.beta1)?;
        w.f64(self.adam_config.beta2)?;
        w.f64(self.adam_config.eps)?;
        if !self.adam_m.is_empty() {
            assert_eq!(self.adam_m.len(), self.tensors.len(), "adam state misaligned");
        }
        w.u32(self.adam_m.len() as u32)?;
        for (m, v) in self.adam_m.iter().zip(&self.adam_v) {
            w.f64s(m)?;
            w.f64s(v)?;
        }

        w.u32(self.epochs_done)?;
        w.0.write_all(&self.rng_seed)?;
        w.u128(self.rng_word_pos)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, CheckpointError> {
        let mut r = Reader(r);
        if &r.bytes::<4>()? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion { got: version });
        }

        let categories = r.u32()? as usize;
        let mel_bins = r.u32()? as usize;
        let mut channels = [0usize; 4];
        for ch in &mut channels {
            *ch = r.u32()? as usize;
        }
        let profile = r.str()?;
        let model_config = ModelConfig { categories, mel_bins, channels, profile };

        let alpha = r.f64()?;
        let lr = r.f64()?;
        let batch = r.u32()? as usize;
        let epochs = r.u32()? as usize;
        let seed = r.u64()?;
        let pooling_name = r.str()?;
        let gwrp_decay = r.f64()?;
        let pooling = crate::pooling::PoolingKind::parse(&pooling_name, gwrp_decay)
            .ok_or_else(|| CheckpointError::Corrupt(format!("unknown pooling {pooling_name}")))?;
        let train_config = TrainConfig { alpha, lr, batch, epochs, seed, pooling };

        let dsp = DspConfig {
            sample_rate: r.u32()?,
            window: r.u32()? as usize,
            hop: r.u32()? as usize,
            n_mels: r.u32()? as usize,
        };

        let n_mels = r.u32()? as usize;
        let norm_mean = r.f64s(n_mels)?;
        let norm_std = r.f64s(n_mels)?;

        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.str()?;
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(CheckpointError::Corrupt(format!("unknown dtype {dtype} for {name}")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let data = r.f64s(len)?;
            let t = Tensor::new(&shape, data)
                .map_err(|e| CheckpointError::Corrupt(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }

        let n_bn = r.u32()? as usize;
        let mut bn = Vec::with_capacity(n_bn);
        for _ in 0..n_bn {
            let name = r.str()?;
            let initialized = r.u8()? != 0;
            let c = r.u32()? as usize;
            let running_mean = r.f64s(c)?;
            let running_var = r.f64s(c)?;
            bn.push((name, BnStats { running_mean, running_var, initialized }));
        }

        let adam_step = r.u64()?;
        let adam_config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let n_adam = r.u32()? as usize;
        if n_adam != 0 && n_adam != tensors.len() {
            return Err(CheckpointError::Corrupt(format!(
                "adam state for {n_adam} tensors, checkpoint has {}",
                tensors.len()
            )));
        }
        let mut adam_m = Vec::with_capacity(n_adam);
        let mut adam_v = Vec::with_capacity(n_adam);
        for i in 0..n_adam {
            let len = tensors[i].1.len();
            adam_m.push(r.f64s(len)?);
            adam_v.push(r.f64s(len)?);
        }

        let epochs_done = r.u32()?;
        let rng_seed: [u8; 32] = r.bytes()?;
        let rng_word_pos = r.u128()?;

        Ok(Self {
            model_config,
            train_config,
            dsp,
            norm_mean,
            norm_std,
            tensors,
            bn,
            adam_step,
            adam_config,
            adam_m,
            adam_v,
            epochs_done,
            rng_seed,
            rng_word_pos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let data = std::fs::read(path)?;
        Self::read_from(data.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write cannot fail");
        buf
    }
}
