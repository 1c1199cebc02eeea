//! Versioned little-endian checkpoint container.
//!
//! ```text
//! magic "AGR1" | format_version u32
//! n_layer u32 | n_head u32 | emb_dim u32 | block_size u32 | vocab_size u32 | dropout f64
//! objective u8 (0 next-token, 1 second-to-last) | l u32
//! seed u64 | iteration u64
//! n_tensors u32, then per tensor in declared order:
//!     name_len u16 | name utf8 | ndim u8 | dims u32 x ndim | data f32 x numel
//! has_optimizer u8, and if 1:
//!     step u64 | beta1 f64 | beta2 f64 | eps f64 | weight_decay f64
//!     first moments f32 (same order and sizes as the tensors)
//!     second moments f32 (same)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{param_layout, ModelConfig, TransformerParams};
use crate::optim::{AdamWConfig, AdamWState};
use crate::permute::Objective;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AGR1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: TransformerParams<f32>,
    pub optimizer: Option<AdamWState<f32>>,
    pub objective: Objective,
    pub l: usize,
    pub seed: u64,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.params.config;
        for x in [c.n_layer, c.n_head, c.emb_dim, c.block_size, c.vocab_size] {
            w.extend_from_slice(&(x as u32).to_le_bytes());
        }
        w.extend_from_slice(&c.dropout.to_le_bytes());
        w.push(match self.objective {
            Objective::NextToken => 0,
            Objective::SecondToLast => 1,
        });
        w.extend_from_slice(&(self.l as u32).to_le_bytes());
        w.extend_from_slice(&self.seed.to_le_bytes());
        w.extend_from_slice(&self.iteration.to_le_bytes());
        w.extend_from_slice(&(self.params.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            w.extend_from_slice(&(name.len() as u16).to_le_bytes());
            w.extend_from_slice(name.as_bytes());
            w.push(t.shape().len() as u8);
            for &d in t.shape() {
                w.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut w, t.data());
        }
        match &self.optimizer {
            None => w.push(0),
            Some(opt) => {
                w.push(1);
                w.extend_from_slice(&opt.step.to_le_bytes());
                let oc = opt.config;
                for x in [oc.beta1, oc.beta2, oc.eps, oc.weight_decay] {
                    w.extend_from_slice(&x.to_le_bytes());
                }
                for t in opt.m.iter().chain(&opt.v) {
                    put_f32s(&mut w, t.data());
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Format { kind: "checkpoint", path: path.to_path_buf(), msg };
        let trunc = || fail("truncated".into());
        let mut r = Cursor { b: bytes, pos: 0 };
        if r.take(4).ok_or_else(trunc)? != CHECKPOINT_MAGIC {
            return Err(fail("bad magic (expected AGR1)".into()));
        }
        let version = r.u32().ok_or_else(trunc)?;
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported format version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = r.u32().ok_or_else(trunc)? as usize;
        }
        let dropout = r.f64().ok_or_else(trunc)?;
        let config = ModelConfig { n_layer: dims[0], n_head: dims[1], emb_dim: dims[2], block_size: dims[3], vocab_size: dims[4], dropout };
        config.validate().map_err(|e| fail(e.to_string()))?;
        let objective = match r.take(1).ok_or_else(trunc)?[0] {
            0 => Objective::NextToken,
            1 => Objective::SecondToLast,
            t => return Err(fail(format!("unknown objective tag {t}"))),
        };
        let l = r.u32().ok_or_else(trunc)? as usize;
        let seed = r.u64().ok_or_else(trunc)?;
        let iteration = r.u64().ok_or_else(trunc)?;

        let layout = param_layout(&config);
        let n = r.u32().ok_or_else(trunc)? as usize;
        if n != layout.len() {
            return Err(fail(format!("expected {} tensors, found {n}", layout.len())));
        }
        let mut names = Vec::with_capacity(n);
        let mut tensors = Vec::with_capacity(n);
        for (want_name, want_shape) in &layout {
            let len = r.u16().ok_or_else(trunc)? as usize;
            let name = String::from_utf8(r.take(len).ok_or_else(trunc)?.to_vec()).map_err(|_| fail("tensor name is not UTF-8".into()))?;
            let ndim = r.take(1).ok_or_else(trunc)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Option<Vec<_>>>().ok_or_else(trunc)?;
            if &name != want_name || &shape != want_shape {
                return Err(fail(format!("tensor {name} {shape:?} does not match expected {want_name} {want_shape:?}")));
            }
            let numel = shape.iter().product();
            let data = r.f32s(numel).ok_or_else(trunc)?;
            tensors.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        let optimizer = match r.take(1).ok_or_else(trunc)?[0] {
            0 => None,
            1 => {
                let step = r.u64().ok_or_else(trunc)?;
                let mut h = [0f64; 4];
                for x in h.iter_mut() {
                    *x = r.f64().ok_or_else(trunc)?;
                }
                let mut moments = Vec::with_capacity(2 * n);
                for _ in 0..2 {
                    for t in &tensors {
                        let data = r.f32s(t.numel()).ok_or_else(trunc)?;
                        moments.push(Tensor::new(t.shape().to_vec(), data)?);
                    }
                }
                let v = moments.split_off(n);
                Some(AdamWState { config: AdamWConfig { beta1: h[0], beta2: h[1], eps: h[2], weight_decay: h[3] }, step, m: moments, v })
            }
            t => return Err(fail(format!("bad optimizer flag {t}"))),
        };
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { params: TransformerParams { config, names, tensors }, optimizer, objective, l, seed, iteration })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?, path)
    }
}

fn put_f32s(w: &mut Vec<u8>, data: &[f32]) {
    w.reserve(data.len() * 4);
    for x in data {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.b.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let raw = self.take(n.checked_mul(4)?)?;
        Some(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;

    fn sample(with_opt: bool) -> Checkpoint {
        let cfg = ModelConfig { n_layer: 1, n_head: 2, emb_dim: 4, block_size: 8, vocab_size: 5, dropout: 0.0 };
        let params = TransformerParams::init(cfg, 11).unwrap();
        let shapes: Vec<&[usize]> = params.tensors.iter().map(|t| t.shape()).collect();
        let mut opt = AdamWState::new(AdamWConfig::default(), &shapes);
        opt.step = 3;
        opt.m[0].data_mut()[0] = 0.25;
        Checkpoint { optimizer: with_opt.then_some(opt), params, objective: Objective::SecondToLast, l: 4, seed: 99, iteration: 1234 }
    }

    #[test]
    fn round_trip_with_and_without_optimizer() {
        for with_opt in [false, true] {
            let ck = sample(with_opt);
            let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn header_is_magic_then_version() {
        let bytes = sample(false).to_bytes();
        assert_eq!(&bytes[..4], b"AGR1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
    }

    #[test]
    fn reload_gives_bit_identical_forward() {
        let ck = sample(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let ids = [0, 1, 2, 3, 4, 0, 1, 2];
        let a = forward(&ck.params, &ids, 1, true).unwrap();
        let b = forward(&back.params, &ids, 1, true).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.logits), bits(&b.logits));
    }

    #[test]
    fn rejects_bad_magic_truncation_and_missing() {
        let mut bytes = sample(false).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        bytes[3] = b'2';
        assert!(Checkpoint::from_bytes(&bytes, Path::new("mem")).is_err());
        assert!(matches!(Checkpoint::load(Path::new("/nonexistent/x.ckpt")), Err(Error::MissingFile(_))));
    }
}
