//! Named parameter storage, the AdamW optimizer, and binary checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RWSCKPT1";

/// Weight initialization recipes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform { lo: f64, hi: f64 },
    Normal { std: f64 },
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    KaimingUniform { fan_in: usize },
}

struct Entry {
    value: Tensor,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Flat store of named parameter tensors with matching gradient slots and
/// optimizer state. Iteration order is the sorted name order, which keeps
/// every downstream artifact deterministic.
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore { entries: BTreeMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let n = value.len();
        self.entries.insert(
            name.to_string(),
            Entry { value, grad: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n] },
        );
        Ok(())
    }

    /// Registers a parameter initialized from a stream derived from `root`
    /// by name, so values do not depend on registration order.
    pub fn init(&mut self, root: &RngState, name: &str, shape: &[usize], init: Init) -> Result<()> {
        let n: usize = shape.iter().product();
        let mut rng = root.derive(name);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, hi } => (0..n).map(|_| rng.uniform_in(lo, hi)).collect(),
            Init::Normal { std } => (0..n).map(|_| std * rng.normal()).collect(),
            Init::KaimingUniform { fan_in } => {
                let b = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.uniform_in(-b, b)).collect()
            }
        };
        self.insert(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name}: cannot replace {:?} with {:?}",
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        self.entries
            .get(name)
            .map(|e| e.grad.as_slice())
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &[f64]) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        if e.grad.len() != delta.len() {
            return Err(Error::shape(format!(
                "gradient for {name}: {} values, expected {}",
                delta.len(),
                e.grad.len()
            )));
        }
        for (g, d) in e.grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in self.entries.values_mut() {
            for g in e.grad.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// FNV-1a over the bit patterns of all values in name order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, e) in &self.entries {
            for b in name.as_bytes() {
                h = (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3);
            }
            for v in e.value.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// One decoupled-weight-decay Adam step over every parameter, with bias
    /// correction. Increments the shared step counter.
    pub fn adamw_step(&mut self, cfg: &AdamW) -> Result<()> {
        cfg.validate()?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in self.entries.values_mut() {
            let mut data = e.value.to_vec();
            for i in 0..data.len() {
                let g = e.grad[i];
                // Decoupled weight decay.
                data[i] -= cfg.lr * cfg.weight_decay * data[i];
                e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g;
                e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            e.value = Tensor::from_parts(e.value.shape().to_vec(), data);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for (name, e) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            let shape = e.value.shape();
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in e.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Corrupt {
                    offset: *pos as u64,
                    detail: format!("wanted {n} more bytes, file has {}", bytes.len() - *pos),
                });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!(
                "bad checkpoint magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(CHECKPOINT_MAGIC)
            )));
        }
        let mut store = ParamStore::new();
        while pos < bytes.len() {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::format("checkpoint entry name is not UTF-8"))?;
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let payload = take(&mut pos, n * 8)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&name, Tensor::new(&shape, data)?)?;
        }
        Ok(store)
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 3e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> AdamW {
        AdamW { lr, ..AdamW::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let before = s.get("p").unwrap().to_vec();
        let cfg = AdamW { lr: 1e-2, weight_decay: 0.0, ..AdamW::default() };
        s.adamw_step(&cfg).unwrap();
        assert_eq!(s.get("p").unwrap().to_vec(), before);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn one_step_descends_quadratic() {
        // f(p) = p^2/2, grad = p, from p = 1.
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(1.0)).unwrap();
        s.accumulate_grad("p", &[1.0]).unwrap();
        s.adamw_step(&AdamW { lr: 0.1, weight_decay: 0.0, ..AdamW::default() }).unwrap();
        let p = s.get("p").unwrap().item();
        assert!(p.abs() < 1.0, "got {p}");
    }

    /// Step-by-step transcription of the AdamW recurrence, kept separate
    /// from the implementation.
    fn adamw_reference(p0: f64, grads: &[f64], cfg: &AdamW) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            p -= cfg.lr * cfg.weight_decay * p;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p
    }

    #[test]
    fn three_steps_match_reference_recurrence() {
        // f(p) = a p^2 / 2 with a = 3, so grad = 3p.
        let cfg = AdamW { lr: 0.05, weight_decay: 0.01, ..AdamW::default() };
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(0.7)).unwrap();
        let mut ref_grads = Vec::new();
        let mut p_ref = 0.7;
        for _ in 0..3 {
            let p_now = s.get("p").unwrap().item();
            let g = 3.0 * p_now;
            ref_grads.push(g);
            s.zero_grads();
            s.accumulate_grad("p", &[g]).unwrap();
            s.adamw_step(&cfg).unwrap();
        }
        p_ref = adamw_reference(p_ref, &ref_grads, &cfg);
        let p_impl = s.get("p").unwrap().item();
        assert!((p_impl - p_ref).abs() < 1e-10, "{p_impl} vs {p_ref}");
    }

    #[test]
    fn nonpositive_lr_is_config_error() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(1.0)).unwrap();
        let cfg = AdamW { lr: 0.0, ..AdamW::default() };
        assert!(matches!(s.adamw_step(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let mut s = ParamStore::new();
        let root = RngState::new(9);
        s.init(&root, "a.w", &[3, 4], Init::Normal { std: 0.5 }).unwrap();
        s.init(&root, "b.bias", &[7], Init::KaimingUniform { fan_in: 16 }).unwrap();
        s.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get("a.w").unwrap(), s.get("a.w").unwrap());
        assert_eq!(loaded.get("b.bias").unwrap(), s.get("b.bias").unwrap());
        assert_eq!(loaded.checksum(), s.checksum());
    }

    #[test]
    fn checkpoint_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::Format(_))));

        let good = dir.path().join("good.ckpt");
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        s.save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let trunc = dir.path().join("trunc.ckpt");
        std::fs::write(&trunc, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(ParamStore::load(&trunc), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn init_is_order_independent() {
        let root = RngState::new(404);
        let mut a = ParamStore::new();
        a.init(&root, "x", &[8], Init::Normal { std: 1.0 }).unwrap();
        a.init(&root, "y", &[8], Init::Normal { std: 1.0 }).unwrap();
        let mut b = ParamStore::new();
        b.init(&root, "y", &[8], Init::Normal { std: 1.0 }).unwrap();
        b.init(&root, "x", &[8], Init::Normal { std: 1.0 }).unwrap();
        assert_eq!(a.get("x").unwrap(), b.get("x").unwrap());
        assert_eq!(a.get("y").unwrap(), b.get("y").unwrap());
    }
}
