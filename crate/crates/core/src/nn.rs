//! Parameters, layers, optimizer, and the checkpoint archive format.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autograd::{Gradients, Graph, Value};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named trainable tensors plus AdamW moment state and an optional
/// exponential moving average of the weights (used for sampling).
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    moment1: Vec<Tensor>,
    moment2: Vec<Tensor>,
    ema: Option<Vec<Tensor>>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.moment1.push(Tensor::zeros(tensor.shape().to_vec()));
        self.moment2.push(Tensor::zeros(tensor.shape().to_vec()));
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor) {
        assert_eq!(self.tensors[id.0].shape(), tensor.shape());
        self.tensors[id.0] = tensor;
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Push every parameter onto a graph as a leaf.
    pub fn bind(&self, g: &Graph) -> BoundParams {
        BoundParams { values: self.tensors.iter().map(|t| g.leaf(t.clone())).collect() }
    }

    /// One AdamW step over all parameters with gradients on the tape.
    /// `step` starts at 1 for bias correction.
    pub fn adamw_step(
        &mut self,
        bound: &BoundParams,
        grads: &Gradients,
        hp: &AdamW,
        step: usize,
    ) {
        self.adamw_step_with(bound, grads, hp, step, |_| hp.lr);
    }

    /// AdamW step with a per-parameter learning rate chosen by name.
    pub fn adamw_step_with(
        &mut self,
        bound: &BoundParams,
        grads: &Gradients,
        hp: &AdamW,
        step: usize,
        lr_for: impl Fn(&str) -> f64,
    ) {
        let bc1 = 1.0 - hp.beta1.powi(step as i32);
        let bc2 = 1.0 - hp.beta2.powi(step as i32);
        for i in 0..self.tensors.len() {
            let Some(grad) = grads.get(bound.values[i]) else { continue };
            let lr = lr_for(&self.names[i]);
            let m = self.moment1[i].data_mut();
            let v = self.moment2[i].data_mut();
            let w = self.tensors[i].data_mut();
            let g = grad.data();
            for k in 0..w.len() {
                m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g[k];
                v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * w[k]);
            }
        }
    }

    /// Start tracking an exponential moving average, initialized at the
    /// current weights.
    pub fn enable_ema(&mut self) {
        self.ema = Some(self.tensors.clone());
    }

    /// `shadow = decay * shadow + (1 - decay) * weights` for every tensor.
    pub fn ema_update(&mut self, decay: f64) {
        let Some(ema) = &mut self.ema else { return };
        for (shadow, live) in ema.iter_mut().zip(&self.tensors) {
            let s = shadow.data_mut();
            for (a, b) in s.iter_mut().zip(live.data()) {
                *a = decay * *a + (1.0 - decay) * *b;
            }
        }
    }

    /// Replace the live weights with the EMA shadow (end of training).
    pub fn swap_in_ema(&mut self) {
        if let Some(ema) = self.ema.take() {
            self.tensors = ema;
        }
    }

    /// FNV-1a over names, shapes, and raw weight bytes. Used to pin a stats
    /// file or stage checkpoint to the codec it was computed with.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.names.iter().zip(&self.tensors) {
            feed(name.as_bytes());
            for &d in t.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                feed(&x.to_le_bytes());
            }
        }
        h
    }

    pub fn to_tensor_map(&self) -> BTreeMap<String, Tensor> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Overwrite the parameters whose names appear in `map`, leaving the
    /// rest untouched. Returns how many were loaded. Used for warm starts
    /// where the target store has extra (freshly initialized) modules.
    pub fn load_matching(&mut self, map: &BTreeMap<String, Tensor>) -> Result<usize> {
        let mut loaded = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(t) = map.get(name) {
                if t.shape() != self.tensors[i].shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name:?} has shape {:?}, expected {:?}",
                        t.shape(),
                        self.tensors[i].shape()
                    )));
                }
                self.tensors[i] = t.clone();
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// Overwrite all parameters from an archive tensor map. The name sets
    /// must match exactly.
    pub fn load_tensor_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        if map.len() != self.names.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: archive has {}, model has {}",
                map.len(),
                self.names.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }
}

pub struct BoundParams {
    values: Vec<Value>,
}

impl BoundParams {
    pub fn value(&self, id: ParamId) -> Value {
        self.values[id.0]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn with_lr(lr: f64) -> AdamW {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Kaiming-normal scaled by the given gain.
    Kaiming(f64),
    Zero,
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Conv2d {
        let w = match init {
            Init::Kaiming(gain) => {
                let std = gain * (2.0 / (cin * kernel * kernel) as f64).sqrt();
                Tensor::randn(vec![cout, cin, kernel, kernel], rng).scale(std)
            }
            Init::Zero => Tensor::zeros(vec![cout, cin, kernel, kernel]),
        };
        Conv2d {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), Tensor::zeros(vec![cout])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &Graph, bound: &BoundParams, x: Value) -> Value {
        g.conv2d(x, bound.value(self.w), bound.value(self.b), self.stride, self.pad)
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Linear {
        let w = match init {
            Init::Kaiming(gain) => {
                let std = gain * (2.0 / din as f64).sqrt();
                Tensor::randn(vec![dout, din], rng).scale(std)
            }
            Init::Zero => Tensor::zeros(vec![dout, din]),
        };
        Linear {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), Tensor::zeros(vec![dout])),
        }
    }

    pub fn forward(&self, g: &Graph, bound: &BoundParams, x: Value) -> Value {
        g.linear(x, bound.value(self.w), bound.value(self.b))
    }
}

/// Group normalization with learned per-channel scale and shift.
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> GroupNorm {
        assert_eq!(channels % groups, 0);
        GroupNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &Graph, bound: &BoundParams, x: Value) -> Value {
        let n = g.group_norm(x, self.groups, self.eps);
        let scaled = g.mul_channel(n, bound.value(self.gamma));
        g.add_channel(scaled, bound.value(self.beta))
    }
}

const ARCHIVE_MAGIC: &[u8; 4] = b"DRTA";
const ARCHIVE_VERSION: u32 = 1;

/// Versioned archive of named tensors plus string metadata. This is the
/// on-disk form of codec and stage checkpoints.
#[derive(Default)]
pub struct TensorArchive {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorArchive {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(&mut w, name)?;
            w.write_all(&[t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<TensorArchive> {
        let path = path.as_ref();
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Checkpoint(format!("{}: not a tensor archive", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported archive version {version}",
                path.display()
            )));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..read_u32(&mut r)? {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            meta.insert(k, v);
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..read_u32(&mut r)? {
            let name = read_str(&mut r)?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            let mut buf = [0u8; 8];
            for x in &mut data {
                r.read_exact(&mut buf)?;
                *x = f64::from_le_bytes(buf);
            }
            tensors.insert(name, Tensor::from_vec(shape, data));
        }
        Ok(TensorArchive { meta, tensors })
    }

    pub fn meta_get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("archive missing meta key {key:?}")))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint("unreasonable string length in archive".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-utf8 string in archive".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Tensor::from_vec(vec![2], vec![3.0, -2.0]));
        let hp = AdamW::with_lr(0.05);
        for step in 1..=500 {
            let g = Graph::new();
            let bound = ps.bind(&g);
            let loss = g.mean_all({
                let x = bound.value(w);
                g.mul(x, x)
            });
            let grads = g.backward(loss);
            ps.adamw_step(&bound, &grads, &hp, step);
        }
        assert!(ps.get(w).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::seed_from(3);
        let mut archive = TensorArchive::default();
        archive.meta.insert("iteration".into(), "42".into());
        archive.tensors.insert("a.w".into(), Tensor::randn(vec![3, 2], &mut rng));
        archive.tensors.insert("a.b".into(), Tensor::randn(vec![3], &mut rng));
        let path = dir.path().join("t.ckpt");
        archive.write(&path).unwrap();
        let back = TensorArchive::read(&path).unwrap();
        assert_eq!(back.meta_get("iteration").unwrap(), "42");
        for (name, t) in &archive.tensors {
            let u = &back.tensors[name];
            assert_eq!(t.shape(), u.shape());
            assert_eq!(t.data(), u.data());
        }
        // Writing again produces byte-identical files.
        let path2 = dir.path().join("t2.ckpt");
        back.write(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn store_load_rejects_mismatches() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::zeros(vec![2, 2]));
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), Tensor::zeros(vec![3]));
        assert!(ps.load_tensor_map(&map).is_err());
        let mut map2 = BTreeMap::new();
        map2.insert("other".to_string(), Tensor::zeros(vec![2, 2]));
        assert!(ps.load_tensor_map(&map2).is_err());
    }

    #[test]
    fn content_hash_tracks_weights() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::zeros(vec![2]));
        let h0 = ps.content_hash();
        ps.set(id, Tensor::from_vec(vec![2], vec![0.0, 1.0]));
        assert_ne!(h0, ps.content_hash());
    }

    #[test]
    fn zero_init_conv_is_all_zero() {
        let mut ps = ParamStore::new();
        let mut rng = Rng::seed_from(1);
        let conv = Conv2d::new(&mut ps, "z", 4, 4, 3, 1, 1, Init::Zero, &mut rng);
        assert!(ps.get(conv.w).data().iter().all(|&v| v == 0.0));
        assert!(ps.get(conv.b).data().iter().all(|&v| v == 0.0));
    }
}
