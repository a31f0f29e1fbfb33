//! Learned-parameter storage, the Adam optimizer, and the versioned binary
//! checkpoint container (sections: warp, gen, optim, rng, meta).

use crate::error::{Result, RmgnError};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Flat list of named parameter tensors. Networks hold `ParamId`s into one
/// store; the optimizer walks the store in index order.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-normal conv weight `[co, ci, kh, kw]` plus zero bias `[co]`.
    pub fn add_conv(
        &mut self,
        name: &str,
        co: usize,
        ci: usize,
        kh: usize,
        kw: usize,
        rng: &mut ChaCha8Rng,
    ) -> (ParamId, ParamId) {
        let std = (2.0 / (ci * kh * kw) as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[co, ci, kh, kw]), |_| {
            let z: f64 = rng.sample(StandardNormal);
            F::cast(z * std)
        });
        let b = ArrayD::zeros(IxDyn(&[co]));
        (
            self.add(format!("{name}.w"), w),
            self.add(format!("{name}.b"), b),
        )
    }

    /// Zero-initialized conv layer (used by the flow refinement output so an
    /// untrained net predicts zero flow).
    pub fn add_conv_zero(
        &mut self,
        name: &str,
        co: usize,
        ci: usize,
        kh: usize,
        kw: usize,
    ) -> (ParamId, ParamId) {
        let w = ArrayD::zeros(IxDyn(&[co, ci, kh, kw]));
        let b = ArrayD::zeros(IxDyn(&[co]));
        (
            self.add(format!("{name}.w"), w),
            self.add(format!("{name}.b"), b),
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Registers every parameter as a graph leaf, in store order.
    pub fn leaves(&self, g: &Graph<F>) -> Vec<NodeId> {
        self.values.iter().map(|v| g.leaf(v.clone())).collect()
    }

    /// Zeroes every parameter whose name starts with `prefix` (test hook for
    /// exercising exact algebraic identities of partially-dead networks).
    pub fn zero_by_prefix(&mut self, prefix: &str) {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                value.fill(F::zero());
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Convolution layer handle: parameter ids plus geometry. Applied against
/// the per-step leaf nodes (store order = leaf order).
#[derive(Debug, Clone, Copy)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn he<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        co: usize,
        ci: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (w, b) = store.add_conv(name, co, ci, k, k, rng);
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn zeroed<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        co: usize,
        ci: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let (w, b) = store.add_conv_zero(name, co, ci, k, k);
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn apply<F: Scalar>(&self, g: &Graph<F>, pnodes: &[NodeId], x: NodeId) -> NodeId {
        g.conv2d(x, pnodes[self.w.0], pnodes[self.b.0], self.stride, self.pad)
    }
}

/// First-order adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub learning_rate: F,
    beta1: F,
    beta2: F,
    eps: F,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, learning_rate: F) -> Self {
        Self {
            learning_rate,
            beta1: F::cast(0.9),
            beta2: F::cast(0.999),
            eps: F::cast(1e-8),
            m: store.values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: store.values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }

    /// One update over the whole store; `grads[i]` is `None` when the loss
    /// did not touch parameter `i` this step.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<ArrayD<F>>]) {
        assert_eq!(grads.len(), store.len());
        self.t += 1;
        let t = self.t as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for i in 0..store.len() {
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.values[i];
            for ((pe, ge), (me, ve)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *me = self.beta1 * *me + (F::one() - self.beta1) * *ge;
                *ve = self.beta2 * *ve + (F::one() - self.beta2) * *ge * *ge;
                let mhat = *me / bc1;
                let vhat = *ve / bc2;
                *pe = *pe - self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }
}

// --- checkpoint container -------------------------------------------------

pub const CKPT_MAGIC: &[u8; 4] = b"RMGN";
pub const CKPT_VERSION: u32 = 1;

fn scalar_tag<F: Scalar>() -> u8 {
    std::mem::size_of::<F>() as u8
}

fn write_tensor<F: Scalar, W: Write>(w: &mut W, t: &ArrayD<F>) -> std::io::Result<()> {
    w.write_all(&[t.ndim() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&[scalar_tag::<F>()])?;
    for &x in t.iter() {
        let v = x.to_f64_();
        if scalar_tag::<F>() == 4 {
            w.write_all(&(v as f32).to_le_bytes())?;
        } else {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_tensor<F: Scalar, R: Read>(r: &mut R) -> Result<ArrayD<F>> {
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1).map_err(ck_io)?;
    let ndim = b1[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(ck_io)?;
        dims.push(u64::from_le_bytes(b8) as usize);
    }
    r.read_exact(&mut b1).map_err(ck_io)?;
    let tag = b1[0];
    if tag != scalar_tag::<F>() {
        return Err(RmgnError::Checkpoint(format!(
            "scalar width mismatch: file has {tag}-byte floats, runtime expects {}",
            scalar_tag::<F>()
        )));
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        if tag == 4 {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(ck_io)?;
            data.push(F::cast(f32::from_le_bytes(b) as f64));
        } else {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(ck_io)?;
            data.push(F::cast(f64::from_le_bytes(b)));
        }
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| RmgnError::Checkpoint(format!("bad tensor shape: {e}")))
}

fn ck_io(e: std::io::Error) -> RmgnError {
    RmgnError::Checkpoint(format!("i/o: {e}"))
}

pub fn write_store_payload<F: Scalar>(store: &ParamStore<F>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, value) in store.iter() {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        write_tensor(&mut buf, value).expect("in-memory write");
    }
    buf
}

pub fn read_store_payload<F: Scalar>(bytes: &[u8], store: &mut ParamStore<F>) -> Result<()> {
    let mut r = bytes;
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(ck_io)?;
    let count = u32::from_le_bytes(b4) as usize;
    if count != store.len() {
        return Err(RmgnError::Checkpoint(format!(
            "parameter count mismatch: file {count}, model {}",
            store.len()
        )));
    }
    for i in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(ck_io)?;
        let nlen = u16::from_le_bytes(b2) as usize;
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb).map_err(ck_io)?;
        let name = String::from_utf8(nb)
            .map_err(|_| RmgnError::Checkpoint("bad parameter name".into()))?;
        if name != store.names[i] {
            return Err(RmgnError::Checkpoint(format!(
                "parameter name mismatch at {i}: file '{name}', model '{}'",
                store.names[i]
            )));
        }
        let t = read_tensor::<F, _>(&mut r)?;
        if t.shape() != store.values[i].shape() {
            return Err(RmgnError::Checkpoint(format!(
                "shape mismatch for '{name}'"
            )));
        }
        store.values[i] = t;
    }
    Ok(())
}

pub fn write_adam_payload<F: Scalar>(adam: &Adam<F>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&adam.t.to_le_bytes());
    buf.extend_from_slice(&(adam.m.len() as u32).to_le_bytes());
    for t in adam.m.iter().chain(adam.v.iter()) {
        write_tensor(&mut buf, t).expect("in-memory write");
    }
    buf
}

pub fn read_adam_payload<F: Scalar>(bytes: &[u8], adam: &mut Adam<F>) -> Result<()> {
    let mut r = bytes;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(ck_io)?;
    adam.t = u64::from_le_bytes(b8);
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(ck_io)?;
    let count = u32::from_le_bytes(b4) as usize;
    if count != adam.m.len() {
        return Err(RmgnError::Checkpoint("optimizer moment count mismatch".into()));
    }
    for i in 0..count {
        adam.m[i] = read_tensor::<F, _>(&mut r)?;
    }
    for i in 0..count {
        adam.v[i] = read_tensor::<F, _>(&mut r)?;
    }
    Ok(())
}

pub fn write_rng_payload(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&rng.get_seed());
    buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    buf.extend_from_slice(&rng.get_stream().to_le_bytes());
    buf
}

pub fn read_rng_payload(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != 32 + 16 + 8 {
        return Err(RmgnError::Checkpoint("bad rng section length".into()));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[..32]);
    let word_pos = u128::from_le_bytes(bytes[32..48].try_into().unwrap());
    let stream = u64::from_le_bytes(bytes[48..56].try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

/// Writes the section container: magic, version, section count, then
/// `(name, payload)` entries.
pub fn write_container(path: &std::path::Path, sections: &[(&str, Vec<u8>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, payload) in sections {
        let nb = name.as_bytes();
        buf.push(nb.len() as u8);
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        buf.extend_from_slice(payload);
    }
    std::fs::write(path, buf).map_err(|e| RmgnError::io(path.display().to_string(), e))
}

pub fn read_container(path: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>> {
    let bytes =
        std::fs::read(path).map_err(|e| RmgnError::io(path.display().to_string(), e))?;
    let mut r = bytes.as_slice();
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(ck_io)?;
    if &b4 != CKPT_MAGIC {
        return Err(RmgnError::Checkpoint("bad magic bytes".into()));
    }
    r.read_exact(&mut b4).map_err(ck_io)?;
    let version = u32::from_le_bytes(b4);
    if version != CKPT_VERSION {
        return Err(RmgnError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    r.read_exact(&mut b4).map_err(ck_io)?;
    let n = u32::from_le_bytes(b4) as usize;
    let mut sections = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1).map_err(ck_io)?;
        let mut nb = vec![0u8; b1[0] as usize];
        r.read_exact(&mut nb).map_err(ck_io)?;
        let name = String::from_utf8(nb)
            .map_err(|_| RmgnError::Checkpoint("bad section name".into()))?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(ck_io)?;
        let mut payload = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut payload).map_err(ck_io)?;
        sections.push((name, payload));
    }
    Ok(sections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_round_trips_through_payload() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add_conv("layer0", 4, 3, 3, 3, &mut rng);
        store.add_conv("layer1", 2, 4, 1, 1, &mut rng);
        let payload = write_store_payload(&store);

        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let mut other: ParamStore<f32> = ParamStore::new();
        other.add_conv("layer0", 4, 3, 3, 3, &mut rng2);
        other.add_conv("layer1", 2, 4, 1, 1, &mut rng2);
        read_store_payload(&payload, &mut other).unwrap();
        for (a, b) in store.values.iter().zip(other.values.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let _: f64 = rng.gen();
        let payload = write_rng_payload(&rng);
        let mut restored = read_rng_payload(&payload).unwrap();
        let a: u64 = rng.gen();
        let b: u64 = restored.gen();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_zero_lr_leaves_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_conv("c", 2, 2, 3, 3, &mut rng);
        let before = store.values.clone();
        let mut adam = Adam::new(&store, 0.0);
        let grads: Vec<Option<ArrayD<f64>>> = store
            .values
            .iter()
            .map(|p| Some(ArrayD::from_elem(p.raw_dim(), 1.0)))
            .collect();
        adam.step(&mut store, &grads);
        assert_eq!(store.values, before);
    }

    #[test]
    fn container_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(read_container(&p).is_err());
    }
}
