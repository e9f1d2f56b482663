//! Named parameter tensors, the AdamW optimizer and the checkpoint blob.
//!
//! Checkpoint layout: a UTF-8 text header followed by raw little-endian
//! data.
//!
//! ```text
//! NDCKPT 1
//! <name> <dtype> <rows> <cols> <frozen:0|1>
//! ...
//! END
//! <binary payload, tensors in header order, row-major>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let id = self.add(name, value);
        self.params[id.0].frozen = true;
        id
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::ones((rows, cols)))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn n_trainable(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "NDCKPT 1")?;
        for p in &self.params {
            let (r, c) = p.value.dim();
            writeln!(out, "{} f64 {} {} {}", p.name, r, c, u8::from(p.frozen))?;
        }
        writeln!(out, "END")?;
        for p in &self.params {
            for v in p.value.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a checkpoint as a standalone store.
    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if line.trim_end() != "NDCKPT 1" {
            return Err(bad("missing NDCKPT header"));
        }
        let mut entries = Vec::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(bad("unterminated header"));
            }
            let l = line.trim_end();
            if l == "END" {
                break;
            }
            let f: Vec<&str> = l.split(' ').collect();
            if f.len() != 5 || f[1] != "f64" {
                return Err(bad(&format!("bad header line `{l}`")));
            }
            let r: usize = f[2].parse().map_err(|_| bad("bad rows"))?;
            let c: usize = f[3].parse().map_err(|_| bad("bad cols"))?;
            entries.push((f[0].to_string(), r, c, f[4] == "1"));
        }
        let mut store = ParamStore::new();
        let mut buf = [0u8; 8];
        for (name, r, c, frozen) in entries {
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r * c {
                reader.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
                data.push(f64::from_le_bytes(buf));
            }
            let id = store.add(name, Array2::from_shape_vec((r, c), data).expect("shape"));
            store.set_frozen(id, frozen);
        }
        Ok(store)
    }

    /// Overwrites values of `self` by name from `other`; every parameter of
    /// `self` must be present with the same shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {}", p.name)))?;
            if src.value.dim() != p.value.dim() {
                return Err(Error::dims(p.name.clone(), format!("{:?}", p.value.dim()), format!("{:?}", src.value.dim())));
            }
            p.value.assign(&src.value);
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen parameters are skipped even if a gradient
    /// is supplied for them.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array2<f64>)]) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if p.frozen {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
            m.zip_mut_with(g, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let decay = 1.0 - self.lr * self.weight_decay;
            ndarray::Zip::from(&mut p.value).and(&*m).and(&*v).for_each(|w, m, v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + self.eps);
                *w = *w * decay - self.lr * update;
            });
        }
    }
}

/// Central finite-difference check of analytic parameter gradients.
///
/// `loss` evaluates the scalar objective for the current store values.
/// Checks up to `per_tensor` entries of each trainable tensor and returns
/// the worst relative error seen, with the tensor name.
pub fn max_fd_error(
    store: &mut ParamStore,
    analytic: &[(ParamId, Array2<f64>)],
    per_tensor: usize,
    h: f64,
    loss: &mut dyn FnMut(&ParamStore) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let ids: Vec<ParamId> = store.ids().filter(|id| !store.get(*id).frozen).collect();
    for id in ids {
        let n = store.value(id).len();
        let zero = Array2::zeros(store.value(id).dim());
        let g = analytic.iter().find(|(pid, _)| *pid == id).map(|(_, g)| g).unwrap_or(&zero).clone();
        let stride = (n / per_tensor.max(1)).max(1);
        for flat in (0..n).step_by(stride).take(per_tensor) {
            let cols = store.value(id).ncols();
            let (r, c) = (flat / cols, flat % cols);
            let orig = store.value(id)[[r, c]];
            store.get_mut(id).value[[r, c]] = orig + h;
            let up = loss(store);
            store.get_mut(id).value[[r, c]] = orig - h;
            let down = loss(store);
            store.get_mut(id).value[[r, c]] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g[[r, c]];
            let scale = fd.abs().max(an.abs());
            let err = if scale < 1e-7 { (fd - an).abs() } else { (fd - an).abs() / scale };
            if err > worst.0 {
                worst = (err, format!("{}[{r},{c}] fd={fd:.3e} analytic={an:.3e}", store.get(id).name));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add_normal("enc.w", 3, 4, 1.0, &mut rng);
        let f = store.add_normal("img.proj", 2, 2, 1.0, &mut rng);
        store.set_frozen(f, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        store.save(&path).unwrap();
        let back = ParamStore::load(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (id, p) in store.iter() {
            let q = back.get(id);
            assert_eq!(p.name, q.name);
            assert_eq!(p.frozen, q.frozen);
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "NDCKPT 1\nw f64 2 2 0\nEND\n\x00\x00").unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn adamw_skips_frozen_and_descends() {
        let mut store = ParamStore::new();
        let a = store.add("a", Array2::from_elem((1, 1), 3.0));
        let b = store.add_frozen("b", Array2::from_elem((1, 1), 3.0));
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..200 {
            let ga = store.value(a) * 2.0;
            let gb = store.value(b) * 2.0;
            opt.step(&mut store, &[(a, ga), (b, gb)]);
        }
        assert!(store.value(a)[[0, 0]].abs() < 0.2);
        assert_eq!(store.value(b)[[0, 0]], 3.0);
    }
}
