//! Parameter store, AdamW, gradient clipping, cosine LR schedule and the
//! binary checkpoint format.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::tensor::{tree_sum, GradStore, Tape, Tensor};

const CHECKPOINT_MAGIC: &[u8; 6] = b"PFLHM1";

#[derive(Clone)]
pub struct Param {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameters plus AdamW moment buffers and a step counter.
/// BTreeMap keeps iteration order deterministic.
#[derive(Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    pub step: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),
    #[error("gradient shape mismatch for {name}: param {param} vs grad {grad}")]
    GradShape { name: String, param: usize, grad: usize },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, data: Vec<f64>, shape: Vec<usize>) {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "param {name}");
        let n = data.len();
        self.params.insert(
            name.to_string(),
            Param { data, shape, m: vec![0.0; n], v: vec![0.0; n] },
        );
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Put a parameter on the tape as a trainable leaf.
    pub fn leaf(&self, tape: &mut Tape, name: &str) -> Tensor {
        let p = self.get(name);
        tape.leaf(p.data.clone(), p.shape.clone())
    }

    /// One decoupled-weight-decay Adam step with bias correction. Only
    /// parameters present in `grads` are updated; the rest (for example
    /// checkpoint metadata) are left untouched.
    pub fn adamw_step(
        &mut self,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        cfg: &AdamWConfig,
    ) -> Result<(), OptimError> {
        for (name, g) in grads {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| OptimError::MissingGrad(name.clone()))?;
            if g.len() != p.data.len() {
                return Err(OptimError::GradShape {
                    name: name.clone(),
                    param: p.data.len(),
                    grad: g.len(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = self.params.get_mut(name).unwrap();
            for i in 0..p.data.len() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p.data[i]);
            }
        }
        Ok(())
    }

    /// Collect leaf gradients back into a name-keyed map.
    pub fn collect_grads(
        &self,
        leaves: &BTreeMap<String, Tensor>,
        gs: &GradStore,
    ) -> BTreeMap<String, Vec<f64>> {
        leaves
            .iter()
            .map(|(name, t)| {
                let g = gs
                    .get(t.id())
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.len()]);
                (name.clone(), g)
            })
            .collect()
    }

    // ---- checkpoint I/O ----
    // magic "PFLHM1", then per parameter: u32 name len, name bytes,
    // u32 rank, u64 dims..., f64 payload, all little-endian.

    pub fn save(&self, path: &Path) -> Result<(), OptimError> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        for (name, p) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in &p.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore, OptimError> {
        let mut r = io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(OptimError::BadCheckpoint(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut store = ParamStore::new();
        loop {
            let mut len4 = [0u8; 4];
            match r.read_exact(&mut len4) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(len4) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| OptimError::BadCheckpoint(e.to_string()))?;
            r.read_exact(&mut len4)?;
            let rank = u32::from_le_bytes(len4) as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut d8 = [0u8; 8];
            for _ in 0..rank {
                r.read_exact(&mut d8)?;
                shape.push(u64::from_le_bytes(d8) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut d8)?;
                data.push(f64::from_le_bytes(d8));
            }
            store.insert(&name, data, shape);
        }
        Ok(store)
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
/// One leaf tensor per parameter used in a forward pass. Caching keeps each
/// parameter on the tape exactly once so gradients accumulate correctly when
/// a parameter is read from several places.
pub struct LeafCache<'a> {
    store: &'a ParamStore,
    leaves: BTreeMap<String, Tensor>,
}

impl<'a> LeafCache<'a> {
    pub fn new(store: &'a ParamStore) -> LeafCache<'a> {
        LeafCache { store, leaves: BTreeMap::new() }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Tensor {
        if let Some(t) = self.leaves.get(name) {
            return t.clone();
        }
        let t = self.store.leaf(tape, name);
        self.leaves.insert(name.to_string(), t.clone());
        t
    }

    /// Pre-bind a name to an existing tape tensor, overriding the store.
    pub fn seed(&mut self, name: &str, t: Tensor) {
        self.leaves.insert(name.to_string(), t);
    }

    pub fn leaves(&self) -> &BTreeMap<String, Tensor> {
        &self.leaves
    }
}

pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let sq: Vec<f64> = grads
        .values()
        .map(|g| tree_sum(&g.iter().map(|x| x * x).collect::<Vec<_>>()))
        .collect();
    let norm = tree_sum(&sq).sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// Linear warmup to peak, then cosine decay to zero.
pub fn cosine_lr(sched: &LrSchedule, step: u64) -> f64 {
    if sched.warmup_steps > 0 && step < sched.warmup_steps {
        return sched.peak_lr * step as f64 / sched.warmup_steps as f64;
    }
    if step >= sched.total_steps {
        return 0.0;
    }
    let progress =
        (step - sched.warmup_steps) as f64 / (sched.total_steps - sched.warmup_steps) as f64;
    0.5 * sched.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}
