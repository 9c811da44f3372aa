//! Learnable parameters for the feature extractor and the per-level flow
//! predictors, plus the binary checkpoint format.
//!
//! Checkpoint layout: magic bytes `UFTN`, a `u32` format version, then one
//! record per tensor — `u32` id length, utf-8 id bytes, `u32` rank, `u32`
//! dims, little-endian `f32` payload. Round-trips are bit-exact. The model
//! architecture travels in a reserved `__meta__` record so a checkpoint is
//! self-describing; training state (optimizer moments, step counter) uses the
//! `__optim__/` and `__train__/` prefixes and is ignored by plain model
//! loads.

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Elem, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UFTN";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_ID: &str = "__meta__";
const OPTIM_PREFIX: &str = "__optim__/";
const TRAIN_PREFIX: &str = "__train__/";

/// Architecture hyperparameters. `levels` counts feature levels above the
/// raw image, so the pyramid holds `levels + 1` entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelMeta {
    pub levels: usize,
    pub input_channels: usize,
    pub feature_channels: Vec<usize>,
    pub search_radius: usize,
    pub predictor_hidden: [usize; 2],
}

impl Default for ModelMeta {
    fn default() -> Self {
        ModelMeta {
            levels: 4,
            input_channels: 1,
            feature_channels: vec![16, 32, 64, 96],
            search_radius: 4,
            predictor_hidden: [64, 32],
        }
    }
}

impl ModelMeta {
    /// A reduced configuration for tests and experiments.
    pub fn tiny(levels: usize, width: usize, radius: usize) -> Self {
        ModelMeta {
            levels,
            input_channels: 1,
            feature_channels: (0..levels).map(|_| width).collect(),
            search_radius: radius,
            predictor_hidden: [8, 6],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.feature_channels.len() != self.levels {
            return Err(Error::InvalidArgument(format!(
                "feature_channels must list one width per level: {} levels, {:?}",
                self.levels, self.feature_channels
            )));
        }
        if self.input_channels == 0 || self.search_radius == 0 {
            return Err(Error::InvalidArgument(
                "input_channels and search_radius must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Channels of pyramid level `l` (level 0 is the raw image).
    pub fn channels_at(&self, level: usize) -> usize {
        if level == 0 {
            self.input_channels
        } else {
            self.feature_channels[level - 1]
        }
    }

    /// Cost-volume channel count, `(2r + 1)^2`.
    pub fn cv_channels(&self) -> usize {
        let side = 2 * self.search_radius + 1;
        side * side
    }

    /// Input channels of the level-`l` predictor: features + upsampled flow
    /// + cost volume.
    pub fn predictor_input_channels(&self, level: usize) -> usize {
        self.channels_at(level) + 2 + self.cv_channels()
    }

    /// Input spatial sizes must divide by this for the pyramid to close.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    fn to_record(&self) -> Vec<f32> {
        let mut v = vec![
            self.levels as f32,
            self.input_channels as f32,
            self.search_radius as f32,
            self.predictor_hidden[0] as f32,
            self.predictor_hidden[1] as f32,
        ];
        v.extend(self.feature_channels.iter().map(|&c| c as f32));
        v
    }

    fn from_record(data: &[f32]) -> Result<Self> {
        if data.len() < 5 {
            return Err(Error::CheckpointMismatch(format!(
                "meta record too short: {} values",
                data.len()
            )));
        }
        let levels = data[0] as usize;
        if data.len() != 5 + levels {
            return Err(Error::CheckpointMismatch(format!(
                "meta record length {} does not match {levels} levels",
                data.len()
            )));
        }
        let meta = ModelMeta {
            levels,
            input_channels: data[1] as usize,
            search_radius: data[2] as usize,
            predictor_hidden: [data[3] as usize, data[4] as usize],
            feature_channels: data[5..].iter().map(|&c| c as usize).collect(),
        };
        meta.validate()?;
        Ok(meta)
    }
}

/// Named map of learnable tensors. Iteration order is lexicographic by id,
/// which keeps initialization, updates and serialization deterministic.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Elem = f32> {
    pub meta: ModelMeta,
    params: BTreeMap<String, Tensor<T>>,
}

/// Parameter ids and shapes implied by an architecture, in creation order.
fn param_layout(meta: &ModelMeta) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for l in 1..=meta.levels {
        let (cin, cout) = (meta.channels_at(l - 1), meta.channels_at(l));
        out.push((format!("feat/l{l}/conv1/w"), vec![cout, cin, 3, 3]));
        out.push((format!("feat/l{l}/conv1/b"), vec![cout]));
        out.push((format!("feat/l{l}/conv2/w"), vec![cout, cout, 3, 3]));
        out.push((format!("feat/l{l}/conv2/b"), vec![cout]));
    }
    let [h1, h2] = meta.predictor_hidden;
    for l in 0..=meta.levels {
        let cin = meta.predictor_input_channels(l);
        out.push((format!("pred/l{l}/conv1/w"), vec![h1, cin, 3, 3]));
        out.push((format!("pred/l{l}/conv1/b"), vec![h1]));
        out.push((format!("pred/l{l}/conv2/w"), vec![h2, h1, 3, 3]));
        out.push((format!("pred/l{l}/conv2/b"), vec![h2]));
        out.push((format!("pred/l{l}/conv3/w"), vec![2, h2, 3, 3]));
        out.push((format!("pred/l{l}/conv3/b"), vec![2]));
    }
    out
}

impl<T: Elem> ModelParams<T> {
    /// Random initialization: weights uniform in ±sqrt(1/fan_in), biases zero.
    pub fn init(meta: ModelMeta, seed: u64) -> Result<Self> {
        meta.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (id, shape) in param_layout(&meta) {
            let t = if shape.len() == 4 {
                let fan_in: usize = shape[1] * shape[2] * shape[3];
                let bound = (1.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::from_f64(rng.random_range(-bound..bound)))
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(id, t);
        }
        Ok(ModelParams { meta, params })
    }

    /// All-zero parameters (useful for exercising the zero-network edge
    /// cases: every predicted flow is exactly zero).
    pub fn zeros(meta: ModelMeta) -> Result<Self> {
        meta.validate()?;
        let params = param_layout(&meta)
            .into_iter()
            .map(|(id, shape)| (id, Tensor::zeros(&shape)))
            .collect();
        Ok(ModelParams { meta, params })
    }

    pub fn get(&self, id: &str) -> Option<&Tensor<T>> {
        self.params.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Elem>(&self) -> ModelParams<U> {
        ModelParams {
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }

    /// Inserts every parameter into a graph as a leaf, keeping the id → node
    /// association for gradient collection after the backward pass.
    pub fn bind(&self, g: &mut Graph<T>) -> ParamBinding {
        let vars = self
            .params
            .iter()
            .map(|(id, t)| (id.clone(), g.leaf(t.clone())))
            .collect();
        ParamBinding { vars }
    }
}

/// Association between parameter ids and graph leaves for one forward pass.
pub struct ParamBinding {
    vars: BTreeMap<String, Var>,
}

impl ParamBinding {
    pub fn var(&self, id: &str) -> Result<Var> {
        self.vars
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter id {id:?}")))
    }

    /// Dense gradient map: parameters the loss never touched get zeros.
    pub fn collect<T: Elem>(
        &self,
        graph: &Graph<T>,
        grads: &Gradients<T>,
    ) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(id, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()));
                (id.clone(), g)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Checkpoint records
// ---------------------------------------------------------------------------

pub(crate) struct Record {
    pub id: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub(crate) fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for r in records {
        buf.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.id.as_bytes());
        buf.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for &d in &r.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn read_records(path: &Path) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::BadCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 {
        return Err(bad("file shorter than header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(bad(&format!(
            "bad magic {:?}, expected {CHECKPOINT_MAGIC:?}",
            &bytes[0..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let mut pos = 8;
    let mut records = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<std::ops::Range<usize>> {
        if *pos + n > bytes.len() {
            Err(bad("truncated record"))
        } else {
            let r = *pos..*pos + n;
            *pos += n;
            Ok(r)
        }
    };
    while pos < bytes.len() {
        let r = take(&mut pos, 4)?;
        let id_len = u32::from_le_bytes(bytes[r].try_into().unwrap()) as usize;
        let r = take(&mut pos, id_len)?;
        let id = std::str::from_utf8(&bytes[r])
            .map_err(|_| bad("record id is not utf-8"))?
            .to_string();
        let r = take(&mut pos, 4)?;
        let rank = u32::from_le_bytes(bytes[r].try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let r = take(&mut pos, 4)?;
            dims.push(u32::from_le_bytes(bytes[r].try_into().unwrap()) as usize);
        }
        let numel: usize = dims.iter().product();
        let r = take(&mut pos, numel * 4)?;
        let data = bytes[r]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(Record { id, dims, data });
    }
    Ok(records)
}

impl ModelParams<f32> {
    /// Writes architecture metadata plus every parameter tensor.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut records = vec![Record {
            id: META_ID.to_string(),
            dims: vec![self.meta.to_record().len()],
            data: self.meta.to_record(),
        }];
        for (id, t) in &self.params {
            records.push(Record {
                id: id.clone(),
                dims: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
        write_records(path, &records)
    }

    /// Loads a checkpoint, validating the parameter set against the
    /// architecture its `__meta__` record declares.
    pub fn load(path: &Path) -> Result<Self> {
        let records = read_records(path)?;
        let meta_rec = records
            .iter()
            .find(|r| r.id == META_ID)
            .ok_or_else(|| Error::BadCheckpoint {
                path: path.to_path_buf(),
                reason: "missing __meta__ record".into(),
            })?;
        let meta = ModelMeta::from_record(&meta_rec.data)?;
        let mut params: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for r in records {
            if r.id == META_ID || r.id.starts_with(OPTIM_PREFIX) || r.id.starts_with(TRAIN_PREFIX)
            {
                continue;
            }
            params.insert(r.id.clone(), Tensor::new(r.dims, r.data)?);
        }
        let expected = param_layout(&meta);
        if expected.len() != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "architecture expects {} parameters, checkpoint holds {}",
                expected.len(),
                params.len()
            )));
        }
        for (id, shape) in expected {
            match params.get(&id) {
                None => {
                    return Err(Error::CheckpointMismatch(format!(
                        "missing parameter {id:?}"
                    )))
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::CheckpointMismatch(format!(
                        "parameter {id:?} has shape {:?}, architecture expects {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(ModelParams { meta, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ModelParams::<f32>::init(ModelMeta::tiny(2, 4, 1), 42).unwrap();
        let b = ModelParams::<f32>::init(ModelMeta::tiny(2, 4, 1), 42).unwrap();
        for ((ia, ta), (ib, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(ia, ib);
            assert_eq!(ta.data(), tb.data());
        }
        for (id, t) in a.iter() {
            if id.ends_with("/w") {
                let fan_in: usize = t.shape()[1..].iter().product();
                let bound = (1.0 / fan_in as f32).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{id}");
            } else {
                assert!(t.data().iter().all(|&v| v == 0.0), "{id}");
            }
        }
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.uftn");
        let p = ModelParams::<f32>::init(ModelMeta::tiny(2, 4, 2), 7).unwrap();
        p.save(&path).unwrap();
        let q = ModelParams::<f32>::load(&path).unwrap();
        assert_eq!(p.meta, q.meta);
        for ((ia, ta), (ib, tb)) in p.iter().zip(q.iter()) {
            assert_eq!(ia, ib);
            assert_eq!(ta.shape(), tb.shape());
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // saving again produces identical bytes
        let path2 = dir.path().join("model2.uftn");
        q.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn load_rejects_missing_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.uftn");
        let p = ModelParams::<f32>::init(ModelMeta::tiny(1, 4, 1), 7).unwrap();
        // claim a different radius in the meta record than the tensors carry
        let mut records = vec![Record {
            id: META_ID.to_string(),
            dims: vec![6],
            data: ModelMeta::tiny(1, 4, 2).to_record(),
        }];
        for (id, t) in p.iter() {
            records.push(Record {
                id: id.clone(),
                dims: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
        write_records(&path, &records).unwrap();
        let err = ModelParams::<f32>::load(&path).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)), "{err}");
    }

    #[test]
    fn read_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.uftn");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            read_records(&path).unwrap_err(),
            Error::BadCheckpoint { .. }
        ));
    }

    #[test]
    fn checkpoint_magic_is_uftn() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.uftn");
        ModelParams::<f32>::init(ModelMeta::tiny(1, 2, 1), 1)
            .unwrap()
            .save(&path)
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"UFTN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }
}
