//! Versioned training checkpoints: all four networks' parameters, optimizer
//! moments, random-stream positions, image pools, and the config that
//! produced them. Writes are atomic (temp file + rename).

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::pool::ImagePool;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &str = "LUMEN-SLS-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn from_array(a: &ArrayD<f32>) -> Self {
        TensorData {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<ArrayD<f32>> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<TensorData>,
    pub v: Vec<TensorData>,
}

impl OptimizerState {
    pub fn from_adam(opt: &Adam<f32>) -> Self {
        let (m, v) = opt.moments();
        OptimizerState {
            t: opt.t,
            m: m.iter().map(TensorData::from_array).collect(),
            v: v.iter().map(TensorData::from_array).collect(),
        }
    }

    pub fn restore_into(&self, opt: &mut Adam<f32>) -> Result<()> {
        let m = self.m.iter().map(|t| t.to_array()).collect::<Result<_>>()?;
        let v = self.v.iter().map(|t| t.to_array()).collect::<Result<_>>()?;
        opt.restore_moments(self.t, m, v);
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoolState {
    pub capacity: usize,
    pub images: Vec<TensorData>,
}

impl PoolState {
    pub fn from_pool(p: &ImagePool) -> Self {
        PoolState {
            capacity: p.capacity(),
            images: p.buffer().iter().map(TensorData::from_array).collect(),
        }
    }

    pub fn to_pool(&self) -> Result<ImagePool> {
        let buf = self
            .images
            .iter()
            .map(|t| t.to_array())
            .collect::<Result<_>>()?;
        Ok(ImagePool::restore(self.capacity, buf))
    }
}

/// Word positions of every seeded stream consumed during training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StreamPositions {
    pub noise: u128,
    pub pool_oc: u128,
    pub pool_dir: u128,
    pub loader: u128,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub config_hash: String,
    pub config_text: String,
    pub step: u64,
    pub master_seed: u64,
    pub params: Vec<(String, TensorData)>,
    /// Order: g_oc, g_vc, d_oc, d_dir.
    pub optimizers: Vec<OptimizerState>,
    pub streams: StreamPositions,
    /// Order: d_oc pool, d_dir pool.
    pub pools: Vec<PoolState>,
}

impl Checkpoint {
    pub fn capture_params(store: &ParamStore<f32>) -> Vec<(String, TensorData)> {
        store
            .iter()
            .map(|(_, p)| (p.name.clone(), TensorData::from_array(&p.value)))
            .collect()
    }

    /// Copy saved parameters back into a freshly built store; names and
    /// shapes must match the architecture exactly.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: store has {}, checkpoint has {}",
                store.len(),
                self.params.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (id, (name, tensor)) in ids.into_iter().zip(&self.params) {
            let p = store.get_mut(id);
            if &p.name != name {
                return Err(Error::Checkpoint(format!(
                    "parameter name mismatch: {} vs {}",
                    p.name, name
                )));
            }
            let a = tensor.to_array()?;
            if a.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} shape mismatch: {:?} vs {:?}",
                    name,
                    p.value.shape(),
                    a.shape()
                )));
            }
            p.value = a;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = bincode::serialize(self)
            .map_err(|e| Error::Checkpoint(format!("serialize failed: {e}")))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let ckpt: Checkpoint = bincode::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: corrupt file: {e}", path.display())))?;
        if ckpt.magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic `{}` (expected `{MAGIC}`)",
                path.display(),
                ckpt.magic
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, SharedLatentModel};
    use crate::rng::{SeededStream, StreamId};
    use tempfile::tempdir;

    fn dummy(step: u64) -> Checkpoint {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut init = SeededStream::new(3, StreamId::Init);
        let _ = SharedLatentModel::new(ArchConfig::mini(), &mut store, &mut init);
        Checkpoint {
            magic: MAGIC.into(),
            config_hash: "h".into(),
            config_text: String::new(),
            step,
            master_seed: 3,
            params: Checkpoint::capture_params(&store),
            optimizers: vec![],
            streams: StreamPositions {
                noise: 1,
                pool_oc: 2,
                pool_dir: 3,
                loader: 4,
            },
            pools: vec![],
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let ck = dummy(42);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.streams.loader, 4);
        assert_eq!(back.params.len(), ck.params.len());
        for ((n1, t1), (n2, t2)) in ck.params.iter().zip(&back.params) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data, t2.data);
        }
    }

    #[test]
    fn corrupt_and_wrong_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        std::fs::write(&path, b"junk").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
        let mut ck = dummy(1);
        ck.magic = "WRONG".into();
        ck.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn restore_params_round_trips_into_fresh_store() {
        let ck = dummy(7);
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut init = SeededStream::new(99, StreamId::Init);
        let _ = SharedLatentModel::new(ArchConfig::mini(), &mut store, &mut init);
        ck.restore_params(&mut store).unwrap();
        for ((_, p), (name, t)) in store.iter().zip(&ck.params) {
            assert_eq!(&p.name, name);
            assert_eq!(p.value.iter().copied().collect::<Vec<_>>(), t.data);
        }
    }
}
