//! Single-file binary checkpoints.
//!
//! Layout (little endian): the 8-byte magic, a `u32` format version, the
//! run configuration as `key = value` text, the epoch, the optimizer step
//! count, then named `f64` tensor blocks for parameters, batch-norm running
//! statistics and optimizer moments. Training randomness is derived from the
//! seed and epoch, so no generator state is stored.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{PahError, Result};
use crate::model::PahModel;
use crate::optim::Optimizer;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PAHCKPT\0";
pub const VERSION: u32 = 1;
const NO_OPTIMIZER: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Number of completed epochs.
    pub epoch: u64,
    pub model: PahModel,
    pub optimizer: Option<Optimizer>,
}

fn bn_name(model: &PahModel, gamma: crate::params::ParamId) -> String {
    let n = model.store.name(gamma);
    n.strip_suffix(".gamma").unwrap_or(n).to_string()
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_block(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    put_u32(w, t.ndim() as u32)?;
    for &d in t.shape() {
        put_u64(w, d as u64)?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes a checkpoint; the stored configuration takes the model settings
/// from `model.config`.
pub fn save(path: &Path, config: &RunConfig, model: &PahModel, opt: Option<&Optimizer>, epoch: u64) -> Result<()> {
    let mut cfg = config.clone();
    cfg.model = model.config.clone();
    if let Some(o) = opt {
        cfg.optimizer = o.kind;
    }
    let mut blocks: Vec<(String, Tensor)> = Vec::new();
    for (_, p) in model.store.iter() {
        blocks.push((format!("param/{}", p.name), p.value.clone()));
    }
    for bn in model.batch_norms() {
        let name = bn_name(model, bn.gamma);
        blocks.push((format!("bn_mean/{name}"), Tensor::vector(bn.state.running_mean.clone())));
        blocks.push((format!("bn_var/{name}"), Tensor::vector(bn.state.running_var.clone())));
    }
    if let Some(o) = opt {
        for (id, p) in model.store.iter() {
            blocks.push((format!("opt_first/{}", p.name), o.first[id.index()].clone()));
            if !o.second.is_empty() {
                blocks.push((format!("opt_second/{}", p.name), o.second[id.index()].clone()));
            }
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION)?;
        let text = cfg.to_kv_string();
        put_u64(&mut w, text.len() as u64)?;
        w.write_all(text.as_bytes())?;
        put_u64(&mut w, epoch)?;
        put_u64(&mut w, opt.map_or(NO_OPTIMIZER, |o| o.steps))?;
        put_u64(&mut w, blocks.len() as u64)?;
        for (n, t) in &blocks {
            put_block(&mut w, n, t)?;
        }
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

struct Reader<R> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.r
            .read_exact(&mut b)
            .map_err(|_| PahError::Checkpoint("unexpected end of file".into()))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str, limit: u64) -> Result<usize> {
        let n = self.u64()?;
        if n > limit {
            return Err(PahError::Checkpoint(format!("{what} length {n} is implausible")));
        }
        Ok(n as usize)
    }

    fn block(&mut self) -> Result<(String, Tensor)> {
        let nl = self.u32()? as usize;
        let name = String::from_utf8(self.bytes(nl)?)
            .map_err(|_| PahError::Checkpoint("block name is not UTF-8".into()))?;
        let nd = self.u32()? as usize;
        if nd > 8 {
            return Err(PahError::Checkpoint(format!("block {name} has {nd} dimensions")));
        }
        let shape = (0..nd)
            .map(|_| self.len("dimension", 1 << 32))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.bytes(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        r: std::io::BufReader::new(std::fs::File::open(path)?),
    };
    if r.bytes(8).ok().as_deref() != Some(&MAGIC[..]) {
        return Err(PahError::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(PahError::Checkpoint(format!("unsupported version {version}")));
    }
    let tl = r.len("config", 1 << 20)?;
    let text = String::from_utf8(r.bytes(tl)?).map_err(|_| PahError::Checkpoint("config is not UTF-8".into()))?;
    let mut config = RunConfig::default();
    config.apply_text(&text, path)?;
    let epoch = r.u64()?;
    let steps = r.u64()?;
    let nb = r.len("block count", 1 << 24)?;
    let mut blocks: HashMap<String, Tensor> = HashMap::with_capacity(nb);
    for _ in 0..nb {
        let (n, t) = r.block()?;
        blocks.insert(n, t);
    }
    let mut take = |key: String, shape: &[usize]| -> Result<Tensor> {
        let t = blocks
            .remove(&key)
            .ok_or_else(|| PahError::Checkpoint(format!("missing block {key}")))?;
        if t.shape() != shape {
            return Err(PahError::Checkpoint(format!(
                "block {key} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let mut model = PahModel::new(config.model.clone())?;
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        let name = model.store.name(id).to_string();
        let shape = model.store.get(id).shape().to_vec();
        *model.store.get_mut(id) = take(format!("param/{name}"), &shape)?;
    }
    let names: Vec<String> = model.batch_norms().iter().map(|bn| bn_name(&model, bn.gamma)).collect();
    for (bn, name) in model.batch_norms_mut().into_iter().zip(names) {
        let d = bn.state.running_mean.len();
        bn.state.running_mean = take(format!("bn_mean/{name}"), &[d])?.into_data();
        bn.state.running_var = take(format!("bn_var/{name}"), &[d])?.into_data();
    }
    let optimizer = if steps == NO_OPTIMIZER {
        None
    } else {
        let mut o = Optimizer::new(config.optimizer, config.momentum, config.weight_decay, &model.store);
        o.steps = steps;
        for &id in &ids {
            let name = model.store.name(id).to_string();
            let shape = model.store.get(id).shape().to_vec();
            o.first[id.index()] = take(format!("opt_first/{name}"), &shape)?;
            if !o.second.is_empty() {
                o.second[id.index()] = take(format!("opt_second/{name}"), &shape)?;
            }
        }
        Some(o)
    };
    if let Some(extra) = blocks.keys().next() {
        return Err(PahError::Checkpoint(format!("unexpected block {extra}")));
    }
    Ok(Checkpoint {
        config,
        epoch,
        model,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::OptimizerKind;
    use crate::model::ModelInput;
    use crate::params::GradBuffer;

    fn cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.num_classes = 3;
        c.model.seed = 4;
        c
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = cfg();
        let mut model = PahModel::new(c.model.clone()).unwrap();
        for bn in model.batch_norms_mut() {
            bn.state.running_mean.iter_mut().for_each(|v| *v = 0.1 / 3.0);
        }
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.9, 5e-4, &model.store);
        let mut g = GradBuffer::zeros_like(&model.store);
        for id in model.store.ids().collect::<Vec<_>>() {
            let t = model.store.get(id).map(|v| v * 0.3 + 0.01);
            g.add_tensor(id, &t);
        }
        opt.step(&mut model.store, &g, 1e-3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &c, &model, Some(&opt), 7).unwrap();
        let ck = load(&p).unwrap();
        assert_eq!(ck.model, model);
        assert_eq!(ck.optimizer.as_ref(), Some(&opt));
        assert_eq!(ck.epoch, 7);
        let input = ModelInput::new(Tensor::full(&[64, 32, 3], 0.25), None).unwrap();
        let a = model.descriptor(&input).unwrap();
        let b = ck.model.descriptor(&input).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        std::fs::write(&p, b"hello world").unwrap();
        assert!(matches!(load(&p), Err(PahError::Checkpoint(_))));
        let model = PahModel::new(cfg().model).unwrap();
        save(&p, &cfg(), &model, None, 0).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load(&p), Err(PahError::Checkpoint(_))));
    }
}
