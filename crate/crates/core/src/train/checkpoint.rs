//! Versioned binary checkpoints: magic "TBGR", a JSON header with configs
//! and optimizer scalars, then named tensors. Writes are atomic
//! (temp file + rename), and loads validate magic, version, and shapes
//! before accepting anything.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{Param, ParamKind, Parameters};
use crate::model::ModelConfig;
use crate::tensor::Tensor;
use crate::train::optimizer::OptimizerState;
use crate::train::run::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TBGR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub params: Parameters,
    pub opt: OptimizerState,
    /// Incremental phases completed before this checkpoint.
    pub phase_cursor: i64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    loss: LossConfig,
    train: TrainConfig,
    opt_lr: f64,
    opt_step: u64,
    phase_cursor: i64,
    kinds: BTreeMap<String, ParamKind>,
    adagrad_rows: BTreeMap<String, Vec<usize>>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_tensor(out: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    let nb = name.as_bytes();
    out.write_all(&(nb.len() as u32).to_le_bytes())?;
    out.write_all(nb)?;
    out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in &t.data {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(inp: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    inp.read_exact(buf)
        .map_err(|e| ck_err(format!("truncated checkpoint while reading {}: {}", what, e)))
}

fn read_u32(inp: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(inp, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(inp: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(inp, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor(inp: &mut impl Read) -> Result<(String, Tensor)> {
    let name_len = read_u32(inp, "tensor name length")? as usize;
    if name_len > 4096 {
        return Err(ck_err("implausible tensor name length"));
    }
    let mut nb = vec![0u8; name_len];
    read_exact(inp, &mut nb, "tensor name")?;
    let name = String::from_utf8(nb).map_err(|_| ck_err("tensor name is not utf-8"))?;
    let rank = read_u32(inp, "tensor rank")? as usize;
    if rank > 8 {
        return Err(ck_err(format!("implausible rank {} for {}", rank, name)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(inp, "tensor dim")? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        read_exact(inp, &mut b, &format!("data of {}", name))?;
        data.push(f64::from_le_bytes(b));
    }
    Ok((name, Tensor::from_vec(&shape, data)))
}

pub fn checkpoint_save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let header = Header {
        model: ck.model.clone(),
        loss: ck.loss.clone(),
        train: ck.train.clone(),
        opt_lr: ck.opt.lr,
        opt_step: ck.opt.step,
        phase_cursor: ck.phase_cursor,
        kinds: ck
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p.kind))
            .collect(),
        adagrad_rows: ck
            .opt
            .adagrad
            .iter()
            .map(|(n, rows)| (n.clone(), rows.keys().copied().collect()))
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ck_err(format!("header encode: {}", e)))?;

    let tmp = path.with_extension("tmp");
    let mut out = std::io::BufWriter::new(fs::File::create(&tmp)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;

    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    for (name, p) in ck.params.iter() {
        tensors.push((name.clone(), &p.tensor));
    }
    for (name, t) in &ck.opt.adam_m {
        tensors.push((format!("adam.m/{}", name), t));
    }
    for (name, t) in &ck.opt.adam_v {
        tensors.push((format!("adam.v/{}", name), t));
    }
    for (name, rows) in &ck.opt.adagrad {
        let cols = rows.values().next().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows.values() {
            data.extend_from_slice(row);
        }
        owned.push((
            format!("adagrad/{}", name),
            Tensor::from_vec(&[rows.len(), cols], data),
        ));
    }
    out.write_all(&((tensors.len() + owned.len()) as u64).to_le_bytes())?;
    for (name, t) in &tensors {
        write_tensor(&mut out, name, t)?;
    }
    for (name, t) in &owned {
        write_tensor(&mut out, name, t)?;
    }
    out.flush()?;
    drop(out);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let mut inp = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut inp, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck_err("bad magic: not a checkpoint file"));
    }
    let version = read_u32(&mut inp, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ck_err(format!("unsupported version {}", version)));
    }
    let header_len = read_u64(&mut inp, "header length")? as usize;
    let mut hb = vec![0u8; header_len];
    read_exact(&mut inp, &mut hb, "header")?;
    let header: Header =
        serde_json::from_slice(&hb).map_err(|e| ck_err(format!("header decode: {}", e)))?;

    let count = read_u64(&mut inp, "tensor count")? as usize;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(&mut inp)?;
        tensors.insert(name, t);
    }

    let mut params = Parameters::empty();
    for (name, &kind) in &header.kinds {
        let t = tensors
            .remove(name)
            .ok_or_else(|| ck_err(format!("missing parameter tensor {}", name)))?;
        params.insert(name.clone(), Param { tensor: t, kind });
    }

    let mut opt = OptimizerState::new(header.opt_lr);
    opt.step = header.opt_step;
    for (name, t) in tensors {
        if let Some(base) = name.strip_prefix("adam.m/") {
            opt.adam_m.insert(base.to_string(), t);
        } else if let Some(base) = name.strip_prefix("adam.v/") {
            opt.adam_v.insert(base.to_string(), t);
        } else if let Some(base) = name.strip_prefix("adagrad/") {
            let rows = header
                .adagrad_rows
                .get(base)
                .ok_or_else(|| ck_err(format!("adagrad tensor {} has no row list", base)))?;
            if t.rows() != rows.len() {
                return Err(ck_err(format!(
                    "adagrad tensor {}: {} rows stored, {} listed",
                    base,
                    t.rows(),
                    rows.len()
                )));
            }
            let mut m = BTreeMap::new();
            for (i, &r) in rows.iter().enumerate() {
                m.insert(r, t.row(i).to_vec());
            }
            opt.adagrad.insert(base.to_string(), m);
        } else {
            return Err(ck_err(format!("unexpected tensor {}", name)));
        }
    }

    for (name, p) in params.iter() {
        if let Some(m) = opt.adam_m.get(name) {
            if m.shape != p.tensor.shape {
                return Err(ck_err(format!("adam moment shape mismatch for {}", name)));
            }
        }
    }

    Ok(Checkpoint {
        model: header.model,
        loss: header.loss,
        train: header.train,
        params,
        opt,
        phase_cursor: header.phase_cursor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Parameters;
    use crate::train::optimizer::OptimizerState;
    use crate::train::run::{train_steps, tests::tiny_setup};

    fn trained_checkpoint() -> (crate::data::Dataset, Checkpoint, Vec<f64>) {
        let (ds, mcfg, lcfg, tcfg) = tiny_setup();
        let mut params = Parameters::init(&mcfg, 1);
        let mut opt = OptimizerState::new(1e-3);
        let series = train_steps(&ds, &mut params, &mut opt, &mcfg, &lcfg, &tcfg, 4).unwrap();
        let losses = series.iter().map(|m| m.breakdown.total).collect();
        (
            ds,
            Checkpoint {
                model: mcfg,
                loss: lcfg,
                train: tcfg,
                params,
                opt,
                phase_cursor: 0,
            },
            losses,
        )
    }

    #[test]
    fn round_trip_is_bitwise_equal() {
        let (_, ck, _) = trained_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        checkpoint_save(&path, &ck).unwrap();
        let loaded = checkpoint_load(&path).unwrap();
        assert_eq!(loaded, ck);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (_, ck, _) = trained_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        checkpoint_save(&path, &ck).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [3usize, 7, 20, bytes.len() / 2, bytes.len() - 9] {
            let short = &bytes[..cut];
            let p2 = dir.path().join("cut.ckpt");
            fs::write(&p2, short).unwrap();
            assert!(checkpoint_load(&p2).is_err(), "cut at {}", cut);
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = checkpoint_load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (ds, mut ck, _) = trained_checkpoint();

        // Uninterrupted: 4 more steps on the same state.
        let mut params_full = ck.params.clone();
        let mut opt_full = ck.opt.clone();
        let cont = train_steps(
            &ds,
            &mut params_full,
            &mut opt_full,
            &ck.model,
            &ck.loss,
            &ck.train,
            4,
        )
        .unwrap();

        // Interrupted: save, load, then the same 4 steps.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        checkpoint_save(&path, &ck).unwrap();
        let mut loaded = checkpoint_load(&path).unwrap();
        let resumed = train_steps(
            &ds,
            &mut loaded.params,
            &mut loaded.opt,
            &loaded.model,
            &loaded.loss,
            &loaded.train,
            4,
        )
        .unwrap();

        for (a, b) in cont.iter().zip(&resumed) {
            assert_eq!(a.breakdown.total.to_bits(), b.breakdown.total.to_bits());
        }
        assert_eq!(params_full, loaded.params);
        // Silence the unused-field warning path: cursor survives the trip.
        ck.phase_cursor = 3;
        checkpoint_save(&path, &ck).unwrap();
        assert_eq!(checkpoint_load(&path).unwrap().phase_cursor, 3);
    }
}
