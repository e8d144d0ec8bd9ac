//! Checkpoint container.
//!
//! Layout (little endian): magic `SCNC`, `u32` version, `u64` manifest length,
//! UTF-8 manifest, `u64` tensor count, the tensor records (every store entry
//! in order, then the Adam first and second moments), and a CRC-32 of all
//! preceding bytes.
//!
//! The manifest is line oriented:
//!
//! ```text
//! config <key> = <value>
//! optimizer <field> = <value>
//! param <name> <NxCxHxW> <trainable|buffer>
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use crate::config::{Config, MODEL_KEYS};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::OptimState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointMode {
    Save,
    Load,
}

fn manifest(config: &Config, model: &Model, opt: &OptimState) -> String {
    let mut s = String::new();
    for (k, v) in config.pairs() {
        s.push_str(&format!("config {k} = {v}\n"));
    }
    for (k, v) in [
        ("lr", format!("{:?}", opt.lr)),
        ("beta1", format!("{:?}", opt.beta1)),
        ("beta2", format!("{:?}", opt.beta2)),
        ("eps", format!("{:?}", opt.eps)),
        ("step", opt.step.to_string()),
    ] {
        s.push_str(&format!("optimizer {k} = {v}\n"));
    }
    for e in model.store.entries() {
        let kind = if e.trainable { "trainable" } else { "buffer" };
        s.push_str(&format!("param {} {} {kind}\n", e.name, e.value.shape()));
    }
    s
}

/// Serializes the full run config, every parameter and buffer, and the
/// optimizer state.
pub fn to_bytes(config: &Config, model: &Model, opt: &OptimState) -> Result<Vec<u8>> {
    if config.model != model.config {
        return Err(Error::InvalidArgument(
            "run config and model config disagree".into(),
        ));
    }
    let text = manifest(config, model, opt);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let count = model.store.len() + 2 * opt.m.len();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    let tensors = model
        .store
        .entries()
        .iter()
        .map(|e| &e.value)
        .chain(&opt.m)
        .chain(&opt.v);
    for t in tensors {
        t.write_to(&mut out).expect("writing to a Vec cannot fail");
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decoded checkpoint contents, not yet bound to a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub config_pairs: Vec<(String, String)>,
    pub optimizer: Vec<(String, String)>,
    pub params: Vec<(String, bool, Tensor)>,
    pub moments: Vec<Tensor>,
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Truncated("checkpoint header".into()))?;
    Ok(u64::from_le_bytes(b))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 + 4 + 8 + 8 + 4 {
        return Err(Error::Truncated(format!(
            "checkpoint of {} bytes",
            bytes.len()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if &body[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: "SCNC".into(),
            found: String::from_utf8_lossy(&body[..4]).into_owned(),
        });
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let mut r = Cursor::new(&body[8..]);
    let len = read_u64(&mut r)? as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)
        .map_err(|_| Error::Truncated("checkpoint manifest".into()))?;
    let text = String::from_utf8(text)
        .map_err(|_| Error::Config("checkpoint manifest is not UTF-8".into()))?;

    let mut config = Config::default();
    let mut config_pairs = Vec::new();
    let mut optimizer = Vec::new();
    let mut names = Vec::new();
    for line in text.lines() {
        let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
        match kind {
            "config" | "optimizer" => {
                let (k, v) = rest
                    .split_once(" = ")
                    .or_else(|| rest.strip_suffix(" =").map(|k| (k, "")))
                    .ok_or_else(|| Error::Config(format!("bad manifest line `{line}`")))?;
                if kind == "config" {
                    config.set(k, v)?;
                    config_pairs.push((k.to_string(), v.to_string()));
                } else {
                    optimizer.push((k.to_string(), v.to_string()));
                }
            }
            "param" => {
                let fields: Vec<&str> = rest.split(' ').collect();
                match fields[..] {
                    [name, _, flag] => names.push((name.to_string(), flag == "trainable")),
                    _ => return Err(Error::Config(format!("bad manifest line `{line}`"))),
                }
            }
            _ => return Err(Error::Config(format!("bad manifest line `{line}`"))),
        }
    }
    let count = read_u64(&mut r)? as usize;
    let trainable = names.iter().filter(|(_, t)| *t).count();
    if count != names.len() + 2 * trainable {
        return Err(Error::Config(format!(
            "checkpoint holds {count} tensors but the manifest implies {}",
            names.len() + 2 * trainable
        )));
    }
    let mut params = Vec::with_capacity(names.len());
    for (name, t) in names {
        params.push((name, t, Tensor::read_from(&mut r)?));
    }
    let moments = (0..2 * trainable)
        .map(|_| Tensor::read_from(&mut r))
        .collect::<Result<_>>()?;
    if (r.position() as usize) != body.len() - 8 {
        return Err(Error::Config(
            "trailing bytes after checkpoint tensors".into(),
        ));
    }
    Ok(Checkpoint {
        config,
        config_pairs,
        optimizer,
        params,
        moments,
    })
}

fn opt_field(ck: &Checkpoint, key: &str) -> Result<String> {
    ck.optimizer
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.clone())
        .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer field `{key}`")))
}

/// Checks `ck` against `model` and `opt` completely, then assigns. Nothing
/// is modified when any check fails.
pub fn load_into(ck: &Checkpoint, model: &mut Model, opt: &mut OptimState) -> Result<()> {
    let current = Config {
        model: model.config.clone(),
        ..Config::default()
    };
    let ours = current.pairs();
    for key in MODEL_KEYS {
        let mine = &ours
            .iter()
            .find(|(k, _)| *k == key)
            .expect("model key listed")
            .1;
        let theirs = ck
            .config_pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or("<missing>");
        if mine != theirs {
            return Err(Error::ConfigMismatch {
                key: key.to_string(),
                expected: mine.clone(),
                found: theirs.to_string(),
            });
        }
    }
    let entries = model.store.entries();
    if entries.len() != ck.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, model has {}",
            ck.params.len(),
            entries.len()
        )));
    }
    for (e, (name, trainable, t)) in entries.iter().zip(&ck.params) {
        if &e.name != name || e.trainable != *trainable || e.value.shape() != t.shape() {
            return Err(Error::Config(format!(
                "parameter `{}` {} does not match checkpoint `{name}` {}",
                e.name,
                e.value.shape(),
                t.shape()
            )));
        }
    }
    if ck.moments.len() != 2 * opt.ids.len() {
        return Err(Error::Config(
            "optimizer moment count does not match".into(),
        ));
    }
    let parse = |key: &str| -> Result<f64> {
        opt_field(ck, key)?
            .parse()
            .map_err(|_| Error::Config(format!("bad optimizer field `{key}`")))
    };
    let (lr, beta1, beta2, eps) = (
        parse("lr")?,
        parse("beta1")?,
        parse("beta2")?,
        parse("eps")?,
    );
    let step: u64 = opt_field(ck, "step")?
        .parse()
        .map_err(|_| Error::Config("bad optimizer step".into()))?;

    let ids: Vec<_> = model.store.ids().collect();
    for (id, (_, _, t)) in ids.into_iter().zip(&ck.params) {
        *model.store.get_mut(id) = t.clone();
    }
    let half = opt.ids.len();
    opt.m = ck.moments[..half].to_vec();
    opt.v = ck.moments[half..].to_vec();
    opt.lr = lr;
    opt.beta1 = beta1;
    opt.beta2 = beta2;
    opt.eps = eps;
    opt.step = step;
    Ok(())
}

/// Saves `model`/`opt` under `config` or loads them back.
pub fn checkpoint(
    config: &Config,
    model: &mut Model,
    opt: &mut OptimState,
    path: &Path,
    mode: CheckpointMode,
) -> Result<()> {
    match mode {
        CheckpointMode::Save => {
            let bytes = to_bytes(config, model, opt)?;
            std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
        }
        CheckpointMode::Load => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            load_into(&from_bytes(&bytes)?, model, opt)
        }
    }
}

/// Rebuilds the model and optimizer described by a checkpoint file, returning
/// the stored run config alongside.
pub fn restore(path: &Path) -> Result<(Config, Model, OptimState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = from_bytes(&bytes)?;
    let mut model = Model::new(ck.config.model.clone())?;
    let t = &ck.config.train;
    let mut opt = OptimState::adam(&model.store, t.lr, t.beta1, t.beta2, t.adam_eps);
    load_into(&ck, &mut model, &mut opt)?;
    Ok((ck.config, model, opt))
}
