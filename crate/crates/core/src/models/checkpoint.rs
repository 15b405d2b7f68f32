//! Checkpoint directories: `config.json`, `manifest.txt` and one tensor dump
//! per parameter or buffer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tencore::Tensor;

use crate::error::{Error, Result};

use super::config::{ModelConfig, ModelKind};
use super::net::Model;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointConfig {
    schema_version: u32,
    kind: ModelKind,
    config: ModelConfig,
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn require_path(dir: &Path) -> Result<()> {
    if dir.as_os_str().is_empty() {
        return Err(Error::config("empty checkpoint path"));
    }
    Ok(())
}

fn tensor_err(path: &Path) -> impl FnOnce(tencore::TensorError) -> Error + '_ {
    move |e| Error::data(format!("{}: {e}", path.display()))
}

/// Writes `model` to `dir` (created if missing). Values are stored as `f32`.
pub fn save_checkpoint(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    require_path(dir)?;
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let cfg = CheckpointConfig {
        schema_version: CHECKPOINT_SCHEMA,
        kind: model.kind(),
        config: model.config().clone(),
    };
    let cfg_path = dir.join("config.json");
    let json = serde_json::to_string_pretty(&cfg).map_err(|source| Error::Json {
        path: cfg_path.clone(),
        source,
    })?;
    fs::write(&cfg_path, json + "\n").map_err(Error::io(&cfg_path))?;

    let mut manifest = String::new();
    for (section, store) in [("param", model.params()), ("buffer", model.buffers())] {
        for (path, t) in store.iter() {
            let file = format!("{path}.t32");
            let full = dir.join(&file);
            t.save(&full).map_err(tensor_err(&full))?;
            manifest.push_str(&format!("{section} {path} {file} {}\n", shape_text(t.shape())));
        }
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(Error::io(&mpath))
}

fn read_config(dir: &Path) -> Result<CheckpointConfig> {
    let path = dir.join("config.json");
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let cfg: CheckpointConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    if cfg.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::data(format!(
            "{}: unsupported checkpoint schema {}",
            path.display(),
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

/// Rebuilds the model described by `dir/config.json` and loads its weights.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    require_path(dir)?;
    let cfg = read_config(dir)?;
    let mut model = Model::build(cfg.kind, &cfg.config, 0)?;
    load_arrays(&mut model, dir)?;
    Ok(model)
}

/// Loads weights into an existing model, refusing checkpoints written for a
/// different kind or configuration.
pub fn load_weights(model: &mut Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    require_path(dir)?;
    let cfg = read_config(dir)?;
    if cfg.kind != model.kind() || &cfg.config != model.config() {
        return Err(Error::config(format!(
            "checkpoint {} was written for a different model configuration",
            dir.display()
        )));
    }
    load_arrays(model, dir)
}

fn load_arrays(model: &mut Model, dir: &Path) -> Result<()> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(Error::io(&mpath))?;
    let mut seen = (0usize, 0usize);
    for (lineno, line) in text.lines().enumerate() {
        let bad = || Error::data(format!("{}:{}: malformed line {line:?}", mpath.display(), lineno + 1));
        let fields: Vec<&str> = line.split(' ').collect();
        let [section, path, file, shape] = fields[..] else {
            return Err(bad());
        };
        let full = dir.join(file);
        let t: Tensor = Tensor::load(&full).map_err(tensor_err(&full))?;
        if shape_text(t.shape()) != shape {
            return Err(Error::data(format!(
                "{}: shape {:?} disagrees with manifest {shape}",
                full.display(),
                t.shape()
            )));
        }
        match section {
            "param" => {
                model.params_mut().set(path, t)?;
                seen.0 += 1;
            }
            "buffer" => {
                model.buffers_mut().set(path, t)?;
                seen.1 += 1;
            }
            _ => return Err(bad()),
        }
    }
    if seen != (model.params().len(), model.buffers().len()) {
        return Err(Error::data(format!(
            "{}: lists {} parameters and {} buffers, model has {} and {}",
            mpath.display(),
            seen.0,
            seen.1,
            model.params().len(),
            model.buffers().len()
        )));
    }
    Ok(())
}
