//! Settings resolution: built-in template, then config file, then flags.

use std::fs;
use std::path::Path;

use aa_nowcast::dataio::{PrepareMode, Prepared};
use aa_nowcast::models::{ModelConfig, ModelKind};
use aa_nowcast::trainer::TrainConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::args::{ModelArg, RecipeArgs, TemplateArg};
use crate::run::usage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn model_kind(m: ModelArg) -> ModelKind {
    match m {
        ModelArg::AaTransunet => ModelKind::AaTransunet,
        ModelArg::Transunet => ModelKind::Transunet,
        ModelArg::Unet => ModelKind::Unet,
    }
}

pub fn template_model(t: TemplateArg) -> ModelConfig {
    match t {
        TemplateArg::Precipitation => ModelConfig::precipitation(),
        TemplateArg::Cloud => ModelConfig::cloud(),
        TemplateArg::Tiny => ModelConfig::tiny(),
        TemplateArg::Smoke => ModelConfig::smoke(),
    }
}

fn template_train(t: TemplateArg) -> TrainConfig {
    match t {
        TemplateArg::Cloud => TrainConfig::cloud(),
        _ => TrainConfig::precipitation(),
    }
}

/// Overlays `top` on `base`, descending into objects.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads a config file: a JSON object with optional `model` and `train`
/// sections.
pub fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let Value::Object(map) = v else {
        return Err(usage(format!("config {}: expected a JSON object", path.display())));
    };
    if let Some(k) = map.keys().find(|k| !matches!(k.as_str(), "model" | "train")) {
        return Err(usage(format!("config {}: unknown section {k:?}", path.display())));
    }
    Ok(map)
}

fn decode<T: for<'de> Deserialize<'de>>(what: &str, v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| usage(format!("{what} settings: {e}")))
}

/// Model settings from a template and an optional config file.
pub fn resolve_model(template: TemplateArg, config: Option<&Path>, depth: Option<u64>) -> Result<ModelConfig> {
    let mut model = serde_json::to_value(template_model(template))?;
    if let Some(path) = config {
        if let Some(m) = read_config_file(path)?.remove("model") {
            merge(&mut model, m);
        }
    }
    let mut cfg: ModelConfig = decode("model", model)?;
    if let Some(d) = depth {
        cfg.depth = d as usize;
    }
    Ok(cfg)
}

/// Full training recipe for `kind` on `data`. Frame counts and image size
/// always follow the prepared dataset.
pub fn resolve_recipe(kind: ModelKind, r: &RecipeArgs, depth: Option<u64>, data: &Prepared) -> Result<Recipe> {
    let template = r.template.unwrap_or(match data.meta.options.mode {
        PrepareMode::Precip => TemplateArg::Precipitation,
        PrepareMode::Cloud => TemplateArg::Cloud,
    });
    let mut model = serde_json::to_value(template_model(template))?;
    let mut train = serde_json::to_value(template_train(template))?;
    if let Some(path) = &r.config {
        let mut file = read_config_file(path)?;
        if let Some(m) = file.remove("model") {
            merge(&mut model, m);
        }
        if let Some(t) = file.remove("train") {
            merge(&mut train, t);
        }
    }
    let mut model: ModelConfig = decode("model", model)?;
    let mut train: TrainConfig = decode("train", train)?;
    if let Some(d) = depth {
        model.depth = d as usize;
    }
    if let Some(p) = r.dropout {
        model.dropout = p;
    }
    let w = &data.meta.options.window;
    model.in_frames = w.input_frames;
    model.out_frames = w.target_count();
    let [h, wd] = data.dataset.frame_shape;
    if h != wd {
        return Err(usage(format!("models need square frames, dataset has {h}x{wd}")));
    }
    model.image_size = h;
    if let Some(v) = r.max_epochs {
        train.max_epochs = v;
    }
    if let Some(v) = r.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = r.lr {
        train.lr = v;
    }
    if let Some(v) = r.seed {
        train.seed = v;
    }
    model.validate(kind)?;
    train.validate()?;
    Ok(Recipe { kind, model, train })
}
