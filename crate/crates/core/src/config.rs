//! `key = value` run settings.
//!
//! Files hold one assignment per line; blank lines and lines starting with
//! `#` are skipped, and a later assignment to the same key wins.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{AugmentConfig, SceneConfig};
use crate::error::{Error, Result};
use crate::losses::LossMode;
use crate::network::ModelConfig;
use crate::train::TrainConfig;

/// Ordered key/value assignments.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got '{line}'",
                    n + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            kv.set(key, value.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Value of the last assignment to `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn range(key: &str, v: &str) -> Result<(f64, f64)> {
    let (lo, hi) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected 'lo,hi', got '{v}'")))?;
    Ok((value(key, lo.trim())?, value(key, hi.trim())?))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| value(key, p.trim())).collect()
}

/// Everything a run needs: optimisation, model shape and scene synthesis.
/// Image size and class count are shared by the model and the scenes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub scene: SceneConfig,
}

impl Settings {
    /// Applies every assignment in order; unknown keys are errors.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv.iter() {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (t, m, s) = (&mut self.train, &mut self.model, &mut self.scene);
        match key {
            "epochs" => t.epochs = value(key, v)?,
            "batch_size" => t.batch_size = value(key, v)?,
            "lr" => t.lr0 = value(key, v)?,
            "seed" => t.seed = value(key, v)?,
            "mode" => t.mode = v.parse::<LossMode>()?,
            "eval_interval" => t.eval_interval = value(key, v)?,
            "pp" => t.eval_pp = value(key, v)?,
            "alpha_d" => t.weights.alpha_d = value(key, v)?,
            "alpha_s" => t.weights.alpha_s = value(key, v)?,
            "alpha_cdd" => t.weights.alpha_cdd = value(key, v)?,
            "beta_ap" => t.weights.beta_ap = value(key, v)?,
            "beta_ds" => t.weights.beta_ds = value(key, v)?,
            "beta_lr" => t.weights.beta_lr = value(key, v)?,
            "gamma" => t.weights.gamma = value(key, v)?,
            "ssim_window" => t.ssim.window = value(key, v)?,
            "ssim_c1" => t.ssim.c1 = value(key, v)?,
            "ssim_c2" => t.ssim.c2 = value(key, v)?,
            "adam_beta1" => t.adam.beta1 = value(key, v)?,
            "adam_beta2" => t.adam.beta2 = value(key, v)?,
            "adam_eps" => t.adam.eps = value(key, v)?,
            "aug_gamma" => t.augment.gamma = range(key, v)?,
            "aug_brightness" => t.augment.brightness = range(key, v)?,
            "aug_color" => t.augment.color = range(key, v)?,
            "flip_probability" => t.augment.flip_probability = value(key, v)?,
            "augment" => {
                if !value::<bool>(key, v)? {
                    t.augment = AugmentConfig::identity();
                }
            }
            "min_depth" => t.eval.min_depth = value(key, v)?,
            "max_depth" => t.eval.max_depth = value(key, v)?,
            "delta_base" => t.eval.delta_base = value(key, v)?,
            "encoder_channels" => m.encoder_channels = list(key, v)?,
            "d_max_fraction" => m.d_max_fraction = value(key, v)?,
            "num_classes" => {
                m.num_classes = value(key, v)?;
                s.num_classes = m.num_classes;
            }
            "height" => {
                m.height = value(key, v)?;
                s.height = m.height;
            }
            "width" => {
                m.width = value(key, v)?;
                s.width = m.width;
            }
            "objects_min" => s.min_objects = value(key, v)?,
            "objects_max" => s.max_objects = value(key, v)?,
            "d_min" => s.d_min = value(key, v)?,
            "d_max" => s.d_max = value(key, v)?,
            "octaves" => s.octaves = value(key, v)?,
            "object_scale" => s.object_scale = value(key, v)?,
            "scene_seed" => s.seed = value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every setting, in a form [`Settings::apply`] reads back exactly.
    pub fn to_key_values(&self) -> KeyValues {
        let (t, m, s) = (&self.train, &self.model, &self.scene);
        let mut kv = KeyValues::default();
        let pair = |r: (f64, f64)| format!("{},{}", r.0, r.1);
        kv.set("epochs", t.epochs);
        kv.set("batch_size", t.batch_size);
        kv.set("lr", t.lr0);
        kv.set("seed", t.seed);
        kv.set("mode", t.mode);
        kv.set("eval_interval", t.eval_interval);
        kv.set("pp", t.eval_pp);
        kv.set("alpha_d", t.weights.alpha_d);
        kv.set("alpha_s", t.weights.alpha_s);
        kv.set("alpha_cdd", t.weights.alpha_cdd);
        kv.set("beta_ap", t.weights.beta_ap);
        kv.set("beta_ds", t.weights.beta_ds);
        kv.set("beta_lr", t.weights.beta_lr);
        kv.set("gamma", t.weights.gamma);
        kv.set("ssim_window", t.ssim.window);
        kv.set("ssim_c1", t.ssim.c1);
        kv.set("ssim_c2", t.ssim.c2);
        kv.set("adam_beta1", t.adam.beta1);
        kv.set("adam_beta2", t.adam.beta2);
        kv.set("adam_eps", t.adam.eps);
        kv.set("aug_gamma", pair(t.augment.gamma));
        kv.set("aug_brightness", pair(t.augment.brightness));
        kv.set("aug_color", pair(t.augment.color));
        kv.set("flip_probability", t.augment.flip_probability);
        kv.set("min_depth", t.eval.min_depth);
        kv.set("max_depth", t.eval.max_depth);
        kv.set("delta_base", t.eval.delta_base);
        let channels: Vec<String> = m.encoder_channels.iter().map(|c| c.to_string()).collect();
        kv.set("encoder_channels", channels.join(","));
        kv.set("d_max_fraction", m.d_max_fraction);
        kv.set("num_classes", m.num_classes);
        kv.set("height", m.height);
        kv.set("width", m.width);
        kv.set("objects_min", s.min_objects);
        kv.set("objects_max", s.max_objects);
        kv.set("d_min", s.d_min);
        kv.set("d_max", s.d_max);
        kv.set("octaves", s.octaves);
        kv.set("object_scale", s.object_scale);
        kv.set("scene_seed", s.seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.scene.validate()?;
        let (m, s) = (&self.model, &self.scene);
        if (m.height, m.width, m.num_classes) != (s.height, s.width, s.num_classes) {
            return Err(Error::Config(format!(
                "model expects {}x{} with {} classes but scenes are {}x{} with {}",
                m.width, m.height, m.num_classes, s.width, s.height, s.num_classes
            )));
        }
        Ok(())
    }
}
