//! Run configuration: flat `key = value` files, overridable by flags.
//!
//! Blank lines and lines starting with `#` are ignored. Keys:
//!
//! | key | value |
//! |-----|-------|
//! | `data` | dataset root |
//! | `out` | run directory |
//! | `train_split`, `val_split` | split names (`train`, `val`) |
//! | `patch_size` | sets `patch_height` and `patch_width` |
//! | `patch_height`, `patch_width` | patch dims |
//! | `stride` | sets `stride_y` and `stride_x` |
//! | `stride_y`, `stride_x` | training strides |
//! | `coverage` | `clamp` or `drop` |
//! | `lr`, `batch_size`, `patience`, `max_epochs`, `seed` | optimizer and loop |
//! | `balance_classes`, `stop_at_full_train_accuracy` | `true` / `false` |
//! | `augment_rotate180`, `augment_hflip`, `augment_vflip` | `true` / `false` |
//! | `augment_zoom` | maximum zoom factor or `none` |
//! | `augment_zoom_anchor` | `center` or `random` |
//! | `augment_mode` | `per_epoch` or `expanded` |
//! | `resize` | `HxW` or `none` |
//! | `gamma` | exponent or `none` |
//! | `gamma_direction` | `decode` or `encode` |
//! | `color_constancy` | Minkowski norm or `none` |
//! | `deterministic` | `true` / `false` |
//! | `threads` | worker count or `auto` |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use patchnet_core::imaging::{AugmentPolicy, GammaDirection, Preprocess, ZoomAnchor};
use patchnet_core::optim::{AdamConfig, AugmentMode};
use patchnet_core::patchcore::Coverage;
use patchnet_core::{PatchConfig, TrainConfig};

use crate::error::{Error, Result};

pub const DEFAULT_PATCH: usize = 17;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub train: TrainConfig,
    pub preprocess: Preprocess,
    pub deterministic: bool,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: PathBuf::from("run"),
            train_split: "train".into(),
            val_split: "val".into(),
            train: TrainConfig::new(PatchConfig::square(DEFAULT_PATCH, DEFAULT_PATCH)),
            preprocess: Preprocess::default(),
            deterministic: false,
            threads: None,
        }
    }
}

fn usage(key: &str, value: &str, why: &str) -> Error {
    Error::Usage(format!("{key} = {value}: {why}"))
}

fn positive(key: &str, value: &str) -> Result<usize> {
    match value.parse::<usize>() {
        Ok(0) => Err(usage(key, value, "must be at least 1")),
        Ok(v) => Ok(v),
        Err(_) => Err(usage(key, value, "expected a positive integer")),
    }
}

fn float(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| usage(key, value, "expected a number"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(usage(key, value, "expected true or false")),
    }
}

fn optional<T>(value: &str, parse: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(value).map(Some)
    }
}

/// Parses `HxW`.
pub fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    let (h, w) = value.split_once('x').ok_or_else(|| usage(key, value, "expected HxW"))?;
    Ok((positive(key, h)?, positive(key, w)?))
}

pub fn parse_preprocess_key(pre: &mut Preprocess, key: &str, value: &str) -> Result<bool> {
    match key {
        "resize" => pre.resize = optional(value, |v| parse_size(key, v))?,
        "gamma" => {
            pre.gamma = optional(value, |v| {
                let g = float(key, v)?;
                if g > 0.0 {
                    Ok(g)
                } else {
                    Err(usage(key, v, "must be positive"))
                }
            })?
        }
        "gamma_direction" => {
            pre.gamma_direction = match value {
                "decode" => GammaDirection::Decode,
                "encode" => GammaDirection::Encode,
                _ => return Err(usage(key, value, "expected decode or encode")),
            }
        }
        "color_constancy" => {
            pre.color_constancy = optional(value, |v| {
                let p = float(key, v)?;
                if p >= 1.0 {
                    Ok(p)
                } else {
                    Err(usage(key, v, "norm must be at least 1"))
                }
            })?
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn show_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or("none".into(), |v| v.to_string())
}

pub fn preprocess_lines(pre: &Preprocess) -> String {
    let mut out = String::new();
    let resize = pre.resize.map(|(h, w)| format!("{h}x{w}"));
    let direction = match pre.gamma_direction {
        GammaDirection::Decode => "decode",
        GammaDirection::Encode => "encode",
    };
    let _ = writeln!(out, "resize = {}", show_opt(resize));
    let _ = writeln!(out, "gamma = {}", show_opt(pre.gamma));
    let _ = writeln!(out, "gamma_direction = {direction}");
    let _ = writeln!(out, "color_constancy = {}", show_opt(pre.color_constancy));
    out
}

/// `key = value` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("config line {}: expected key = value", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(&text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if parse_preprocess_key(&mut self.preprocess, key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "train_split" => self.train_split = value.into(),
            "val_split" => self.val_split = value.into(),
            "patch_size" => {
                let v = positive(key, value)?;
                t.patch.height = v;
                t.patch.width = v;
            }
            "patch_height" => t.patch.height = positive(key, value)?,
            "patch_width" => t.patch.width = positive(key, value)?,
            "stride" => {
                let v = positive(key, value)?;
                t.patch.stride_y = v;
                t.patch.stride_x = v;
            }
            "stride_y" => t.patch.stride_y = positive(key, value)?,
            "stride_x" => t.patch.stride_x = positive(key, value)?,
            "coverage" => {
                t.patch.coverage = match value {
                    "clamp" => Coverage::ClampToEdge,
                    "drop" => Coverage::DropRemainder,
                    _ => return Err(usage(key, value, "expected clamp or drop")),
                }
            }
            "lr" => {
                let lr = float(key, value)?;
                if lr <= 0.0 {
                    return Err(usage(key, value, "must be positive"));
                }
                t.adam = AdamConfig { lr, ..t.adam };
            }
            "batch_size" => t.batch_size = positive(key, value)?,
            "patience" => t.patience = positive(key, value)?,
            "max_epochs" => t.max_epochs = positive(key, value)?,
            "seed" => {
                t.seed = value
                    .parse()
                    .map_err(|_| usage(key, value, "expected an unsigned integer"))?
            }
            "balance_classes" => t.balance_classes = flag(key, value)?,
            "stop_at_full_train_accuracy" => t.stop_at_full_train_accuracy = flag(key, value)?,
            "augment_rotate180" => t.augment.rotate180 = flag(key, value)?,
            "augment_hflip" => t.augment.hflip = flag(key, value)?,
            "augment_vflip" => t.augment.vflip = flag(key, value)?,
            "augment_zoom" => {
                t.augment.zoom_max = optional(value, |v| float(key, v))?;
                t.augment.validate().map_err(|e| usage(key, value, &e.to_string()))?;
            }
            "augment_zoom_anchor" => {
                t.augment.zoom_anchor = match value {
                    "center" => ZoomAnchor::Center,
                    "random" => ZoomAnchor::Random,
                    _ => return Err(usage(key, value, "expected center or random")),
                }
            }
            "augment_mode" => {
                t.augment_mode = match value {
                    "per_epoch" => AugmentMode::PerEpoch,
                    "expanded" => AugmentMode::Expanded,
                    _ => return Err(usage(key, value, "expected per_epoch or expanded")),
                }
            }
            "deterministic" => self.deterministic = flag(key, value)?,
            "threads" => {
                self.threads = if value == "auto" {
                    None
                } else {
                    Some(positive(key, value)?)
                }
            }
            _ => return Err(Error::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in the documented order. Parsing
    /// the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let p = &t.patch;
        let a: &AugmentPolicy = &t.augment;
        let mut out = String::from("# resolved run configuration\n");
        if let Some(d) = &self.data {
            let _ = writeln!(out, "data = {}", d.display());
        }
        let _ = writeln!(out, "out = {}", self.out.display());
        let _ = writeln!(out, "train_split = {}", self.train_split);
        let _ = writeln!(out, "val_split = {}", self.val_split);
        let _ = writeln!(out, "patch_height = {}", p.height);
        let _ = writeln!(out, "patch_width = {}", p.width);
        let _ = writeln!(out, "stride_y = {}", p.stride_y);
        let _ = writeln!(out, "stride_x = {}", p.stride_x);
        let coverage = match p.coverage {
            Coverage::ClampToEdge => "clamp",
            Coverage::DropRemainder => "drop",
        };
        let _ = writeln!(out, "coverage = {coverage}");
        let _ = writeln!(out, "lr = {}", t.adam.lr);
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "patience = {}", t.patience);
        let _ = writeln!(out, "max_epochs = {}", t.max_epochs);
        let _ = writeln!(out, "seed = {}", t.seed);
        let _ = writeln!(out, "balance_classes = {}", t.balance_classes);
        let _ = writeln!(out, "stop_at_full_train_accuracy = {}", t.stop_at_full_train_accuracy);
        let _ = writeln!(out, "augment_rotate180 = {}", a.rotate180);
        let _ = writeln!(out, "augment_hflip = {}", a.hflip);
        let _ = writeln!(out, "augment_vflip = {}", a.vflip);
        let _ = writeln!(out, "augment_zoom = {}", show_opt(a.zoom_max));
        let anchor = match a.zoom_anchor {
            ZoomAnchor::Center => "center",
            ZoomAnchor::Random => "random",
        };
        let _ = writeln!(out, "augment_zoom_anchor = {anchor}");
        let mode = match t.augment_mode {
            AugmentMode::PerEpoch => "per_epoch",
            AugmentMode::Expanded => "expanded",
        };
        let _ = writeln!(out, "augment_mode = {mode}");
        out.push_str(&preprocess_lines(&self.preprocess));
        let _ = writeln!(out, "deterministic = {}", self.deterministic);
        let _ = writeln!(
            out,
            "threads = {}",
            self.threads.map_or("auto".into(), |n| n.to_string())
        );
        out
    }
}
