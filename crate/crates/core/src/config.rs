//! Flat run options, named presets and their resolution into a
//! [`TrainConfig`].
//!
//! Options come in layers: built-in defaults, then a preset, then a config
//! file, then command-line flags. Each layer only overrides the keys it
//! sets.

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, TokenMode};
use crate::error::{Error, Result};
use crate::sparsify::SparsifierConfig;
use crate::tensor::{Precision, TileShape};
use crate::train::{ModelConfig, TrainConfig, TrainSchedule};

/// Written next to every training run. Its `options` replayed through
/// `train --from-manifest` reproduce the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub options: RunOptions,
    pub config: TrainConfig,
    pub corpus: String,
    pub vocab_size: usize,
    pub threads: usize,
    pub tile: TileShape,
    pub artifacts: Artifacts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub manifest: String,
    pub metrics: String,
    pub checkpoint: String,
    pub vocab: String,
}

macro_rules! run_options {
    ($($(#[$doc:meta])* $field:ident: $ty:ty,)*) => {
        /// Every key accepted by a config file; all optional.
        #[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct RunOptions {
            $($(#[$doc])* #[serde(default, skip_serializing_if = "Option::is_none")] pub $field: Option<$ty>,)*
        }

        impl RunOptions {
            /// Keys set in `top` win over keys set in `self`.
            pub fn overlay(self, top: RunOptions) -> RunOptions {
                RunOptions { $($field: top.$field.or(self.$field),)* }
            }
        }
    };
}

run_options! {
    preset: String,
    steps: u64,
    seed: u64,
    hidden: usize,
    embedding_dim: usize,
    layers: usize,
    unroll: usize,
    batch: usize,
    precision: Precision,
    init_scale: f64,
    lr: f64,
    lr_decay: f64,
    decay_start_epoch: u64,
    clip_norm: f64,
    /// identity | coarse | fine | column-topk
    sparsifier: String,
    slice_width: usize,
    region: usize,
    removed: usize,
    embed_index: bool,
    tile_rows: usize,
    tile_cols: usize,
    keep: usize,
    topk: usize,
    /// Fine and column-topk: target sparsity when `keep`/`topk` is unset.
    sparsity: f64,
    /// Fraction of the steps run sparse before switching to dense.
    sparse_fraction: f64,
    corpus: String,
    token_mode: TokenMode,
    max_vocab: usize,
    valid_fraction: f64,
    eval_every: u64,
    wall_time: bool,
}

/// Preset names with a one-line description.
pub const PRESETS: &[(&str, &str)] = &[
    ("dense", "identity sparsifier for every step"),
    ("table1-coarse-r4s2", "coarse R=4 S=2 (50%) for every step"),
    ("table1-coarse-r8s2", "coarse R=8 S=2 (25%) for every step"),
    ("table1-coarse-r8s4", "coarse R=8 S=4 (50%) for every step"),
    ("table1-coarse-r8s6", "coarse R=8 S=6 (75%) for every step"),
    ("table1-coarse-r16s8", "coarse R=16 S=8 (50%) for every step"),
    ("table1-coarse-r32s16", "coarse R=32 S=16 (50%) for every step"),
    ("table1-fine-k2", "fine 8x4 tiles at 25% sparsity for every step"),
    ("table1-fine-k4", "fine 8x4 tiles at 50% sparsity for every step"),
    ("table1-fine-k6", "fine 8x4 tiles at 75% sparsity for every step"),
    ("table2-mixed-1to1", "coarse R=8 S=4 for 1/2 of the steps, then dense"),
    ("table2-mixed-3to1", "coarse R=8 S=4 for 3/4 of the steps, then dense"),
    ("table2-mixed-5to1", "coarse R=8 S=4 for 5/6 of the steps, then dense"),
    ("meprop-50", "unified top-k keeping half of the gate columns for every step"),
];

impl RunOptions {
    /// Desk-scale model, bundled character corpus, 2000 dense steps.
    pub fn defaults() -> Self {
        RunOptions {
            steps: Some(2000),
            seed: Some(1),
            hidden: Some(128),
            embedding_dim: Some(128),
            layers: Some(2),
            unroll: Some(20),
            batch: Some(16),
            precision: Some(Precision::F32),
            init_scale: Some(0.1),
            lr: Some(1.0),
            lr_decay: Some(0.5),
            decay_start_epoch: Some(4),
            clip_norm: Some(5.0),
            sparsifier: Some("identity".into()),
            token_mode: Some(TokenMode::Char),
            valid_fraction: Some(0.05),
            eval_every: Some(0),
            wall_time: Some(false),
            ..RunOptions::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let coarse = |region, removed| RunOptions {
            sparsifier: Some("coarse".into()),
            region: Some(region),
            removed: Some(removed),
            sparse_fraction: Some(1.0),
            ..RunOptions::default()
        };
        let fine = |sparsity| RunOptions {
            sparsifier: Some("fine".into()),
            sparsity: Some(sparsity),
            sparse_fraction: Some(1.0),
            ..RunOptions::default()
        };
        let mixed = |fraction| RunOptions {
            sparse_fraction: Some(fraction),
            ..coarse(8, 4)
        };
        let mut opts = match name {
            "dense" => RunOptions {
                sparsifier: Some("identity".into()),
                ..RunOptions::default()
            },
            "table1-coarse-r4s2" => coarse(4, 2),
            "table1-coarse-r8s2" => coarse(8, 2),
            "table1-coarse-r8s4" => coarse(8, 4),
            "table1-coarse-r8s6" => coarse(8, 6),
            "table1-coarse-r16s8" => coarse(16, 8),
            "table1-coarse-r32s16" => coarse(32, 16),
            "table1-fine-k2" => fine(0.25),
            "table1-fine-k4" => fine(0.5),
            "table1-fine-k6" => fine(0.75),
            "table2-mixed-1to1" => mixed(1.0 / 2.0),
            "table2-mixed-3to1" => mixed(3.0 / 4.0),
            "table2-mixed-5to1" => mixed(5.0 / 6.0),
            "meprop-50" => RunOptions {
                sparsifier: Some("column-topk".into()),
                sparsity: Some(0.5),
                sparse_fraction: Some(1.0),
                ..RunOptions::default()
            },
            other => {
                let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
                return Err(Error::Parameter(format!("unknown preset {other:?}; known: {}", names.join(", "))));
            }
        };
        opts.preset = Some(name.to_string());
        Ok(opts)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parameter(format!("config file: {e}")))
    }

    /// Defaults, then the preset named in `file` or `flags` (flags win),
    /// then `file`, then `flags`.
    pub fn layered(file: RunOptions, flags: RunOptions) -> Result<Self> {
        let name = flags.preset.clone().or_else(|| file.preset.clone());
        let base = match name {
            Some(n) => RunOptions::defaults().overlay(RunOptions::preset(&n)?),
            None => RunOptions::defaults(),
        };
        Ok(base.overlay(file).overlay(flags))
    }

    fn need<T: Clone>(v: &Option<T>, key: &str) -> Result<T> {
        v.clone().ok_or_else(|| Error::Parameter(format!("missing required option {key:?}")))
    }

    pub fn data_config(&self) -> Result<DataConfig> {
        Ok(DataConfig {
            corpus: self.corpus.clone(),
            mode: Self::need(&self.token_mode, "token_mode")?,
            max_vocab: self.max_vocab,
            valid_fraction: Self::need(&self.valid_fraction, "valid_fraction")?,
        })
    }

    /// Builds the sparsifier for an `N x 4H` gate gradient.
    pub fn sparsifier_config(&self, batch: usize, hidden: usize) -> Result<SparsifierConfig> {
        let kind = Self::need(&self.sparsifier, "sparsifier")?;
        let from_sparsity = |units: usize, what: &str| -> Result<usize> {
            let s = self.sparsity.unwrap_or(0.5);
            let kept = units as f64 * (1.0 - s);
            if !(0.0..1.0).contains(&s) || (kept - kept.round()).abs() > 1e-9 || kept.round() < 1.0 {
                return Err(Error::Geometry(format!(
                    "sparsity {s} does not leave a whole, positive number of the {units} {what}"
                )));
            }
            Ok(kept.round() as usize)
        };
        let cfg = match kind.as_str() {
            "identity" | "dense" => SparsifierConfig::Identity,
            "coarse" => {
                let region = self.region.unwrap_or(8);
                SparsifierConfig::Coarse {
                    slice_width: self.slice_width.unwrap_or(4),
                    region,
                    removed: self.removed.unwrap_or(region / 2),
                    embed_index: self.embed_index.unwrap_or(false),
                }
            }
            "fine" => {
                let tile_rows = self.tile_rows.unwrap_or(8);
                let keep = match self.keep {
                    Some(k) => k,
                    None if tile_rows > 0 && batch % tile_rows == 0 => from_sparsity(batch / tile_rows, "tiles per slice")?,
                    None => return Err(Error::Geometry(format!("batch {batch} is not a multiple of My={tile_rows}"))),
                };
                SparsifierConfig::Fine {
                    tile_rows,
                    tile_cols: self.tile_cols.unwrap_or(4),
                    keep,
                }
            }
            "column-topk" | "meprop" => SparsifierConfig::ColumnTopK {
                k: match self.topk {
                    Some(k) => k,
                    None => from_sparsity(4 * hidden, "gate columns")?,
                },
            },
            other => {
                return Err(Error::Parameter(format!(
                    "unknown sparsifier {other:?} (expected identity, coarse, fine or column-topk)"
                )))
            }
        };
        cfg.validate(batch, 4 * hidden)?;
        Ok(cfg)
    }

    /// Fully resolved training configuration for a corpus with
    /// `vocab_size` entries.
    pub fn resolve(&self, vocab_size: usize) -> Result<TrainConfig> {
        let model = ModelConfig {
            vocab_size,
            embedding_dim: Self::need(&self.embedding_dim, "embedding_dim")?,
            hidden: Self::need(&self.hidden, "hidden")?,
            layers: Self::need(&self.layers, "layers")?,
            unroll: Self::need(&self.unroll, "unroll")?,
            batch: Self::need(&self.batch, "batch")?,
            precision: Self::need(&self.precision, "precision")?,
            init_scale: Self::need(&self.init_scale, "init_scale")?,
        };
        model.validate()?;
        let steps = Self::need(&self.steps, "steps")?;
        let sparsifier = self.sparsifier_config(model.batch, model.hidden)?;
        let mut schedule = if sparsifier.is_identity() {
            TrainSchedule::dense(steps)
        } else {
            TrainSchedule::sparse_then_dense(sparsifier, self.sparse_fraction.unwrap_or(1.0), steps)?
        };
        schedule.lr = Self::need(&self.lr, "lr")?;
        schedule.lr_decay = Self::need(&self.lr_decay, "lr_decay")?;
        schedule.decay_start_epoch = Self::need(&self.decay_start_epoch, "decay_start_epoch")?;
        schedule.clip_norm = Self::need(&self.clip_norm, "clip_norm")?;
        let config = TrainConfig {
            model,
            schedule,
            data: self.data_config()?,
            seed: Self::need(&self.seed, "seed")?,
            eval_every: Self::need(&self.eval_every, "eval_every")?,
            wall_time: Self::need(&self.wall_time, "wall_time")?,
        };
        config.validate()?;
        Ok(config)
    }
}
