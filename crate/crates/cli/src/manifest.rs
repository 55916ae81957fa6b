//! Run manifests: architecture, dataset, hyperparameters and output
//! location, loaded from presets, TOML files and command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use greedyprune::data::DatasetSpec;
use greedyprune::RunConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST_SCHEMA: u32 = 1;
pub const DATA_ROOT_ENV: &str = "GREEDYPRUNE_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub arch: String,
    /// Element type, `f32` or `f64`.
    pub dtype: String,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub config: RunConfig,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            schema_version: MANIFEST_SCHEMA,
            arch: "resnet20".into(),
            dtype: "f32".into(),
            output_dir: PathBuf::from("runs/default"),
            dataset: cifar_from_env(),
            config: RunConfig::default(),
        }
    }
}

/// CIFAR-10 with the root left empty, to be filled from the environment.
fn cifar_from_env() -> DatasetSpec {
    DatasetSpec::Cifar10 { root: PathBuf::new(), train_limit: None, val_limit: None, checksums: Default::default() }
}

pub struct Preset {
    pub name: &'static str,
    pub about: &'static str,
    build: fn() -> RunManifest,
}

impl Preset {
    pub fn manifest(&self) -> RunManifest {
        (self.build)()
    }
}

fn with_config(arch: &str, out: &str, f: impl FnOnce(&mut RunConfig)) -> RunManifest {
    let mut m = RunManifest { arch: arch.into(), output_dir: PathBuf::from("runs").join(out), ..RunManifest::default() };
    f(&mut m.config);
    m
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "resnet20-cifar-p30",
        about: "ResNet-20 on CIFAR-10, 30% FLOPs reduction, 160 epochs",
        build: || with_config("resnet20", "resnet20-cifar-p30", |c| c.target_rate = 0.3),
    },
    Preset {
        name: "resnet20-cifar-p50",
        about: "ResNet-20 on CIFAR-10, 50% FLOPs reduction",
        build: || with_config("resnet20", "resnet20-cifar-p50", |c| c.target_rate = 0.5),
    },
    Preset {
        name: "resnet32-cifar-p53",
        about: "ResNet-32 on CIFAR-10, 53% FLOPs reduction",
        build: || with_config("resnet32", "resnet32-cifar-p53", |c| c.target_rate = 0.53),
    },
    Preset {
        name: "resnet56-cifar-p52",
        about: "ResNet-56 on CIFAR-10, 52% FLOPs reduction",
        build: || {
            with_config("resnet56", "resnet56-cifar-p52", |c| {
                c.target_rate = 0.52;
                c.max_layer_rate = 0.75;
            })
        },
    },
    Preset {
        name: "vgg16-cifar-p60",
        about: "VGG-16 on CIFAR-10, pruned after 30 epochs",
        build: || {
            with_config("vgg16", "vgg16-cifar-p60", |c| {
                c.target_rate = 0.6;
                c.prune_epoch = Some(30);
                c.max_layer_rate = 0.75;
            })
        },
    },
    Preset {
        name: "resnet20-synthetic-smoke",
        about: "ResNet-20 on 8x8 synthetic blobs; runs in minutes without downloads",
        build: || {
            let mut m = with_config("resnet20", "resnet20-synthetic-smoke", |c| {
                c.target_rate = 0.3;
                c.max_epochs = 60;
                c.probe_size = 256;
                c.crop_padding = 1;
            });
            m.dataset = DatasetSpec::SyntheticBlobs { classes: 10, n: 5000, shape: [3, 8, 8], noise: 1.0, seed: 1 };
            m
        },
    },
    Preset {
        name: "toy-synthetic",
        about: "Tiny chain network on synthetic blobs, for trying the tool",
        build: || {
            let mut m = with_config("toy-chain[16,32]", "toy-synthetic", |c| {
                c.target_rate = 0.3;
                c.max_epochs = 8;
                c.probe_size = 128;
                c.batch_size = 64;
                c.crop_padding = 1;
            });
            m.dataset = DatasetSpec::SyntheticBlobs { classes: 4, n: 1000, shape: [3, 8, 8], noise: 1.0, seed: 0 };
            m
        },
    },
];

pub fn preset(name: &str) -> Result<RunManifest> {
    PRESETS.iter().find(|p| p.name == name).map(Preset::manifest).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        anyhow!("unknown preset `{name}` (available: {})", names.join(", "))
    })
}

/// Recursively merges `over` into `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() && k != "dataset" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunManifest {
    /// Loads a TOML manifest. A `preset` key selects the base manifest that
    /// the rest of the file overrides; a `[dataset]` table replaces the
    /// base dataset as a whole.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut file: toml::Table = toml::from_str(text).context("parsing manifest")?;
        let base = match file.remove("preset") {
            Some(toml::Value::String(name)) => preset(&name)?,
            Some(other) => bail!("`preset` must be a string, found {other}"),
            None => RunManifest::default(),
        };
        let mut value = toml::Value::try_from(&base)?;
        merge(&mut value, toml::Value::Table(file));
        let manifest: RunManifest = value.try_into().context("invalid manifest")?;
        if manifest.schema_version != MANIFEST_SCHEMA {
            bail!("unsupported manifest schema {}", manifest.schema_version);
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Fills an empty or relative CIFAR root from `data_root` or the
    /// environment.
    pub fn resolve_data_root(&mut self, data_root: Option<&Path>) -> Result<()> {
        if let DatasetSpec::Cifar10 { root, .. } = &mut self.dataset {
            if root.is_absolute() {
                return Ok(());
            }
            let base = match data_root {
                Some(p) => Some(p.to_path_buf()),
                None => std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from),
            };
            match base {
                Some(b) => *root = b.join(&*root),
                None if root.as_os_str().is_empty() => {
                    bail!("CIFAR-10 location unknown: pass --data-root or set {DATA_ROOT_ENV}")
                }
                None => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dtype != "f32" && self.dtype != "f64" {
            bail!("dtype must be f32 or f64, not `{}`", self.dtype);
        }
        self.arch.parse::<greedyprune::ArchSpec>()?;
        self.config.validate()?;
        Ok(())
    }
}
