use std::fs;
use std::path::{Path, PathBuf};

use ceph_landmark::dataset::{DatasetLayout, GroundTruth, PreprocessSpec, Split, SynthConfig};
use ceph_landmark::eval::SDR_THRESHOLDS;
use ceph_landmark::pipeline::{InferMode, StageConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Dataset root; empty means `<run dir>/dataset`.
    pub root: String,
    pub layout: DatasetLayout,
    pub ground_truth: GroundTruth,
    pub train_split: Split,
    pub test_split: Split,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: String::new(),
            layout: DatasetLayout::default(),
            ground_truth: GroundTruth::Average,
            train_split: Split::Train,
            test_split: Split::Test1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub mode: InferMode,
    pub merge_all_channels: bool,
    pub dump_heatmaps: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { mode: InferMode::Full, merge_all_channels: false, dump_heatmaps: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Overrides the dataset's pixel spacing when set.
    pub pixel_spacing: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { thresholds: SDR_THRESHOLDS.to_vec(), pixel_spacing: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossvalConfig {
    pub folds: usize,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        Self { folds: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub dataset: DatasetConfig,
    pub preprocess: PreprocessSpec,
    pub synth: SynthConfig,
    pub global: StageConfig,
    pub local: StageConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub crossval: CrossvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs".into(),
            dataset: DatasetConfig::default(),
            preprocess: PreprocessSpec::default(),
            synth: SynthConfig::default(),
            global: StageConfig::global(),
            local: StageConfig::local(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
            crossval: CrossvalConfig::default(),
        }
    }
}

fn field(name: &str, e: impl std::fmt::Display) -> Failure {
    Failure::Config(format!("{name}: {e}"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        self.preprocess.validate().map_err(|e| field("preprocess", e))?;
        self.global.validate().map_err(|e| field("global", e))?;
        self.local.validate().map_err(|e| field("local", e))?;
        if self.global.scale_factor != self.preprocess.global_scale {
            return Err(field(
                "global.scale_factor",
                format!("{} differs from preprocess.global_scale {}", self.global.scale_factor, self.preprocess.global_scale),
            ));
        }
        if self.local.scale_factor != self.preprocess.local_scale {
            return Err(field(
                "local.scale_factor",
                format!("{} differs from preprocess.local_scale {}", self.local.scale_factor, self.preprocess.local_scale),
            ));
        }
        if self.local.train_patch == 0 {
            return Err(field("local.train_patch", "must be positive"));
        }
        let k = self.dataset.layout.num_landmarks;
        for (name, stage) in [("global", &self.global), ("local", &self.local)] {
            if stage.unet.out_channels != k + 1 {
                return Err(field(
                    &format!("{name}.unet.out_channels"),
                    format!("is {} but dataset.layout.num_landmarks is {k} (need K+1)", stage.unet.out_channels),
                ));
            }
        }
        if self.eval.thresholds.is_empty() || self.eval.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(field("eval.thresholds", "must be a non-empty increasing list"));
        }
        if let Some(s) = self.eval.pixel_spacing {
            if !(s > 0.0 && s.is_finite()) {
                return Err(field("eval.pixel_spacing", format!("must be positive, got {s}")));
            }
        }
        if !(self.dataset.layout.pixel_spacing > 0.0 && self.dataset.layout.pixel_spacing.is_finite()) {
            return Err(field("dataset.layout.pixel_spacing", "must be positive"));
        }
        if self.crossval.folds < 2 {
            return Err(field("crossval.folds", "must be at least 2"));
        }
        Ok(())
    }

    /// Canonical TOML rendering of the effective configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn dataset_root(&self, run_dir: &Path) -> PathBuf {
        if self.dataset.root.is_empty() {
            run_dir.join("dataset")
        } else {
            PathBuf::from(&self.dataset.root)
        }
    }
}

/// Splits `a.b.c=value` and parses the value as a TOML literal, falling back
/// to a bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value), Failure> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("--set expects key=value, got `{spec}`")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Failure::Config(format!("--set: malformed key `{key}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), Failure> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut table = root;
    for p in parents {
        let entry = table.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Failure::Config(format!("--set: `{p}` is not a table")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Recursively overlays `over` onto `base`; tables merge, other values replace.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Layers the optional config file and `--set` overrides over the defaults,
/// then validates. Unknown keys are rejected with their name.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Failure> {
    let mut table = match toml::Value::try_from(RunConfig::default()) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("configuration serializes to a table"),
    };
    let file = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    merge(&mut table, file);
    for o in overrides {
        let (key, value) = parse_override(o)?;
        apply_override(&mut table, &key, value)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::Config(e.to_string().trim().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
