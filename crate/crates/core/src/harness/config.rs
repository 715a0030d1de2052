use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{sigma_grid, PGD_RESTARTS, PGD_STEPS};
use crate::data::{
    generate_blobs, generate_glyphs, generate_two_moons, load_mnist, Dataset, Split, DATA_DIR_ENV,
};
use crate::error::{Error, Result};
use crate::model::{Family, ModelSpec, WIDTH_GRID};
use crate::seed::{mix64, str_key};
use crate::spectral::{EffDimConfig, DEFAULT_K, DEFAULT_SUBSET, DEFAULT_Z};
use crate::training::{Method, AWP_GAMMA, INNER_PGD_STEPS, TRADES_BETA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    TwoMoons,
    Blobs,
    Glyphs,
    Mnist,
}

impl DataKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DataKind::TwoMoons => "two-moons",
            DataKind::Blobs => "blobs",
            DataKind::Glyphs => "glyphs",
            DataKind::Mnist => "mnist",
        }
    }

    pub fn is_image(self) -> bool {
        matches!(self, DataKind::Glyphs | DataKind::Mnist)
    }
}

impl std::str::FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-moons" => Ok(DataKind::TwoMoons),
            "blobs" => Ok(DataKind::Blobs),
            "glyphs" => Ok(DataKind::Glyphs),
            "mnist" => Ok(DataKind::Mnist),
            other => Err(Error::invalid(format!("unknown dataset `{other}`"))),
        }
    }
}

/// Which dataset a track uses and how large it is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Defaults: 2000 for mnist, 1000 otherwise.
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Two-moons jitter or glyph pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default = "default_side")]
    pub side: usize,
    /// Directory holding the IDX files; falls back to `EFFDIM_DATA_DIR`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Multiplies every ε. Defaults to 10 for 2-D data and 1 for images.
    #[serde(default)]
    pub attack_scale: Option<f64>,
}

fn default_n_test() -> usize {
    1000
}
fn default_noise() -> f64 {
    0.1
}
fn default_classes() -> usize {
    3
}
fn default_spread() -> f64 {
    0.1
}
fn default_side() -> usize {
    28
}

/// Train/test split of one track, plus any held-out pool for extra data.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub pool: Option<Dataset>,
}

impl DataConfig {
    pub fn new(kind: DataKind) -> Self {
        Self {
            kind,
            n_train: None,
            n_test: default_n_test(),
            noise: default_noise(),
            classes: default_classes(),
            spread: default_spread(),
            side: default_side(),
            dir: None,
            attack_scale: None,
        }
    }

    pub fn n_train(&self) -> usize {
        self.n_train.unwrap_or(if self.kind == DataKind::Mnist {
            2000
        } else {
            1000
        })
    }

    pub fn attack_scale(&self) -> f64 {
        self.attack_scale
            .unwrap_or(if self.kind.is_image() { 1.0 } else { 10.0 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train() == 0 || self.n_test == 0 {
            return Err(Error::invalid("n_train and n_test must be positive"));
        }
        if !(self.attack_scale() > 0.0 && self.attack_scale().is_finite()) {
            return Err(Error::invalid("attack_scale must be positive"));
        }
        Ok(())
    }

    /// Resolves the IDX directory: explicit setting first, then the
    /// environment.
    pub fn data_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.dir {
            return Ok(d.clone());
        }
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::invalid(format!("mnist track needs `dir` or {DATA_DIR_ENV}")))
    }

    /// Generates (or loads) the datasets. Synthetic data depends only on
    /// `seed`; MNIST subsets are fixed by the files.
    pub fn load(&self, seed: u64) -> Result<LoadedData> {
        self.validate()?;
        let train_seed = mix64(seed, &[str_key("data"), str_key(self.kind.as_str()), 0]);
        let test_seed = mix64(seed, &[str_key("data"), str_key(self.kind.as_str()), 1]);
        let n = self.n_train();
        let (train, test, pool) = match self.kind {
            DataKind::TwoMoons => (
                generate_two_moons(n, self.noise, train_seed)?,
                generate_two_moons(self.n_test, self.noise, test_seed)?,
                None,
            ),
            DataKind::Blobs => (
                generate_blobs(n, self.classes, self.spread, train_seed)?,
                generate_blobs(self.n_test, self.classes, self.spread, test_seed)?,
                None,
            ),
            DataKind::Glyphs => (
                generate_glyphs(n, self.side, self.noise, train_seed)?,
                generate_glyphs(self.n_test, self.side, self.noise, test_seed)?,
                None,
            ),
            DataKind::Mnist => load_mnist(&self.data_dir()?, n, self.n_test)?,
        };
        Ok(LoadedData {
            train: train.with_split(Split::Train),
            test: test.with_split(Split::Test),
            pool,
        })
    }
}

/// One model family on one dataset, swept over width multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    pub family: Family,
    pub data: DataConfig,
    #[serde(default = "default_widths")]
    pub widths: Vec<f64>,
    /// Per-track replacements for the sweep-wide settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effdim: Option<EffDimSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacks: Option<AttackSettings>,
}

fn default_widths() -> Vec<f64> {
    WIDTH_GRID.to_vec()
}

impl TrackConfig {
    pub fn new(family: Family, data: DataConfig) -> Self {
        Self {
            family,
            data,
            widths: default_widths(),
            train: None,
            effdim: None,
            attacks: None,
        }
    }

    pub fn train_settings<'a>(&'a self, config: &'a SweepConfig) -> &'a TrainSettings {
        self.train.as_ref().unwrap_or(&config.train)
    }

    pub fn effdim_settings<'a>(&'a self, config: &'a SweepConfig) -> &'a EffDimSettings {
        self.effdim.as_ref().unwrap_or(&config.effdim)
    }

    pub fn attack_settings<'a>(&'a self, config: &'a SweepConfig) -> &'a AttackSettings {
        self.attacks.as_ref().unwrap_or(&config.attacks)
    }

    pub fn model_spec(&self, data: &Dataset, width: f64, init_seed: u64) -> Result<ModelSpec> {
        match self.family {
            Family::Mlp => Ok(ModelSpec::mlp(
                data.input_len(),
                data.class_count(),
                width,
                init_seed,
            )),
            Family::SmallCnn => {
                let shape = data.input_shape();
                if shape.len() != 2 || shape[0] != shape[1] {
                    return Err(Error::invalid(format!(
                        "smallcnn needs square images, dataset has shape {shape:?}"
                    )));
                }
                Ok(ModelSpec::small_cnn(
                    shape[0],
                    data.class_count(),
                    width,
                    init_seed,
                ))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub step_decay: bool,
    /// Inner PGD radius in units of 1/255, before the attack scale.
    #[serde(default = "default_inner_eps")]
    pub inner_epsilon_255: f64,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_beta")]
    pub trades_beta: f64,
    #[serde(default = "default_gamma")]
    pub awp_gamma: f64,
    #[serde(default = "default_extra_factor")]
    pub extra_factor: f64,
}

fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}
fn default_inner_eps() -> f64 {
    1.0
}
fn default_inner_steps() -> usize {
    INNER_PGD_STEPS
}
fn default_beta() -> f64 {
    TRADES_BETA
}
fn default_gamma() -> f64 {
    AWP_GAMMA
}
fn default_extra_factor() -> f64 {
    2.0
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate >= 0.0) {
            return Err(Error::invalid(
                "train needs epochs, batch_size > 0 and learning_rate >= 0",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if !(self.inner_epsilon_255 >= 0.0)
            || !(self.trades_beta > 0.0)
            || !(self.awp_gamma >= 0.0)
            || !(self.extra_factor >= 1.0)
        {
            return Err(Error::invalid("invalid adversarial training settings"));
        }
        Ok(())
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffDimSettings {
    #[serde(default = "default_z")]
    pub z: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_subset")]
    pub subset_size: usize,
}

fn default_z() -> f64 {
    DEFAULT_Z
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_subset() -> usize {
    DEFAULT_SUBSET
}

impl Default for EffDimSettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl EffDimSettings {
    pub fn to_config(&self, seed: u64) -> EffDimConfig {
        EffDimConfig {
            z: self.z,
            k: Some(self.k),
            subset_size: self.subset_size,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSettings {
    /// l∞ radii in units of 1/255, before the attack scale.
    #[serde(default = "default_eps_grid")]
    pub epsilons_255: Vec<f64>,
    #[serde(default = "sigma_grid")]
    pub sigmas: Vec<f64>,
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
    #[serde(default = "default_pgd_restarts")]
    pub pgd_restarts: usize,
    /// Noise draws per test sample for the Gaussian track.
    #[serde(default = "default_draws")]
    pub gaussian_draws: usize,
    /// Evaluate attacks on a seeded subset of at most this many test samples.
    #[serde(default)]
    pub test_limit: Option<usize>,
}

fn default_eps_grid() -> Vec<f64> {
    (1..=8).map(f64::from).collect()
}
fn default_pgd_steps() -> usize {
    PGD_STEPS
}
fn default_pgd_restarts() -> usize {
    PGD_RESTARTS
}
fn default_draws() -> usize {
    5
}

impl AttackSettings {
    pub fn validate(&self) -> Result<()> {
        if self
            .epsilons_255
            .iter()
            .chain(&self.sigmas)
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::invalid(
                "attack budgets must be finite and non-negative",
            ));
        }
        if self.pgd_steps == 0 || self.pgd_restarts == 0 || self.gaussian_draws == 0 {
            return Err(Error::invalid(
                "pgd_steps, pgd_restarts and gaussian_draws must be positive",
            ));
        }
        if self.test_limit == Some(0) {
            return Err(Error::invalid("test_limit must be positive"));
        }
        Ok(())
    }
}

impl Default for AttackSettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// The training-method grid of the method comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodGrid {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_flags")]
    pub awp: Vec<bool>,
    #[serde(default = "default_flags")]
    pub extra_data: Vec<bool>,
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_flags() -> Vec<bool> {
    vec![false, true]
}

impl Default for MethodGrid {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Everything a sweep needs. Every field except `tracks` has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub tracks: Vec<TrackConfig>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub effdim: EffDimSettings,
    #[serde(default)]
    pub attacks: AttackSettings,
    #[serde(default)]
    pub methods: MethodGrid,
    /// Cells with clean accuracy below this fraction of their track's
    /// median are flagged and left out of regressions.
    #[serde(default = "default_outlier_ratio")]
    pub outlier_ratio: f64,
}

fn default_name() -> String {
    "sweep".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_outlier_ratio() -> f64 {
    0.7
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tracks.is_empty() {
            return Err(Error::invalid("config needs at least one track"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("config needs at least one seed"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::invalid("duplicate seeds"));
        }
        for t in &self.tracks {
            t.data.validate()?;
            if t.widths.is_empty() || t.widths.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                return Err(Error::invalid("widths must be positive and non-empty"));
            }
            if t.family == Family::SmallCnn && !t.data.kind.is_image() {
                return Err(Error::invalid("smallcnn tracks need an image dataset"));
            }
        }
        self.attacks.validate()?;
        self.effdim.to_config(0).validate()?;
        self.train.validate()?;
        for t in &self.tracks {
            if let Some(a) = &t.attacks {
                a.validate()?;
            }
            if let Some(e) = &t.effdim {
                e.to_config(0).validate()?;
            }
            if let Some(tr) = &t.train {
                tr.validate()?;
            }
        }
        let m = &self.methods;
        if m.methods.is_empty() || m.awp.is_empty() || m.extra_data.is_empty() {
            return Err(Error::invalid("method grid axes must be non-empty"));
        }
        if !(self.outlier_ratio >= 0.0 && self.outlier_ratio <= 1.0) {
            return Err(Error::invalid("outlier_ratio must be in [0, 1]"));
        }
        Ok(())
    }

    /// Canonical JSON with sorted keys.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}
