//! Experiment configuration in a flat `key = value` text format.
//!
//! Keys carry dotted section prefixes (`adapt.alpha`, `stages.one_shot`).
//! Blank lines and lines starting with `#` are ignored. The optional
//! `profile` key selects the defaults (`toy` or `published`) that the remaining
//! keys override, wherever it appears in the file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::engine::{AdaptationConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::segnet::ArchConfig;
use crate::synth::ScenarioKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Toy,
    Published,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Toy => "toy",
            Profile::Published => "published",
        }
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "toy" => Ok(Profile::Toy),
            "published" => Ok(Profile::Published),
            _ => Err(format!("unknown profile `{s}` (expected toy or published)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Sequences rendered from the master seed.
    Synthetic,
    /// Sequence directories in the PPM/PGM layout.
    Directory { train: PathBuf, eval: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    /// Cycled over when rendering the training split.
    pub train_scenarios: Vec<ScenarioKind>,
    /// Cycled over when rendering the evaluation split.
    pub eval_scenarios: Vec<ScenarioKind>,
    pub objectness_images: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageToggles {
    pub pretrain_objectness: bool,
    pub pretrain_domain: bool,
    pub one_shot: bool,
    pub online_adapt: bool,
    pub tta: bool,
    /// Starting network instead of a fresh initialisation.
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub adapt: AdaptationConfig,
    pub objectness: PretrainConfig,
    pub domain: PretrainConfig,
    pub data: DataConfig,
    pub stages: StageToggles,
    /// `None` means one percent of the image diagonal, rounded up.
    pub boundary_tolerance: Option<usize>,
    pub output: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale hyperparameters used by the acceptance runs.
    pub fn toy() -> Self {
        let loss = LossConfig::default();
        ExperimentConfig {
            profile: Profile::Toy,
            seed: 20_171_104,
            arch: ArchConfig::default(),
            adapt: AdaptationConfig {
                online_lr: 3e-4,
                oneshot_lr: 1e-4,
                erosion_size: 3,
                hardest_fraction: loss.hardest_fraction,
                ..AdaptationConfig::default()
            },
            objectness: PretrainConfig { epochs: 6, lr: 1e-3, hardest_fraction: loss.hardest_fraction, augment: true },
            domain: PretrainConfig { epochs: 1, lr: 3e-4, hardest_fraction: loss.hardest_fraction, augment: true },
            loss,
            data: DataConfig {
                source: DataSource::Synthetic,
                height: 96,
                width: 96,
                frames: 40,
                train_sequences: 10,
                eval_sequences: 20,
                train_scenarios: ScenarioKind::ALL.to_vec(),
                eval_scenarios: vec![ScenarioKind::AppearanceDrift],
                objectness_images: 300,
            },
            stages: StageToggles {
                pretrain_objectness: true,
                pretrain_domain: true,
                one_shot: true,
                online_adapt: true,
                tta: false,
                init_checkpoint: None,
            },
            boundary_tolerance: None,
            output: PathBuf::from("runs/toy"),
        }
    }

    /// The published hyperparameters on the same toy network and data.
    pub fn published() -> Self {
        let toy = Self::toy();
        let loss = toy.loss;
        ExperimentConfig {
            profile: Profile::Published,
            adapt: AdaptationConfig { hardest_fraction: loss.hardest_fraction, ..AdaptationConfig::default() },
            objectness: PretrainConfig { hardest_fraction: loss.hardest_fraction, ..PretrainConfig::default() },
            domain: PretrainConfig { hardest_fraction: loss.hardest_fraction, ..PretrainConfig::default() },
            output: PathBuf::from("runs/published"),
            loss,
            ..toy
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Toy => Self::toy(),
            Profile::Published => Self::published(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("ExperimentConfig", detail));
        self.arch.validate()?;
        self.loss.validate()?;
        self.adapt.validate()?;
        if self.loss.loss_scale != 1.0 {
            return bad(format!("loss scale must be 1, got {}", self.loss.loss_scale));
        }
        let hf = self.loss.hardest_fraction;
        if self.adapt.hardest_fraction != hf || self.objectness.hardest_fraction != hf || self.domain.hardest_fraction != hf {
            return bad("hardest_fraction differs between loss, adapt and pretraining".into());
        }
        for (name, p) in [("objectness", &self.objectness), ("domain", &self.domain)] {
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return bad(format!("pretrain.{name}.lr must be positive, got {}", p.lr));
            }
        }
        let d = &self.data;
        if d.height < 32 || d.width < 32 || d.frames < 2 {
            return bad(format!("data must be at least 32x32 with 2 frames, got {}x{} x {}", d.height, d.width, d.frames));
        }
        if d.train_scenarios.is_empty() || d.eval_scenarios.is_empty() {
            return bad("scenario lists must not be empty".into());
        }
        if d.eval_sequences == 0 {
            return bad("need at least one evaluation sequence".into());
        }
        Ok(())
    }

    /// Every key and its value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let kinds = |v: &[ScenarioKind]| v.iter().map(|k| k.name()).collect::<Vec<_>>().join(",");
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let a = &self.adapt;
        let d = &self.data;
        let s = &self.stages;
        let (train_dir, eval_dir) = match &d.source {
            DataSource::Synthetic => (String::new(), String::new()),
            DataSource::Directory { train, eval } => (train.display().to_string(), eval.display().to_string()),
        };
        vec![
            ("profile", self.profile.name().into()),
            ("seed", self.seed.to_string()),
            ("output", self.output.display().to_string()),
            ("arch.widths", list(&self.arch.widths)),
            ("arch.dilations", list(&self.arch.dilations)),
            ("arch.residual_block", self.arch.use_residual_block.to_string()),
            ("loss.hardest_fraction", self.loss.hardest_fraction.to_string()),
            ("adapt.alpha", a.alpha.to_string()),
            ("adapt.beta", a.beta.to_string()),
            ("adapt.d_rel", a.d_rel.to_string()),
            ("adapt.n_online", a.n_online.to_string()),
            ("adapt.n_curr", a.n_curr.to_string()),
            ("adapt.online_lr", a.online_lr.to_string()),
            ("adapt.oneshot_steps", a.oneshot_steps.to_string()),
            ("adapt.oneshot_lr", a.oneshot_lr.to_string()),
            ("adapt.erosion_size", a.erosion_size.to_string()),
            ("adapt.use_positives", a.use_positives.to_string()),
            ("adapt.use_negatives", a.use_negatives.to_string()),
            ("adapt.first_frame_mixing", a.first_frame_mixing.to_string()),
            ("adapt.tta_targets", a.tta_targets.to_string()),
            ("adapt.tta_variants", a.tta_variants.to_string()),
            ("pretrain.objectness.images", d.objectness_images.to_string()),
            ("pretrain.objectness.epochs", self.objectness.epochs.to_string()),
            ("pretrain.objectness.lr", self.objectness.lr.to_string()),
            ("pretrain.objectness.augment", self.objectness.augment.to_string()),
            ("pretrain.domain.epochs", self.domain.epochs.to_string()),
            ("pretrain.domain.lr", self.domain.lr.to_string()),
            ("pretrain.domain.augment", self.domain.augment.to_string()),
            ("data.source", if train_dir.is_empty() { "synthetic".into() } else { "directory".into() }),
            ("data.train_dir", train_dir),
            ("data.eval_dir", eval_dir),
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.frames", d.frames.to_string()),
            ("data.train_sequences", d.train_sequences.to_string()),
            ("data.eval_sequences", d.eval_sequences.to_string()),
            ("data.train_scenarios", kinds(&d.train_scenarios)),
            ("data.eval_scenarios", kinds(&d.eval_scenarios)),
            ("stages.pretrain_objectness", s.pretrain_objectness.to_string()),
            ("stages.pretrain_domain", s.pretrain_domain.to_string()),
            ("stages.one_shot", s.one_shot.to_string()),
            ("stages.online_adapt", s.online_adapt.to_string()),
            ("stages.tta", s.tta.to_string()),
            ("stages.init_checkpoint", path(&s.init_checkpoint)),
            ("metrics.boundary_tolerance", self.boundary_tolerance.map_or_else(|| "auto".into(), |t| t.to_string())),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let head = key.split('.').next().unwrap_or("");
            if head != section && key.contains('.') {
                out.push('\n');
                section = head;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// 64-bit FNV-1a of the serialised config without the output path, so
    /// the same experiment written to two directories shares a fingerprint.
    pub fn fingerprint(&self) -> u64 {
        let text: String = self.entries().into_iter().filter(|(k, _)| *k != "output").map(|(k, v)| format!("{k}={v}\n")).collect();
        text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }

    /// Assigns one key. Errors are plain messages; callers add context.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}` as a number"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            v.parse().map_err(|_| format!("expected true or false, got `{v}`"))
        }
        fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
            v.split(',').map(|x| num(x.trim())).collect()
        }
        fn kinds(v: &str) -> std::result::Result<Vec<ScenarioKind>, String> {
            v.split(',').map(|x| x.trim().parse::<ScenarioKind>().map_err(|e| e.to_string())).collect()
        }
        fn opt_path(v: &str) -> Option<PathBuf> {
            (!v.is_empty()).then(|| PathBuf::from(v))
        }
        let a = &mut self.adapt;
        let d = &mut self.data;
        let s = &mut self.stages;
        match key {
            "profile" => self.profile = value.parse()?,
            "seed" => self.seed = num(value)?,
            "output" => self.output = PathBuf::from(value),
            "arch.widths" => self.arch.widths = list(value)?,
            "arch.dilations" => self.arch.dilations = list(value)?,
            "arch.residual_block" => self.arch.use_residual_block = flag(value)?,
            "loss.hardest_fraction" => {
                let hf = num(value)?;
                self.loss.hardest_fraction = hf;
                a.hardest_fraction = hf;
                self.objectness.hardest_fraction = hf;
                self.domain.hardest_fraction = hf;
            }
            "adapt.alpha" => a.alpha = num(value)?,
            "adapt.beta" => a.beta = num(value)?,
            "adapt.d_rel" => a.d_rel = num(value)?,
            "adapt.n_online" => a.n_online = num(value)?,
            "adapt.n_curr" => a.n_curr = num(value)?,
            "adapt.online_lr" => a.online_lr = num(value)?,
            "adapt.oneshot_steps" => a.oneshot_steps = num(value)?,
            "adapt.oneshot_lr" => a.oneshot_lr = num(value)?,
            "adapt.erosion_size" => a.erosion_size = num(value)?,
            "adapt.use_positives" => a.use_positives = flag(value)?,
            "adapt.use_negatives" => a.use_negatives = flag(value)?,
            "adapt.first_frame_mixing" => a.first_frame_mixing = flag(value)?,
            "adapt.tta_targets" => a.tta_targets = flag(value)?,
            "adapt.tta_variants" => a.tta_variants = num(value)?,
            "pretrain.objectness.images" => d.objectness_images = num(value)?,
            "pretrain.objectness.epochs" => self.objectness.epochs = num(value)?,
            "pretrain.objectness.lr" => self.objectness.lr = num(value)?,
            "pretrain.objectness.augment" => self.objectness.augment = flag(value)?,
            "pretrain.domain.epochs" => self.domain.epochs = num(value)?,
            "pretrain.domain.lr" => self.domain.lr = num(value)?,
            "pretrain.domain.augment" => self.domain.augment = flag(value)?,
            "data.source" => match value {
                "synthetic" => d.source = DataSource::Synthetic,
                "directory" => {
                    if d.source == DataSource::Synthetic {
                        d.source = DataSource::Directory { train: PathBuf::new(), eval: PathBuf::new() };
                    }
                }
                _ => return Err(format!("unknown data source `{value}` (expected synthetic or directory)")),
            },
            "data.train_dir" | "data.eval_dir" => {
                if let Some(p) = opt_path(value) {
                    if d.source == DataSource::Synthetic {
                        d.source = DataSource::Directory { train: PathBuf::new(), eval: PathBuf::new() };
                    }
                    if let DataSource::Directory { train, eval } = &mut d.source {
                        *(if key == "data.train_dir" { train } else { eval }) = p;
                    }
                }
            }
            "data.height" => d.height = num(value)?,
            "data.width" => d.width = num(value)?,
            "data.frames" => d.frames = num(value)?,
            "data.train_sequences" => d.train_sequences = num(value)?,
            "data.eval_sequences" => d.eval_sequences = num(value)?,
            "data.train_scenarios" => d.train_scenarios = kinds(value)?,
            "data.eval_scenarios" => d.eval_scenarios = kinds(value)?,
            "stages.pretrain_objectness" => s.pretrain_objectness = flag(value)?,
            "stages.pretrain_domain" => s.pretrain_domain = flag(value)?,
            "stages.one_shot" => s.one_shot = flag(value)?,
            "stages.online_adapt" => s.online_adapt = flag(value)?,
            "stages.tta" => s.tta = flag(value)?,
            "stages.init_checkpoint" => s.init_checkpoint = opt_path(value),
            "metrics.boundary_tolerance" => self.boundary_tolerance = if value == "auto" { None } else { Some(num(value)?) },
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses a config file body. Unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config { line: i + 1, detail: format!("expected `key = value`, got `{line}`") })?;
            let (k, v) = (k.trim(), v.trim());
            if pairs.iter().any(|(_, pk, _): &(usize, &str, &str)| *pk == k) {
                return Err(Error::Config { line: i + 1, detail: format!("key `{k}` repeated") });
            }
            pairs.push((i + 1, k, v));
        }
        let profile = match pairs.iter().find(|(_, k, _)| *k == "profile") {
            Some((line, _, v)) => v.parse().map_err(|detail| Error::Config { line: *line, detail })?,
            None => Profile::Toy,
        };
        let mut cfg = Self::for_profile(profile);
        for (line, k, v) in pairs {
            cfg.set(k, v).map_err(|detail| {
                if detail.starts_with("unknown key") {
                    Error::UnknownKey(k.to_string())
                } else {
                    Error::Config { line, detail: format!("{k}: {detail}") }
                }
            })?;
        }
        if let DataSource::Directory { train, eval } = &cfg.data.source {
            if train.as_os_str().is_empty() || eval.as_os_str().is_empty() {
                return Err(Error::Config { line: 0, detail: "directory data needs both data.train_dir and data.eval_dir".into() });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
