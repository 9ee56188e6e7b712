//! Experiment orchestration: datasets, pipeline stages, checkpoints,
//! ablations and reports.
//!
//! Output layout of a run directory:
//!
//! ```text
//! config.conf
//! checkpoints/objectness.onav      after objectness pretraining
//! checkpoints/domain.onav          after domain pretraining
//! checkpoints/one_shot/<seq>.onav  after first-frame fine-tuning
//! checkpoints/online/<seq>.onav    after online adaptation
//! masks/<seq>/00001.pgm ...        output masks for frames 1..T
//! report.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::checkpoint;
use crate::config::{DataSource, ExperimentConfig};
use crate::engine::{one_shot_finetune, pretrain_domain, pretrain_objectness, run_sequence, RunOptions, SequenceResult};
use crate::error::{Error, Result};
use crate::image::{read_mask, write_mask};
use crate::maskops::BinaryMask;
use crate::metrics::{evaluate_masks, evaluate_run, MetricsReport};
use crate::par;
use crate::rng::{derive_seed, tag};
use crate::segnet::NetworkState;
use crate::synth::{export_sequence, generate_objectness_dataset, generate_sequence, load_split, Scenario, VideoSequence};

/// Options shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct RunArgs {
    pub force: bool,
    /// Worker threads; 0 uses the default pool.
    pub jobs: usize,
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of a per-sequence stream; keyed by name so it does not depend on
/// which other sequences are present.
pub fn sequence_seed(master: u64, stage: u64, name: &str) -> u64 {
    derive_seed(master, &[stage, name_hash(name)])
}

fn synthetic_split(cfg: &ExperimentConfig, split_tag: u64, count: usize, kinds: &[crate::synth::ScenarioKind]) -> Result<Vec<VideoSequence>> {
    let d = &cfg.data;
    let mut seqs = par::map_range(count, |i| {
        generate_sequence(&Scenario {
            kind: kinds[i % kinds.len()],
            frames: d.frames,
            height: d.height,
            width: d.width,
            seed: derive_seed(cfg.seed, &[split_tag, i as u64]),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    seqs.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(seqs)
}

/// Training split, sorted by name.
pub fn train_sequences(cfg: &ExperimentConfig) -> Result<Vec<VideoSequence>> {
    match &cfg.data.source {
        DataSource::Synthetic => synthetic_split(cfg, tag::TRAIN_SEQUENCES, cfg.data.train_sequences, &cfg.data.train_scenarios),
        DataSource::Directory { train, .. } => load_split(train),
    }
}

/// Evaluation split, sorted by name.
pub fn eval_sequences(cfg: &ExperimentConfig) -> Result<Vec<VideoSequence>> {
    match &cfg.data.source {
        DataSource::Synthetic => synthetic_split(cfg, tag::EVAL_SEQUENCES, cfg.data.eval_sequences, &cfg.data.eval_scenarios),
        DataSource::Directory { eval, .. } => load_split(eval),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs the enabled pretraining stages, saving a checkpoint after each when
/// `checkpoints` is given.
pub fn pretrain_network(cfg: &ExperimentConfig, train: &[VideoSequence], checkpoints: Option<&Path>) -> Result<NetworkState> {
    let mut net = match &cfg.stages.init_checkpoint {
        Some(path) => {
            let net = checkpoint::load(path)?;
            if net.arch != cfg.arch {
                return Err(Error::invalid("pretrain_network", format!("{} holds {:?}, config asks for {:?}", path.display(), net.arch, cfg.arch)));
            }
            net
        }
        None => NetworkState::init(&cfg.arch, derive_seed(cfg.seed, &[tag::INIT]))?,
    };
    if let Some(dir) = checkpoints {
        create_dir(dir)?;
    }
    if cfg.stages.pretrain_objectness {
        let data = generate_objectness_dataset(derive_seed(cfg.seed, &[tag::OBJECTNESS_DATA]), cfg.data.objectness_images, cfg.data.height, cfg.data.width)?;
        let losses = pretrain_objectness(&mut net, &data, &cfg.objectness, derive_seed(cfg.seed, &[tag::OBJECTNESS_TRAIN]))?;
        info!("objectness pretraining: epoch losses {losses:?}");
        if let Some(dir) = checkpoints {
            checkpoint::save(&net, &dir.join("objectness.onav"))?;
        }
    }
    if cfg.stages.pretrain_domain {
        let losses = pretrain_domain(&mut net, train, &cfg.domain, derive_seed(cfg.seed, &[tag::DOMAIN_TRAIN]))?;
        info!("domain pretraining: epoch losses {losses:?}");
        if let Some(dir) = checkpoints {
            checkpoint::save(&net, &dir.join("domain.onav"))?;
        }
    }
    Ok(net)
}

/// Where per-sequence artefacts go; `None` keeps everything in memory.
#[derive(Clone, Copy, Debug)]
pub struct Sinks<'a> {
    pub checkpoints: Option<&'a Path>,
    pub masks: Option<&'a Path>,
}

impl Sinks<'_> {
    pub const NONE: Sinks<'static> = Sinks { checkpoints: None, masks: None };
}

/// Network a sequence starts its online stage from: the pretrained network
/// fine-tuned on frame 1, or a stored one-shot checkpoint.
pub fn first_frame_network(pretrained: &NetworkState, seq: &VideoSequence, cfg: &ExperimentConfig, sinks: Sinks<'_>) -> Result<NetworkState> {
    let stored = sinks.checkpoints.map(|d| d.join("one_shot").join(format!("{}.onav", seq.name)));
    if cfg.stages.one_shot {
        let mut net = pretrained.clone();
        one_shot_finetune(&mut net, &seq.frames[0], &seq.gt_masks[0], &cfg.adapt, sequence_seed(cfg.seed, tag::ONE_SHOT, &seq.name))?;
        if let Some(path) = stored {
            create_dir(path.parent().unwrap())?;
            checkpoint::save(&net, &path)?;
        }
        return Ok(net);
    }
    if !cfg.stages.online_adapt {
        return Ok(pretrained.clone());
    }
    match stored.filter(|p| p.is_file()) {
        Some(path) => checkpoint::load(&path),
        None => Err(Error::StageOrder(format!(
            "online adaptation of `{}` starts from its one-shot network; enable stages.one_shot or provide checkpoints/one_shot/{}.onav",
            seq.name, seq.name
        ))),
    }
}

/// Runs inference (and online adaptation when enabled) from `start`.
pub fn infer_sequence(start: NetworkState, seq: &VideoSequence, cfg: &ExperimentConfig, sinks: Sinks<'_>) -> Result<SequenceResult> {
    let mut net = start;
    let opts = RunOptions { adapt: cfg.stages.online_adapt, tta: cfg.stages.tta, seed: sequence_seed(cfg.seed, tag::ONLINE, &seq.name) };
    let result = run_sequence(&mut net, seq, &cfg.adapt, &opts)?;
    if let Some(dir) = sinks.checkpoints.filter(|_| cfg.stages.online_adapt) {
        let path = dir.join("online").join(format!("{}.onav", seq.name));
        create_dir(path.parent().unwrap())?;
        checkpoint::save(&net, &path)?;
    }
    if let Some(dir) = sinks.masks {
        let d = dir.join(&seq.name);
        create_dir(&d)?;
        for (i, m) in result.masks.iter().enumerate() {
            write_mask(m, &d.join(format!("{:05}.pgm", i + 1)))?;
        }
    }
    Ok(result)
}

/// One-shot stage followed by inference, for every sequence in parallel.
/// Results come back in the order of `seqs`.
pub fn run_sequences(pretrained: &NetworkState, seqs: &[VideoSequence], cfg: &ExperimentConfig, sinks: Sinks<'_>) -> Result<Vec<SequenceResult>> {
    par::map_slice(seqs, |seq| {
        let start = first_frame_network(pretrained, seq, cfg, sinks)?;
        let r = infer_sequence(start, seq, cfg, sinks)?;
        info!("{}: mIoU {:.3}", r.name, r.ious.iter().sum::<f64>() / r.ious.len() as f64);
        Ok(r)
    })
    .into_iter()
    .collect()
}

/// Fails unless `path` is absent or `force` is set.
fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    Ok(())
}

/// Materialises the synthetic splits under `out/data/{train,eval}`.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path, args: &RunArgs) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let data = out.join("data");
    guard(&data, args.force)?;
    par::with_jobs(args.jobs, || {
        let (train_dir, eval_dir) = (data.join("train"), data.join("eval"));
        for (dir, seqs) in [(&train_dir, train_sequences(cfg)?), (&eval_dir, eval_sequences(cfg)?)] {
            if dir.exists() {
                fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            create_dir(dir)?;
            par::map_slice(&seqs, |s| export_sequence(s, &dir.join(&s.name))).into_iter().collect::<Result<Vec<_>>>()?;
            info!("wrote {} sequences to {}", seqs.len(), dir.display());
        }
        cfg.save(&out.join("config.conf"))?;
        Ok((train_dir, eval_dir))
    })
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub results: Vec<SequenceResult>,
}

/// Executes the enabled stages in order and writes checkpoints, masks and
/// `report.csv` under `out`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, args: &RunArgs) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.stages.online_adapt && !cfg.stages.one_shot && !out.join("checkpoints").join("one_shot").is_dir() {
        return Err(Error::StageOrder(
            "online adaptation needs the one-shot stage: enable stages.one_shot or run it first into the same output directory".into(),
        ));
    }
    let report_path = out.join("report.csv");
    guard(&report_path, args.force)?;
    create_dir(out)?;
    cfg.save(&out.join("config.conf"))?;
    par::with_jobs(args.jobs, || {
        let ckpt = out.join("checkpoints");
        let eval = eval_sequences(cfg)?;
        let train = if cfg.stages.pretrain_domain { train_sequences(cfg)? } else { Vec::new() };
        let net = pretrain_network(cfg, &train, Some(&ckpt))?;
        let masks = out.join("masks");
        let results = run_sequences(&net, &eval, cfg, Sinks { checkpoints: Some(&ckpt), masks: Some(&masks) })?;
        let report = evaluate_run(&results, &eval, cfg.boundary_tolerance, cfg.fingerprint(), cfg.seed)?;
        fs::write(&report_path, report.to_csv()).map_err(|e| Error::io(&report_path, e))?;
        Ok(RunOutput { report, results })
    })
}

/// A named set of config overrides applied on top of the base config.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub deltas: Vec<(String, String)>,
}

/// The online-adaptation ablation rows, in table order.
pub const BUILTIN_VARIANTS: [&str; 5] = ["no_adaptation", "full_adaptation", "only_negatives", "only_positives", "no_first_frame"];

impl Variant {
    /// A built-in name, or `label:key=value;key=value`.
    pub fn parse(text: &str) -> Result<Self> {
        let d = |pairs: &[(&str, &str)]| pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let on = ("stages.online_adapt", "true");
        let deltas = match text {
            "no_adaptation" => d(&[("stages.online_adapt", "false")]),
            "full_adaptation" => d(&[on, ("adapt.use_positives", "true"), ("adapt.use_negatives", "true"), ("adapt.first_frame_mixing", "true")]),
            "only_negatives" => d(&[on, ("adapt.use_positives", "false"), ("adapt.use_negatives", "true"), ("adapt.first_frame_mixing", "true")]),
            "only_positives" => d(&[on, ("adapt.use_positives", "true"), ("adapt.use_negatives", "false"), ("adapt.first_frame_mixing", "true")]),
            "no_first_frame" => d(&[on, ("adapt.use_positives", "true"), ("adapt.use_negatives", "true"), ("adapt.first_frame_mixing", "false")]),
            _ => {
                let (name, body) = text.split_once(':').ok_or_else(|| Error::UnknownVariant(text.into()))?;
                let deltas = body
                    .split(';')
                    .filter(|s| !s.trim().is_empty())
                    .map(|kv| kv.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())).ok_or_else(|| Error::UnknownVariant(text.into())))
                    .collect::<Result<Vec<_>>>()?;
                return Ok(Variant { name: name.trim().into(), deltas });
            }
        };
        Ok(Variant { name: text.into(), deltas })
    }

    pub fn builtins() -> Vec<Variant> {
        BUILTIN_VARIANTS.iter().map(|n| Variant::parse(n).unwrap()).collect()
    }

    /// Only keys that act after the one-shot stage may change, so every
    /// variant shares the pretrained and one-shot networks.
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.deltas {
            let shared = matches!(k.as_str(), "adapt.oneshot_steps" | "adapt.oneshot_lr");
            let allowed = (k.starts_with("adapt.") && !shared) || k == "stages.online_adapt" || k == "stages.tta" || k.starts_with("metrics.");
            if !allowed {
                return Err(Error::invalid("Variant", format!("variant `{}` may not change `{k}` (only online-stage keys)", self.name)));
            }
            cfg.set(k, v).map_err(|detail| Error::invalid("Variant", format!("variant `{}`: {detail}", self.name)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricsReport,
    pub results: Vec<SequenceResult>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    /// The base config first, then one row per variant.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,j_mean,j_recall,j_decay,f_mean\n");
        for r in &self.rows {
            let m = &r.report;
            out += &format!("{},{:.6},{:.6},{:.6},{:.6}\n", r.variant, m.j_mean, m.j_recall, m.j_decay, m.f_mean);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>7}  {:>6}\n", "variant", "J", "J-rec", "J-decay", "F");
        for r in &self.rows {
            let m = &r.report;
            out += &format!("{:<width$}  {:>6.3}  {:>6.3}  {:>7.3}  {:>6.3}\n", r.variant, m.j_mean, m.j_recall, m.j_decay, m.f_mean);
        }
        out
    }
}

/// Evaluates `base` and every variant on `seqs` from one pretrained
/// network; each sequence is fine-tuned on its first frame once.
pub fn ablate_sequences(pretrained: &NetworkState, seqs: &[VideoSequence], base: &ExperimentConfig, variants: &[Variant]) -> Result<AblationTable> {
    let mut configs = vec![("base".to_string(), base.clone())];
    for v in variants {
        if configs.iter().any(|(n, _)| *n == v.name) {
            return Err(Error::invalid("ablate", format!("variant name `{}` used twice", v.name)));
        }
        configs.push((v.name.clone(), v.apply(base)?));
    }
    // One-shot once per sequence, shared by all rows.
    let oneshot = ExperimentConfig { stages: crate::config::StageToggles { online_adapt: false, ..base.stages.clone() }, ..base.clone() };
    let per_seq: Vec<Vec<SequenceResult>> = par::map_slice(seqs, |seq| {
        let start = first_frame_network(pretrained, seq, &oneshot, Sinks::NONE)?;
        configs.iter().map(|(_, cfg)| infer_sequence(start.clone(), seq, cfg, Sinks::NONE)).collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(configs.len());
    for (i, (name, cfg)) in configs.iter().enumerate() {
        let results: Vec<SequenceResult> = per_seq.iter().map(|r| r[i].clone()).collect();
        let report = evaluate_run(&results, seqs, cfg.boundary_tolerance, cfg.fingerprint(), cfg.seed)?;
        info!("{name}: mean J {:.3}", report.j_mean);
        rows.push(AblationRow { variant: name.clone(), report, results });
    }
    Ok(AblationTable { rows })
}

/// Pretrains once and compares the variants; writes `ablation.csv` and
/// one `ablation/<variant>.csv` report per row.
pub fn cmd_ablate(cfg: &ExperimentConfig, variants: &[Variant], out: &Path, args: &RunArgs) -> Result<AblationTable> {
    cfg.validate()?;
    for v in variants {
        v.apply(cfg)?;
    }
    let table_path = out.join("ablation.csv");
    guard(&table_path, args.force)?;
    create_dir(&out.join("ablation"))?;
    cfg.save(&out.join("config.conf"))?;
    par::with_jobs(args.jobs, || {
        let eval = eval_sequences(cfg)?;
        let train = if cfg.stages.pretrain_domain { train_sequences(cfg)? } else { Vec::new() };
        let net = pretrain_network(cfg, &train, Some(&out.join("checkpoints")))?;
        let table = ablate_sequences(&net, &eval, cfg, variants)?;
        for r in &table.rows {
            let p = out.join("ablation").join(format!("{}.csv", r.variant));
            fs::write(&p, r.report.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
        fs::write(&table_path, table.to_csv()).map_err(|e| Error::io(&table_path, e))?;
        Ok(table)
    })
}

/// Reads `dir/<seq>/NNNNN.pgm` predictions for frames `1..T` of every
/// ground-truth sequence and scores them.
pub fn cmd_eval(pred_dir: &Path, gt: &[VideoSequence], cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let rows = gt
        .iter()
        .map(|seq| {
            let preds = (1..seq.len())
                .map(|t| {
                    let p = pred_dir.join(&seq.name).join(format!("{t:05}.pgm"));
                    if !p.is_file() {
                        return Err(Error::Sequence { name: seq.name.clone(), detail: format!("missing prediction {}", p.display()) });
                    }
                    read_mask(&p)
                })
                .collect::<Result<Vec<BinaryMask>>>()?;
            evaluate_masks(&seq.name, &preds, &seq.gt_masks[1..], cfg.boundary_tolerance)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_sequences(rows, cfg.fingerprint(), cfg.seed)
}

/// Human-readable summary of a checkpoint.
pub fn describe_checkpoint(net: &NetworkState) -> String {
    let a = &net.arch;
    let mut out = format!(
        "widths {:?}  dilations {:?}  residual block {}\nparameters {}  adam steps {}  init seed {}\n",
        a.widths,
        a.dilations,
        a.use_residual_block,
        net.parameter_count(),
        net.adam.step_count,
        net.rng_seed
    );
    for (name, p) in net.names.iter().zip(&net.params) {
        let rms = (p.data().iter().map(|v| v * v).sum::<f64>() / p.len().max(1) as f64).sqrt();
        out += &format!("  {name:<22} {:<16} rms {rms:.4e}\n", format!("{:?}", p.shape()));
    }
    out
}
