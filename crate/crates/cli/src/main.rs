//! `pbip` command-line entry point.
//!
//! Config precedence, lowest to highest: built-in defaults, `--config`
//! file, dedicated flags such as `--k`, then `--set key=value` overrides in
//! the order given. The dataset root comes from `--root`, else from
//! `PBIP_DATA_ROOT`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pbip::ablation::{run_ablation, AblationSpec};
use pbip::bank::{aggregate_prototypes, build_bank, FeatureCache, ImageBank};
use pbip::config::TrainConfig;
use pbip::data::{load_manifest, DatasetManifest, FormatHint, PatchRecord, Split};
use pbip::encoders::PrototypeEncoder;
use pbip::metrics::{evaluate_dirs, EvalReport};
use pbip::pipeline::encoder_for;
use pbip::synth::{generate_synthetic, SyntheticSpec};
use pbip::train::{self, Checkpoint, TrainOptions, CHECKPOINT_FILE};
use pbip::zeroshot::{bank_self_consistency, zeroshot_eval};

#[derive(Parser)]
#[command(
    name = "pbip",
    version,
    about = "Prototype-based weakly supervised segmentation of histopathology patches"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster single-class patches into the per-class image bank.
    BuildBank(BuildBankArgs),
    /// Stage-1 training on image-level labels.
    Train(TrainArgs),
    /// Write pseudo-masks from a checkpoint.
    Export(ExportArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Classify patches with the bank prototypes.
    Zeroshot(ZeroshotArgs),
    /// Sweep one parameter over several seeds.
    Ablate(AblateArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Draw masks over their images.
    Overlay(OverlayArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset root.
    #[arg(long, env = "PBIP_DATA_ROOT")]
    root: Option<PathBuf>,
    /// Dataset layout: auto, filename, sidecar or class-folders.
    #[arg(long, default_value = "auto")]
    format: String,
}

impl DataArgs {
    fn manifest(&self) -> Result<DatasetManifest> {
        let root = self
            .root
            .as_ref()
            .ok_or_else(|| anyhow!("no dataset root: pass --root or set PBIP_DATA_ROOT"))?;
        let hint: FormatHint = self.format.parse()?;
        Ok(load_manifest(root, hint)?)
    }
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, flags: &[(&str, Option<String>)]) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(&format!("{key}={v}"))?;
            }
        }
        for s in &self.sets {
            cfg.set(s)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct BuildBankArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Subclasses per class.
    #[arg(long)]
    k: Option<usize>,
    /// Patches kept per subclass.
    #[arg(long)]
    nk: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Bank directory; built from the dataset when omitted.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint file or training output directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// Take the argmax over all classes instead of the image's labels.
    #[arg(long)]
    no_gate: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write heatmaps and FG/BG images for every record here.
    #[arg(long)]
    debug_dump: Option<PathBuf>,
    /// Stage-2 trainer command run on the exported masks.
    #[arg(long)]
    stage2: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction directory; repeat for several seeds.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Ground-truth mask directory.
    #[arg(long)]
    gt: PathBuf,
    /// Baseline prediction directories for a Welch t-test on mIoU.
    #[arg(long)]
    baseline: Vec<PathBuf>,
    /// Class names file, one per line.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Number of classes when no class names are available.
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long, default_value_t = 2)]
    radius: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ZeroshotArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Classify the bank members instead of a split.
    #[arg(long)]
    bank_members: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// K, N_K, beta_over_alpha, theta2_over_theta1 or modules.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "val")]
    split: String,
    /// Cells run concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 1)]
    white_per_class: usize,
    #[arg(long, default_value_t = 0)]
    mixed_train: usize,
    #[arg(long, default_value_t = 100)]
    n_val: usize,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OverlayArgs {
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Mask values at or above this are left untinted.
    #[arg(long, default_value_t = 4)]
    n_classes: usize,
    #[arg(long, default_value_t = pbip::overlay::DEFAULT_ALPHA)]
    alpha: f32,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn split_arg(s: &str) -> Result<Split> {
    Ok(s.parse()?)
}

fn check_encoder(bank: &ImageBank, encoder: &dyn PrototypeEncoder) -> Result<()> {
    if bank.encoder_id != encoder.id() {
        bail!(
            "bank was built with encoder {}, config gives {}; pass the same encoder_seed and embed_dim",
            bank.encoder_id,
            encoder.id()
        );
    }
    Ok(())
}

/// The config a bank was built with, if it left a lock file.
fn bank_config(bank_dir: &Path, args: &ConfigArgs) -> Result<TrainConfig> {
    let lock = bank_dir.join(pbip::config::CONFIG_LOCK);
    if args.config.is_none() && lock.exists() {
        let cfg = ConfigArgs {
            config: Some(lock),
            sets: args.sets.clone(),
        };
        return cfg.resolve(&[]);
    }
    args.resolve(&[])
}

fn cmd_build_bank(a: BuildBankArgs) -> Result<()> {
    let cfg = a.cfg.resolve(&[
        ("k", a.k.map(|v| v.to_string())),
        ("n_k", a.nk.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ])?;
    let manifest = a.data.manifest()?;
    let encoder = encoder_for(&cfg);
    let bank = build_bank(&manifest, encoder.as_ref(), &cfg.bank_config(), &FeatureCache::new())?;
    bank.save(&a.out)?;
    cfg.write_lock(&a.out)?;
    for (c, name) in bank.class_names.iter().enumerate() {
        let kept: Vec<usize> = bank.entries[c].iter().map(Vec::len).collect();
        println!("{name}\tkept {kept:?}\tcluster sizes {:?}", bank.cluster_sizes[c]);
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = match &resume {
        Some(ck) if a.cfg.config.is_none() && a.cfg.sets.is_empty() => ck.config.clone(),
        _ => a.cfg.resolve(&[])?,
    };
    let manifest = a.data.manifest()?;
    let encoder = encoder_for(&cfg);
    let prototypes = match &a.bank {
        Some(dir) => {
            let bank = ImageBank::load(dir)?;
            check_encoder(&bank, encoder.as_ref())?;
            aggregate_prototypes(&bank)?
        }
        None => {
            let bank = build_bank(&manifest, encoder.as_ref(), &cfg.bank_config(), &FeatureCache::new())?;
            bank.save(&a.out.join("bank"))?;
            aggregate_prototypes(&bank)?
        }
    };
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        stop_after: a.stop_after,
    };
    let outcome = train::train_stage1(&manifest, &prototypes, encoder, &cfg, resume, &opts)?;
    if let Some(last) = outcome.log.last() {
        println!("{}", last.line());
    }
    println!("checkpoint {}", a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&checkpoint_path(&a.ckpt))?;
    let encoder: Arc<dyn PrototypeEncoder> = encoder_for(&ck.config);
    let model = ck.model(encoder)?;
    let manifest = a.data.manifest()?;
    if manifest.class_names != ck.class_names {
        bail!(
            "dataset classes {:?} differ from checkpoint classes {:?}",
            manifest.class_names,
            ck.class_names
        );
    }
    let split = split_arg(&a.split)?;
    let params = &ck.state.params;
    let summary = train::export_pseudo_masks(&model, params, &manifest, split, !a.no_gate, &a.out)?;
    ck.config.write_lock(&a.out)?;
    println!("wrote {} masks to {}", summary.count, a.out.display());
    if let Some(dir) = &a.debug_dump {
        let records: Vec<&PatchRecord> = manifest.split(split).collect();
        for r in records {
            train::dump_debug(&model, params, r, dir)?;
        }
    }
    if let Some(cmd) = &a.stage2 {
        let argv = shlex::split(cmd).ok_or_else(|| anyhow!("cannot parse stage-2 command `{cmd}`"))?;
        let images = manifest
            .split(split)
            .next()
            .and_then(|r| r.path.parent())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| manifest.root.join(split.as_str()));
        train::stage2_hook(&argv, &a.out, &images, &a.out.join("stage2"))?;
    }
    Ok(())
}

fn read_class_names(a: &EvalArgs) -> Result<Vec<String>> {
    let guess = a.gt.parent().and_then(Path::parent).map(|d| d.join(pbip::data::CLASSES_FILE));
    let file = a.classes.clone().or(guess.filter(|p| p.exists() && a.n_classes.is_none()));
    if let Some(f) = file {
        let text = std::fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
        let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        if names.is_empty() {
            bail!("{} lists no classes", f.display());
        }
        return Ok(names);
    }
    let n = a
        .n_classes
        .ok_or_else(|| anyhow!("no class names found; pass --classes or --n-classes"))?;
    Ok((0..n).map(|c| format!("class{c}")).collect())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let names = read_class_names(&a)?;
    let score = |dirs: &[PathBuf]| -> Result<EvalReport> {
        let runs = dirs
            .iter()
            .map(|d| evaluate_dirs(d, &a.gt, &names, a.radius))
            .collect::<pbip::Result<Vec<_>>>()?;
        Ok(EvalReport::new(runs)?)
    };
    let mut report = score(&a.pred)?;
    if !a.baseline.is_empty() {
        let base = score(&a.baseline)?;
        report.compare(&base)?;
    }
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    println!("metric\tmean\tstd");
    println!("mIoU\t{}\t{}", pct(report.miou.mean), pct(report.miou.std));
    println!("FwIoU\t{}\t{}", pct(report.fwiou.mean), pct(report.fwiou.std));
    if let Some(b) = report.biou {
        println!("bIoU\t{}\t{}", pct(b.mean), pct(b.std));
    }
    println!("Dice\t{}\t{}", pct(report.dice.mean), pct(report.dice.std));
    if let Some(p) = report.p_value {
        println!("p\t{p:.3e}");
    }
    if let Some(out) = &a.out {
        write_text(out, &report.to_json()?)?;
    }
    Ok(())
}

fn cmd_zeroshot(a: ZeroshotArgs) -> Result<()> {
    let bank = ImageBank::load(&a.bank)?;
    let cfg = bank_config(&a.bank, &a.cfg)?;
    let encoder = encoder_for(&cfg);
    check_encoder(&bank, encoder.as_ref())?;
    let prototypes = aggregate_prototypes(&bank)?;
    let report = if a.bank_members {
        bank_self_consistency(&bank, &prototypes.p)?
    } else {
        let manifest = a.data.manifest()?;
        let split = split_arg(&a.split)?;
        let records: Vec<&PatchRecord> = manifest.split(split).collect();
        zeroshot_eval(&records, &bank.class_names, encoder.as_ref(), &prototypes.p)?
    };
    print!("{}", report.table());
    println!("accuracy\t{:.4}", report.accuracy);
    if report.skipped_multi_class > 0 {
        log::info!("skipped {} multi-class patches", report.skipped_multi_class);
    }
    if let Some(out) = &a.out {
        write_text(out, &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let base = a.cfg.resolve(&[])?;
    let spec = AblationSpec {
        param: a.param.parse()?,
        values: a.values.clone(),
        seeds: a.seeds.clone(),
    };
    let manifest = a.data.manifest()?;
    base.write_lock(&a.out)?;
    let table = run_ablation(&spec, &base, &manifest, split_arg(&a.split)?, Some(&a.out), a.parallel)?;
    print!("{}", table.to_tsv());
    let failed: usize = table.rows.iter().map(|r| r.failed).sum();
    if failed > 0 {
        log::warn!("{failed} ablation runs failed; see ablation.json");
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_classes: a.classes,
        patch_size: a.size,
        per_class: a.per_class,
        white_per_class: a.white_per_class,
        mixed_train: a.mixed_train,
        n_val: a.n_val,
        n_test: a.n_test,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let s = generate_synthetic(&spec, &a.out)?;
    println!("train {}\tval {}\ttest {}", s.train, s.val, s.test);
    Ok(())
}

fn cmd_overlay(a: OverlayArgs) -> Result<()> {
    let s = pbip::overlay::render_overlays(&a.masks, &a.images, &a.out, a.n_classes, a.alpha)?;
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {} overlays", s.written.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildBank(a) => cmd_build_bank(a),
        Command::Train(a) => cmd_train(a),
        Command::Export(a) => cmd_export(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Zeroshot(a) => cmd_zeroshot(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Overlay(a) => cmd_overlay(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
