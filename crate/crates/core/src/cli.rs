//! The `cfuseg` command line: generate, train, search, predict, evaluate and
//! gradcheck subcommands. Every run that trains a model writes an
//! `experiment.json` recording its configuration, split, seeds, artifact
//! hashes and the list of dataset files it read.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_model, save_weights};
use crate::config::{default_grid, RunConfig};
use crate::dataset::{make_split, write_split, AccessRecord, DatasetDir, Sample};
use crate::dishgen::{generate_dataset, write_json, GeneratorParams, Preset, MANIFEST_FILE};
use crate::error::Error;
use crate::evalkit::{count_colonies, evaluate_masks, format_table, render_overlay, MetricsReport};
use crate::gradcheck::{unet_grad_check, GradCheckReport};
use crate::loss::{Loss, LossKind};
use crate::mask::LabelMask;
use crate::netpbm;
use crate::seeds::derive_seed;
use crate::tensor::Mode;
use crate::train::{grid_search_with, predict_samples, train, train_fixed_epochs, CvResult};
use crate::unet::{build_unet, predict_mask, UNetConfig};

pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const CV_RESULTS_FILE: &str = "cv_results.json";

#[derive(Parser, Debug)]
#[command(name = "cfuseg", version, about = "Bacterial colony segmentation and counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a train-val/test split.
    Generate(GenerateArgs),
    /// Train one configuration on the train-val split and report on the test split.
    Train(TrainArgs),
    /// Cross-validated grid search, refit of the winner, and test report.
    Search(SearchArgs),
    /// Segment images with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predicted masks against ground-truth masks.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of the U-Net and loss gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value_t = 108)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Square canvas size in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value = "realistic")]
    preset: String,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of the train-val split held out for early stopping.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `default` for the full 36-configuration grid, or axes such as
    /// `depth=2,4;lr=1e-3,1e-4` applied on top of the configuration.
    #[arg(long, default_value = "default")]
    grid: String,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of predicted `mask_*.pgm` files.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth `mask_*.pgm` files.
    #[arg(long)]
    gt: PathBuf,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    size: usize,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::UnknownKey(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{}: no such file", path.display())))
    }
}

fn require_dir(path: &Path) -> CliResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{}: no such directory", path.display())))
    }
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on usage errors, 2 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Search(a) => cmd_search(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> CliResult {
    let preset: Preset = a.preset.parse().map_err(|m: String| usage(format!("preset: {m}")))?;
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(usage(format!("test_fraction: {} (must be in [0, 1))", a.test_fraction)));
    }
    let params = GeneratorParams::for_preset(preset, a.size);
    let manifest = generate_dataset(&params, a.n, a.seed, &a.out)?;
    let (trainval, test) = make_split(a.n, a.test_fraction, a.seed);
    write_split(&a.out, &trainval, &test)?;
    let [_, plus, minus, border] = manifest.pixel_fractions;
    println!(
        "wrote {} images to {} ({} train-val, {} test); pixel fractions bvg+ {plus:.4} bvg- {minus:.4} border {border:.4}",
        a.n,
        a.out.display(),
        trainval.len(),
        test.len()
    );
    Ok(())
}

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let text = match &args.config {
        Some(p) => {
            require_file(p)?;
            Some(fs::read_to_string(p).map_err(|e| Failure::from(Error::io(p, e)))?)
        }
        None => None,
    };
    RunConfig::parse(text.as_deref(), &args.overrides).map_err(|e| usage(e.to_string()))
}

fn open_dataset(path: &Path, cfg: &RunConfig) -> CliResult<DatasetDir> {
    require_dir(path)?;
    require_file(&path.join(MANIFEST_FILE))?;
    let ds = DatasetDir::open(path)?;
    let [h, w] = ds.manifest().canvas;
    if h != cfg.image_size || w != cfg.image_size {
        return Err(usage(format!(
            "image_size: {} does not match the dataset canvas {h}x{w}",
            cfg.image_size
        )));
    }
    Ok(ds)
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Failure::from(Error::io(path, e)))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub role: String,
    /// Relative to the directory holding the experiment manifest.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub trainval: Vec<usize>,
    pub test: Vec<usize>,
    /// Inner train/validation division of the train-val ids (train only).
    pub train: Option<Vec<usize>>,
    pub validation: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config: RunConfig,
    pub config_text: String,
    pub dataset: String,
    pub dataset_manifest_sha256: String,
    pub split: SplitRecord,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<ArtifactRecord>,
    pub access_log: Vec<AccessRecord>,
}

impl ExperimentManifest {
    /// Checks that every artifact exists under `dir` with its recorded hash.
    pub fn verify(&self, dir: &Path) -> crate::Result<()> {
        for a in &self.artifacts {
            let path = dir.join(&a.path);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let actual = hex::encode(Sha256::digest(&bytes));
            if actual != a.sha256 {
                return Err(Error::Invalid(format!("{}: hash {actual} does not match manifest", a.path)));
            }
        }
        Ok(())
    }
}

fn record_artifacts(out: &Path, files: &[(&str, &str)]) -> CliResult<Vec<ArtifactRecord>> {
    files
        .iter()
        .map(|(role, file)| {
            Ok(ArtifactRecord {
                role: role.to_string(),
                path: file.to_string(),
                sha256: sha256_file(&out.join(file))?,
            })
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::from(Error::io(path, e)))
}

fn write_history(path: &Path, history: &crate::train::TrainingHistory) -> CliResult {
    let mut buf = Vec::new();
    history.write_csv(&mut buf).expect("writing to a Vec");
    fs::write(path, buf).map_err(|e| Failure::from(Error::io(path, e)))
}

#[derive(Serialize)]
struct FinalReport<'a> {
    trainval: &'a MetricsReport,
    test: &'a MetricsReport,
}

/// Evaluates the final model on train-val and then on the test split, and
/// writes the JSON and text reports.
fn final_reports(
    model: &mut crate::unet::UNetModel,
    ds: &DatasetDir,
    trainval: &[Sample],
    test_ids: &[usize],
    cfg: &RunConfig,
    out: &Path,
) -> CliResult<MetricsReport> {
    let report_on = |model: &mut crate::unet::UNetModel, set: &[Sample]| -> CliResult<MetricsReport> {
        let preds = predict_samples(model, set, cfg.batch_size)?;
        let gt: Vec<LabelMask> = set.iter().map(|s| s.mask.clone()).collect();
        let ids: Vec<String> = set.iter().map(|s| s.id.clone()).collect();
        Ok(evaluate_masks(&ids, &preds, &gt)?)
    };
    let tv_report = report_on(model, trainval)?;
    let test = ds.load(test_ids, "test")?;
    let test_report = report_on(model, &test)?;
    write_json(
        &out.join(REPORT_JSON),
        &FinalReport {
            trainval: &tv_report,
            test: &test_report,
        },
    )?;
    let table = format_table(&[("train-val", &tv_report), ("test", &test_report)]);
    write_text(&out.join(REPORT_TEXT), &table)?;
    print!("{table}");
    Ok(test_report)
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| Failure::from(Error::io(path, e)))
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    if !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
        return Err(usage(format!("val_fraction: {} (must be in (0, 1))", a.val_fraction)));
    }
    let ds = open_dataset(&a.data, &cfg)?;
    let (trainval_ids, test_ids) = ds.read_split()?;
    let split_seed = derive_seed(cfg.seed, &[0x5EED]);
    let (inner_train, inner_val) = make_split(trainval_ids.len(), a.val_fraction, split_seed);
    let train_ids: Vec<usize> = inner_train.iter().map(|&i| trainval_ids[i]).collect();
    let val_ids: Vec<usize> = inner_val.iter().map(|&i| trainval_ids[i]).collect();
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(usage("val_fraction leaves an empty training or validation set"));
    }
    let train_set = ds.load(&train_ids, "train")?;
    let val_set = ds.load(&val_ids, "validation")?;
    let model_seed = derive_seed(cfg.seed, &[0x0DE1]);
    let model = build_unet(cfg.unet(), model_seed)?;
    eprintln!(
        "training depth {} base {} on {} images, validating on {}",
        cfg.depth,
        cfg.base_channels,
        train_set.len(),
        val_set.len()
    );
    let (mut model, history) = train(model, &train_set, &val_set, &cfg)?;
    eprintln!(
        "stopped after {} epochs ({:?}), best epoch {:?}",
        history.epochs(),
        history.stop_reason,
        history.best_epoch
    );
    create_dir(&a.out)?;
    save_weights(&model, &a.out.join(CHECKPOINT_FILE))?;
    write_history(&a.out.join(HISTORY_FILE), &history)?;
    let mut trainval = train_set;
    trainval.extend(val_set);
    final_reports(&mut model, &ds, &trainval, &test_ids, &cfg, &a.out)?;

    let seeds = BTreeMap::from([
        ("config".to_string(), cfg.seed),
        ("inner_split".to_string(), split_seed),
        ("model_init".to_string(), model_seed),
        ("dataset".to_string(), ds.manifest().seed),
    ]);
    write_experiment(
        &a.out,
        "train",
        &cfg,
        &ds,
        SplitRecord {
            trainval: trainval_ids,
            test: test_ids,
            train: Some(train_ids),
            validation: Some(val_ids),
        },
        seeds,
        &[
            ("checkpoint", CHECKPOINT_FILE),
            ("history", HISTORY_FILE),
            ("report_json", REPORT_JSON),
            ("report_text", REPORT_TEXT),
        ],
    )
}

fn write_experiment(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    ds: &DatasetDir,
    split: SplitRecord,
    seeds: BTreeMap<String, u64>,
    files: &[(&str, &str)],
) -> CliResult {
    let manifest = ExperimentManifest {
        command: command.to_string(),
        config: cfg.clone(),
        config_text: cfg.to_text(),
        dataset: ds.root().display().to_string(),
        dataset_manifest_sha256: sha256_file(&ds.root().join(MANIFEST_FILE))?,
        split,
        seeds,
        artifacts: record_artifacts(out, files)?,
        access_log: ds.access_log(),
    };
    write_json(&out.join(EXPERIMENT_FILE), &manifest)?;
    Ok(())
}

/// Parses `default` or `key=v1,v2;key2=v3` into the list of configurations
/// spanned by the axes, varying the last axis fastest.
pub fn parse_grid(spec: &str, base: &RunConfig) -> crate::Result<Vec<RunConfig>> {
    if spec.trim() == "default" {
        return Ok(default_grid(base));
    }
    let mut grid = vec![base.clone()];
    for axis in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("grid axis `{axis}` is not key=v1,v2")))?;
        let mut next = Vec::new();
        for cfg in &grid {
            for v in values.split(',') {
                let mut c = cfg.clone();
                c.set(key.trim(), v)?;
                next.push(c);
            }
        }
        grid = next;
    }
    for c in &grid {
        c.validate()?;
    }
    Ok(grid)
}

#[derive(Serialize)]
struct SearchSummary<'a> {
    ranking: &'a [CvResult],
    winner: usize,
    refit_epochs: usize,
}

fn cmd_search(a: SearchArgs) -> CliResult {
    let base = load_config(&a.config)?;
    let grid = parse_grid(&a.grid, &base).map_err(|e| usage(format!("grid: {e}")))?;
    if a.folds < 2 {
        return Err(usage(format!("folds: {} (must be at least 2)", a.folds)));
    }
    let ds = open_dataset(&a.data, &base)?;
    let (trainval_ids, test_ids) = ds.read_split()?;
    let trainval = ds.load(&trainval_ids, "search")?;
    eprintln!(
        "searching {} configurations with {}-fold cross-validation on {} images",
        grid.len(),
        a.folds,
        trainval.len()
    );
    let ranking = grid_search_with(&grid, &trainval, a.folds, |r| {
        eprintln!(
            "config {:>2}: depth {} bn {} loss {} lr {:e} -> mean val mAP {:.4}",
            r.index,
            r.config.depth,
            r.config.batchnorm,
            r.config.loss.as_str(),
            r.config.lr,
            r.mean_val_map
        );
    })?;
    let winner = &ranking[0];
    let epochs = winner.refit_epochs();
    let refit_seed = derive_seed(base.seed, &[0x12EF17]);
    let refit_cfg = RunConfig {
        seed: refit_seed,
        ..winner.config.clone()
    };
    eprintln!("refitting config {} for {epochs} epochs on all train-val images", winner.index);
    let model = build_unet(refit_cfg.unet(), refit_seed)?;
    let (mut model, history) = train_fixed_epochs(model, &trainval, epochs, &refit_cfg)?;

    create_dir(&a.out)?;
    write_json(
        &a.out.join(CV_RESULTS_FILE),
        &SearchSummary {
            ranking: &ranking,
            winner: winner.index,
            refit_epochs: epochs,
        },
    )?;
    save_weights(&model, &a.out.join(CHECKPOINT_FILE))?;
    write_history(&a.out.join(HISTORY_FILE), &history)?;
    final_reports(&mut model, &ds, &trainval, &test_ids, &refit_cfg, &a.out)?;

    let seeds = BTreeMap::from([
        ("config".to_string(), base.seed),
        ("refit".to_string(), refit_seed),
        ("dataset".to_string(), ds.manifest().seed),
    ]);
    write_experiment(
        &a.out,
        "search",
        &refit_cfg,
        &ds,
        SplitRecord {
            trainval: trainval_ids,
            test: test_ids,
            train: None,
            validation: None,
        },
        seeds,
        &[
            ("cv_results", CV_RESULTS_FILE),
            ("checkpoint", CHECKPOINT_FILE),
            ("history", HISTORY_FILE),
            ("report_json", REPORT_JSON),
            ("report_text", REPORT_TEXT),
        ],
    )
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub image: String,
    pub mask: String,
    pub overlay: String,
    pub bvg_plus: usize,
    pub bvg_minus: usize,
}

fn output_stem(path: &Path) -> String {
    let stem = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    stem.strip_prefix("image_").map_or(stem.clone(), str::to_string)
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    require_file(&a.model)?;
    for p in &a.images {
        require_file(p)?;
    }
    let mut model = load_model(&a.model)?;
    create_dir(&a.out)?;
    let mut records = Vec::with_capacity(a.images.len());
    for path in &a.images {
        let image = netpbm::read_ppm(path)?;
        let probs = model.forward(&image.to_tensor(), Mode::Infer)?;
        let mask = predict_mask(&probs).remove(0);
        let stem = output_stem(path);
        let (mask_file, overlay_file) = (format!("mask_{stem}.pgm"), format!("overlay_{stem}.ppm"));
        netpbm::write_pgm(&a.out.join(&mask_file), &mask)?;
        netpbm::write_ppm(&a.out.join(&overlay_file), &render_overlay(&image, &mask)?.image)?;
        let counts = count_colonies(&mask);
        println!("{}: bvg+ {} bvg- {}", path.display(), counts.bvg_plus, counts.bvg_minus);
        records.push(PredictionRecord {
            image: path.display().to_string(),
            mask: mask_file,
            overlay: overlay_file,
            bvg_plus: counts.bvg_plus,
            bvg_minus: counts.bvg_minus,
        });
    }
    write_json(&a.out.join("counts.json"), &records)?;
    Ok(())
}

fn mask_files(dir: &Path) -> CliResult<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::from(Error::io(dir, e)))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("mask_") && n.ends_with(".pgm"))
        .collect();
    names.sort();
    Ok(names)
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    require_dir(&a.pred)?;
    require_dir(&a.gt)?;
    let names = mask_files(&a.gt)?;
    if names.is_empty() {
        return Err(usage(format!("{}: no mask_*.pgm files", a.gt.display())));
    }
    let (mut preds, mut gts, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for name in &names {
        let p = a.pred.join(name);
        require_file(&p)?;
        preds.push(netpbm::read_pgm_mask(&p)?);
        gts.push(netpbm::read_pgm_mask(&a.gt.join(name))?);
        ids.push(name.trim_start_matches("mask_").trim_end_matches(".pgm").to_string());
    }
    let report = evaluate_masks(&ids, &preds, &gts)?;
    print!("{}", format_table(&[("eval", &report)]));
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
    for batchnorm in [true, false] {
        for kind in [LossKind::WeightedCe, LossKind::CeSoftDice] {
            let config = UNetConfig {
                depth: 2,
                base_channels: 4,
                batchnorm,
            };
            let loss = Loss {
                kind,
                ..Loss::default()
            };
            let report = unet_grad_check(config, &loss, a.size, 2, a.seed)?;
            reports.push((format!("depth 2, batchnorm {batchnorm}, {}", kind.as_str()), report));
        }
    }
    let mut stdout = std::io::stdout().lock();
    let mut pass = true;
    for (name, r) in &reports {
        pass &= r.pass;
        let _ = writeln!(
            stdout,
            "{name}: max relative error {:.3e} over {} tensors -> {}",
            r.max_relative_error,
            r.entries.len(),
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check exceeded tolerance".into()))
    }
}
