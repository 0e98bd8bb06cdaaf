use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use uda_core::data::{generate_dataset, write_pgm, Access, Dataset, Domain, GenConfig, Pgm, Sample, Split};
use uda_core::metrics::evaluate_masks;
use uda_core::prototypes::{cosine_scores, PrototypeSet};
use uda_core::pseudo_labels::assign_pseudo_labels;
use uda_core::training::{
    bootstrap_prototypes, predict, target_angles, train, TrainConfig, TrainError, TrainOptions, TrainState,
};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Unsupervised domain adaptation for segmentation with margin-preserving
/// prototypical contrastive learning, on synthetic two-modality scenes.
#[derive(Debug, Parser)]
#[command(name = "uda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render paired synthetic scenes as PGM files plus manifest.csv.
    GenData(GenDataArgs),
    /// Run the two-phase training schedule.
    ///
    /// Every config key can be given as a flag of the same name. Precedence:
    /// command-line flag > config file > built-in default.
    Train(Box<TrainArgs>),
    /// Score a checkpoint's argmax predictions against ground-truth masks.
    Eval(EvalArgs),
    /// Write prediction, confidence gap, selection mask and pseudo-label maps
    /// for every target image.
    PseudoLabels(PseudoArgs),
    /// Write eval_report.csv and angle_hist.csv for a checkpoint.
    ExportMetrics(ExportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training scenes; each yields one image and mask per domain.
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    val_scenes: usize,
    #[arg(long, default_value_t = 0)]
    test_scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
    size: Vec<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and loss_curve.csv.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long = "alpha")]
    alpha: Option<String>,
    #[arg(long = "delta_th", allow_hyphen_values = true)]
    delta_th: Option<String>,
    #[arg(long = "m")]
    m: Option<String>,
    #[arg(long = "tau")]
    tau: Option<String>,
    #[arg(long = "gamma")]
    gamma: Option<String>,
    #[arg(long = "beta")]
    beta: Option<String>,
    #[arg(long = "lambda")]
    lambda: Option<String>,
    #[arg(long = "lr_g")]
    lr_g: Option<String>,
    #[arg(long = "momentum")]
    momentum: Option<String>,
    #[arg(long = "weight_decay")]
    weight_decay: Option<String>,
    #[arg(long = "lr_d")]
    lr_d: Option<String>,
    #[arg(long = "phase1_iters")]
    phase1_iters: Option<String>,
    #[arg(long = "phase2_iters")]
    phase2_iters: Option<String>,
    #[arg(long = "batch_size")]
    batch_size: Option<String>,
    #[arg(long = "seed")]
    seed: Option<String>,
    #[arg(long = "eval_every")]
    eval_every: Option<String>,
    /// sum or mean
    #[arg(long = "contrastive_reduction")]
    contrastive_reduction: Option<String>,
    #[arg(long = "refine_with_target")]
    refine_with_target: Option<String>,
}

impl TrainArgs {
    fn overrides(&self) -> [(&'static str, &Option<String>); 18] {
        [
            ("alpha", &self.alpha),
            ("delta_th", &self.delta_th),
            ("m", &self.m),
            ("tau", &self.tau),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("lambda", &self.lambda),
            ("lr_g", &self.lr_g),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("lr_d", &self.lr_d),
            ("phase1_iters", &self.phase1_iters),
            ("phase2_iters", &self.phase2_iters),
            ("batch_size", &self.batch_size),
            ("seed", &self.seed),
            ("eval_every", &self.eval_every),
            ("contrastive_reduction", &self.contrastive_reduction),
            ("refine_with_target", &self.refine_with_target),
        ]
    }

    fn resolve(&self) -> Result<TrainConfig, TrainError> {
        let text = std::fs::read_to_string(&self.config)
            .map_err(|e| TrainError::Config(format!("cannot read config {}: {e}", self.config.display())))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(&text)?;
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, val or test
    #[arg(long, default_value = "test")]
    split: Split,
    /// A (source) or B (target)
    #[arg(long, default_value = "B")]
    domain: Domain,
    /// Report path; defaults to eval_report.csv next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PseudoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    split: Split,
    /// Confidence-gap threshold; defaults to the checkpoint's setting.
    #[arg(long = "delta_th", allow_hyphen_values = true)]
    delta_th: Option<f64>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 36)]
    bins: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<TrainError>() {
                Some(t) if t.is_numerical() => ExitCode::from(EXIT_NUMERICAL),
                Some(TrainError::Config(_)) => ExitCode::from(EXIT_USAGE),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => run_train(&a),
        Command::Eval(a) => eval(&a),
        Command::PseudoLabels(a) => pseudo_labels(&a),
        Command::ExportMetrics(a) => export_metrics(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = GenConfig {
        train: a.scenes,
        val: a.val_scenes,
        test: a.test_scenes,
        seed: a.seed,
        height: a.size[0],
        width: a.size[1],
    };
    let rows = generate_dataset(&a.out, &cfg)?;
    println!("wrote {} manifest rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let opts = TrainOptions {
        data_dir: a.data.clone(),
        out_dir: a.out.clone(),
        resume: a.resume.clone(),
    };
    let report = train(&cfg, &opts)?;
    println!("iterations: {}", report.iterations);
    if let (Some(d), Some(i)) = (report.best_val_dice, report.best_iteration) {
        println!("best validation dice: {d:.4} at iteration {i}");
    }
    if let (Some(s), Some(e)) = (report.angle_start, report.angle_end) {
        println!("target angle mean: {:.4} -> {:.4}", s.mean, e.mean);
        println!(
            "target angle fraction below pi/4: {:.4} -> {:.4}",
            s.fraction_below_quarter_pi, e.fraction_below_quarter_pi
        );
    }
    Ok(())
}

fn load_samples(data: &Path, split: Split, domain: Domain, masks: bool) -> Result<Vec<Sample>> {
    let ds = Dataset::open(data, Access::Evaluation)?;
    let s = if masks {
        ds.labeled(split, domain)?
    } else {
        ds.images(split, domain)?
    };
    if s.is_empty() {
        bail!("no {split} images for domain {domain} in {}", data.display());
    }
    Ok(s)
}

fn eval_report(state: &TrainState, samples: &[Sample]) -> Result<uda_core::metrics::EvalReport> {
    let preds = predict(&state.generator, samples)?;
    let gts: Vec<Vec<u8>> = samples.iter().map(|s| s.mask.clone().expect("labeled")).collect();
    Ok(evaluate_masks(
        &preds,
        &gts,
        samples[0].height,
        samples[0].width,
        state.num_categories(),
    )?)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (state, _) = TrainState::load(&a.checkpoint)?;
    let samples = load_samples(&a.data, a.split, a.domain, true)?;
    let csv = eval_report(&state, &samples)?.to_csv();
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.checkpoint.with_file_name("eval_report.csv"));
    std::fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
    print!("{csv}");
    Ok(())
}

/// Stored prototypes, or class means over the source training split for a
/// checkpoint saved before the bootstrap.
fn prototypes_for(state: &TrainState, cfg: &TrainConfig, data: &Path) -> Result<PrototypeSet> {
    if let Some(p) = &state.prototypes {
        return Ok(p.clone());
    }
    let src = load_samples(data, Split::Train, Domain::Source, true)?;
    Ok(bootstrap_prototypes(&state.generator, &src, cfg.alpha)?)
}

fn pseudo_labels(a: &PseudoArgs) -> Result<()> {
    let (state, cfg) = TrainState::load(&a.checkpoint)?;
    let delta = a.delta_th.unwrap_or(cfg.delta_th);
    let protos = prototypes_for(&state, &cfg, &a.data)?;
    let samples = load_samples(&a.data, a.split, Domain::Target, false)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let preds = predict(&state.generator, &samples)?;
    let mut written = 0;
    for (s, pred) in samples.iter().zip(&preds) {
        let (maps, _) = state.generator.infer(&Sample::batch(&[s]))?;
        let (labels, report) = assign_pseudo_labels(&cosine_scores(&maps[0], &protos)?, delta)?;
        let (w, h) = (s.width, s.height);
        // similarity gaps lie in [0, 2]
        let gap: Vec<f64> = report.difference.iter().map(|d| d / 2.0).collect();
        let selection: Vec<u8> = report.selected.iter().map(|&k| if k { 255 } else { 0 }).collect();
        let pseudo: Vec<u8> = labels.labels().iter().map(|l| l.map_or(255, |c| c as u8)).collect();
        let maps = [
            ("prediction", Pgm::from_u8(w, h, pred)),
            ("confidence", Pgm::from_unit(w, h, &gap)),
            ("selection", Pgm::from_u8(w, h, &selection)),
            ("pseudo_label", Pgm::from_u8(w, h, &pseudo)),
        ];
        for (kind, pgm) in maps {
            write_pgm(&a.out.join(format!("{}_{kind}.pgm", s.name)), &pgm)?;
            written += 1;
        }
    }
    println!(
        "wrote {written} maps for {} target images to {}",
        samples.len(),
        a.out.display()
    );
    Ok(())
}

fn export_metrics(a: &ExportArgs) -> Result<()> {
    let (state, cfg) = TrainState::load(&a.checkpoint)?;
    let samples = load_samples(&a.data, a.split, Domain::Target, true)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report_path = a.out.join("eval_report.csv");
    std::fs::write(&report_path, eval_report(&state, &samples)?.to_csv())
        .with_context(|| format!("writing {}", report_path.display()))?;

    let protos = prototypes_for(&state, &cfg, &a.data)?;
    if a.bins == 0 {
        bail!("--bins must be at least 1");
    }
    let hist = target_angles(&state.generator, &protos, &samples, a.bins)?;
    let mut csv = String::from("bin_start,bin_end,count\n");
    for (i, c) in hist.counts.iter().enumerate() {
        csv += &format!("{:.6},{:.6},{c}\n", hist.edges[i], hist.edges[i + 1]);
    }
    let hist_path = a.out.join("angle_hist.csv");
    std::fs::write(&hist_path, csv).with_context(|| format!("writing {}", hist_path.display()))?;
    println!("wrote {} and {}", report_path.display(), hist_path.display());
    Ok(())
}
