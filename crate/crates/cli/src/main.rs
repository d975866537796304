use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use purity_core::explainer::{explain, ExplainOptions};
use purity_core::headmodel::{verify_preservation, DisentanglementTransform, TransformMode};
use purity_core::protobank::{build_bank, select_prototypes, PrototypeBank, Sign};
use purity_core::synthlab::{self, SynthSpec};
use purity_core::tensorio::{atomic_write, FeatureStore, Manifest};
use purity_core::trainer::{train, TrainConfig, PRESERVATION_TOL};
use purity_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "purity",
    version,
    about = "Prototype explanations for frozen classifier heads"
)]
struct Cli {
    /// Worker threads for dataset scans (0 = all cores).
    #[arg(long, global = true, env = "PURITY_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check that the compensated head reproduces the original logits.
    Verify(VerifyArgs),
    /// Train the disentangling transform by purity maximization.
    Train(TrainArgs),
    /// Print the top-m prototypes of one channel.
    Prototypes(PrototypesArgs),
    /// Explain a single prediction with its top contributing channels.
    Explain(ExplainArgs),
    /// Summarize prototype purity per channel.
    Purity(PurityArgs),
    /// Generate a planted-mixing synthetic fixture.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct Dataset {
    /// Dataset manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Trained transform (EPT file with a `.json` sidecar). Identity when omitted.
    #[arg(long)]
    u: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    data: Dataset,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for u.ept, u.ept.json, trace.json and bank.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Rebuild the prototype bank every this many epochs.
    #[arg(long, default_value_t = 2)]
    recalc_every: usize,
    /// Bank width at the first epoch.
    #[arg(long, default_value_t = 100)]
    m_start: usize,
    /// Bank width at the end of training.
    #[arg(long, default_value_t = 5)]
    m_end: usize,
    /// orthogonal or free.
    #[arg(long, default_value = "orthogonal")]
    mode: TransformMode,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    momentum: f64,
    /// Optimizer steps per epoch.
    #[arg(long, default_value_t = TrainConfig::default().inner_iters)]
    inner_iters: usize,
    /// Free-mode weight on ‖U − I‖²_F.
    #[arg(long, default_value_t = TrainConfig::default().free_mode_penalty)]
    penalty: f64,
    /// Records score purity^q; 1 is plain mean purity.
    #[arg(long, default_value_t = TrainConfig::default().purity_exponent)]
    exponent: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add negative prototypes to the objective.
    #[arg(long)]
    include_negative: bool,
}

#[derive(Debug, Args)]
struct PrototypesArgs {
    #[command(flatten)]
    data: Dataset,
    #[arg(long)]
    channel: usize,
    #[arg(long, default_value_t = 5)]
    m: usize,
    /// Rank by negated activation.
    #[arg(long)]
    negative: bool,
    /// Also write the records as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    data: Dataset,
    #[arg(long)]
    sample: String,
    #[arg(long, default_value_t = 3)]
    topk: usize,
    /// Prototypes attached per channel.
    #[arg(long, default_value_t = 5)]
    m: usize,
    /// Evidence box growth in feature cells per side.
    #[arg(long, default_value_t = 0.5)]
    margin: f64,
    /// Persisted bank (from `train`); rebuilt at --u with width --m when omitted.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PurityArgs {
    #[command(flatten)]
    data: Dataset,
    #[arg(long, default_value_t = 5)]
    m: usize,
    /// Also write the statistics as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Feature grid height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [7, 7])]
    spatial: Vec<usize>,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 5.0)]
    spike: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the mixing (M = I).
    #[arg(long)]
    identity_mixing: bool,
}

fn load_transform(path: Option<&Path>, channels: usize) -> Result<DisentanglementTransform> {
    let u = match path {
        Some(p) => DisentanglementTransform::load(p)?,
        None => DisentanglementTransform::identity(channels, TransformMode::Orthogonal),
    };
    if u.dim() != channels {
        return Err(Error::Validation(vec![format!(
            "transform is {0}x{0}, manifest has {channels} channels",
            u.dim()
        )]));
    }
    Ok(u)
}

fn open(data: &Dataset) -> Result<(Manifest, DisentanglementTransform)> {
    let manifest = Manifest::load(&data.manifest)?;
    let u = load_transform(data.u.as_deref(), manifest.channels)?;
    Ok((manifest, u))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    atomic_write(path, text.as_bytes())
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let (manifest, u) = open(&args.data)?;
    let head = manifest.load_head()?;
    let report = verify_preservation(&manifest, &head, &u)?;
    println!("samples            {}", report.samples);
    println!("max |logit dev|    {:.3e}", report.max_abs_logit_dev);
    println!("argmax mismatches  {}", report.argmax_mismatches);
    if !report.holds(PRESERVATION_TOL) {
        return Err(Error::Preservation {
            max_abs_logit_dev: report.max_abs_logit_dev,
            argmax_mismatches: report.argmax_mismatches,
        });
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        epochs: args.epochs,
        recalc_every: args.recalc_every,
        m_start: args.m_start,
        m_end: args.m_end,
        mode: args.mode,
        learning_rate: args.lr,
        momentum: args.momentum,
        free_mode_penalty: args.penalty,
        inner_iters: args.inner_iters,
        purity_exponent: args.exponent,
        seed: args.seed,
        include_negative: args.include_negative,
    };
    cfg.validate()?;
    let manifest = Manifest::load(&args.manifest)?;
    let head = manifest.load_head()?;
    println!("epoch    m      loss  mean purity  min purity");
    let outcome = train(&manifest, &head, &cfg, |e| {
        println!(
            "{:>5} {:>4} {:>9.5} {:>12.4} {:>11.4}{}",
            e.epoch,
            e.m,
            e.loss,
            e.mean_purity,
            e.min_purity,
            if e.step_warnings > 0 {
                format!("  ({} non-improving steps)", e.step_warnings)
            } else {
                String::new()
            }
        );
    })?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    outcome.transform.save(&args.out.join("u.ept"))?;
    write_json(&args.out.join("trace.json"), &outcome.trace)?;
    outcome.bank.save(&args.out.join("bank.json"))?;
    println!(
        "mean purity {:.4} at U = I (m = {}), {:.4} after training (m = {})",
        outcome.trace.initial_mean_purity, cfg.m_start, outcome.trace.final_mean_purity, cfg.m_end
    );
    println!(
        "preservation: max |logit dev| {:.3e}, argmax mismatches {}",
        outcome.trace.preservation.max_abs_logit_dev, outcome.trace.preservation.argmax_mismatches
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_prototypes(args: PrototypesArgs) -> Result<()> {
    let (manifest, u) = open(&args.data)?;
    if args.channel >= manifest.channels {
        return Err(Error::Contract(format!(
            "channel {} out of range for {} channels",
            args.channel, manifest.channels
        )));
    }
    let sign = if args.negative { Sign::Negative } else { Sign::Positive };
    let sel = select_prototypes(&manifest, &u, args.channel, args.m, sign)?;
    if sel.truncated {
        eprintln!(
            "warning: m = {} exceeds dataset size {}; returning the full ranking",
            args.m,
            manifest.len()
        );
    }
    println!("rank  sample_id            activation   h   w   purity");
    for (rank, r) in sel.records.iter().enumerate() {
        println!(
            "{:>4}  {:<18} {:>12.5} {:>3} {:>3} {:>8.4}",
            rank, r.sample_id, r.activation, r.pixel_coords.0, r.pixel_coords.1, r.purity
        );
    }
    if let Some(out) = &args.out {
        write_json(out, &sel.records)?;
    }
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let (manifest, u) = open(&args.data)?;
    if manifest.index_of(&args.sample).is_none() {
        return Err(Error::UnknownSample(args.sample.clone()));
    }
    let head = manifest.load_head()?;
    let bank = match &args.bank {
        Some(p) => PrototypeBank::load(p)?,
        None => build_bank(&manifest, &u, args.m)?,
    };
    let opts = ExplainOptions {
        topk: args.topk,
        m: args.m,
        margin: args.margin,
    };
    let report = explain(&manifest, &u, &head, &bank, &args.sample, opts)?;
    report.save(&args.out)?;
    println!("sample {} predicted class {}", report.sample_id, report.predicted_class);
    for e in &report.entries {
        let ids: Vec<&str> = e.prototypes.iter().map(|p| p.sample_id.as_str()).collect();
        println!(
            "  channel {:>4} score {:>10.5} at ({}, {})  prototypes {}",
            e.channel,
            e.score,
            e.input_pixel_coords.0,
            e.input_pixel_coords.1,
            ids.join(" ")
        );
    }
    if report.degenerate {
        println!("  (degenerate: no channel has positive evidence)");
    }
    println!(
        "  logit {:.6} = Σ terms {:.6} + bias {:.6}; ReLU-masked {:.6}, reported {:.6}",
        report.residual.predicted_logit,
        report.residual.full_sum,
        report.residual.bias,
        report.residual.relu_masked_sum,
        report.residual.reported_sum
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct ChannelStats {
    channel: usize,
    mean: f64,
    min: f64,
    max: f64,
    count: usize,
}

#[derive(serde::Serialize)]
struct PurityStats {
    m: usize,
    mean: f64,
    channels: Vec<ChannelStats>,
    /// Ten equal-width buckets over [0, 1].
    histogram: [usize; 10],
}

fn purity_stats(bank: &PrototypeBank) -> PurityStats {
    let mut histogram = [0usize; 10];
    let channels = bank
        .positive
        .iter()
        .enumerate()
        .map(|(k, recs)| {
            for r in recs {
                histogram[((r.purity * 10.0) as usize).min(9)] += 1;
            }
            let n = recs.len();
            ChannelStats {
                channel: k,
                mean: recs.iter().map(|r| r.purity).sum::<f64>() / n.max(1) as f64,
                min: recs.iter().map(|r| r.purity).fold(f64::INFINITY, f64::min),
                max: recs.iter().map(|r| r.purity).fold(f64::NEG_INFINITY, f64::max),
                count: n,
            }
        })
        .collect();
    PurityStats {
        m: bank.m,
        mean: bank.mean_purity(),
        channels,
        histogram,
    }
}

fn cmd_purity(args: PurityArgs) -> Result<()> {
    let (manifest, u) = open(&args.data)?;
    let bank = build_bank(&manifest, &u, args.m)?;
    let stats = purity_stats(&bank);
    println!("channel     mean      min      max");
    for c in &stats.channels {
        println!("{:>7} {:>8.4} {:>8.4} {:>8.4}", c.channel, c.mean, c.min, c.max);
    }
    println!("mean purity {:.4} (m = {})", stats.mean, stats.m);
    let buckets: Vec<String> = stats.histogram.iter().map(usize::to_string).collect();
    println!("histogram [0,0.1) .. [0.9,1]: {}", buckets.join(" "));
    if let Some(out) = &args.out {
        write_json(out, &stats)?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_classes: args.classes,
        channels: args.channels,
        height: args.spatial[0],
        width: args.spatial[1],
        samples_per_class: args.per_class,
        spike_strength: args.spike,
        noise_sigma: args.noise,
        seed: args.seed,
        identity_mixing: args.identity_mixing,
    };
    spec.validate()?;
    let fixture = synthlab::generate(&spec, &args.out)?;
    let manifest = Manifest::load(&fixture.manifest_path)?;
    let head = manifest.load_head()?;
    let acc = synthlab::baseline_accuracy(&manifest, &head)?;
    println!(
        "wrote {} samples ({} classes, {} channels, {}x{}) to {}",
        manifest.len(),
        spec.num_classes,
        spec.channels,
        spec.height,
        spec.width,
        args.out.display()
    );
    println!("baseline accuracy {:.2}%", acc * 100.0);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Train(a) => cmd_train(a),
        Command::Prototypes(a) => cmd_prototypes(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Purity(a) => cmd_purity(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: cannot configure thread pool: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
