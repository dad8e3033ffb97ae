//! Command-line front end: verification suites, cost tables, kernel
//! benchmarks, synthetic data generation, and training runs with serialized
//! results.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use leanconv::data::{load_cifar10, make_synthetic, Dataset};
use leanconv::kernels::{benchmark_kernel, KernelPath, TileConfig};
use leanconv::network::{
    save_checkpoint, train, GroupRule, Hyper, LayerCost, Model, NetworkConfig,
};
use leanconv::ops::{Direction, LeanConvSpec, StencilKind};
use leanconv::scalar::Scalar;
use leanconv::verify::{run_all, FaultInjection, SuiteReport};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

const RECORD_SCHEMA_VERSION: u32 = 1;

/// Exit codes: 1 = usage/runtime error, 2 = training aborted,
/// 10 + suite index = that verification suite failed.
const EXIT_TRAIN_ABORT: i32 = 2;
const EXIT_SUITE_BASE: i32 = 10;

#[derive(Parser)]
#[command(name = "leanconv", about = "Structured-convolution toolkit", version)]
struct Cli {
    #[command(flatten)]
    common: CommonFlags,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// JSON config file; explicit flags override file values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed controlling init, data order, and generated data
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point precision
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Worker thread count (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for records, CSV files, and checkpoints
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the oracle, adjoint, gradient, and property suites
    Verify {
        /// Perturb a weight inside the named suite; the run must then fail
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// Per-layer parameter and multiplication counts for a network
    Count {
        #[command(flatten)]
        net: NetFlags,
        /// Input height and width
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Batch size used for the multiplication counts
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Latency sweep of the kernel paths against a fully-coupled baseline
    Bench {
        /// Timed repetitions per point (median reported, after one warm-up)
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Train a network and write a per-epoch trace plus a checkpoint
    Train {
        #[command(flatten)]
        net: NetFlags,
        /// CIFAR-10 binary batch directory; omitted = synthetic task
        #[arg(long)]
        data: Option<PathBuf>,
        /// Limit the training split to N samples
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Random flip + pad-crop augmentation
        #[arg(long)]
        augment: bool,
    },
    /// Generate the synthetic dataset and report its statistics
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
}

#[derive(Args, Clone)]
struct NetFlags {
    /// Spatial stencil of every lean operator
    #[arg(long)]
    stencil: Option<String>,
    /// Group rule: N | cin | cin/N | ratio:R
    #[arg(long)]
    groups: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Debug)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum, Debug)]
enum Fault {
    Oracle,
    Adjoint,
    Gradient,
}

impl From<Fault> for FaultInjection {
    fn from(f: Fault) -> Self {
        match f {
            Fault::Oracle => FaultInjection::Oracle,
            Fault::Adjoint => FaultInjection::Adjoint,
            Fault::Gradient => FaultInjection::Gradient,
        }
    }
}

/// Optional values loadable from `--config`; explicit flags win.
#[derive(Deserialize, Serialize, Default, Clone)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    seed: Option<u64>,
    precision: Option<Precision>,
    threads: Option<usize>,
    stencil: Option<String>,
    groups: Option<String>,
    data: Option<PathBuf>,
    subset: Option<usize>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    lr_decay_epochs: Option<Vec<usize>>,
    lr_decay_factor: Option<f64>,
    augment: Option<bool>,
    classes: Option<usize>,
    samples: Option<usize>,
    size: Option<usize>,
    network: Option<NetworkConfig>,
}

#[derive(Serialize)]
struct Machine {
    os: &'static str,
    arch: &'static str,
    threads: usize,
}

#[derive(Serialize)]
struct ResultRecord {
    schema_version: u32,
    command: String,
    config: serde_json::Value,
    config_hash: String,
    rows: Vec<serde_json::Value>,
    wall_clock_secs: f64,
    machine: Machine,
}

fn config_hash(config: &serde_json::Value) -> String {
    // serde_json::Value maps are sorted, so the serialization is canonical
    let bytes = serde_json::to_vec(config).expect("config is serializable");
    let digest = Sha256::digest(&bytes);
    format!("{digest:x}")
}

fn write_record(
    out_dir: &Path,
    command: &str,
    config: serde_json::Value,
    rows: Vec<serde_json::Value>,
    started: Instant,
) -> Result<()> {
    let record = ResultRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        command: command.to_string(),
        config_hash: config_hash(&config),
        config,
        rows,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        machine: Machine {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            threads: rayon::current_num_threads(),
        },
    };
    let path = out_dir.join(format!("{command}-record.json"));
    fs::write(&path, serde_json::to_string_pretty(&record)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parse_stencil(s: &str) -> Result<StencilKind> {
    Ok(match s {
        "9pt" => StencilKind::Full9,
        "5pt" => StencilKind::Five,
        "3pt" => StencilKind::Three1D(Direction::Horizontal),
        "1x1" => StencilKind::PointwiseOnly,
        other => bail!("unknown stencil {other:?} (expected 9pt, 5pt, 3pt, or 1x1)"),
    })
}

fn parse_groups(s: &str) -> Result<GroupRule> {
    if s == "cin" {
        return Ok(GroupRule::DepthWise);
    }
    if let Some(rest) = s.strip_prefix("cin/") {
        let n: usize = rest.parse().context("bad group divisor")?;
        return Ok(GroupRule::CinOver(n));
    }
    if let Some(rest) = s.strip_prefix("ratio:") {
        let r: f64 = rest.parse().context("bad group ratio")?;
        return Ok(GroupRule::Ratio(r));
    }
    let n: usize = s.parse().with_context(|| {
        format!("unknown group rule {s:?} (expected N, cin, cin/N, or ratio:R)")
    })?;
    Ok(GroupRule::Fixed(n))
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// Narrow two-stage network for the synthetic single-channel task.
fn synthetic_net() -> NetworkConfig {
    NetworkConfig {
        in_channels: 1,
        stage_widths: vec![8, 16],
        stage_steps: vec![1, 1],
        stage_strides: vec![1, 2],
        stencil: StencilKind::Five,
        group_rule: GroupRule::Fixed(1),
    }
}

fn resolve_network(
    file: &FileConfig,
    net: &NetFlags,
    default: NetworkConfig,
) -> Result<NetworkConfig> {
    let mut config = file.network.clone().unwrap_or(default);
    if let Some(s) = net.stencil.as_deref().or(file.stencil.as_deref()) {
        config.stencil = parse_stencil(s)?;
    }
    if let Some(g) = net.groups.as_deref().or(file.groups.as_deref()) {
        config.group_rule = parse_groups(g)?;
    }
    Ok(config)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file = load_file_config(cli.common.config.as_deref())?;

    let threads = cli.common.threads.or(file.threads);
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let seed = cli.common.seed.or(file.seed).unwrap_or(0);
    let precision = cli.common.precision.or(file.precision).unwrap_or(Precision::F64);
    let out_dir = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let started = Instant::now();
    match &cli.command {
        Cmd::Verify { inject_fault } => {
            cmd_verify(&out_dir, seed, *inject_fault, started)?;
        }
        Cmd::Count { net, size, batch } => {
            let config = resolve_network(
                &file,
                net,
                NetworkConfig::res18(StencilKind::Full9, GroupRule::Fixed(1)),
            )?;
            match precision {
                Precision::F64 => {
                    cmd_count::<f64>(&out_dir, &config, *size, *batch, seed, precision, started)?
                }
                Precision::F32 => {
                    cmd_count::<f32>(&out_dir, &config, *size, *batch, seed, precision, started)?
                }
            }
        }
        Cmd::Bench { repeats } => match precision {
            Precision::F64 => cmd_bench::<f64>(&out_dir, *repeats, seed, precision, started)?,
            Precision::F32 => cmd_bench::<f32>(&out_dir, *repeats, seed, precision, started)?,
        },
        Cmd::Train { net, data, subset, epochs, batch, lr, augment } => {
            let data_dir = data.clone().or_else(|| file.data.clone());
            let subset = subset.or(file.subset);
            let default_net = if data_dir.is_some() {
                NetworkConfig::res18(StencilKind::Full9, GroupRule::Fixed(1))
            } else {
                synthetic_net()
            };
            let config = resolve_network(&file, net, default_net)?;
            let hyper = Hyper {
                lr: lr.or(file.lr).unwrap_or(0.05),
                momentum: file.momentum.unwrap_or(0.9),
                weight_decay: file.weight_decay.unwrap_or(1e-4),
                batch_size: batch.or(file.batch).unwrap_or(32),
                epochs: epochs.or(file.epochs).unwrap_or(20),
                lr_decay_epochs: file.lr_decay_epochs.clone().unwrap_or_default(),
                lr_decay_factor: file.lr_decay_factor.unwrap_or(0.1),
                augment: *augment || file.augment.unwrap_or(false),
            };
            let synth = SynthParams {
                classes: file.classes.unwrap_or(4),
                samples: file.samples.unwrap_or(512),
                size: file.size.unwrap_or(16),
            };
            let outcome = match precision {
                Precision::F64 => cmd_train::<f64>(
                    &out_dir, &config, &hyper, data_dir.as_deref(), subset, &synth, seed,
                    precision, started,
                ),
                Precision::F32 => cmd_train::<f32>(
                    &out_dir, &config, &hyper, data_dir.as_deref(), subset, &synth, seed,
                    precision, started,
                ),
            };
            if let Err(e) = outcome {
                eprintln!("training aborted: {e:#}");
                std::process::exit(EXIT_TRAIN_ABORT);
            }
        }
        Cmd::Synth { classes, samples, size } => {
            let classes = file.classes.unwrap_or(*classes);
            let samples = file.samples.unwrap_or(*samples);
            let size = file.size.unwrap_or(*size);
            cmd_synth(&out_dir, classes, samples, size, seed, started)?;
        }
    }
    Ok(())
}

fn cmd_verify(
    out_dir: &Path,
    seed: u64,
    fault: Option<Fault>,
    started: Instant,
) -> Result<()> {
    let reports = run_all(seed, fault.map(Into::into));
    let mut rows = Vec::new();
    let mut first_failure: Option<usize> = None;
    for (i, r) in reports.iter().enumerate() {
        print_report(r);
        if !r.passed && first_failure.is_none() {
            first_failure = Some(i);
        }
        rows.push(serde_json::to_value(r)?);
    }
    let config = serde_json::json!({
        "seed": seed,
        "inject_fault": fault.map(|f| format!("{f:?}").to_lowercase()),
    });
    write_record(out_dir, "verify", config, rows, started)?;
    if let Some(i) = first_failure {
        eprintln!("suite {} failed", reports[i].name);
        std::process::exit(EXIT_SUITE_BASE + i as i32);
    }
    println!("all suites passed");
    Ok(())
}

fn print_report(r: &SuiteReport) {
    println!(
        "{:<24} cases={:<4} max_rel_err={:<12.3e} tol={:<9.0e} {}",
        r.name,
        r.cases,
        r.max_rel_err,
        r.tolerance,
        if r.passed { "PASS" } else { "FAIL" }
    );
}

#[allow(clippy::too_many_arguments)]
fn cmd_count<S: Scalar>(
    out_dir: &Path,
    config: &NetworkConfig,
    size: usize,
    batch: usize,
    seed: u64,
    precision: Precision,
    started: Instant,
) -> Result<()> {
    let model = Model::<S>::build(config, 10).context("building the network")?;
    let table = model.conv_cost_table(batch, size, size);

    println!(
        "{:<14} {:>5} {:>5} {:>6} {:>9} {:>10} {:>12}",
        "layer", "c_in", "c_out", "groups", "map", "params", "mults"
    );
    let mut csv_rows = Vec::new();
    let (mut params, mut mults) = (0u64, 0u64);
    for row in &table {
        print_cost_row(row);
        params += row.params;
        mults += row.mults;
        csv_rows.push(format!(
            "{},{},{},{},{},{},{},{}",
            row.name, row.c_in, row.c_out, row.groups, row.height, row.width, row.params,
            row.mults
        ));
    }
    println!(
        "{:<14} {:>5} {:>5} {:>6} {:>9} {:>10} {:>12}",
        "total", "", "", "", "", params, mults
    );
    csv_rows.push(format!("total,,,,,,{params},{mults}"));
    write_csv(
        &out_dir.join("count.csv"),
        "layer,c_in,c_out,groups,height,width,params,mults",
        &csv_rows,
    )?;

    let config_value = serde_json::json!({
        "network": config,
        "size": size,
        "batch": batch,
        "seed": seed,
        "precision": precision,
    });
    let rows = table.iter().map(|r| serde_json::to_value(cost_row_json(r)).unwrap()).collect();
    write_record(out_dir, "count", config_value, rows, started)?;
    Ok(())
}

fn print_cost_row(row: &LayerCost) {
    println!(
        "{:<14} {:>5} {:>5} {:>6} {:>4}x{:<4} {:>10} {:>12}",
        row.name, row.c_in, row.c_out, row.groups, row.height, row.width, row.params, row.mults
    );
}

fn cost_row_json(row: &LayerCost) -> serde_json::Value {
    serde_json::json!({
        "layer": row.name,
        "c_in": row.c_in,
        "c_out": row.c_out,
        "groups": row.groups,
        "height": row.height,
        "width": row.width,
        "params": row.params,
        "mults": row.mults,
    })
}

fn cmd_bench<S: Scalar>(
    out_dir: &Path,
    repeats: usize,
    seed: u64,
    precision: Precision,
    started: Instant,
) -> Result<()> {
    if repeats < 3 {
        bail!("--repeats must be at least 3");
    }
    let tile = TileConfig::auto();
    let mut csv_rows = Vec::new();
    let mut rows = Vec::new();
    println!(
        "{:>8} {:>9} {:>13} {:>13} {:>11} {:>13} {:>10}",
        "channels", "map", "baseline_ms", "separate_ms", "fused_ms", "separate_rel", "fused_rel"
    );
    // channel widths 16 -> 512, spatial size halving as channels double
    for step in 0..6u32 {
        let c = 16usize << step;
        let hw = 512usize >> step;

        // fully-coupled 3x3 baseline
        let baseline =
            LeanConvSpec::<S>::zeros(c, c, 1, StencilKind::Full9, true).context("baseline spec")?;
        let base = benchmark_kernel(&baseline, 1, hw, hw, KernelPath::ShiftIm2col, repeats, seed, &tile)
            .context("baseline timing")?;

        // separate 1x1 application followed by a depth-wise 3x3 application
        let pw_only =
            LeanConvSpec::<S>::zeros(c, c, 1, StencilKind::PointwiseOnly, true).context("1x1 spec")?;
        let dw_only =
            LeanConvSpec::<S>::zeros(c, c, c, StencilKind::Full9, false).context("depth-wise spec")?;
        let sep_pw =
            benchmark_kernel(&pw_only, 1, hw, hw, KernelPath::ShiftIm2col, repeats, seed, &tile)?;
        let sep_dw =
            benchmark_kernel(&dw_only, 1, hw, hw, KernelPath::ShiftIm2col, repeats, seed, &tile)?;
        let separate = sep_pw.median_secs + sep_dw.median_secs;

        // the same depth-wise configuration fused with its pointwise part
        let lean =
            LeanConvSpec::<S>::zeros(c, c, c, StencilKind::Full9, true).context("lean spec")?;
        let fused =
            benchmark_kernel(&lean, 1, hw, hw, KernelPath::FusedTiled, repeats, seed, &tile)?;

        let sep_rel = separate / base.median_secs;
        let fused_rel = fused.median_secs / base.median_secs;
        println!(
            "{:>8} {:>4}x{:<4} {:>13.3} {:>13.3} {:>11.3} {:>13.3} {:>10.3}",
            c,
            hw,
            hw,
            base.median_secs * 1e3,
            separate * 1e3,
            fused.median_secs * 1e3,
            sep_rel,
            fused_rel
        );
        csv_rows.push(format!(
            "{c},{hw},{hw},1.0,{sep_rel},{fused_rel},{},{},{}",
            base.median_secs, separate, fused.median_secs
        ));
        rows.push(serde_json::json!({
            "channels": c,
            "height": hw,
            "width": hw,
            "baseline_secs": base.median_secs,
            "separate_secs": separate,
            "fused_secs": fused.median_secs,
            "separate_rel": sep_rel,
            "fused_rel": fused_rel,
        }));
    }
    write_csv(
        &out_dir.join("bench.csv"),
        "channels,height,width,baseline_rel,separate_rel,fused_rel,baseline_secs,separate_secs,fused_secs",
        &csv_rows,
    )?;
    let config = serde_json::json!({
        "repeats": repeats,
        "seed": seed,
        "precision": precision,
    });
    write_record(out_dir, "bench", config, rows, started)?;
    Ok(())
}

struct SynthParams {
    classes: usize,
    samples: usize,
    size: usize,
}

#[allow(clippy::too_many_arguments)]
fn cmd_train<S: Scalar>(
    out_dir: &Path,
    config: &NetworkConfig,
    hyper: &Hyper,
    data_dir: Option<&Path>,
    subset: Option<usize>,
    synth: &SynthParams,
    seed: u64,
    precision: Precision,
    started: Instant,
) -> Result<()> {
    let dataset: Dataset<S> = match data_dir {
        Some(dir) => load_cifar10(dir, subset).context("loading CIFAR-10")?,
        None => {
            let samples = subset.unwrap_or(synth.samples);
            make_synthetic(synth.classes, samples, synth.size, seed)
        }
    };
    println!(
        "training on {} samples ({} validation), {} classes",
        dataset.train_len(),
        dataset.val_len(),
        dataset.n_classes
    );

    let mut model =
        Model::<S>::init(config, dataset.n_classes, seed).context("building the network")?;
    println!("network: {} parameters", model.num_params());

    let trace = train(&mut model, &dataset, hyper, seed).context("training run")?;

    let header = "epoch,lr,train_loss,train_acc,val_acc";
    let mut csv_rows = Vec::new();
    for e in &trace {
        println!(
            "epoch {:>3}  lr {:.4}  loss {:.4}  train acc {:.3}  val acc {:.3}",
            e.epoch, e.lr, e.train_loss, e.train_acc, e.val_acc
        );
        csv_rows.push(format!(
            "{},{},{},{},{}",
            e.epoch, e.lr, e.train_loss, e.train_acc, e.val_acc
        ));
    }
    write_csv(&out_dir.join("trace.csv"), header, &csv_rows)?;

    let ckpt = out_dir.join("checkpoint.json");
    save_checkpoint(&model, &ckpt).context("writing the checkpoint")?;

    match trace.last() {
        Some(e) => println!("final val accuracy: {:.4}", e.val_acc),
        None => println!("no epochs run; wrote the initial checkpoint"),
    }

    let config_value = serde_json::json!({
        "network": config,
        "hyper": hyper,
        "data": data_dir.map(|p| p.display().to_string()),
        "subset": subset,
        "synthetic": data_dir.is_none().then(|| serde_json::json!({
            "classes": synth.classes,
            "samples": synth.samples,
            "size": synth.size,
        })),
        "seed": seed,
        "precision": precision,
    });
    let rows = trace.iter().map(|e| serde_json::to_value(e).unwrap()).collect();
    write_record(out_dir, "train", config_value, rows, started)?;
    Ok(())
}

fn cmd_synth(
    out_dir: &Path,
    classes: usize,
    samples: usize,
    size: usize,
    seed: u64,
    started: Instant,
) -> Result<()> {
    let data: Dataset<f64> = make_synthetic(classes, samples, size, seed);
    let mut train_hist = vec![0usize; classes];
    for &l in &data.train_labels {
        train_hist[l] += 1;
    }
    let mut val_hist = vec![0usize; classes];
    for &l in &data.val_labels {
        val_hist[l] += 1;
    }
    // content digest demonstrating seed determinism
    let mut hasher = Sha256::new();
    for v in data.train_images.data().iter().chain(data.val_images.data()) {
        hasher.update(v.to_le_bytes());
    }
    let digest = format!("{:x}", hasher.finalize());

    println!("{classes} classes, {} train + {} val samples of {size}x{size}", data.train_len(), data.val_len());
    println!("train histogram: {train_hist:?}");
    println!("val histogram:   {val_hist:?}");
    println!("content sha256:  {digest}");

    let rows = (0..classes)
        .map(|k| {
            serde_json::json!({
                "class": k,
                "train_count": train_hist[k],
                "val_count": val_hist[k],
            })
        })
        .chain(std::iter::once(serde_json::json!({ "content_sha256": digest })))
        .collect();
    let config = serde_json::json!({
        "classes": classes,
        "samples": samples,
        "size": size,
        "seed": seed,
    });
    write_record(out_dir, "synth", config, rows, started)?;
    Ok(())
}
