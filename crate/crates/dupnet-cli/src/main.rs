//! The `dupnet` command-line tool: cost analysis, desk-scale training,
//! detection, gradient checking, the layer-wise quantization sensitivity
//! sweep, and synthetic dataset generation.
//!
//! Exit codes: 0 success, 1 usage or parse errors, 2 invariant or
//! gradient-check failures.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dupnet_core::config::NetworkSpec;
use dupnet_core::cost::{analyze, CostMode};
use dupnet_core::image_io::load_pnm;
use dupnet_core::layers::Reduce;
use dupnet_core::model::{InferPath, Model};
use dupnet_core::presets;
use dupnet_core::synth::{load_dataset, write_dataset, GtBox, SynthDatasetSpec};
use dupnet_core::train::{
    default_fp_budget, eval_detection, gradcheck_suite, train, TrainConfig,
};
use dupnet_core::weights::{load_weights, save_weights, weight_payload_bytes};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dupnet", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    DupFull,
    DupOptimized,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReduceArg {
    Average,
    Sum,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the per-layer MAdds / MFLOPs / weight-size report for a network
    Analyze {
        /// Path to a .cfg file, or a preset name (tinier-yolo, tinier-yolo-h,
        /// dupnet, dupnet-l, desk64)
        cfg: String,
        #[arg(long, value_enum, default_value = "dup_full")]
        mode: ModeArg,
        /// Machine-readable CSV instead of the aligned table
        #[arg(long)]
        csv: bool,
    },
    /// Train a network on a directory of PGM images with label files
    Train {
        cfg: String,
        data: PathBuf,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "average")]
        reduce: ReduceArg,
        #[arg(long, default_value = "weights.dupw")]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Random horizontal flip augmentation
        #[arg(long)]
        hflip: bool,
        /// Random translation augmentation
        #[arg(long)]
        rand_crop: bool,
    },
    /// Run detection on one image and print `score cx cy w h` lines
    Detect {
        cfg: String,
        weights: PathBuf,
        image: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        thresh: f64,
        /// Use the bit-packed popcount kernels
        #[arg(long, conflicts_with = "ref_path")]
        packed: bool,
        /// Use the reference integer kernels (default)
        #[arg(long = "ref")]
        ref_path: bool,
    },
    /// Finite-difference checks for every layer type used by the network
    Gradcheck {
        cfg: String,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
    },
    /// Layer-wise quantization sweep: costs per row, plus desk-scale
    /// training rates when --iters > 0
    Sensitivity {
        cfg: String,
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: bool,
    },
    /// Generate a seeded synthetic detection dataset (PGM + label files)
    Synthdata {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2000)]
        num: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        min_objects: usize,
        #[arg(long, default_value_t = 2)]
        max_objects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_cfg(arg: &str) -> Result<NetworkSpec> {
    let text = if Path::new(arg).exists() {
        std::fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?
    } else if let Some(preset) = presets::preset_cfg(arg) {
        preset.to_string()
    } else {
        bail!(
            "'{arg}' is neither a file nor a preset (presets: {})",
            presets::preset_names().join(", ")
        );
    };
    NetworkSpec::parse(&text).map_err(|e| anyhow!("{arg}: {e}"))
}

fn cmd_analyze(cfg: &str, mode: ModeArg, csv: bool) -> Result<ExitCode> {
    let spec = load_cfg(cfg)?;
    let mode = match mode {
        ModeArg::DupFull => CostMode::DupFull,
        ModeArg::DupOptimized => CostMode::DupOptimized,
    };
    let report = analyze(&spec, mode);
    if csv {
        print!("{}", report.to_csv());
    } else {
        print!("{report}");
        let payload = weight_payload_bytes(&spec);
        println!(
            "weight payload on disk: {payload} bytes ({:.2} KB); headers, batch-norm and clip parameters excluded from the model-size metric",
            payload as f64 / 1024.0
        );
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &str,
    data: &Path,
    iters: usize,
    seed: u64,
    reduce: ReduceArg,
    out: &Path,
    batch: usize,
    lr: f64,
    hflip: bool,
    rand_crop: bool,
) -> Result<ExitCode> {
    let spec = load_cfg(cfg)?;
    let dataset = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let mut model = Model::init(&spec, seed);
    let cfg = TrainConfig {
        total_iters: iters,
        base_lr: lr,
        batch_size: batch,
        seed,
        reduce: match reduce {
            ReduceArg::Average => Reduce::Average,
            ReduceArg::Sum => Reduce::Sum,
        },
        hflip,
        rand_crop,
        ..Default::default()
    };
    train(&mut model, &dataset, &cfg, |iter, lr, loss| {
        println!("{iter}, {lr}, {loss}");
    })?;
    let bytes = save_weights(&model, true);
    std::fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("saved {} bytes to {}", bytes.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_detect(
    cfg: &str,
    weights: &Path,
    image: &Path,
    thresh: f64,
    packed: bool,
) -> Result<ExitCode> {
    let spec = load_cfg(cfg)?;
    let bytes = std::fs::read(weights).with_context(|| format!("reading {}", weights.display()))?;
    let model = load_weights(&bytes, &spec)?;
    let img = load_pnm(image).with_context(|| format!("reading {}", image.display()))?;
    let path = if packed {
        InferPath::Packed
    } else {
        InferPath::Reference
    };
    let boxes = model.detect(&img.to_tensor(), thresh, path)?;
    for b in boxes {
        println!(
            "{:.6} {:.6} {:.6} {:.6} {:.6}",
            b.score, b.cx, b.cy, b.w, b.h
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(cfg: &str, eps: f64) -> Result<ExitCode> {
    let spec = load_cfg(cfg)?;
    // the checks run on small stand-in shapes; the cfg selects which layer
    // variants are exercised
    let uses_dup_w = spec.conv_layers().any(|l| l.d_w > 1);
    let uses_dup_x = spec.conv_layers().any(|l| l.d_x > 1);
    let uses_bn = spec.conv_layers().any(|l| l.has_bn);
    let uses_pool = spec
        .layers
        .iter()
        .any(|l| l.kind == dupnet_core::config::LayerKind::Maxpool);
    let uses_leaky = spec
        .conv_layers()
        .any(|l| l.activation == dupnet_core::config::Activation::Leaky);
    let mut failed = false;
    println!("{:<16} {:>14}", "layer", "max_rel_err");
    for row in gradcheck_suite(eps) {
        let relevant = match row.name.as_str() {
            "dupweight-tile" | "dupweight-fast" => uses_dup_w,
            "dupfeature-dup" | "dupfeature-fast" => uses_dup_x,
            "batchnorm" => uses_bn,
            "maxpool" => uses_pool,
            "leaky" => uses_leaky,
            _ => true,
        };
        if !relevant {
            continue;
        }
        println!("{:<16} {:>14.3e}", row.name, row.max_rel_err);
        if row.max_rel_err > 1e-4 {
            failed = true;
        }
    }
    if failed {
        eprintln!("gradient check failed (tolerance 1e-4)");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

/// Desk-scale stand-in masks for the progressive quantization rows: the
/// desk network's four convs play the roles of Conv1, Conv2-3, Conv4-8 and
/// Conv9 of the full-size architecture.
fn desk_mask(row: &str) -> Vec<bool> {
    match row {
        "none" => vec![false; 4],
        "conv4-8" => vec![false, false, true, false],
        "conv2-8" => vec![false, true, true, false],
        "conv1-8" => vec![true, true, true, false],
        _ => vec![true; 4],
    }
}

fn cmd_sensitivity(
    cfg: &str,
    data: Option<&Path>,
    iters: usize,
    seed: u64,
    csv: bool,
) -> Result<ExitCode> {
    let spec = load_cfg(cfg)?;
    let desk = NetworkSpec::parse(presets::DESK64_CFG).expect("embedded preset parses");
    let dataset = match (iters, data) {
        (0, _) => None,
        (_, Some(dir)) => {
            Some(load_dataset(dir).with_context(|| format!("loading {}", dir.display()))?)
        }
        (_, None) => bail!("--iters > 0 needs a data directory"),
    };
    let mut rows = Vec::new();
    for (name, mask) in presets::sensitivity_rows() {
        let variant = presets::with_quant_pattern(&spec, &mask)?;
        let report = analyze(&variant, CostMode::DupFull);
        let rate = match &dataset {
            None => None,
            Some(dataset) => {
                // hold out the tail tenth for evaluation
                let split = dataset.len() - (dataset.len() / 10).max(1);
                let (train_set, eval_set) = dataset.split_at(split);
                let proxy = presets::with_quant_pattern(&desk, &desk_mask(name))?;
                let mut model = Model::init(&proxy, seed);
                let cfg = TrainConfig {
                    total_iters: iters,
                    seed,
                    ..Default::default()
                };
                train(&mut model, train_set, &cfg, |_, _, _| {})?;
                let mut preds = Vec::new();
                let mut gts: Vec<Vec<GtBox>> = Vec::new();
                for (img, boxes) in eval_set {
                    preds.push(model.detect(img, 1e-3, InferPath::Reference)?);
                    gts.push(boxes.clone());
                }
                Some(eval_detection(
                    &preds,
                    &gts,
                    default_fp_budget(eval_set.len()),
                    0.5,
                )?)
            }
        };
        rows.push((name, report.total_mflops(), report.total_weight_kb(), rate));
    }
    if csv {
        println!("quantized_layers,mflops,weight_kb,detection_rate");
        for (name, mflops, kb, rate) in rows {
            match rate {
                Some(r) => println!("{name},{mflops:.4},{kb:.4},{r:.4}"),
                None => println!("{name},{mflops:.4},{kb:.4},"),
            }
        }
    } else {
        println!(
            "{:<10} {:>10} {:>10} {:>9}",
            "quantized", "mflops", "weight_kb", "rate"
        );
        for (name, mflops, kb, rate) in rows {
            match rate {
                Some(r) => println!("{name:<10} {mflops:>10.1} {kb:>10.1} {r:>9.3}"),
                None => println!("{name:<10} {mflops:>10.1} {kb:>10.1} {:>9}", "-"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_synthdata(
    out_dir: &Path,
    num: usize,
    size: usize,
    min_objects: usize,
    max_objects: usize,
    seed: u64,
) -> Result<ExitCode> {
    if min_objects > max_objects || max_objects == 0 {
        bail!("invalid object count range {min_objects}..{max_objects}");
    }
    let spec = SynthDatasetSpec {
        num_images: num,
        width: size,
        height: size,
        min_objects,
        max_objects,
        seed,
    };
    let paths = write_dataset(out_dir, &spec)?;
    eprintln!("wrote {} images to {}", paths.len(), out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Analyze { cfg, mode, csv } => cmd_analyze(&cfg, mode, csv),
        Cmd::Train {
            cfg,
            data,
            iters,
            seed,
            reduce,
            out,
            batch,
            lr,
            hflip,
            rand_crop,
        } => cmd_train(
            &cfg, &data, iters, seed, reduce, &out, batch, lr, hflip, rand_crop,
        ),
        Cmd::Detect {
            cfg,
            weights,
            image,
            thresh,
            packed,
            ref_path: _,
        } => cmd_detect(&cfg, &weights, &image, thresh, packed),
        Cmd::Gradcheck { cfg, eps } => cmd_gradcheck(&cfg, eps),
        Cmd::Sensitivity {
            cfg,
            data,
            iters,
            seed,
            csv,
        } => cmd_sensitivity(&cfg, data.as_deref(), iters, seed, csv),
        Cmd::Synthdata {
            out_dir,
            num,
            size,
            min_objects,
            max_objects,
            seed,
        } => cmd_synthdata(&out_dir, num, size, min_objects, max_objects, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests are not errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
