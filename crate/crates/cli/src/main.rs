//! `imgiv`: dataset generation, training, forward prediction, inverse design
//! and evaluation from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use imgiv_core::config::SeedStream;
use imgiv_core::device::{extract_fom, simulate_iv};
use imgiv_core::eval::{self, ReportMeta, TestDevice};
use imgiv_core::pipeline::{self, Component};
use imgiv_core::render::extract_params;
use imgiv_core::store::{self, Provenance};
use imgiv_core::vae::EpochStats;
use imgiv_core::{DeviceImage, EvalMode, IvCurve, PassCounts, RunConfig, TrainedStack};

#[derive(Parser)]
#[command(name = "imgiv", version, about = "Image to I-V curve design machine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the root seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample devices and write images, curves and a manifest.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train both VAEs on the training split and fit both bridges.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Pass counts stored with the stack, as curve_pre,image_post,image_pre.
        #[arg(long)]
        passes: Option<PassCounts>,
    },
    /// Predict the I-V curve of a structure image.
    Predict {
        /// Directory holding a `models/` tree written by `train`.
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        passes: Option<PassCounts>,
    },
    /// Design a structure image for a target I-V curve.
    Invert {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        curve: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        passes: Option<PassCounts>,
    },
    /// Score a stack on the test split and write report files.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        mode: EvalMode,
        #[arg(long)]
        passes: Option<PassCounts>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("imgiv: {line}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common } => gen(&common),
        Command::Train { common, dataset, passes } => train(&common, &dataset, passes),
        Command::Predict { stack, image, out, passes } => predict(&stack, &image, &out, passes),
        Command::Invert { stack, curve, out, passes } => invert(&stack, &curve, &out, passes),
        Command::Eval { common, stack, dataset, mode, passes } => {
            evaluate(&common, &stack, &dataset, mode, passes)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn gen(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let manifest = store::generate_dataset(&cfg, &common.out)?;
    println!(
        "wrote {} train + {} test devices to {}",
        manifest.n_train,
        manifest.n_test,
        common.out.display()
    );
    Ok(())
}

fn trace_csv(trace: &[EpochStats]) -> String {
    let mut out = String::from("epoch,beta,recon,kl,total\n");
    for s in trace {
        out.push_str(&format!("{},{},{},{},{}\n", s.epoch, s.beta, s.recon, s.kl, s.total));
    }
    out
}

fn train(common: &Common, dataset: &Path, passes: Option<PassCounts>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(p) = passes {
        cfg.passes = p;
    }
    let data = store::load_dataset(dataset)?;
    let rows = data.train_range();
    let images = pipeline::image_matrix(&data.images[rows.clone()]);
    let curves = pipeline::curve_matrix(&data.curves[rows]);
    let (stack, traces) = pipeline::train_stack(&cfg, images.view(), curves.view(), |c, s| {
        let name = match c {
            Component::ImageVae => "image",
            Component::CurveVae => "curve",
        };
        eprintln!(
            "{name} epoch {:>4}  beta {:.3}  recon {:.5}  kl {:.4}",
            s.epoch, s.beta, s.recon, s.kl
        );
    })?;
    let provenance = Provenance {
        seed: cfg.seed,
        config_digest: cfg.digest(),
    };
    store::save_stack(&stack, &provenance, &common.out)?;
    let trace_dir = common.out.join("traces");
    create_dir(&trace_dir)?;
    write(&trace_dir.join("image_vae.csv"), trace_csv(&traces.image))?;
    write(&trace_dir.join("curve_vae.csv"), trace_csv(&traces.curve))?;
    write(&common.out.join("config.toml"), cfg.to_toml())?;
    println!("wrote stack to {}", common.out.join("models").display());
    Ok(())
}

fn load_stack(dir: &Path, passes: Option<PassCounts>) -> Result<(TrainedStack, Provenance)> {
    let (mut stack, prov) = store::load_stack(dir)?;
    if let Some(p) = passes {
        stack.passes = p;
    }
    Ok((stack, prov))
}

fn predict(stack_dir: &Path, image: &Path, out: &Path, passes: Option<PassCounts>) -> Result<()> {
    let (stack, _) = load_stack(stack_dir, passes)?;
    let img = DeviceImage::read_png(image)?;
    let curve = stack.forward_predict(&img)?;
    create_dir(out)?;
    curve.write_csv(&out.join("curve.csv"))?;
    let predicted = curve.log10();
    // Draw the oracle curve alongside when the image reads back as a device.
    let oracle = extract_params(&img).ok().map(|p| simulate_iv(&p).log10());
    let mut series: Vec<(&str, &[f64])> = Vec::new();
    if let Some(o) = &oracle {
        series.push(("oracle", o));
    }
    series.push(("predicted", &predicted));
    let title = image.file_name().map_or("prediction".into(), |n| n.to_string_lossy().into_owned());
    write(&out.join("overlay.svg"), eval::curves_svg(&title, &series))?;
    let fom = extract_fom(&curve);
    println!("i_on {:.4e} A  i_off {:.4e} A", fom.i_on, fom.i_off);
    Ok(())
}

fn invert(stack_dir: &Path, curve: &Path, out: &Path, passes: Option<PassCounts>) -> Result<()> {
    let (stack, _) = load_stack(stack_dir, passes)?;
    let target = IvCurve::read_csv(curve)?;
    let design = stack.inverse_design_with_params(&target)?;
    create_dir(out)?;
    design.image.write_png(&out.join("design.png"))?;
    let json = serde_json::json!({ "params": design.params });
    write(&out.join("params.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    match design.params {
        Some(p) => println!("{p}"),
        None => println!("design does not read back as a device; see design.png"),
    }
    Ok(())
}

fn evaluate(
    common: &Common,
    stack_dir: &Path,
    dataset: &Path,
    mode: EvalMode,
    passes: Option<PassCounts>,
) -> Result<()> {
    let (mut stack, prov) = load_stack(stack_dir, None)?;
    let mut cfg = load_config(common)?;
    if common.seed.is_none() && common.config.is_none() {
        cfg.seed = prov.seed;
    }
    stack.passes = passes.unwrap_or(stack.passes);
    let data = store::load_dataset(dataset)?;
    let test: Vec<TestDevice> = data
        .test_range()
        .map(|id| TestDevice {
            id,
            params: data.manifest.items[id].params,
        })
        .collect();
    if test.is_empty() {
        bail!("dataset {} has no test split", dataset.display());
    }
    let meta = ReportMeta {
        n_train: data.manifest.n_train,
        n_test: data.manifest.n_test,
        seed: prov.seed,
        config_digest: prov.config_digest,
    };
    let report = match mode {
        EvalMode::Forward => eval::eval_forward(&stack, &test, None, meta)?,
        EvalMode::ForwardHandDrawn => {
            eval::eval_forward(&stack, &test, Some(cfg.seed_for(SeedStream::HandDrawn)), meta)?
        }
        EvalMode::Inverse => {
            let n = cfg.eval.inverse_targets.min(test.len());
            let targets = eval::inverse_targets(
                &test[..n],
                cfg.eval.noise_sigma,
                cfg.seed_for(SeedStream::CurveNoise),
            )?;
            eval::eval_inverse(&stack, &targets, meta)?
        }
    };
    eval::emit_report(&report, &common.out)?;
    println!(
        "{}: R2 ion {:.4}  R2 ioff {:.4}  ({} devices, {} excluded)",
        mode.name(),
        report.r2_ion,
        report.r2_ioff,
        report.records.len(),
        report.excluded.len()
    );
    Ok(())
}
