//! Command-line front end: interpretation, guided and contrastive
//! variants, attention transfer, pixel rewriting, perturbation
//! benchmarks, and planted-model construction.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vitinterp::error::Error;
use vitinterp::experiments::{
    attention_transfer, perturb_benchmark, rewrite_image, write_bench_csv, BenchConfig,
    RewriteParams, StopRule,
};
use vitinterp::guidance::{
    composite_guide, detail_interpret, CompositeLayout, ContrastForm, Placement,
};
use vitinterp::image_io::{decode_image, preprocess, write_image, ImageTensor};
use vitinterp::loss::LossSpec;
use vitinterp::manifest::Manifest;
use vitinterp::plant::{grid_columns, plant_model, ClassRegions};
use vitinterp::render::render_overlay;
use vitinterp::rollout::{interpret, CorrectionScheme, SaliencyMap};
use vitinterp::vit::{ModelConfig, ModelWeights};
use vitinterp::weights_io::{load_weights, save_weights};

#[derive(Parser)]
#[command(name = "vitinterp", version, about = "Signed attention saliency for ViTs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Weight container file.
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Args)]
struct ImageArgs {
    /// Input image (PPM P6 or 8-bit RGB PNG).
    #[arg(long)]
    image: PathBuf,
    /// Per-channel preprocessing mean, comma-separated.
    #[arg(long, default_value = "0.5,0.5,0.5")]
    mean: String,
    /// Per-channel preprocessing std, comma-separated.
    #[arg(long, default_value = "0.5,0.5,0.5")]
    std: String,
}

#[derive(Args)]
struct OutputArgs {
    /// Heatmap image output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Saliency JSON output path.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Run manifest path (defaults next to the first output).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Overlay transparency of the base image in [0,1].
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Signed saliency heatmap for one image.
    Interpret {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        image: ImageArgs,
        /// Correction scheme: positive|complete|absolute.
        #[arg(long, default_value = "complete")]
        scheme: String,
        /// Loss: single:C | diff:C1,C2 | ratio:C1,C2 | ndiff:C1,C2.
        #[arg(long)]
        loss: String,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Interpretation of a source image composited with a guide image.
    Guide {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        image: ImageArgs,
        /// Guide-class image stitched next to the source.
        #[arg(long)]
        guide_image: PathBuf,
        /// Where the guide goes: right|bottom.
        #[arg(long, default_value = "right")]
        placement: String,
        /// Fraction of the composite occupied by the guide, in (0,1).
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        #[arg(long, default_value = "complete")]
        scheme: String,
        #[arg(long)]
        loss: String,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Contrastive detail interpretation between two classes.
    Detail {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        image: ImageArgs,
        #[arg(long)]
        c1: usize,
        #[arg(long)]
        c2: usize,
        /// Contrast form: ndiff|diff|ratio.
        #[arg(long, default_value = "ndiff")]
        form: String,
        #[arg(long, default_value = "complete")]
        scheme: String,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Gradient descent on the attention maps themselves.
    Transfer {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        image: ImageArgs,
        #[arg(long)]
        loss: String,
        #[arg(long, default_value_t = 0.0004)]
        lr: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Keep full attention snapshots every N steps (0 = never).
        #[arg(long, default_value_t = 0)]
        snapshot_every: usize,
        #[arg(long, default_value = "complete")]
        scheme: String,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Rewrite image pixels toward a target class.
    Rewrite {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        image: ImageArgs,
        /// Class the image should be pushed toward.
        #[arg(long)]
        target: usize,
        #[arg(long, default_value_t = 0.001)]
        step_size: f64,
        #[arg(long, default_value_t = 500)]
        max_steps: usize,
        /// L-infinity budget in model space (unset = unbounded).
        #[arg(long)]
        eps: Option<f64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Positive/negative perturbation AUC over a dataset directory.
    Perturb {
        #[command(flatten)]
        model: ModelArgs,
        /// Directory-per-class dataset root.
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated configs: scheme or scheme=loss
        /// (e.g. "complete,positive=single:3").
        #[arg(long, default_value = "complete")]
        configs: String,
        /// Masking schedule resolution (0 = one token per step).
        #[arg(long, default_value_t = 0)]
        k: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "0.5,0.5,0.5")]
        mean: String,
        #[arg(long, default_value = "0.5,0.5,0.5")]
        std: String,
    },
    /// Construct a planted-weight model and save its container.
    PlantModel {
        /// Model config JSON file.
        #[arg(long)]
        config: PathBuf,
        /// Regions: "CLASS=left|right|top|bottom|p1,p2,..." joined by ';'.
        #[arg(long, default_value = "0=left;1=right")]
        regions: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn parse_floats(s: &str, flag: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad {flag} value `{t}`")))
        })
        .collect()
}

fn parse_loss(s: &str) -> Result<LossSpec, Error> {
    let bad = || Error::InvalidArgument(format!("bad loss `{s}` (single:C|diff:C1,C2|ratio:C1,C2|ndiff:C1,C2)"));
    let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
    let ints: Vec<usize> = rest
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let spec = match (kind, ints.as_slice()) {
        ("single", [c]) => LossSpec::SingleLogit { target: *c },
        ("diff", [a, b]) => LossSpec::Diff { c1: *a, c2: *b },
        ("ratio", [a, b]) => LossSpec::Ratio { c1: *a, c2: *b },
        ("ndiff", [a, b]) => LossSpec::NormalizedDiff { c1: *a, c2: *b },
        _ => return Err(bad()),
    };
    if let LossSpec::Diff { c1, c2 }
    | LossSpec::Ratio { c1, c2 }
    | LossSpec::NormalizedDiff { c1, c2 } = spec
    {
        if c1 == c2 {
            return Err(Error::ClassesMustDiffer(c1));
        }
    }
    Ok(spec)
}

fn parse_regions(s: &str, cfg: &ModelConfig) -> Result<ClassRegions, Error> {
    let g = cfg.grid();
    let mut out = ClassRegions::new();
    for part in s.split(';') {
        let (class, body) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("bad region `{part}`")))?;
        let class: usize = class
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad region class `{class}`")))?;
        let patches = match body.trim() {
            "left" => grid_columns(cfg, 0, g / 2),
            "right" => grid_columns(cfg, g / 2, g),
            "top" => (0..g / 2 * g).collect(),
            "bottom" => (g / 2 * g..g * g).collect(),
            list => list
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::InvalidArgument(format!("bad patch index `{p}`")))
                })
                .collect::<Result<_, _>>()?,
        };
        out.insert(class, patches);
    }
    Ok(out)
}

fn parse_bench_configs(s: &str) -> Result<Vec<BenchConfig>, Error> {
    s.split(',')
        .map(|part| {
            // scheme=loss would itself contain commas in the loss class
            // list, so loss-bearing configs use ':' inside the loss and
            // '=' as the separator: e.g. complete=diff:1.2 is invalid;
            // class pairs use '.' in this flag (diff:1.2 means c1=1,c2=2).
            let (scheme, loss) = match part.split_once('=') {
                Some((sch, l)) => (sch, Some(l.replace('.', ","))),
                None => (part, None),
            };
            Ok(BenchConfig {
                scheme: CorrectionScheme::parse(scheme.trim())?,
                loss: loss.map(|l| parse_loss(&l)).transpose()?,
            })
        })
        .collect()
}

fn load_image(args: &ImageArgs, cfg: &ModelConfig) -> Result<ImageTensor, Error> {
    let raw = decode_image(&args.image)?;
    let mean = parse_floats(&args.mean, "--mean")?;
    let std = parse_floats(&args.std, "--std")?;
    preprocess(&raw, cfg, &mean, &std, &args.image.display().to_string())
}

/// Write the heatmap/JSON artifacts a saliency-producing subcommand
/// promises, and the manifest.
fn emit_saliency(
    s: &SaliencyMap,
    base: &Path,
    out: &OutputArgs,
    w: &ModelWeights,
    command: &str,
    params: serde_json::Value,
) -> Result<(), Error> {
    let mut manifest = Manifest::success(command, params).with_config(&w.config);
    if let Some(path) = &out.out {
        let raw = decode_image(base)?;
        let rendered = render_overlay(s, &raw, out.alpha)?;
        write_image(&rendered, path)?;
        manifest = manifest.with_output(path.display().to_string());
    }
    if let Some(path) = &out.json {
        let json = serde_json::to_string_pretty(s).expect("saliency serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))?;
        manifest = manifest.with_output(path.display().to_string());
    }
    if let Some(path) = manifest_path(&out.manifest, out.out.as_ref().or(out.json.as_ref())) {
        manifest.write(&path)?;
    }
    Ok(())
}

fn manifest_path(explicit: &Option<PathBuf>, primary: Option<&PathBuf>) -> Option<PathBuf> {
    explicit.clone().or_else(|| {
        primary.map(|p| {
            let mut os = p.as_os_str().to_owned();
            os.push(".manifest.json");
            PathBuf::from(os)
        })
    })
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), Error> {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Interpret {
            model,
            image,
            scheme,
            loss,
            output,
        } => {
            let scheme = CorrectionScheme::parse(&scheme)?;
            let spec = parse_loss(&loss)?;
            let w = load_weights(&model.weights)?;
            let img = load_image(&image, &w.config)?;
            let s = interpret(&w, &img, &spec, scheme)?;
            emit_saliency(
                &s,
                &image.image,
                &output,
                &w,
                "interpret",
                serde_json::json!({
                    "image": image.image.display().to_string(),
                    "scheme": scheme.label(),
                    "loss": spec.label(),
                    "alpha": output.alpha,
                }),
            )
        }
        Command::Guide {
            model,
            image,
            guide_image,
            placement,
            fraction,
            scheme,
            loss,
            output,
        } => {
            let scheme = CorrectionScheme::parse(&scheme)?;
            let spec = parse_loss(&loss)?;
            let layout = CompositeLayout::new(Placement::parse(&placement)?, fraction)?;
            let w = load_weights(&model.weights)?;
            let img = load_image(&image, &w.config)?;
            let mean = parse_floats(&image.mean, "--mean")?;
            let std = parse_floats(&image.std, "--std")?;
            let guide_raw = decode_image(&guide_image)?;
            let guide = preprocess(
                &guide_raw,
                &w.config,
                &mean,
                &std,
                &guide_image.display().to_string(),
            )?;
            let (composite, masks) = composite_guide(&img, &guide, &layout, &w.config)?;
            let s = interpret(&w, &composite, &spec, scheme)?;
            // region means let the caller see where attention went
            let params = serde_json::json!({
                "image": image.image.display().to_string(),
                "guide_image": guide_image.display().to_string(),
                "placement": placement,
                "fraction": fraction,
                "scheme": scheme.label(),
                "loss": spec.label(),
                "masks": masks,
                "source_mean": s.region_mean(&masks.source),
                "guide_mean": s.region_mean(&masks.guide),
            });
            emit_saliency(&s, &image.image, &output, &w, "guide", params)
        }
        Command::Detail {
            model,
            image,
            c1,
            c2,
            form,
            scheme,
            output,
        } => {
            let scheme = CorrectionScheme::parse(&scheme)?;
            let form = ContrastForm::parse(&form)?;
            let w = load_weights(&model.weights)?;
            let img = load_image(&image, &w.config)?;
            let s = detail_interpret(&w, &img, c1, c2, form, scheme)?;
            emit_saliency(
                &s,
                &image.image,
                &output,
                &w,
                "detail",
                serde_json::json!({
                    "image": image.image.display().to_string(),
                    "c1": c1,
                    "c2": c2,
                    "scheme": scheme.label(),
                    "loss": s.loss,
                }),
            )
        }
        Command::Transfer {
            model,
            image,
            loss,
            lr,
            steps,
            snapshot_every,
            scheme,
            output,
        } => {
            let scheme = CorrectionScheme::parse(&scheme)?;
            let spec = parse_loss(&loss)?;
            let w = load_weights(&model.weights)?;
            let img = load_image(&image, &w.config)?;
            let snap = (snapshot_every > 0).then_some(snapshot_every);
            let run = attention_transfer(&w, &img, &spec, lr, steps, scheme, snap)?;
            let mut manifest = Manifest::success(
                "transfer",
                serde_json::json!({
                    "image": image.image.display().to_string(),
                    "loss": spec.label(),
                    "lr": lr,
                    "steps": steps,
                    "scheme": scheme.label(),
                }),
            )
            .with_config(&w.config);
            if let Some(path) = &output.json {
                write_json(&run, path)?;
                manifest = manifest.with_output(path.display().to_string());
            }
            if let Some(path) = &output.out {
                let raw = decode_image(&image.image)?;
                let last = &run.records.last().expect("at least one record").saliency;
                write_image(&render_overlay(last, &raw, output.alpha)?, path)?;
                manifest = manifest.with_output(path.display().to_string());
            }
            if let Some(path) =
                manifest_path(&output.manifest, output.json.as_ref().or(output.out.as_ref()))
            {
                manifest.write(&path)?;
            }
            println!(
                "transfer: loss {} -> {}",
                run.records.first().map(|r| r.loss).unwrap_or(f64::NAN),
                run.records.last().map(|r| r.loss).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Rewrite {
            model,
            image,
            target,
            step_size,
            max_steps,
            eps,
            output,
        } => {
            let w = load_weights(&model.weights)?;
            let img = load_image(&image, &w.config)?;
            let original = vitinterp::vit::forward(&w, &img)?.logits();
            let current = vitinterp::vit::argmax(&original);
            if target >= w.config.num_classes {
                return Err(Error::ClassOutOfRange {
                    index: target,
                    num_classes: w.config.num_classes,
                });
            }
            if current == target {
                return Err(Error::ClassesMustDiffer(target));
            }
            // descend logit_current - logit_target to push toward target
            let spec = LossSpec::Diff {
                c1: current,
                c2: target,
            };
            let params = RewriteParams {
                step_size,
                max_steps,
                epsilon: eps,
                clamp: (-3.0, 3.0),
                stop_when: StopRule::ArgmaxFlip,
            };
            let run = rewrite_image(&w, &img, &spec, &params)?;
            let mut manifest = Manifest::success(
                "rewrite",
                serde_json::json!({
                    "image": image.image.display().to_string(),
                    "target": target,
                    "loss": spec.label(),
                    "step_size": step_size,
                    "max_steps": max_steps,
                    "eps": eps,
                }),
            )
            .with_config(&w.config);
            if let Some(path) = &output.json {
                write_json(&run, path)?;
                manifest = manifest.with_output(path.display().to_string());
            }
            if let Some(path) =
                manifest_path(&output.manifest, output.json.as_ref().or(output.out.as_ref()))
            {
                manifest.write(&path)?;
            }
            println!(
                "rewrite: class {} (p={:.3}, logit {:.3}) -> class {} (p={:.3}, logit {:.3}) in {} steps{}",
                run.original.class,
                run.original.probability,
                run.original.logit,
                run.updated.class,
                run.updated.probability,
                run.updated.logit,
                run.steps.len(),
                if run.flipped { "" } else { " (no flip)" }
            );
            Ok(())
        }
        Command::Perturb {
            model,
            dataset,
            configs,
            k,
            csv,
            json,
            manifest,
            mean,
            std,
        } => {
            let configs = parse_bench_configs(&configs)?;
            let w = load_weights(&model.weights)?;
            let mean = parse_floats(&mean, "--mean")?;
            let std = parse_floats(&std, "--std")?;
            let k = if k == 0 { w.config.num_patches() } else { k };
            let report = perturb_benchmark(&w, &dataset, &configs, None, k, &mean, &std)?;
            let mut m = Manifest::success(
                "perturb",
                serde_json::json!({
                    "dataset": dataset.display().to_string(),
                    "k": k,
                    "configs": configs,
                    "engine": env!("CARGO_PKG_VERSION"),
                }),
            )
            .with_config(&w.config);
            if let Some(path) = &csv {
                write_bench_csv(&report, path)?;
                m = m.with_output(path.display().to_string());
            }
            if let Some(path) = &json {
                write_json(
                    &serde_json::json!({
                        "engine": env!("CARGO_PKG_VERSION"),
                        "k": report.k,
                        "summaries": report.summaries,
                        "skipped": report.skipped,
                    }),
                    path,
                )?;
                m = m.with_output(path.display().to_string());
            }
            if let Some(path) = manifest_path(&manifest, json.as_ref().or(csv.as_ref())) {
                m.write(&path)?;
            }
            for s in &report.summaries {
                println!(
                    "{} {}: pos_auc {:.4} neg_auc {:.4} over {} images",
                    s.scheme, s.loss, s.mean_pos_auc, s.mean_neg_auc, s.images
                );
            }
            Ok(())
        }
        Command::PlantModel {
            config,
            regions,
            seed,
            out,
            manifest,
        } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Error::io(config.display().to_string(), e))?;
            let cfg: ModelConfig = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("config JSON: {e}")))?;
            cfg.validate()?;
            let regions = parse_regions(&regions, &cfg)?;
            let w = plant_model(&cfg, &regions, seed)?;
            save_weights(&w, &out)?;
            let m = Manifest::success(
                "plant-model",
                serde_json::json!({
                    "config": config.display().to_string(),
                    "seed": seed,
                }),
            )
            .with_config(&cfg)
            .with_output(out.display().to_string());
            if let Some(path) = manifest_path(&manifest, Some(&out)) {
                m.write(&path)?;
            }
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

/// Usage errors exit 1, data errors exit 2.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_)
        | Error::ClassesMustDiffer(_)
        | Error::ClassOutOfRange { .. }
        | Error::InvalidConfig(_)
        | Error::DegenerateLayout(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; everything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
