//! `spx`: superpixel transformer toolkit.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 I/O, 4 file format,
//! 5 numerical failure.

mod render;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use spformer::checkpoint;
use spformer::evaluation::{align, dataset_mean, robustness_eval, Alignment, Partition, QualityAccumulator, Transform};
use spformer::model::{count_superpixels, flops_estimate, Model};
use spformer::netpbm::{GrayImage, RgbImage};
use spformer::slic::{image_to_lab, slic_segment, SlicParams};
use spformer::training::{
    format_log, load_dataset, save_dataset, synth_generate, thread_count, train, SynthSample, TrainConfig,
};

/// Writes a line to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! emit {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use spformer::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) => 3,
                E::Format(_) | E::Checkpoint(_) => 4,
                E::NonFinite { .. } | E::DegenerateRow { .. } => 5,
                E::Internal(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

#[derive(Parser)]
#[command(name = "spx", version, about = "Superpixel transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset (`train/` and `val/` splits).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1200)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        val: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset directory.
    Train {
        /// `key=value` file with training and model keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset with `train/` and `val/` splits, or a single split.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict classes for images or score a labelled dataset.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "data")]
        image: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render learned superpixels as boundary overlays and region means.
    Superpixels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Render a single association head (default: head average).
        #[arg(long, conflicts_with = "all_heads")]
        head: Option<usize>,
        #[arg(long)]
        all_heads: bool,
        /// Superpixel counts to render (default: the checkpoint's native grid).
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
    /// Majority-label quality of model, SLIC, patch or given partitions.
    EvalQuality {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of PGM label maps named after the images (`labels` method).
        #[arg(long)]
        partitions: Option<PathBuf>,
        /// Target segment count for SLIC and patch arms.
        #[arg(long)]
        segments: Option<usize>,
        #[arg(long, default_value_t = 10.0)]
        compactness: f64,
        #[arg(long, value_enum, default_value_t = AlignArg::Upscale)]
        alignment: AlignArg,
        /// Number of label classes (default: largest mask value + 1).
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Accuracy under rotations and occlusions.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [15.0, 30.0, 45.0])]
        rotate: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5])]
        occlude: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Fill::Mean)]
        fill: Fill,
    },
    /// SLIC segmentation of one image.
    Slic {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 196)]
        segments: usize,
        #[arg(long, default_value_t = 10.0)]
        compactness: f64,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        /// 16-bit PGM label map.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Print a checkpoint's configuration and size.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also list every parameter tensor.
        #[arg(long)]
        params: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Model,
    Slic,
    Patch,
    Labels,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Upscale,
    Downsample,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fill {
    Mean,
    Zero,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let threads = thread_count(0);
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            train,
            val,
            size,
            classes,
            seed,
        } => synth_cmd(&out, train, val, size, classes, seed),
        Command::Train {
            config,
            data,
            epochs,
            seed,
            out,
        } => train_cmd(config.as_deref(), &data, epochs, seed, &out),
        Command::Classify {
            checkpoint,
            image,
            data,
        } => classify_cmd(&checkpoint, &image, data.as_deref()),
        Command::Superpixels {
            checkpoint,
            image,
            out,
            head,
            all_heads,
            counts,
        } => superpixels_cmd(&checkpoint, &image, &out, head, all_heads, &counts),
        Command::EvalQuality {
            method,
            data,
            checkpoint,
            partitions,
            segments,
            compactness,
            alignment,
            classes,
        } => {
            let alignment = match alignment {
                AlignArg::Upscale => Alignment::Upscale,
                AlignArg::Downsample => Alignment::Downsample,
            };
            let opts = QualityOpts {
                checkpoint,
                partitions,
                segments,
                compactness,
                alignment,
                classes,
            };
            eval_quality_cmd(method, &data, &opts)
        }
        Command::Robustness {
            checkpoint,
            data,
            rotate,
            occlude,
            fill,
        } => robustness_cmd(&checkpoint, &data, &rotate, &occlude, fill),
        Command::Slic {
            image,
            segments,
            compactness,
            iterations,
            out,
            overlay,
        } => {
            let params = SlicParams {
                segments,
                compactness,
                iterations,
            };
            slic_cmd(&image, &params, &out, overlay.as_deref())
        }
        Command::Inspect { checkpoint, params } => inspect_cmd(&checkpoint, params),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn read_image(path: &Path) -> Result<RgbImage> {
    RgbImage::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_dataset(dir: &Path) -> Result<Vec<SynthSample>> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn synth_cmd(out: &Path, n_train: usize, n_val: usize, size: usize, classes: usize, seed: u64) -> Result<()> {
    // independent streams for the two splits
    let train_set = synth_generate(n_train, size, size, classes, seed.wrapping_mul(2))?;
    let val_set = synth_generate(n_val, size, size, classes, seed.wrapping_mul(2) + 1)?;
    save_dataset(&train_set, &out.join("train"))?;
    save_dataset(&val_set, &out.join("val"))?;
    say!(
        "train={} val={} size={size} classes={classes}",
        train_set.len(),
        val_set.len()
    );
    Ok(())
}

fn train_cmd(config: Option<&Path>, data: &Path, epochs: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_kv(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (train_set, val_set) = if data.join("train").is_dir() {
        let val = if data.join("val").is_dir() {
            read_dataset(&data.join("val"))?
        } else {
            Vec::new()
        };
        (read_dataset(&data.join("train"))?, val)
    } else {
        (read_dataset(data)?, Vec::new())
    };
    let outcome = train(&cfg, &train_set, &val_set, Some(out))?;
    emit!("{}", format_log(&outcome.log));
    say!("checkpoint={}", out.join("final.spxf").display());
    Ok(())
}

fn classify_cmd(ckpt: &Path, images: &[PathBuf], data: Option<&Path>) -> Result<()> {
    let model = load_model(ckpt)?;
    if let Some(dir) = data {
        let samples = read_dataset(dir)?;
        let mut correct = 0usize;
        for s in &samples {
            let logits = model.logits(&s.tensor())?;
            correct += (spformer::model::argmax(&logits) == s.label) as usize;
        }
        let acc = if samples.is_empty() {
            0.0
        } else {
            correct as f64 / samples.len() as f64
        };
        say!("samples={} accuracy={acc:.6}", samples.len());
        return Ok(());
    }
    if images.is_empty() {
        return Err(usage("classify needs --image or --data"));
    }
    for path in images {
        let logits = model.logits(&read_image(path)?.to_tensor())?;
        let mut line = format!("{} class={}", path.display(), spformer::model::argmax(&logits));
        for v in &logits {
            let _ = write!(line, " {v:.6}");
        }
        say!("{line}");
    }
    Ok(())
}

/// Model whose superpixel grid yields `count` superpixels on `height×width`
/// images, sharing all weights with `model`.
fn model_for_count(model: &Model, count: usize, height: usize, width: usize) -> Result<Model> {
    let cfg = &model.config;
    if count_superpixels(cfg, height, width)? == count {
        return Ok(model.clone());
    }
    let (h, w) = cfg.pixel_grid(height, width)?;
    let ratio = (2..=h.min(w))
        .find(|&r| h.div_ceil(r) * w.div_ceil(r) == count)
        .ok_or_else(|| {
            usage(format!(
                "no superpixel grid gives {count} superpixels on a {h}x{w} feature map"
            ))
        })?;
    if cfg.abs_pos_embed {
        return Err(usage(format!(
            "checkpoint has absolute position embeddings; only its native count is available, not {count}"
        )));
    }
    let mut variant = model.clone();
    variant.config.superpixel_ratio = ratio;
    variant.config.validate()?;
    Ok(variant)
}

fn superpixels_cmd(
    ckpt: &Path,
    image_path: &Path,
    out: &Path,
    head: Option<usize>,
    all_heads: bool,
    counts: &[usize],
) -> Result<()> {
    let model = load_model(ckpt)?;
    let image = read_image(image_path)?;
    let (height, width) = (image.height, image.width);
    let native = count_superpixels(&model.config, height, width)?;
    let counts = if counts.is_empty() {
        vec![native]
    } else {
        counts.to_vec()
    };
    let heads = model.config.sca_heads;
    if let Some(h) = head {
        if h >= heads {
            return Err(usage(format!("head {h} out of range for {heads} heads")));
        }
    }
    // validate every count before writing anything
    let variants = counts
        .iter()
        .map(|&k| model_for_count(&model, k, height, width))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let tensor = image.to_tensor();
    for (&count, m) in counts.iter().zip(&variants) {
        let analysis = m.analyze(&tensor)?;
        let assoc = analysis.final_association();
        let maps: Vec<(String, _)> = if all_heads {
            (0..heads).map(|h| (format!("head{h}"), assoc.head(h))).collect()
        } else if let Some(h) = head {
            vec![(format!("head{h}"), assoc.head(h))]
        } else {
            vec![("mean".to_string(), assoc.mean_heads())]
        };
        let (gh, gw) = (assoc.grid.spec.h, assoc.grid.spec.w);
        for (tag, map) in maps {
            let hard = map.hard_assign();
            let labels = render::upsample_labels(hard.head(0), gh, gw, height, width);
            let base = format!("{stem}_n{count}_{tag}");
            let overlay = out.join(format!("{base}_overlay.ppm"));
            render::boundary_overlay(&image, &labels).write(&overlay)?;
            render::region_mean(&image, &labels).write(&out.join(format!("{base}_mean.ppm")))?;
            let used = {
                let mut seen = labels.clone();
                seen.sort_unstable();
                seen.dedup();
                seen.len()
            };
            say!(
                "{base} superpixels={count} occupied={used} class={}",
                analysis.predicted_class()
            );
        }
    }
    Ok(())
}

struct QualityOpts {
    checkpoint: Option<PathBuf>,
    partitions: Option<PathBuf>,
    segments: Option<usize>,
    compactness: f64,
    alignment: Alignment,
    classes: Option<usize>,
}

fn eval_quality_cmd(method: Method, data: &Path, opts: &QualityOpts) -> Result<()> {
    let samples = read_dataset(data)?;
    if samples.is_empty() {
        return Err(usage("dataset is empty"));
    }
    let classes = opts.classes.unwrap_or_else(|| {
        samples
            .iter()
            .flat_map(|s| s.mask.iter())
            .max()
            .map_or(1, |&m| m as usize + 1)
    });
    let model = opts.checkpoint.as_deref().map(load_model).transpose()?;
    let (h0, w0) = (samples[0].image.height, samples[0].image.width);
    let segments = match (opts.segments, &model) {
        (Some(k), _) => k,
        (None, Some(m)) => count_superpixels(&m.config, h0, w0)?,
        (None, None) => 196,
    };
    let names = image_names(data)?;
    let mut acc = QualityAccumulator::new(classes);
    for (idx, s) in samples.iter().enumerate() {
        let (h, w) = (s.image.height, s.image.width);
        let part = match method {
            Method::Model => {
                let m = model
                    .as_ref()
                    .ok_or_else(|| usage("--method model needs --checkpoint"))?;
                let a = m.analyze(&s.tensor())?;
                let hard = a.final_association().hard_assign();
                let grid = &a.final_association().grid;
                Partition::from_hard(&hard, grid.spec.h, grid.spec.w)?
            }
            Method::Slic => {
                let params = SlicParams {
                    segments,
                    compactness: opts.compactness,
                    ..SlicParams::default()
                };
                let seg = slic_segment(&image_to_lab(&s.tensor())?, &params)?;
                Partition::from_labels(h, w, &[seg.labels])?
            }
            Method::Patch => {
                let cell = ((h * w) as f64 / segments as f64).sqrt().round().max(1.0) as usize;
                Partition::patch_grid(h, w, cell)?
            }
            Method::Labels => {
                let dir = opts
                    .partitions
                    .as_deref()
                    .ok_or_else(|| usage("--method labels needs --partitions"))?;
                let path = dir.join(format!("{}.pgm", names[idx]));
                let map = GrayImage::read(&path).with_context(|| format!("reading {}", path.display()))?;
                let labels = map.data.iter().map(|&v| v as u32).collect::<Vec<_>>();
                Partition::from_labels(map.height, map.width, &[labels])?
            }
        };
        let (part, gt) = align(&part, &s.mask, h, w, opts.alignment)?;
        acc.add(&part, &gt)?;
    }
    let name = match method {
        Method::Model => "model",
        Method::Slic => "slic",
        Method::Patch => "patch",
        Method::Labels => "labels",
    };
    emit!("{}", acc.report(name).to_kv());
    say!("segments={segments}");
    Ok(())
}

/// Image file stems in `labels.txt` order.
fn image_names(dir: &Path) -> Result<Vec<String>> {
    let index = fs::read_to_string(dir.join("labels.txt"))?;
    Ok(index
        .lines()
        .filter_map(|l| l.split_whitespace().next())
        .map(|f| f.trim_end_matches(".ppm").to_string())
        .collect())
}

fn robustness_cmd(ckpt: &Path, data: &Path, rotate: &[f64], occlude: &[f64], fill: Fill) -> Result<()> {
    let model = load_model(ckpt)?;
    let samples = read_dataset(data)?;
    let pairs: Vec<_> = samples.iter().map(|s| (s.tensor(), s.label)).collect();
    let fill = match fill {
        Fill::Mean => dataset_mean(&pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>()).to_vec(),
        Fill::Zero => vec![0.0; 3],
    };
    if let Some(r) = occlude.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(usage(format!("occlusion ratio {r} outside [0, 1]")));
    }
    let transforms: Vec<Transform> = rotate
        .iter()
        .map(|&d| Transform::Rotate(d))
        .chain(occlude.iter().map(|&r| Transform::Occlude(r)))
        .collect();
    emit!("{}", robustness_eval(&model, &pairs, &transforms, &fill)?.to_kv());
    Ok(())
}

fn slic_cmd(image_path: &Path, params: &SlicParams, out: &Path, overlay: Option<&Path>) -> Result<()> {
    let image = read_image(image_path)?;
    let seg = slic_segment(&image_to_lab(&image.to_tensor())?, params)?;
    seg.to_pgm()?
        .write(out)
        .with_context(|| format!("writing {}", out.display()))?;
    if let Some(p) = overlay {
        render::boundary_overlay(&image, &seg.labels).write(p)?;
    }
    say!(
        "segments={} requested={} iterations={} cost={:.6}",
        seg.segments,
        seg.requested,
        seg.iterations,
        seg.costs.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn inspect_cmd(ckpt: &Path, list: bool) -> Result<()> {
    let model = load_model(ckpt)?;
    let cfg = &model.config;
    emit!("{}", cfg.to_kv());
    say!("param_count={}", model.param_count());
    let size = cfg.image_size;
    say!("superpixels={}", count_superpixels(cfg, size, size)?);
    say!("flops={:.0}", flops_estimate(cfg, size, size)?);
    if list {
        for (name, t) in model.params.iter() {
            say!("param {name} {:?}", t.shape());
        }
    }
    Ok(())
}
