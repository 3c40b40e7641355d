//! The five subcommands. Every file a command writes lands under its
//! output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use defunet::data::{read_png, resize_bilinear, resize_nearest, write_gray_png, write_rgb_png, Sample, Split};
use defunet::metrics::{dice_coef, MetricsReport, METRIC_COLUMNS};
use defunet::model::{load_checkpoint, save_checkpoint, Model};
use defunet::train::{evaluate, train, EpochRecord, TrainOutcome};
use defunet::Tensor;

use crate::config::RunConfig;
use crate::dataset::{prepare, Prepared};
use crate::gradcheck::{format_report, run_suite, CheckResult, SuiteOptions};
use crate::report::{self, Format, SUMMARY_FILE};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TEST_IMAGES_FILE: &str = "test_images.csv";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn metric_header(prefix: &str) -> impl Iterator<Item = String> + '_ {
    METRIC_COLUMNS.iter().map(move |c| format!("{prefix}_{c}"))
}

fn metric_cells(r: Option<&MetricsReport>) -> impl Iterator<Item = String> {
    let row = r.map(MetricsReport::table_row).unwrap_or([None; 7]);
    row.into_iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default())
}

/// Per-epoch log writer.
struct MetricsLog(csv::Writer<fs::File>);

impl MetricsLog {
    fn create(path: &Path) -> Result<Self, CliError> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<String> = ["epoch", "lr", "train_loss"]
            .into_iter()
            .map(String::from)
            .chain(metric_header("train"))
            .chain(metric_header("val"))
            .chain(["monitored".to_string(), "improved".to_string()])
            .collect();
        w.write_record(&header)?;
        w.flush()?;
        Ok(MetricsLog(w))
    }

    fn append(&mut self, r: &EpochRecord) -> Result<(), CliError> {
        let row: Vec<String> = [r.epoch.to_string(), r.lr.to_string(), r.train_loss.to_string()]
            .into_iter()
            .chain(metric_cells(Some(&r.train)))
            .chain(metric_cells(r.val.as_ref()))
            .chain([r.monitored.to_string(), r.improved.to_string()])
            .collect();
        self.0.write_record(&row)?;
        self.0.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub outcome: TrainOutcome,
    /// Mean test metrics of the best checkpoint, if there is a test split.
    pub test: Option<MetricsReport>,
}

/// Per-image evaluation of `samples`, written as one CSV row each plus a
/// summary. Returns the summary.
fn evaluate_to(
    model: &Model<f32>,
    samples: &[Sample],
    threshold: f64,
    pooled: bool,
    label: &str,
    images_csv: &Path,
    summary_csv: &Path,
) -> Result<MetricsReport, CliError> {
    let reports = evaluate(model, samples, threshold)?;
    let rows: Vec<(String, MetricsReport)> = samples
        .iter()
        .map(|s| s.id.clone())
        .zip(reports.iter().copied())
        .collect();
    report::write_per_image(images_csv, &rows)?;
    let summary = if pooled {
        let probs: Vec<Tensor<f32>> = samples
            .iter()
            .map(|s| model.predict(&s.image))
            .collect::<Result<_, _>>()?;
        let pairs: Vec<_> = samples.iter().zip(&probs).map(|(s, p)| (&s.mask, p)).collect();
        MetricsReport::pooled(&pairs, threshold)?
    } else {
        MetricsReport::mean(&reports).ok_or_else(|| CliError::Data(format!("the {label} split is empty")))?
    };
    report::write_summary(summary_csv, label, samples.len(), &summary)?;
    Ok(summary)
}

fn print_summary(label: &str, r: &MetricsReport, cross: bool) {
    let mut out = std::io::stdout().lock();
    let _ = report::print_report(&mut out, label, r);
    if cross {
        let _ = writeln!(out, "{label} Dice/F1: {:.4}/{:.4}", r.dice, r.f1);
    }
}

/// Trains a model as configured and evaluates the best checkpoint on the
/// test split.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts, CliError> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    let data = prepare(cfg)?;
    write_text(&out.join(MANIFEST_FILE), &data.manifest.to_text())?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    log::info!(
        "data: {} train, {} val, {} test at {}x{}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        cfg.data.size,
        cfg.data.size
    );

    let mut model = Model::<f32>::build(&cfg.model, cfg.seed)?;
    log::info!("{} model with {} parameters", cfg.model.arch, model.count_params());
    let mut log_file = MetricsLog::create(&out.join(METRICS_FILE))?;
    let best_path = out.join(BEST_CHECKPOINT);
    let last_path = out.join(LAST_CHECKPOINT);
    let mut sink_err: Option<CliError> = None;
    let outcome = train(
        &mut model,
        &data.train,
        &data.val,
        &cfg.train,
        &cfg.augment,
        cfg.seed,
        |rec, m, adam| {
            let mut step = || -> Result<(), CliError> {
                log_file.append(rec)?;
                save_checkpoint(m, Some(adam), rec.epoch as u64, &last_path)?;
                if rec.improved {
                    save_checkpoint(m, Some(adam), rec.epoch as u64, &best_path)?;
                }
                Ok(())
            };
            step().map_err(|e| {
                let msg = e.to_string();
                sink_err = Some(e);
                defunet::Error::Io(std::io::Error::other(msg))
            })
        },
    );
    let outcome = match (outcome, sink_err) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    log::info!("stopped after {} epochs: {:?}", outcome.history.len(), outcome.stop);

    let test = if data.test.is_empty() {
        None
    } else {
        let best = if best_path.is_file() {
            load_checkpoint::<f32>(&best_path)?.model
        } else {
            model
        };
        let r = evaluate_to(
            &best,
            &data.test,
            cfg.train.threshold,
            false,
            Split::Test.as_str(),
            &out.join(TEST_IMAGES_FILE),
            &out.join(SUMMARY_FILE),
        )?;
        print_summary("test", &r, cfg.data.cross.is_some());
        Some(r)
    };
    Ok(TrainArtifacts {
        out_dir: out,
        outcome,
        test,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub summary: MetricsReport,
    pub images_csv: PathBuf,
    pub summary_csv: PathBuf,
}

/// Evaluates a checkpoint on one split of the configured data.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split, pooled: bool) -> Result<EvalOutput, CliError> {
    let ckpt = load_checkpoint::<f32>(checkpoint)?;
    let mut cfg = cfg.clone();
    cfg.model = ckpt.model.config().clone();
    cfg.validate()?;
    let data: Prepared = prepare(&cfg)?;
    create_dir(&cfg.out_dir)?;
    let label = split.as_str();
    let images_csv = cfg.out_dir.join(format!("eval_{label}_images.csv"));
    let summary_csv = cfg.out_dir.join(format!("eval_{label}_summary.csv"));
    let summary = evaluate_to(
        &ckpt.model,
        data.split(split),
        cfg.train.threshold,
        pooled,
        label,
        &images_csv,
        &summary_csv,
    )?;
    print_summary(label, &summary, cfg.data.cross.is_some());
    Ok(EvalOutput {
        summary,
        images_csv,
        summary_csv,
    })
}

/// Pads a `(1, 1, H, W)` plane to `(ph, pw)` by repeating the last row
/// and column.
pub fn pad_edge(t: &Tensor<f32>, ph: usize, pw: usize) -> Tensor<f32> {
    let s = t.shape();
    Tensor::from_fn([1, 1, ph, pw], |_, _, h, w| t.at(0, 0, h.min(s.h - 1), w.min(s.w - 1)))
}

pub fn crop(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn([1, 1, h, w], |_, _, y, x| t.at(0, 0, y, x))
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Probabilities for an image of any size: optionally resampled to
/// `size × size`, padded to the model's divisor, then mapped back.
pub fn predict_image(model: &Model<f32>, image: &Tensor<f32>, size: Option<usize>) -> Result<Tensor<f32>, CliError> {
    let s = image.shape();
    let input = match size {
        Some(n) if (n, n) != (s.h, s.w) => resize_bilinear(image, n, n),
        _ => image.clone(),
    };
    let (h, w) = (input.shape().h, input.shape().w);
    let d = model.config().divisor();
    let (ph, pw) = (round_up(h, d), round_up(w, d));
    let probs = if (ph, pw) != (h, w) {
        log::info!("padding {h}x{w} to {ph}x{pw}");
        crop(&model.predict(&pad_edge(&input, ph, pw))?, h, w)
    } else {
        model.predict(&input)?
    };
    Ok(if (h, w) != (s.h, s.w) {
        resize_bilinear(&probs, s.h, s.w)
    } else {
        probs
    })
}

#[derive(Debug, Clone)]
pub struct PredictOutput {
    pub mask_png: PathBuf,
    pub overlay_png: Option<PathBuf>,
    /// Binary prediction in `{0, 1}`.
    pub prediction: Tensor<f32>,
    /// Dice against the ground truth, when one is given.
    pub dice: Option<f64>,
}

pub fn mask_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect()
}

/// Black background, ground truth grey, predicted pixels red.
pub fn overlay_bytes(gt: &Tensor<f32>, pred: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(gt.len() * 3);
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        let px = if p >= 0.5 {
            [255, 0, 0]
        } else if g >= 0.5 {
            [128, 128, 128]
        } else {
            [0, 0, 0]
        };
        out.extend_from_slice(&px);
    }
    out
}

fn binary(t: &Tensor<f32>) -> Vec<bool> {
    t.data().iter().map(|&v| v >= 0.5).collect()
}

/// Segments one image and writes `<stem>_mask.png` (and
/// `<stem>_overlay.png` when `gt` is given) into `out_dir`.
pub fn cmd_predict(
    checkpoint: &Path,
    image: &Path,
    gt: Option<&Path>,
    out_dir: &Path,
    size: Option<usize>,
    threshold: f64,
) -> Result<PredictOutput, CliError> {
    let model = load_checkpoint::<f32>(checkpoint)?.model;
    let x = read_png(image)?;
    let probs = predict_image(&model, &x, size)?;
    let prediction = probs.map(|p| if p as f64 >= threshold { 1.0 } else { 0.0 });
    let s = x.shape();
    create_dir(out_dir)?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let mask_png = out_dir.join(format!("{stem}_mask.png"));
    write_gray_png(&mask_png, s.w, s.h, &mask_bytes(&prediction))?;

    let (overlay_png, dice) = match gt {
        Some(path) => {
            let mut g = read_png(path)?;
            if g.shape() != s {
                log::warn!("ground truth {} resized to the image size {}", g.shape(), s);
                g = resize_nearest(&g, s.h, s.w);
            }
            let g = g.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            let overlay = out_dir.join(format!("{stem}_overlay.png"));
            write_rgb_png(&overlay, s.w, s.h, &overlay_bytes(&g, &prediction))?;
            let dice = dice_coef(&binary(&g), &binary(&prediction))?;
            println!("dice {dice:.4}");
            (Some(overlay), Some(dice))
        }
        None => (None, None),
    };
    Ok(PredictOutput {
        mask_png,
        overlay_png,
        prediction,
        dice,
    })
}

/// Runs the gradient suite, printing one line per check; fails with a
/// numeric error if any check exceeds its tolerance.
pub fn cmd_gradcheck(opts: SuiteOptions, out: &mut impl Write) -> Result<Vec<CheckResult>, CliError> {
    let results = run_suite(opts)?;
    out.write_all(format_report(&results).as_bytes())?;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

/// Collates the summaries of every run under `runs`.
pub fn cmd_report(runs: &Path, format: Format) -> Result<String, CliError> {
    let rows = report::collect(runs)?;
    report::render(&rows, format)
}
