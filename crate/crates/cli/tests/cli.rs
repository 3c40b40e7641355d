use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use defunet::autodiff::PRIMITIVES;
use defunet::data::{read_png, write_gray_png, Split};
use defunet::model::load_checkpoint;
use defunet::Tensor;
use defunet_cli::commands::{
    cmd_eval, cmd_gradcheck, cmd_predict, cmd_report, cmd_train, predict_image, BEST_CHECKPOINT, CONFIG_FILE,
    LAST_CHECKPOINT, MANIFEST_FILE, METRICS_FILE, TEST_IMAGES_FILE,
};
use defunet_cli::gradcheck::SuiteOptions;
use defunet_cli::report::{from_csv, Format, SUMMARY_FILE};
use defunet_cli::{CliError, RunConfig};

fn tiny_config(out: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        out_dir: out.to_path_buf(),
        ..Default::default()
    };
    cfg.model.base_filters = 2;
    cfg.data.synthetic = true;
    cfg.data.synthetic_count = 12;
    cfg.data.size = 32;
    cfg.data.split = [6, 3, 3];
    cfg.train.max_epochs = 3;
    cfg.train.lr = 1e-3;
    cfg.augment = defunet::data::AugmentConfig::none();
    cfg
}

struct Run {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    epochs: usize,
}

/// One small training run shared by the tests that only read it.
fn shared_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("run"), 1);
        let a = cmd_train(&cfg).unwrap();
        Run {
            _dir: dir,
            cfg,
            epochs: a.outcome.history.len(),
        }
    })
}

fn read_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn training_writes_every_artifact() {
    let run = shared_run();
    let out = &run.cfg.out_dir;
    for f in [
        MANIFEST_FILE,
        CONFIG_FILE,
        METRICS_FILE,
        BEST_CHECKPOINT,
        LAST_CHECKPOINT,
        TEST_IMAGES_FILE,
        SUMMARY_FILE,
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let (header, rows) = read_rows(&out.join(METRICS_FILE));
    assert_eq!(&header[..4], ["epoch", "lr", "train_loss", "train_dice"]);
    assert!(header.contains(&"val_auc".to_string()));
    assert_eq!(header.last().unwrap(), "improved");
    assert_eq!(rows.len(), run.epochs);
    let saved = RunConfig::load(&out.join(CONFIG_FILE)).unwrap();
    assert_eq!(saved, run.cfg);
    let last = load_checkpoint::<f32>(&out.join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(last.epoch, run.epochs as u64);
    assert!(last.optimizer.is_some());
    let (_, test_rows) = read_rows(&out.join(TEST_IMAGES_FILE));
    assert_eq!(test_rows.len(), 3);
}

#[test]
fn eval_summary_is_the_mean_of_the_per_image_rows() {
    let run = shared_run();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = run.cfg.clone();
    cfg.out_dir = dir.path().to_path_buf();
    let ckpt = run.cfg.out_dir.join(BEST_CHECKPOINT);
    let out = cmd_eval(&cfg, &ckpt, Split::Val, false).unwrap();
    let (header, rows) = read_rows(&out.images_csv);
    assert_eq!(rows.len(), 3);
    let (sheader, srows) = read_rows(&out.summary_csv);
    assert_eq!(&sheader[..2], ["split", "n"]);
    assert_eq!(&srows[0][..2], ["val", "3"]);
    for (i, name) in header.iter().enumerate().skip(1) {
        let cells: Vec<f64> = rows.iter().filter_map(|r| r[i].parse().ok()).collect();
        let j = sheader.iter().position(|h| h == name).unwrap();
        match srows[0][j].parse::<f64>() {
            Ok(s) => {
                let mean = cells.iter().sum::<f64>() / cells.len() as f64;
                assert!((s - mean).abs() < 1e-9, "{name}: {s} vs {mean}");
            }
            Err(_) => assert!(cells.is_empty(), "{name} summary empty but rows have values"),
        }
    }
    let pooled = cmd_eval(&cfg, &ckpt, Split::Val, true).unwrap();
    assert!((0.0..=1.0).contains(&pooled.summary.dice));
}

fn write_plane(path: &Path, t: &Tensor<f32>) {
    let s = t.shape();
    let bytes: Vec<u8> = t.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    write_gray_png(path, s.w, s.h, &bytes).unwrap();
}

fn radiograph(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn([1, 1, h, w], |_, _, y, x| ((y * 7 + x * 3) % 17) as f32 / 16.0)
}

#[test]
fn predicted_masks_are_binary_and_round_trip() {
    let run = shared_run();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("xray.png");
    write_plane(&img, &radiograph(32, 32));
    let ckpt = run.cfg.out_dir.join(BEST_CHECKPOINT);
    let out_dir = dir.path().join("pred");
    let p = cmd_predict(&ckpt, &img, None, &out_dir, None, 0.5).unwrap();
    assert!(p.overlay_png.is_none() && p.dice.is_none());
    let mask = read_png(&p.mask_png).unwrap();
    assert_eq!(mask.shape().dims(), [1, 1, 32, 32]);
    assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    let raw = std::fs::read(&p.mask_png).unwrap();
    let decoded = png::Decoder::new(std::io::Cursor::new(raw)).read_info().unwrap();
    assert_eq!(decoded.info().color_type, png::ColorType::Grayscale);

    // Scoring the prediction against its own saved mask is exact.
    let again = cmd_predict(&ckpt, &img, Some(&p.mask_png), &out_dir, None, 0.5).unwrap();
    assert!((again.dice.unwrap() - 1.0).abs() < 1e-9);
    let overlay = again.overlay_png.unwrap();
    let o = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&overlay).unwrap()))
        .read_info()
        .unwrap();
    assert_eq!((o.info().width, o.info().height), (32, 32));
    assert_eq!(o.info().color_type, png::ColorType::Rgb);
}

#[test]
fn odd_sized_images_are_padded_and_cropped_back() {
    let run = shared_run();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("odd.png");
    write_plane(&img, &radiograph(37, 29));
    let ckpt = run.cfg.out_dir.join(BEST_CHECKPOINT);
    let p = cmd_predict(&ckpt, &img, Some(&img), &dir.path().join("o"), None, 0.5).unwrap();
    assert_eq!(read_png(&p.mask_png).unwrap().shape().dims(), [1, 1, 37, 29]);
    let o = png::Decoder::new(std::io::BufReader::new(
        std::fs::File::open(p.overlay_png.unwrap()).unwrap(),
    ))
    .read_info()
    .unwrap();
    assert_eq!((o.info().width, o.info().height), (29, 37));

    let model = load_checkpoint::<f32>(&ckpt).unwrap().model;
    let resampled = predict_image(&model, &radiograph(37, 29), Some(48)).unwrap();
    assert_eq!(resampled.shape().dims(), [1, 1, 37, 29]);
    assert!(resampled.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

fn fake_summary(dir: &Path, header: &str, row: &str) {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join(SUMMARY_FILE), format!("{header}\n{row}\n")).unwrap();
}

#[test]
fn report_collates_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let h = "split,n,dice,dice_raw,ac,iou,precision,recall,f1,auc,dice_loss,threshold";
    fake_summary(
        &dir.path().join("unet"),
        h,
        "test,3,0.9,0.9,0.95,0.82,0.91,0.89,0.9,0.97,0.1,0.5",
    );
    fake_summary(
        &dir.path().join("defunet"),
        h,
        "test,3,0.93,0.93,0.96,0.87,0.92,0.94,0.93,0.98,0.07,0.5",
    );
    std::fs::create_dir_all(dir.path().join("not_a_run")).unwrap();

    let csv_text = cmd_report(dir.path(), Format::Csv).unwrap();
    let rows = from_csv(&csv_text).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].label, "defunet");
    assert_eq!(
        rows[0].values,
        [
            Some(0.93),
            Some(0.96),
            Some(0.87),
            Some(0.92),
            Some(0.94),
            Some(0.93),
            Some(0.98)
        ]
    );
    assert_eq!(csv_text.lines().next().unwrap().split(',').count(), 8);

    let md = cmd_report(dir.path(), Format::Markdown).unwrap();
    let lines: Vec<&str> = md.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].contains("Dice") && lines[0].contains("AUC"));
    assert!(lines[3].starts_with("| unet"));
}

#[test]
fn missing_metrics_leave_empty_cells() {
    let dir = tempfile::tempdir().unwrap();
    fake_summary(
        &dir.path().join("a"),
        "split,n,dice,ac,iou,precision,recall,f1",
        "test,1,0.5,0.5,0.5,0.5,0.5,0.5",
    );
    fake_summary(
        &dir.path().join("b"),
        "split,n,dice,ac,iou,precision,recall,f1,auc",
        "test,1,0.5,0.5,0.5,0.5,0.5,0.5,",
    );
    let text = cmd_report(dir.path(), Format::Csv).unwrap();
    for line in text.lines().skip(1) {
        assert!(line.ends_with(','), "{line}");
    }
    assert!(from_csv(&text).unwrap().iter().all(|r| r.values[6].is_none()));
    assert!(matches!(
        cmd_report(&dir.path().join("nothing"), Format::Csv),
        Err(CliError::Data(_))
    ));
}

#[test]
fn gradient_suite_covers_every_primitive() {
    let mut out = Vec::new();
    let results = cmd_gradcheck(SuiteOptions::default(), &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    for name in PRIMITIVES {
        assert_eq!(results.iter().filter(|r| r.name == *name).count(), 1, "{name}");
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} not printed");
    }
    assert!(results.iter().all(|r| r.passed()));
    assert!(results.iter().any(|r| r.name == "model_dice_f64"));

    let mut sink = Vec::new();
    match cmd_gradcheck(SuiteOptions { corrupt_conv: true }, &mut sink) {
        Err(CliError::Numeric(msg)) => assert!(msg.contains("conv2d"), "{msg}"),
        other => panic!("corrupted convolution passed: {other:?}"),
    }
}

fn defunet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_defunet"))
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.env("RUST_LOG", "error").output().unwrap().status.code().unwrap()
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    assert_eq!(
        exit_code(
            defunet()
                .args(["train", "--synthetic", "--size", "40"])
                .arg("--out")
                .arg(&out)
        ),
        1
    );
    assert_eq!(exit_code(defunet().args(["frobnicate"])), 1);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 1\n").unwrap();
    assert_eq!(exit_code(defunet().arg("train").arg("--config").arg(&cfg)), 1);

    let ckpt = dir.path().join("broken.ckpt");
    let good = std::fs::read(shared_run().cfg.out_dir.join(BEST_CHECKPOINT)).unwrap();
    std::fs::write(&ckpt, &good[..good.len() / 2]).unwrap();
    let img = dir.path().join("x.png");
    write_plane(&img, &radiograph(32, 32));
    let code = exit_code(
        defunet()
            .arg("predict")
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--image")
            .arg(&img)
            .arg("--out")
            .arg(&out),
    );
    assert_eq!(code, 2);
    assert_eq!(exit_code(defunet().arg("report").arg(dir.path().join("none"))), 2);
    assert_eq!(exit_code(defunet().args(["gradcheck", "--corrupt-conv"])), 3);
}

#[test]
fn the_binary_trains_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let cfg_path = dir.path().join("cfg.toml");
    let mut cfg = tiny_config(&runs.join("tiny"), 2);
    cfg.train.max_epochs = 1;
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let status = defunet()
        .env("RUST_LOG", "error")
        .arg("train")
        .arg("--config")
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let out = defunet()
        .arg("report")
        .arg(&runs)
        .args(["--format", "csv"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let rows = from_csv(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].label, "tiny");
}
