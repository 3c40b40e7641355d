//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use defunet::autodiff::Tape;
use defunet::data::{read_png, synth_dataset, write_gray_png, AugmentConfig, Sample};
use defunet::metrics::{dice_coef, dice_loss, MetricsReport};
use defunet::model::{decode_checkpoint, encode_checkpoint, save_checkpoint, Model, ModelConfig};
use defunet::nn::Ctx;
use defunet::optim::{EarlyStopper, PlateauConfig, PlateauScheduler};
use defunet::tensor::{effective_extent, ConvSpec};
use defunet::train::{evaluate, train, StopReason, TrainConfig};
use defunet::Tensor;
use defunet_cli::commands::cmd_predict;
use defunet_cli::gradcheck::{run_suite, SuiteOptions};

const ORACLE_INSTANCES: usize = 120;
const OVERFIT_TARGET: f64 = 0.99;
const OVERFIT_MAX_EPOCHS: usize = 300;
const COMPARISON_SEEDS: [u64; 3] = [0, 1, 2];
const COMPARISON_FILTERS: usize = 8;
const COMPARISON_MAX_EPOCHS: usize = 12;
const COMPARISON_MARGIN: f64 = 0.01;
const ROUND_TRIP_TOLERANCE: f64 = 1e-9;

type Outcome = Result<String, String>;
type Trained = (Model<f32>, Vec<Sample>);

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    if elapsed <= limit {
        Ok(format!("{detail}, {:.1} s", elapsed.as_secs_f64()))
    } else {
        Err(format!(
            "{detail}, but took {:.1} s (limit {} s)",
            elapsed.as_secs_f64(),
            limit.as_secs()
        ))
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let results = run_suite(SuiteOptions::default()).map_err(|e| e.to_string())?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.2e}", r.name, r.max_rel_error))
        .collect();
    if !failed.is_empty() {
        return Err(format!("failed: {}", failed.join(", ")));
    }
    let worst = results
        .iter()
        .map(|r| r.max_rel_error / r.tolerance)
        .fold(0.0, f64::max);
    within(
        t.elapsed(),
        Duration::from_secs(300),
        format!("{} checks, worst error {worst:.1e} of tolerance", results.len()),
    )
}

fn oracles() -> Outcome {
    let t = Instant::now();
    let counts = [
        ("conv2d", oracle::check_conv_forward(ORACLE_INSTANCES)),
        ("conv2d backward", oracle::check_conv_backward(ORACLE_INSTANCES)),
        ("pooling", oracle::check_pooling(ORACLE_INSTANCES)),
        ("dilation", oracle::check_dilation(ORACLE_INSTANCES)),
        ("confusion", oracle::check_confusion(ORACLE_INSTANCES)),
        ("auc", oracle::check_auc(ORACLE_INSTANCES)),
    ];
    if let Some((name, n)) = counts.iter().find(|(_, n)| *n < 100) {
        return Err(format!("{name} compared on only {n} instances"));
    }
    let detail = counts
        .iter()
        .map(|(name, n)| format!("{name} {n}"))
        .collect::<Vec<_>>()
        .join(", ");
    within(t.elapsed(), Duration::from_secs(120), detail)
}

fn formulas() -> Outcome {
    let extents = (effective_extent(3, 3), effective_extent(3, 2));
    let footprints = (
        ConvSpec::new(1, 1, (3, 3)).dilation(3, 1).effective_kernel(),
        ConvSpec::new(1, 1, (3, 3)).dilation(1, 2).effective_kernel(),
    );
    if extents != (7, 5) || footprints != ((7, 3), (3, 5)) {
        return Err(format!("extents {extents:?}, footprints {footprints:?}"));
    }
    let mask = Tensor::<f64>::from_fn([1, 1, 16, 16], |_, _, h, w| ((h / 4 + w / 3) % 2) as f64);
    let loss = dice_loss(&mask, &mask).map_err(|e| e.to_string())?;
    if loss != -1.0 {
        return Err(format!("perfect prediction gives dice loss {loss}"));
    }

    let model = Model::<f64>::build(&ModelConfig::default().with_base_filters(2), 3).map_err(|e| e.to_string())?;
    let x = Tensor::from_fn([2, 1, 32, 32], |_, _, h, w| ((h * 13 + w * 7) % 23) as f64 / 22.0);
    let (_, trace) = model.fusion_trace(&x).map_err(|e| e.to_string())?;
    if trace[0].skip != trace[0].x {
        return Err("first skip is not the first encoder output".into());
    }
    for n in 1..trace.len() {
        let sum = trace[n]
            .x
            .zip_map(&trace[n].y, |a, b| a + b)
            .map_err(|e| e.to_string())?;
        let tape = Tape::no_grad();
        let mut ctx = Ctx::eval(&tape, &model.store);
        let prev = tape.constant((*trace[n - 1].skip).clone());
        let block = model.inception(n - 1).ok_or("missing inception block")?;
        let y = block.forward(&mut ctx, &prev).map_err(|e| e.to_string())?;
        if *trace[n].skip != sum || y.value() != &*trace[n].y {
            return Err(format!("fusion differs at level {}", n + 1));
        }
    }
    Ok(format!(
        "extents 7 and 5, dice loss -1, fusion exact over {} levels",
        trace.len()
    ))
}

fn overfit() -> (Outcome, Option<Trained>) {
    let t = Instant::now();
    let data = synth_dataset(8, 64, 0);
    let mut model = match Model::<f32>::build(&ModelConfig::default(), 0) {
        Ok(m) => m,
        Err(e) => return (Err(e.to_string()), None),
    };
    let cfg = TrainConfig {
        batch_size: 2,
        lr: 1e-3,
        max_epochs: OVERFIT_MAX_EPOCHS,
        augment: false,
        lr_patience: OVERFIT_MAX_EPOCHS,
        early_stop_patience: OVERFIT_MAX_EPOCHS,
        target_train_dice: Some(OVERFIT_TARGET),
        ..Default::default()
    };
    let run = train(
        &mut model,
        &data,
        &[],
        &cfg,
        &AugmentConfig::none(),
        0,
        |_, _, _| Ok(()),
    );
    let outcome = match run {
        Err(e) => Err(e.to_string()),
        Ok(out) => {
            let last = out.history.last().map(|r| r.train.dice).unwrap_or(0.0);
            let detail = format!("train dice {last:.4} after {} epochs", out.history.len());
            if out.stop == StopReason::TargetReached && last >= OVERFIT_TARGET {
                within(t.elapsed(), Duration::from_secs(1800), detail)
            } else {
                Err(detail)
            }
        }
    };
    (outcome, Some((model, data)))
}

fn test_dice(base: ModelConfig, seed: u64, data: &[Sample]) -> Result<f64, String> {
    let mut model =
        Model::<f32>::build(&base.with_base_filters(COMPARISON_FILTERS), seed).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: COMPARISON_MAX_EPOCHS,
        augment: false,
        ..Default::default()
    };
    let (train_set, rest) = data.split_at(150);
    let (val, test) = rest.split_at(25);
    train(
        &mut model,
        train_set,
        val,
        &cfg,
        &AugmentConfig::none(),
        seed,
        |_, _, _| Ok(()),
    )
    .map_err(|e| e.to_string())?;
    let reports = evaluate(&model, test, cfg.threshold).map_err(|e| e.to_string())?;
    Ok(MetricsReport::mean(&reports).ok_or("empty test split")?.dice)
}

fn comparison() -> Outcome {
    let t = Instant::now();
    let mut cells = Vec::new();
    let mut ok = true;
    for seed in COMPARISON_SEEDS {
        let data = synth_dataset(200, 64, seed);
        let defu = test_dice(ModelConfig::default(), seed, &data)?;
        let unet = test_dice(ModelConfig::unet(), seed, &data)?;
        ok &= defu >= unet - COMPARISON_MARGIN;
        cells.push(format!("seed {seed} {defu:.4} vs {unet:.4}"));
    }
    let detail = format!("defunet vs unet test dice: {}", cells.join("; "));
    if ok {
        within(t.elapsed(), Duration::from_secs(7200), detail)
    } else {
        Err(detail)
    }
}

fn protocol() -> Outcome {
    let mut s = PlateauScheduler::new(1e-5, PlateauConfig::default()).map_err(|e| e.to_string())?;
    let mut rates = vec![s.lr()];
    for _ in 0..13 {
        let lr = s.update(1.0);
        if lr != *rates.last().unwrap() {
            rates.push(lr);
        }
    }
    let expected = [1e-5, 2e-6, 4e-7];
    if rates.len() != 3 || rates.iter().zip(expected).any(|(a, b)| (a - b).abs() > 1e-18) {
        return Err(format!("learning rates {rates:?}"));
    }
    let patience = 5;
    let mut stopper = EarlyStopper::new(patience, 0.0);
    stopper.update(0.5);
    let stagnant = (1..=patience + 1).find(|_| stopper.update(0.5));
    if stagnant != Some(patience + 1) {
        return Err(format!("stopper halted after {stagnant:?} stagnant epochs"));
    }
    Ok(format!("rates {rates:?}, stop after {} stagnant epochs", patience + 1))
}

fn serialization(trained: Option<&Trained>) -> Outcome {
    let fallback;
    let (model, data) = match trained {
        Some((m, d)) => (m, d.as_slice()),
        None => {
            fallback = (
                Model::<f32>::build(&ModelConfig::default().with_base_filters(4), 0).map_err(|e| e.to_string())?,
                synth_dataset(1, 64, 0),
            );
            (&fallback.0, fallback.1.as_slice())
        }
    };
    let bytes = encode_checkpoint(model, None, 7);
    let back = decode_checkpoint::<f32>(&bytes).map_err(|e| e.to_string())?;
    let same = model
        .store
        .params()
        .iter()
        .zip(back.model.store.params())
        .all(|(a, b)| a.name == b.name && a.value == b.value)
        && encode_checkpoint(&back.model, None, 7) == bytes;
    if !same {
        return Err("checkpoint round trip changed the model".into());
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(model, None, 7, &ckpt).map_err(|e| e.to_string())?;
    let sample = &data[0];
    let (h, w) = (sample.image.shape().h, sample.image.shape().w);
    let to_bytes = |t: &Tensor<f32>| t.data().iter().map(|&v| (v * 255.0).round() as u8).collect::<Vec<u8>>();
    let image = dir.path().join("image.png");
    let gt = dir.path().join("gt.png");
    write_gray_png(&image, w, h, &to_bytes(&sample.image)).map_err(|e| e.to_string())?;
    write_gray_png(&gt, w, h, &to_bytes(&sample.mask)).map_err(|e| e.to_string())?;
    let p = cmd_predict(&ckpt, &image, Some(&gt), dir.path(), None, 0.5).map_err(|e| e.to_string())?;
    let dice = p.dice.ok_or("no dice reported")?;
    let saved = read_png(&p.mask_png).map_err(|e| e.to_string())?;
    let binary = |t: &Tensor<f32>| t.data().iter().map(|&v| v >= 0.5).collect::<Vec<bool>>();
    let reread = dice_coef(&binary(&sample.mask), &binary(&saved)).map_err(|e| e.to_string())?;
    if (dice - reread).abs() > ROUND_TRIP_TOLERANCE {
        return Err(format!("mask PNG dice {reread} vs {dice}"));
    }
    Ok(format!("checkpoint bit-exact, mask PNG dice {dice:.6} preserved"))
}

fn guarded<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|p| {
        p.downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())
    })
}

#[test]
fn acceptance() {
    let mut lines: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, outcome: Outcome| {
        let line = match &outcome {
            Ok(d) => format!("acceptance {name}: PASS ({d})"),
            Err(d) => format!("acceptance {name}: FAIL ({d})"),
        };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
        lines.push((name, outcome));
    };

    report("1 gradient suite", guarded(gradient_suite).and_then(|r| r));
    report("2 oracle equivalence", guarded(oracles).and_then(|r| r));
    report("3 formula checks", guarded(formulas).and_then(|r| r));
    let (outcome, trained) = guarded(overfit).unwrap_or_else(|e| (Err(e), None));
    report("4 overfit", outcome);
    report("5 reduced-scale comparison", guarded(comparison).and_then(|r| r));
    report("6 protocol", guarded(protocol).and_then(|r| r));
    report(
        "7 serialization",
        guarded(|| serialization(trained.as_ref())).and_then(|r| r),
    );

    let failed: Vec<&str> = lines.iter().filter(|(_, o)| o.is_err()).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
