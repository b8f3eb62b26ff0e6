use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use mmcd_core::changemap::{
    self, save_confusion_png, BinaryMap, DetectConfig, DifferenceWeights, KappaVariant, MetricsReport,
};
use mmcd_core::model::Direction;
use mmcd_core::raster::{compute_stats, load_raster, log_transform, normalize, save_png, save_raster, RasterImage};
use mmcd_core::synthgen::generate_pair;
use mmcd_core::trainer::{fit, infer_full, ImagePair, Trainer};

use crate::config::{require, set, set_some, RunConfig};
use crate::{DetectArgs, EvaluateArgs, PreprocessArgs, SynthArgs, TrainArgs};

fn out_dir(path: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = require(path, "--out")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn read(path: &Path) -> Result<RasterImage> {
    load_raster(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes a raster after checking every value is finite.
fn write(img: &RasterImage, path: &Path) -> Result<()> {
    if let Some(i) = img.values().iter().position(|v| !v.is_finite()) {
        bail!("{}: non-finite value at index {i}", path.display());
    }
    save_raster(img, path).with_context(|| format!("writing {}", path.display()))
}

fn write_with_preview(img: &RasterImage, dir: &Path, stem: &str) -> Result<()> {
    write(img, &dir.join(format!("{stem}.mmcd")))?;
    let png = dir.join(format!("{stem}.png"));
    save_png(img, &png, None).with_context(|| format!("writing {}", png.display()))
}

fn write_json(value: &impl serde::Serialize, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn synth(mut cfg: RunConfig, args: SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    set(&mut s.seed, args.seed);
    set(&mut s.height, args.size);
    set(&mut s.width, args.size);
    set(&mut s.height, args.height);
    set(&mut s.width, args.width);
    set(&mut s.num_classes, args.num_classes);
    set(&mut s.channels_x, args.channels_x);
    set(&mut s.channels_y, args.channels_y);
    set(&mut s.change_fraction, args.change_fraction);
    set(&mut s.noise_std_x, args.noise_std_x);
    set(&mut s.noise_std_y, args.noise_std_y);
    set(&mut s.smoothness, args.smoothness);
    set(&mut s.speckle_looks, args.speckle_looks);
    set_some(&mut cfg.paths.out, args.out);
    let dir = out_dir(&cfg.paths.out)?;

    let pair = generate_pair(&cfg.synth)?;
    write(&pair.x, &dir.join("x.mmcd"))?;
    write(&pair.y, &dir.join("y.mmcd"))?;
    write(&pair.gt.to_raster(), &dir.join("gt.mmcd"))?;
    let manifest = pair.manifest(&cfg.synth);
    write_json(&manifest, &dir.join("manifest.json"))?;
    info!(
        "wrote {}x{} pair to {} ({} changed pixels, attempt {})",
        cfg.synth.height,
        cfg.synth.width,
        dir.display(),
        manifest.changed_pixels,
        manifest.attempt
    );
    Ok(())
}

pub fn preprocess(args: PreprocessArgs) -> Result<()> {
    let mut img = read(&args.input)?;
    if args.log {
        img = log_transform(&img, args.epsilon)?;
    }
    if !args.no_normalize {
        img = normalize(&img, &compute_stats(&img))?;
    }
    write(&img, &args.output)
}

fn apply_train_flags(cfg: &mut RunConfig, args: &TrainArgs) {
    let t = &mut cfg.train;
    set(&mut t.epochs, args.epochs);
    set(&mut t.batches_per_epoch, args.batches_per_epoch);
    set(&mut t.batch_size, args.batch_size);
    set(&mut t.patch_size, args.patch_size);
    set(&mut t.affinity_crop, args.affinity_crop);
    set(&mut t.lr_base, args.lr);
    set(&mut t.lr_decay_main, args.lr_decay_main);
    set(&mut t.lr_decay_code, args.lr_decay_code);
    set(&mut t.lr_decay_every, args.lr_decay_every);
    set(&mut t.prior_update_epochs, args.prior_epochs.clone());
    set(&mut t.weights.lambda_r, args.lambda_r);
    set(&mut t.weights.lambda_c, args.lambda_c);
    set(&mut t.weights.lambda_t, args.lambda_t);
    set(&mut t.weights.lambda_z, args.lambda_z);
    set(&mut t.seed, args.seed);
    set(&mut t.hidden, args.hidden);
    set(&mut t.dropout, args.dropout);
    set(&mut t.leaky_slope, args.leaky_slope);
    if args.amsgrad {
        t.amsgrad = true;
    }
    set(&mut t.tile_size, args.tile_size);
    set(&mut t.tile_overlap, args.tile_overlap);
    set_some(&mut cfg.paths.x, args.x.clone());
    set_some(&mut cfg.paths.y, args.y.clone());
    set_some(&mut cfg.paths.out, args.out.clone());
}

pub fn train(mut cfg: RunConfig, args: TrainArgs) -> Result<()> {
    apply_train_flags(&mut cfg, &args);
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg.train)?);
        return Ok(());
    }
    cfg.train.validate()?;
    let x = read(&require(&cfg.paths.x, "--x")?)?;
    let y = read(&require(&cfg.paths.y, "--y")?)?;
    let dir = out_dir(&cfg.paths.out)?;
    let images = ImagePair::new(x, y)?;

    let result = fit(&images, cfg.train.clone(), Some(&dir))?;
    let trainer = result.trainer;
    for (epoch, prior) in &result.prior_updates {
        write(&prior.to_raster(), &dir.join(format!("prior-epoch-{epoch:04}.mmcd")))?;
    }
    trainer.save(dir.join("model.ckpt"))?;
    write_history(&trainer, &dir.join("history.jsonl"))?;
    write_with_preview(&trainer.prior.to_raster(), &dir, "prior")?;
    write_json(&cfg, &dir.join("run-config.json"))?;
    if let Some(last) = trainer.history.last() {
        info!("finished epoch {}: total loss {:.5}", last.epoch, last.total);
    } else {
        info!("no epochs requested; wrote the untrained model");
    }
    Ok(())
}

fn write_history(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    for rec in &trainer.history {
        if ![rec.l_r, rec.l_c, rec.l_t, rec.l_z, rec.total].iter().all(|v| v.is_finite()) {
            bail!("non-finite loss recorded at epoch {}", rec.epoch);
        }
        writeln!(file, "{}", serde_json::to_string(rec)?)?;
    }
    Ok(())
}

pub fn detect(mut cfg: RunConfig, args: DetectArgs) -> Result<()> {
    let d = &mut cfg.detect;
    set(&mut d.filter_sigma, args.filter_sigma);
    set(&mut d.bins, args.bins);
    if args.root {
        d.root = true;
    }
    set_some(&mut d.weight_x, args.weight_x);
    set_some(&mut d.weight_y, args.weight_y);
    set_some(&mut d.tile_size, args.tile_size);
    set_some(&mut d.tile_overlap, args.tile_overlap);
    set_some(&mut cfg.paths.x, args.x);
    set_some(&mut cfg.paths.y, args.y);
    set_some(&mut cfg.paths.checkpoint, args.checkpoint);
    set_some(&mut cfg.paths.out, args.out);

    let x = read(&require(&cfg.paths.x, "--x")?)?;
    let y = read(&require(&cfg.paths.y, "--y")?)?;
    let ckpt = require(&cfg.paths.checkpoint, "--checkpoint")?;
    let dir = out_dir(&cfg.paths.out)?;
    let trainer = Trainer::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let model = &trainer.model;
    if x.channels() != model.config.channels_x || y.channels() != model.config.channels_y {
        bail!(
            "checkpoint expects {}/{} channels, inputs have {}/{}",
            model.config.channels_x,
            model.config.channels_y,
            x.channels(),
            y.channels()
        );
    }
    let images = ImagePair::new(x, y)?;
    let d = &cfg.detect;
    let tile = d.tile_size.unwrap_or(trainer.config.tile_size);
    let overlap = d.tile_overlap.unwrap_or(trainer.config.tile_overlap);

    let run = |image: &RasterImage, direction: Direction| infer_full(model, image, direction, tile, overlap);
    let x_hat = run(&images.y, Direction::YToX)?;
    let y_hat = run(&images.x, Direction::XToY)?;
    for (img, stem) in [
        (&x_hat, "x_hat"),
        (&y_hat, "y_hat"),
        (&run(&images.x, Direction::ReconstructX)?, "x_tilde"),
        (&run(&images.y, Direction::ReconstructY)?, "y_tilde"),
        (&run(&images.x, Direction::EncodeX)?, "z_x"),
        (&run(&images.y, Direction::EncodeY)?, "z_y"),
    ] {
        write_with_preview(img, &dir, stem)?;
    }

    let defaults = DifferenceWeights::for_channels(images.x.channels(), images.y.channels());
    let weights = DifferenceWeights {
        w_x: d.weight_x.unwrap_or(defaults.w_x),
        w_y: d.weight_y.unwrap_or(defaults.w_y),
    };
    let delta = changemap::difference_image(&images.x, &x_hat, &images.y, &y_hat, weights, d.distance())?;
    let detect_cfg = DetectConfig {
        filter_sigma: d.filter_sigma,
        bins: d.bins,
        kappa_variant: d.kappa_variant,
    };
    let result = changemap::detect(delta, &detect_cfg, None)?;
    write_with_preview(&result.delta, &dir, "delta")?;
    write_with_preview(&result.delta_filtered, &dir, "delta_filtered")?;
    write_with_preview(&result.map.to_raster(), &dir, "map")?;
    write_json(
        &serde_json::json!({
            "threshold": result.threshold,
            "changed_fraction": result.map.changed_fraction(),
            "settings": d,
        }),
        &dir.join("detect.json"),
    )?;
    info!(
        "threshold {:.4}, {:.2}% of pixels flagged as changed",
        result.threshold,
        100.0 * result.map.changed_fraction()
    );
    Ok(())
}

fn read_binary(path: &Path) -> Result<BinaryMap> {
    BinaryMap::from_raster(&read(path)?).with_context(|| format!("{} is not a binary map", path.display()))
}

pub fn evaluate(mut cfg: RunConfig, args: EvaluateArgs) -> Result<()> {
    set_some(&mut cfg.paths.map, args.map);
    set_some(&mut cfg.paths.gt, args.gt);
    set_some(&mut cfg.paths.out, args.out);
    if args.kappa_standard {
        cfg.detect.kappa_variant = KappaVariant::Standard;
    }
    let map_path = require(&cfg.paths.map, "--map")?;
    let map = read_binary(&map_path)?;
    let gt = read_binary(&require(&cfg.paths.gt, "--gt")?)?;
    let score = changemap::score(&map, &gt, cfg.detect.kappa_variant)?;

    let detect_json = map_path.with_file_name("detect.json");
    let threshold = fs::read_to_string(&detect_json)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["threshold"].as_f64());
    let report = MetricsReport::new(&score, threshold);

    if cfg.paths.out.is_some() {
        let dir = out_dir(&cfg.paths.out)?;
        write_json(&report, &dir.join("metrics.json"))?;
        let png = dir.join("confusion.png");
        save_confusion_png(&map, &gt, &png).with_context(|| format!("writing {}", png.display()))?;
    }
    if args.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!("TP {}  TN {}  FP {}  FN {}", report.tp, report.tn, report.fp, report.fn_);
        println!("OA {:.6}", report.oa);
        println!("kappa {:.6}", report.kappa);
        if report.degenerate_kappa {
            println!("kappa is undefined for this confusion matrix (chance agreement 1); reported as 0");
        }
    }
    Ok(())
}
