//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use cmfd::attack::{attack_dataset, AttackSpec};
use cmfd::config::RunConfig;
use cmfd::data::{generate_samples, write_dataset, Dataset, LoadedSample, Split, StoredSample};
use cmfd::evaluation::{
    category_csv, correct_detection_count, detection_summary, distinguishment_summary,
    evaluate_dataset, export_maps, image_metrics_csv, predict_masks,
};
use cmfd::network::Model;
use cmfd::training::{
    ablation_csv, fit, load_checkpoint, run_ablation, run_depth_sweep, run_gamma_sweep,
    save_checkpoint, sweep_csv,
};
use cmfd::{Error, Result};

use crate::manifest::{dataset_files, resolve_out, RunManifest};
use crate::{
    AblateArgs, AttackArgs, EvalArgs, GenArgs, InferArgs, SweepArgs, SweepAxis, TrainArgs,
};

fn parse_fractions(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad split fraction '{p}'")))
        })
        .collect::<Result<_>>()?;
    let [a, b, c] = parts[..] else {
        return Err(Error::Config(format!(
            "expected three comma-separated split fractions, got '{text}'"
        )));
    };
    let sum = a + b + c;
    if (sum - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(Error::Config(format!(
            "split fractions must be nonnegative and sum to 1, got {text} (sum {sum})"
        )));
    }
    Ok([a, b, c])
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let fractions = parse_fractions(&args.split_fractions)?;
    let out = resolve_out(&args.out);
    let n_train = (args.n as f64 * fractions[0]).round() as usize;
    let n_val = (args.n as f64 * fractions[1]).round() as usize;
    if n_train + n_val > args.n {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} overflow n={}",
            args.n
        )));
    }
    let n_test = args.n - n_train - n_val;

    let samples = generate_samples(args.seed, args.n, args.size)?;
    let stored: Vec<StoredSample> = samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| StoredSample {
            id: i as u64,
            image: s.image,
            mask: s.tri_mask,
            attack_tag: "BASE".into(),
        })
        .collect();

    let manifest = RunManifest::start("gen", Some(args.seed), None);
    let mut files = Vec::new();
    for (split, range) in [
        (Split::Train, 0..n_train),
        (Split::Val, n_train..n_train + n_val),
        (Split::Test, n_train + n_val..args.n),
    ] {
        let root = out.join(split.to_string());
        write_dataset(&root, split, args.seed, &stored[range])?;
        // dataset_files re-opens the dataset, validating what was written
        files.extend(dataset_files(&out, &root)?);
    }
    manifest.finish(&out, &files)?;
    println!(
        "generated {} samples ({n_train} train / {n_val} val / {n_test} test) at {}",
        args.n,
        out.display()
    );
    Ok(())
}

pub fn cmd_attack(args: &AttackArgs) -> Result<()> {
    let spec: AttackSpec = args.spec.parse()?;
    let out = resolve_out(&args.out);
    let manifest = RunManifest::start("attack", Some(args.seed), None);
    let ds = Dataset::open(&args.input)?;
    attack_dataset(&ds, spec, &out, args.seed)?;
    let files = dataset_files(&out, &out)?;
    manifest.finish(&out, &files)?;
    println!("attacked {} images with {spec} at {}", ds.len(), out.display());
    Ok(())
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = RunConfig::parse(&text)?;
    for pair in overrides {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects key=value, got '{pair}'"))
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(data: &Path, split: Split) -> Result<Vec<LoadedSample>> {
    Dataset::open(&data.join(split.to_string()))?.load_all()
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    if args.resume.is_some() {
        return Err(Error::Config(
            "resuming an interrupted run is not supported; restart from scratch".into(),
        ));
    }
    let cfg = load_config(&args.config, &args.set)?;
    let out = resolve_out(&args.out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest = RunManifest::start("train", Some(cfg.train.seed), Some(cfg.to_text()));

    let train = load_split(&args.data, Split::Train)?;
    let val = load_split(&args.data, Split::Val)?;
    let outcome = fit(&cfg, &train, &val)?;

    save_checkpoint(&out.join("best.ckpt"), &outcome.best)?;
    load_checkpoint(&out.join("best.ckpt"))?; // validate the written artifact
    fs::write(out.join("loss.csv"), cmfd::training::loss_csv(&outcome.iters))
        .map_err(|e| Error::io(out.join("loss.csv"), e))?;
    let mut epochs = String::from("epoch,selection_score\n");
    for e in &outcome.epochs {
        epochs.push_str(&format!("{},{}\n", e.epoch, e.selection_score));
    }
    fs::write(out.join("epochs.csv"), epochs).map_err(|e| Error::io(out.join("epochs.csv"), e))?;
    fs::write(out.join("config.txt"), cfg.to_text())
        .map_err(|e| Error::io(out.join("config.txt"), e))?;

    manifest.finish(
        &out,
        &["best.ckpt", "loss.csv", "epochs.csv", "config.txt"]
            .iter()
            .map(PathBuf::from)
            .collect::<Vec<_>>(),
    )?;
    println!(
        "best epoch {} with validation score {:.6}; artifacts at {}",
        outcome.best.epoch,
        outcome.best.selection_score,
        out.display()
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let record = load_checkpoint(&args.checkpoint)?;
    let (model, _) = Model::new(record.config.net.clone())?;
    let dataset = Dataset::open(&args.data)?;
    let report_dir = resolve_out(&args.report);
    fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
    let manifest = RunManifest::start("eval", None, Some(record.config.to_text()));

    let metrics = evaluate_dataset(&model, &record.params, &dataset)?;
    let det = detection_summary(metrics.clone());
    let dist = distinguishment_summary(metrics.clone());

    let mut detection = String::from("precision,recall,f1\n");
    detection.push_str(&format!(
        "{},{},{}\n",
        det.mean.precision, det.mean.recall, det.mean.f1
    ));
    let mut disting = String::from("class,precision,recall,f1\n");
    for (class, s) in [
        ("source", dist.source),
        ("target", dist.target),
        ("pristine", dist.pristine),
    ] {
        disting.push_str(&format!("{},{},{},{}\n", class, s.precision, s.recall, s.f1));
    }
    let categories = category_csv(&correct_detection_count(&metrics, args.threshold));

    let mut files = Vec::new();
    for (name, text) in [
        ("detection.csv", detection),
        ("distinguishment.csv", disting),
        ("categories.csv", categories),
        ("per_image.csv", image_metrics_csv(&metrics)),
    ] {
        fs::write(report_dir.join(name), text)
            .map_err(|e| Error::io(report_dir.join(name), e))?;
        files.push(PathBuf::from(name));
    }
    if args.export_maps {
        let n = export_maps(&model, &record.params, &dataset, &report_dir.join("maps"))?;
        for e in &dataset.manifest.entries {
            files.push(PathBuf::from(format!("maps/{:06}_binary.png", e.id)));
            files.push(PathBuf::from(format!("maps/{:06}_tri.png", e.id)));
        }
        println!("exported {n} map files");
    }
    manifest.finish(&report_dir, &files)?;
    println!(
        "detection P/R/F1 = {:.4}/{:.4}/{:.4} over {} images; reports at {}",
        det.mean.precision,
        det.mean.recall,
        det.mean.f1,
        dataset.len(),
        report_dir.display()
    );
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.set)?;
    let out = resolve_out(&args.out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest = RunManifest::start("sweep", Some(cfg.train.seed), Some(cfg.to_text()));

    let train = load_split(&args.data, Split::Train)?;
    let val = load_split(&args.data, Split::Val)?;
    let test = load_split(&args.data, Split::Test)?;

    let (file, csv) = match args.axis {
        SweepAxis::Gamma => {
            let values: Vec<f64> = args
                .values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad gamma value '{v}'")))
                })
                .collect::<Result<_>>()?;
            if values.is_empty() {
                return Err(Error::Config("empty sweep values".into()));
            }
            let arms = run_gamma_sweep(&values, &cfg, &train, &val, &test)?;
            ("sweep_gamma.csv", sweep_csv("gamma", &arms))
        }
        SweepAxis::Depth => {
            let values: Vec<usize> = args
                .values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad depth value '{v}'")))
                })
                .collect::<Result<_>>()?;
            if values.is_empty() {
                return Err(Error::Config("empty sweep values".into()));
            }
            let arms = run_depth_sweep(&values, &cfg, &train, &val, &test)?;
            ("sweep_depth.csv", sweep_csv("depth", &arms))
        }
    };
    fs::write(out.join(file), csv).map_err(|e| Error::io(out.join(file), e))?;
    manifest.finish(&out, &[PathBuf::from(file)])?;
    println!("sweep report at {}", out.join(file).display());
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.set)?;
    let out = resolve_out(&args.out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest = RunManifest::start("ablate", Some(cfg.train.seed), Some(cfg.to_text()));

    let train = load_split(&args.data, Split::Train)?;
    let val = load_split(&args.data, Split::Val)?;
    let test = load_split(&args.data, Split::Test)?;
    let arms = run_ablation(&cfg, &train, &val, &test)?;
    fs::write(out.join("ablation.csv"), ablation_csv(&arms))
        .map_err(|e| Error::io(out.join("ablation.csv"), e))?;
    manifest.finish(&out, &[PathBuf::from("ablation.csv")])?;
    println!("ablation report at {}", out.join("ablation.csv").display());
    Ok(())
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let record = load_checkpoint(&args.checkpoint)?;
    let (model, _) = Model::new(record.config.net.clone())?;
    let side = record.config.net.input_size as u32;

    let img = image::open(&args.image)
        .map_err(|e| Error::image(&args.image, e))?
        .into_rgb8();
    let (w0, h0) = img.dimensions();
    // fixed-size network: bilinear down to the input side, nearest back up
    let resized = image::imageops::resize(&img, side, side, image::imageops::FilterType::Triangle);
    let pixels = Array3::from_shape_vec(
        (side as usize, side as usize, 3),
        resized.into_raw(),
    )
    .expect("raster buffer length matches dimensions");
    let (bin, tri) = predict_masks(&model, &record.params, &pixels)?;

    let out = resolve_out(&args.out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());

    let bin_small = image::GrayImage::from_fn(side, side, |x, y| {
        image::Luma([bin[(y as usize, x as usize)] * 255])
    });
    let tri_small = image::RgbImage::from_fn(side, side, |x, y| {
        match tri[(y as usize, x as usize)] {
            1 => image::Rgb([0, 255, 0]),
            2 => image::Rgb([255, 0, 0]),
            _ => image::Rgb([0, 0, 0]),
        }
    });
    let bin_full =
        image::imageops::resize(&bin_small, w0, h0, image::imageops::FilterType::Nearest);
    let tri_full =
        image::imageops::resize(&tri_small, w0, h0, image::imageops::FilterType::Nearest);

    let manifest = RunManifest::start("infer", None, Some(record.config.to_text()));
    let bin_name = format!("{stem}_binary.png");
    let tri_name = format!("{stem}_tri.png");
    bin_full
        .save_with_format(out.join(&bin_name), image::ImageFormat::Png)
        .map_err(|e| Error::image(out.join(&bin_name), e))?;
    tri_full
        .save_with_format(out.join(&tri_name), image::ImageFormat::Png)
        .map_err(|e| Error::image(out.join(&tri_name), e))?;
    manifest.finish(&out, &[PathBuf::from(&bin_name), PathBuf::from(&tri_name)])?;
    println!("maps written to {}", out.display());
    Ok(())
}
