use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use log::info;

use atmosconv::atf::{corrupt_images, Variant};
use atmosconv::classic::{
    checkerboard_scene, demo_response_analysis, dog_kernel, Illumination, SceneSpec, DEFAULT_SIGMA_INNER,
    DEFAULT_SIGMA_OUTER,
};
use atmosconv::data::{
    default_data_dir, load_source, synthetic_shapes, write_cifar_batch, write_png_dir, Dataset,
};
use atmosconv::net::{build_model, Model, ModelConfig};
use atmosconv::train::{
    contrast_binned_accuracy, evaluate, filter_error_analysis, flip_rate, gradcheck_model, guided_backprop_similarity,
    log_csv, low_shot_subsample, ratio_histogram, spearman, train_into, EvalReport, Response, TrainHyper,
};
use atmosconv::Tensor;

use crate::plot::{bar_chart, line_chart};
use crate::settings::Settings;
use crate::{Common, CorruptArgs, DemoArgs, DiagnoseArgs, EvalArgs, GradcheckArgs, TrainArgs};

/// Rel. error above which `gradcheck` fails.
const GRADCHECK_TOL: f64 = 1e-4;

/// 2 for usage, configuration and I/O problems, 3 for numeric failures.
pub fn exit_code_for(e: &anyhow::Error) -> ExitCode {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<atmosconv::Error>() {
            return match err {
                atmosconv::Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            };
        }
    }
    ExitCode::from(2)
}

/// Defaults, then an optional sibling snapshot, then the config file.
/// Flags are applied by the caller, followed by [`finish`].
fn layered(common: &Common, command: &str, defaults: &[(&str, &str)], sibling: Option<(&Path, &[&str])>) -> Result<Settings> {
    let mut s = Settings::with_defaults(defaults);
    if let Some((dir, skip)) = sibling {
        s.merge_sibling(dir, skip)?;
    }
    if let Some(path) = &common.config {
        s.merge_file(path)?;
    }
    s.set("command", command);
    s.set_opt("out", common.out.as_ref().map(|p| p.display()));
    s.set_opt("seed", common.seed);
    Ok(s)
}

/// Applies `--set` overrides, creates the output directory and writes the
/// resolved snapshot.
fn finish(mut s: Settings, common: &Common) -> Result<(Settings, PathBuf)> {
    s.apply_overrides(&common.overrides)?;
    let out = PathBuf::from(s.require("out")?);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    s.write_snapshot(&out)?;
    Ok((s, out))
}

fn write(path: PathBuf, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn default_train_source() -> String {
    match default_data_dir() {
        Some(_) => "cifar-train:".into(),
        None => "synthetic:5000:16:0".into(),
    }
}

pub fn corrupt(a: CorruptArgs) -> Result<ExitCode> {
    let mut s = layered(
        &a.common,
        "corrupt",
        &[("variant", "C"), ("severity", "1"), ("format", "raw"), ("seed", "0"), ("out", "runs/corrupt")],
        None,
    )?;
    s.set_opt("input", a.input);
    s.set_opt("variant", a.variant);
    s.set_opt("severity", a.severity);
    s.set_opt("format", a.format);
    let (s, out) = finish(s, &a.common)?;

    let variant: Variant = s.require("variant")?.parse()?;
    let severity: f64 = s.parse("severity")?;
    let seed: u64 = s.parse("seed")?;
    let format = s.require("format")?;
    if !["raw", "png", "cifar"].contains(&format) {
        bail!("unknown format '{format}' (expected raw, png or cifar)");
    }
    let set = load_source(s.require("input")?)?;
    let (images, manifest) = corrupt_images(&set.images, variant, seed, severity)?;
    let corrupted = set.with_images(images)?;
    match format {
        "raw" => corrupted.save_raw(out.join("corrupted.bin"))?,
        "png" => write_png_dir(&corrupted, out.join("corrupted"), None)?,
        _ => write_cifar_batch(&corrupted, out.join("corrupted.bin"))?,
    }
    write(out.join("manifest.json"), manifest.to_json()?)?;
    println!(
        "{} seed={seed} images={} severity={severity}: {}",
        variant.set_name(),
        set.len(),
        variant.describe(severity)
    );
    Ok(ExitCode::SUCCESS)
}

fn model_config(s: &Settings) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for (k, v) in s.iter() {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn train_hyper(s: &Settings) -> Result<TrainHyper> {
    let mut h = TrainHyper::default();
    for (k, v) in s.iter() {
        h.set(k, v)?;
    }
    h.validate()?;
    Ok(h)
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let source = default_train_source();
    let defaults = [
        ("data", source.as_str()),
        ("val_fraction", "0.1"),
        ("architecture", "tiny_cnn"),
        ("conv_mode", "vanilla"),
        ("norm_layer", "batch"),
        ("width", "16"),
        ("depth", "3"),
        ("epochs", "30"),
        ("lr", "0.05"),
        ("batch_size", "64"),
        ("momentum", "0.9"),
        ("weight_decay", "0.0005"),
        ("reg_strength", "0"),
        ("augment_fraction", "0"),
        ("low_shot_fraction", "1"),
        ("seed", "0"),
        ("out", "runs/train"),
    ];
    let sibling = a.paired_with.as_deref().map(|d| (d, &["out", "conv_mode", "command"][..]));
    let mut s = layered(&a.common, "train", &defaults, sibling)?;
    s.set_opt("data", a.data);
    s.set_opt("val", a.val);
    s.set_opt("architecture", a.architecture);
    s.set_opt("conv_mode", a.conv_mode);
    s.set_opt("norm_layer", a.norm_layer);
    s.set_opt("width", a.width);
    s.set_opt("depth", a.depth);
    s.set_opt("epochs", a.epochs);
    s.set_opt("lr", a.lr);
    s.set_opt("batch_size", a.batch_size);
    s.set_opt("low_shot_fraction", a.low_shot_fraction);
    s.set_opt("augment_fraction", a.augment_fraction);
    s.set_opt("reg_strength", a.reg_strength);
    s.apply_overrides(&a.common.overrides)?;
    // fill in values that default to other settings so the snapshot is complete
    if s.str("train_seed").is_none() {
        let seed = s.require("seed")?.to_string();
        s.set("train_seed", seed);
    }
    if s.str("schedule").is_none() {
        let epochs = s.require("epochs")?.to_string();
        s.set("schedule", format!("cosine:{epochs}"));
    }

    let data = load_source(s.require("data")?)?;
    let (mut train_set, val_set) = match s.str("val") {
        Some(spec) => (data, Some(load_source(spec)?)),
        None => {
            let frac: f64 = s.parse("val_fraction")?;
            let held = (frac * data.len() as f64).round() as usize;
            if held == 0 {
                (data, None)
            } else {
                let (t, v) = data.split_tail(held)?;
                (t, Some(v))
            }
        }
    };
    let fraction: f64 = s.parse("low_shot_fraction")?;
    if fraction < 1.0 {
        train_set = low_shot_subsample(&train_set, fraction, s.parse("train_seed")?)?;
    }
    s.set("classes", train_set.classes);
    s.set("in_channels", train_set.channels());
    let (s, out) = finish(s, &a.common)?;

    let cfg = model_config(&s)?;
    let hyper = train_hyper(&s)?;
    let mut model = build_model(&cfg)?;
    info!(
        "training {} ({} parameters) on {} images for {} epochs",
        cfg.architecture,
        model.num_params(),
        train_set.len(),
        hyper.epochs
    );
    let mut log = Vec::new();
    let result = train_into(&mut model, &train_set, val_set.as_ref(), &hyper, None, &mut log);
    write(out.join("train_log.csv"), log_csv(&log))?;
    if !log.is_empty() {
        let xs: Vec<f64> = log.iter().map(|r| r.epoch as f64).collect();
        let mut series = vec![
            ("train_loss", log.iter().map(|r| r.train_loss).collect()),
            ("train_acc", log.iter().map(|r| r.train_acc).collect()),
        ];
        if val_set.is_some() {
            series.push(("val_acc", log.iter().map(|r| r.val_acc.unwrap_or(f64::NAN)).collect()));
        }
        write(out.join("train_curve.svg"), line_chart("training", &xs, &series))?;
    }
    result?;
    model.save(out.join("model.ckpt"))?;
    let last = log.last().expect("at least one epoch");
    println!(
        "trained {} {} ({} params): train_loss={:.4} train_acc={:.4}{}",
        cfg.conv_mode,
        cfg.architecture,
        model.num_params(),
        last.train_loss,
        last.train_acc,
        last.val_acc.map(|v| format!(" val_acc={v:.4}")).unwrap_or_default()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_checkpoint(s: &Settings) -> Result<Model> {
    let path = s.str("checkpoint").ok_or_else(|| anyhow!("a checkpoint is required (--checkpoint)"))?;
    Ok(Model::load(path)?)
}

fn check_compatible(model: &Model, set: &Dataset, name: &str) -> Result<()> {
    let cfg = model.config();
    if set.classes != cfg.classes || set.channels() != cfg.in_channels {
        return Err(atmosconv::Error::Config(format!(
            "set {name} has {} classes and {} channels but the checkpoint expects {} and {}",
            set.classes,
            set.channels(),
            cfg.classes,
            cfg.in_channels
        ))
        .into());
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let mut s = layered(&a.common, "eval", &[("severity", "1"), ("seed", "0"), ("out", "runs/eval")], None)?;
    s.set_opt("checkpoint", a.checkpoint.as_ref().map(|p| p.display()));
    s.set_opt("benchmark", a.benchmark);
    s.set_opt("severity", a.severity);
    s.set_opt("flip_variant", a.flip_variant);
    if a.contrast_bins {
        s.set("contrast_bins", true);
    }
    for spec in &a.sets {
        let (name, path) = spec.split_once('=').ok_or_else(|| anyhow!("--eval-set expects NAME=SPEC, got '{spec}'"))?;
        s.set(&format!("eval_set.{name}"), path);
    }
    let (s, out) = finish(s, &a.common)?;
    let model = load_checkpoint(&s)?;
    let seed: u64 = s.parse("seed")?;
    let severity: f64 = s.parse("severity")?;

    let mut sets: Vec<(String, Dataset)> = Vec::new();
    if let Some(spec) = s.str("benchmark") {
        let clean = load_source(spec)?;
        check_compatible(&model, &clean, "D")?;
        for v in Variant::ALL {
            let (images, manifest) = corrupt_images(&clean.images, v, seed, severity)?;
            write(out.join(format!("manifest_{}.json", v.set_name())), manifest.to_json()?)?;
            sets.push((v.set_name().to_string(), clean.with_images(images)?));
        }
        sets.insert(0, ("D".into(), clean));
    }
    for (k, v) in s.iter() {
        if let Some(name) = k.strip_prefix("eval_set.") {
            let set = load_source(v)?;
            check_compatible(&model, &set, name)?;
            sets.push((name.to_string(), set));
        }
    }
    if sets.is_empty() {
        bail!("nothing to evaluate: pass --benchmark or --eval-set");
    }

    let mut report = EvalReport::default();
    for (name, set) in &sets {
        let started = Instant::now();
        let acc = evaluate(&model, set)?;
        let ms = started.elapsed().as_secs_f64() * 1e3 / set.len() as f64;
        report.accuracies.insert(name.clone(), acc);
        report.metadata.insert(format!("ms_per_image.{name}"), ms.into());
    }
    if s.str("contrast_bins").is_some() {
        report.contrast_bins = Some(contrast_binned_accuracy(&model, &sets[0].1, 9)?);
    }
    if let Some(v) = s.str("flip_variant") {
        let v: Variant = v.parse()?;
        let clean = sets
            .iter()
            .find(|(n, _)| n == "D")
            .ok_or_else(|| anyhow!("flip rate needs --benchmark"))?;
        let corrupted = sets.iter().find(|(n, _)| n == v.set_name()).expect("benchmark variants present");
        report.flip_rate = Some(flip_rate(&model, &clean.1, &corrupted.1)?);
    }
    for (k, v) in s.iter() {
        report.metadata.insert(format!("setting.{k}"), v.clone().into());
    }
    for (k, v) in model.config().to_map() {
        report.metadata.insert(format!("model.{k}"), v.into());
    }
    write(out.join("report.json"), report.to_json()?)?;

    let names: Vec<&String> = report.accuracies.keys().collect();
    let mut order: Vec<&String> = ["D", "D_C", "D_L", "D_B", "D_S"]
        .iter()
        .filter_map(|n| names.iter().find(|m| m.as_str() == *n).copied())
        .collect();
    let rest: Vec<&String> = names.iter().filter(|n| !order.contains(n)).copied().collect();
    order.extend(rest);
    let header: Vec<&str> = order.iter().map(|n| n.as_str()).collect();
    let row: Vec<String> = order.iter().map(|n| format!("{:.4}", report.accuracies[*n])).collect();
    let model_name = format!("{}_{}", model.config().architecture, model.config().conv_mode);
    write(
        out.join("accuracy_table.csv"),
        format!("model,{}\n{model_name},{}\n", header.join(","), row.join(",")),
    )?;
    println!("{model_name}: {}", header.iter().zip(&row).map(|(h, r)| format!("{h}={r}")).collect::<Vec<_>>().join(" "));
    if let Some(fr) = report.flip_rate {
        println!("flip rate: {fr:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn demo_checker(a: DemoArgs) -> Result<ExitCode> {
    let mut s = layered(
        &a.common,
        "demo-checker",
        &[("tiles", "6"), ("tile_px", "16"), ("ramp", "0.5"), ("offset", "0.3"), ("kernel_size", "11"), ("out", "runs/demo")],
        None,
    )?;
    s.set_opt("tiles", a.tiles);
    s.set_opt("tile_px", a.tile_px);
    s.set_opt("ramp", a.ramp);
    s.set_opt("offset", a.offset);
    s.set_opt("kernel_size", a.kernel_size);
    let (s, out) = finish(s, &a.common)?;
    let (tiles, tile_px): (usize, usize) = (s.parse("tiles")?, s.parse("tile_px")?);
    let (ramp, offset, size): (f64, f64, usize) = (s.parse("ramp")?, s.parse("offset")?, s.parse("kernel_size")?);

    let uniform = SceneSpec {
        tiles,
        tile_px,
        illumination: Illumination::Uniform,
    };
    let ramped = SceneSpec {
        illumination: Illumination::LinearRamp {
            lo: 1.0 - ramp,
            hi: 1.0 + ramp,
            angle: 0.0,
        },
        ..uniform
    };
    let scenes = [("uniform", checkerboard_scene(&uniform)?), ("ramp", checkerboard_scene(&ramped)?)];
    let filters = [
        ("normalized", dog_kernel(DEFAULT_SIGMA_INNER, DEFAULT_SIGMA_OUTER, size, true)?),
        ("unnormalized", dog_kernel(DEFAULT_SIGMA_INNER, DEFAULT_SIGMA_OUTER, size, false)?),
    ];
    let mut regions = String::from("filter,illumination,flat_bias,edge_mag,bias_ratio\n");
    let mut profiles: Vec<(String, Vec<f64>)> = Vec::new();
    let mut ratios = Vec::new();
    for (fname, kernel) in &filters {
        for (iname, image) in &scenes {
            let r = demo_response_analysis(image, kernel, tile_px)?;
            regions.push_str(&format!("{fname},{iname},{},{},{}\n", r.flat_bias, r.edge_mag, r.bias_ratio()));
            ratios.push((format!("{fname}/{iname}"), r.bias_ratio()));
            profiles.push((format!("{fname}_{iname}"), r.profile));
        }
    }
    // constant-offset stability of each filter
    let base = &scenes[0].1;
    let shifted = base.map(|v| v + offset);
    let mut stability = String::from("filter,offset,max_abs_change\n");
    for (fname, kernel) in &filters {
        let a = demo_response_analysis(base, kernel, tile_px)?;
        let b = demo_response_analysis(&shifted, kernel, tile_px)?;
        let change = interior_change(&a.response, &b.response, size);
        stability.push_str(&format!("{fname},{offset},{change}\n"));
        println!("{fname}: max response change under offset {offset}: {change:.3e}");
    }
    write(out.join("regions.csv"), regions)?;
    write(out.join("offset_stability.csv"), stability)?;
    let width = profiles[0].1.len();
    let mut csv = format!("x,{}\n", profiles.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(","));
    for x in 0..width {
        let vals: Vec<String> = profiles.iter().map(|(_, p)| p[x].to_string()).collect();
        csv.push_str(&format!("{x},{}\n", vals.join(",")));
    }
    write(out.join("profiles.csv"), csv)?;
    let xs: Vec<f64> = (0..width).map(|x| x as f64).collect();
    let series: Vec<(&str, Vec<f64>)> = profiles.iter().map(|(n, p)| (n.as_str(), p.clone())).collect();
    write(out.join("profiles.svg"), line_chart("center-row response", &xs, &series))?;
    for (name, r) in ratios {
        println!("{name}: flat_bias/edge_mag = {r:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

/// Largest absolute difference between two responses away from the zero-padded border.
fn interior_change(a: &Tensor, b: &Tensor, size: usize) -> f64 {
    let (h, w) = (a.shape()[2], a.shape()[3]);
    let m = size / 2;
    let mut worst: f64 = 0.0;
    for y in m..h - m {
        for x in m..w - m {
            worst = worst.max((a.data()[y * w + x] - b.data()[y * w + x]).abs());
        }
    }
    worst
}

pub fn diagnose(a: DiagnoseArgs) -> Result<ExitCode> {
    let mut s = layered(
        &a.common,
        "diagnose",
        &[
            ("data", "synthetic:1000:16:7"),
            ("variant", "C"),
            ("severity", "1"),
            ("top_k", "100"),
            ("response", "mean"),
            ("layer", "0"),
            ("images", "8"),
            ("seed", "0"),
            ("out", "runs/diagnose"),
        ],
        None,
    )?;
    s.set_opt("checkpoint", a.checkpoint.as_ref().map(|p| p.display()));
    s.set_opt("data", a.data);
    s.set_opt("top_k", a.top_k);
    s.set_opt("response", a.response);
    s.set_opt("layer", a.layer);
    s.set_opt("images", a.images);
    let (s, out) = finish(s, &a.common)?;
    let model = load_checkpoint(&s)?;
    let mut set = load_source(s.require("data")?)?;
    check_compatible(&model, &set, "data")?;
    if s.require("variant")? != "none" {
        let v: Variant = s.require("variant")?.parse()?;
        let (images, manifest) = corrupt_images(&set.images, v, s.parse("seed")?, s.parse("severity")?)?;
        write(out.join("manifest.json"), manifest.to_json()?)?;
        set = set.with_images(images)?;
    }

    let hist = ratio_histogram(&model)?;
    write(out.join("ratio_histogram.csv"), hist.to_csv())?;
    let labels: Vec<String> = hist.edges.windows(2).map(|e| format!("{:.2}", e[0])).collect();
    let counts: Vec<f64> = hist.counts.iter().map(|&c| c as f64).collect();
    write(out.join("ratio_histogram.svg"), bar_chart("|r(w)| over all filters", &labels, &counts))?;
    println!(
        "|r| histogram: {} of {} filters in [0, 0.05)",
        hist.counts[0],
        hist.total()
    );

    let response = match s.require("response")? {
        "mean" => Response::MeanAbs,
        "max" => Response::Max,
        other => bail!("unknown response '{other}' (expected mean or max)"),
    };
    let rows = filter_error_analysis(&model, &set, s.parse("top_k")?, response)?;
    let mut csv = String::from("filter,abs_ratio,misclassified\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.filter, r.abs_ratio, r.misclassified));
    }
    write(out.join("filter_errors.csv"), csv)?;
    let xs: Vec<f64> = rows.iter().map(|r| r.abs_ratio).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.misclassified).collect();
    match spearman(&xs, &ys) {
        Some(rho) => println!("spearman(|r|, misclassified) = {rho:.4}"),
        None => println!("spearman(|r|, misclassified) undefined (constant column)"),
    }

    let n = s.parse::<usize>("images")?.min(set.len());
    let idx: Vec<usize> = (0..n).collect();
    let sim = guided_backprop_similarity(&model, s.parse("layer")?, &set.images.select_outer(&idx)?)?;
    let mut csv = String::from("bin_lo,bin_hi,count\n");
    for (b, c) in sim.counts.iter().enumerate() {
        csv.push_str(&format!("{},{},{c}\n", sim.edges[b], sim.edges[b + 1]));
    }
    write(out.join("similarity.csv"), csv)?;
    let matrix: String = sim
        .matrix
        .iter()
        .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    write(out.join("similarity_matrix.csv"), matrix)?;
    let labels: Vec<String> = sim.edges.windows(2).map(|e| format!("{:.1}", e[0])).collect();
    let counts: Vec<f64> = sim.counts.iter().map(|&c| c as f64).collect();
    write(out.join("similarity.svg"), bar_chart("guided-backprop correlation", &labels, &counts))?;
    println!("guided-backprop similarity: mean off-diagonal correlation {:.4} ({} flagged pairs)", sim.mean, sim.flagged);
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut s = layered(
        &a.common,
        "gradcheck",
        &[
            ("architecture", "tiny_cnn"),
            ("conv_mode", "normalized"),
            ("norm_layer", "batch"),
            ("width", "4"),
            ("depth", "3"),
            ("probes", "20"),
            ("step", "1e-5"),
            ("batch", "4"),
            ("side", "8"),
            ("reg_strength", "0"),
            ("seed", "0"),
            ("out", "runs/gradcheck"),
        ],
        None,
    )?;
    s.set_opt("checkpoint", a.checkpoint.as_ref().map(|p| p.display()));
    s.set_opt("architecture", a.architecture);
    s.set_opt("conv_mode", a.conv_mode);
    s.set_opt("norm_layer", a.norm_layer);
    s.set_opt("probes", a.probes);
    s.set_opt("reg_strength", a.reg_strength);
    let (s, out) = finish(s, &a.common)?;
    let seed: u64 = s.parse("seed")?;
    let model = match s.str("checkpoint") {
        Some(_) => load_checkpoint(&s)?,
        None => build_model(&model_config(&s)?)?,
    };
    let cfg = model.config();
    let side = s.parse("side")?;
    let mut batch = synthetic_shapes(s.parse("batch")?, side, seed)?;
    if cfg.in_channels != batch.channels() || cfg.classes != batch.classes {
        // reshape the probe batch to whatever the model consumes
        let n = batch.len();
        let mut rng = atmosconv::rng::Rng::new(seed);
        let numel = n * cfg.in_channels * side * side;
        let images = Tensor::new(vec![n, cfg.in_channels, side, side], (0..numel).map(|_| rng.uniform()).collect())?;
        batch = Dataset::new(images, (0..n).map(|i| i % cfg.classes).collect(), cfg.classes)?;
    }
    let checks = gradcheck_model(&model, &batch, s.parse("probes")?, s.parse("step")?, s.parse("reg_strength")?, seed)?;
    let mut csv = String::from("param,probes,max_rel_error\n");
    let mut failed = Vec::new();
    for c in &checks {
        csv.push_str(&format!("{},{},{}\n", c.name, c.probes, c.max_rel_error));
        println!("{:<20} {:.3e}", c.name, c.max_rel_error);
        if !(c.max_rel_error <= GRADCHECK_TOL) {
            failed.push(c.name.clone());
        }
    }
    write(out.join("gradcheck.csv"), csv)?;
    if failed.is_empty() {
        println!("gradcheck passed: all {} parameter tensors within {GRADCHECK_TOL:e}", checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradcheck failed for: {}", failed.join(", "));
        Ok(ExitCode::from(3))
    }
}
