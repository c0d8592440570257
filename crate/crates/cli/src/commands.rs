//! Subcommand bodies.

use std::path::{Path, PathBuf};

use dilated_seg::data::{
    load_dataset, read_manifest, read_ppm, resize, split, synth_generate, write_manifest, write_pgm, Pnm, ResizeMode,
    SplitSpec,
};
use dilated_seg::explain::{bottleneck_heatmap, colormap, overlay, OVERLAY_ALPHA};
use dilated_seg::gradsuite;
use dilated_seg::metrics::{count_macs, count_params, emit_report, evaluate_dataset, measure_fps, Complexity, ReportFormat};
use dilated_seg::model::{load_weights, DilatedSegNet, Preset};
use dilated_seg::training::{train, Checkpoint};
use dilated_seg::{Error, Result, Shape, Tensor};

use crate::settings::{
    model_defaults, parse_size, synth_defaults, train_defaults, Settings, SYNTH_KEYS, TRAIN_KEYS,
};
use crate::{
    Command, EvalArgs, Failure, GradcheckArgs, HeatmapArgs, InferArgs, ModelFlags, ProfileArgs, SplitArgs, SynthArgs,
    TrainArgs, WeightsArgs,
};

pub(crate) fn run(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::SynthData(a) => synth_data(a)?,
        Command::Split(a) => split_cmd(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Infer(a) => infer_cmd(a)?,
        Command::Heatmap(a) => heatmap_cmd(a)?,
        Command::Profile(a) => profile_cmd(a)?,
        Command::Gradcheck(a) => return gradcheck_cmd(a),
    }
    Ok(())
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let s = Settings::resolve(
        synth_defaults(),
        a.config.as_deref(),
        SYNTH_KEYS,
        &[
            ("count", a.count.map(|v| v.to_string())),
            ("size", a.size),
            ("seed", a.seed.map(|v| v.to_string())),
        ],
    )?;
    let cfg = s.synth()?;
    let ids = synth_generate(&cfg, &a.out)?;
    s.write(&a.out)?;
    println!("wrote {} samples to {}", ids.len(), a.out.display());
    Ok(())
}

fn split_cmd(a: SplitArgs) -> Result<()> {
    let spec = match (&a.ratios, &a.preset) {
        (Some(r), _) => r.parse::<SplitSpec>()?,
        (None, Some(p)) => SplitSpec::preset(p)?,
        (None, None) => unreachable!("clap requires one of --ratios/--preset"),
    };
    let ids = read_manifest(&a.manifest)?;
    let parts = split(&ids, &spec, a.seed)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.manifest.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_manifest(&parts.train, out.join("train.txt"))?;
    write_manifest(&parts.val, out.join("val.txt"))?;
    write_manifest(&parts.test, out.join("test.txt"))?;
    println!(
        "train {} / val {} / test {} written to {}",
        parts.train.len(),
        parts.val.len(),
        parts.test.len(),
        out.display()
    );
    Ok(())
}

/// Preset named by the flag, else by the config file, else desk.
fn pick_preset(flag: Option<&str>, file: Option<&Path>) -> Result<Preset> {
    if let Some(p) = flag {
        return p.parse();
    }
    if let Some(path) = file {
        if let Some(p) = dilated_seg::config::KeyValues::read(path)?.get("preset") {
            return p.parse();
        }
    }
    Ok(Preset::Desk)
}

fn model_flags(m: &ModelFlags) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("preset", m.preset.clone()),
        ("size", m.size.clone()),
        ("use_dcp", m.no_dcp.then(|| "false".to_owned())),
        ("use_cbam", m.no_cbam.then(|| "false".to_owned())),
    ]
}

fn on_off(v: &str) -> Result<String> {
    match v {
        "on" | "true" => Ok("true".into()),
        "off" | "false" => Ok("false".into()),
        other => Err(Error::Config(format!("--augment expects on or off, got `{other}`"))),
    }
}

fn ids_or_split(data: &Path, s: &Settings) -> Result<(Vec<String>, Vec<String>)> {
    let (train_list, val_list) = (data.join("train.txt"), data.join("val.txt"));
    if train_list.exists() && val_list.exists() {
        return Ok((read_manifest(train_list)?, read_manifest(val_list)?));
    }
    let ids = read_manifest(data.join("manifest.txt"))?;
    let parts = split(&ids, &s.split()?, s.get("split_seed")?)?;
    Ok((parts.train, parts.val))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let preset = pick_preset(a.model.preset.as_deref(), a.config.as_deref())?;
    let mut flags = model_flags(&a.model);
    flags.extend([
        ("max_epochs", a.epochs.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("augment", a.augment.as_deref().map(on_off).transpose()?),
        ("split", a.split.clone()),
    ]);
    let s = Settings::resolve(train_defaults(preset), a.config.as_deref(), TRAIN_KEYS, &flags)?;
    let model_cfg = s.model()?;
    let train_cfg = s.train()?;
    s.split()?;
    s.write(&a.out)?;

    let (train_ids, val_ids) = ids_or_split(&a.data, &s)?;
    let size = model_cfg.input_size;
    let train_set = load_dataset(&a.data, Some(&train_ids), size)?;
    let val_set = load_dataset(&a.data, Some(&val_ids), size)?;
    let mut model = DilatedSegNet::new_initialized(model_cfg, train_cfg.seed)?;
    let ckpt = Checkpoint { dir: a.out.clone() };
    let history = train(&mut model, &train_set, &val_set, &train_cfg, Some(&ckpt))?;
    history.write_csv(a.out.join("history.csv"))?;
    if let Some(best) = history.best_record() {
        println!(
            "{} epochs; best epoch {} val_loss {:.4} val_dsc {:.4}; checkpoint {}",
            history.len(),
            best.epoch,
            best.val_loss,
            best.val_dsc,
            ckpt.weights_path().display()
        );
    }
    Ok(())
}

/// Builds the model described by `--config` (or `resolved.cfg` beside the
/// weights) and flags, then loads the weights.
fn load_model(a: &WeightsArgs) -> Result<DilatedSegNet> {
    let beside = a.weights.parent().map(|d| d.join("resolved.cfg"));
    let file = a.config.clone().or_else(|| beside.filter(|p| p.exists()));
    let preset = pick_preset(a.model.preset.as_deref(), file.as_deref())?;
    let s = Settings::resolve(model_defaults(preset), file.as_deref(), TRAIN_KEYS, &model_flags(&a.model))?;
    let mut model = DilatedSegNet::new(s.model()?)?;
    load_weights(&mut model.params, &a.weights)?;
    Ok(model)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.weights)?;
    let list = match &a.manifest {
        Some(m) if m.is_absolute() || m.exists() => m.clone(),
        Some(m) => a.data.join(m),
        None if a.data.join("test.txt").exists() => a.data.join("test.txt"),
        None => a.data.join("manifest.txt"),
    };
    let ids = read_manifest(&list)?;
    let pairs = load_dataset(&a.data, Some(&ids), model.config.input_size)?;
    let format = ReportFormat::from_path(&a.report)?;
    let mut report = evaluate_dataset(&model, &pairs, a.iou.parse()?)?;
    let (h, w) = model.config.input_size;
    report.complexity = Some(Complexity {
        params: count_params(&model),
        macs: count_macs(&model, Shape::new(1, model.config.in_channels, h, w))?.total,
        fps: None,
    });
    emit_report(&report, format, &a.report)?;
    let m = report.mean;
    println!(
        "{} images: dsc {:.4} miou {:.4} recall {:.4} precision {:.4} f2 {:.4}; report {}",
        report.rows.len(),
        m.dsc,
        m.iou,
        m.recall,
        m.precision,
        m.f2,
        a.report.display()
    );
    Ok(())
}

/// The image resized to the model's input size.
fn model_input(model: &DilatedSegNet, image: &Tensor) -> Result<Tensor> {
    let (h, w) = model.config.input_size;
    resize(image, h, w, ResizeMode::Bilinear)
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let model = load_model(&a.weights)?;
    let image = read_ppm(&a.image)?;
    let prob = model.predict(&model_input(&model, &image)?)?;
    let binary = prob.map(|v| if v >= dilated_seg::metrics::THRESHOLD { 1.0 } else { 0.0 });
    let s = image.shape();
    let mask = resize(&binary, s.h, s.w, ResizeMode::Nearest)?;
    write_pgm(&mask, &a.mask_out)?;
    let fg = mask.data().iter().filter(|&&v| v > 0.5).count();
    println!(
        "{}x{} mask, {:.2}% foreground, written to {}",
        s.w,
        s.h,
        100.0 * fg as f64 / mask.len() as f64,
        a.mask_out.display()
    );
    Ok(())
}

fn heatmap_cmd(a: HeatmapArgs) -> Result<()> {
    let model = load_model(&a.weights)?;
    let image = read_ppm(&a.image)?;
    let s = image.shape();
    let heat = bottleneck_heatmap(&model, &model_input(&model, &image)?)?;
    let heat = resize(&heat, s.h, s.w, ResizeMode::Bilinear)?;
    let heat_rgb = colormap(&heat);
    let over = overlay(&Pnm::from_tensor(&image), &heat_rgb, OVERLAY_ALPHA)?;
    let id = a
        .image
        .file_stem()
        .map_or_else(|| "image".to_owned(), |s| s.to_string_lossy().into_owned());
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let (hp, op) = (a.out_dir.join(format!("{id}_heat.ppm")), a.out_dir.join(format!("{id}_overlay.ppm")));
    heat_rgb.write(&hp)?;
    over.write(&op)?;
    println!("wrote {} and {}", hp.display(), op.display());
    Ok(())
}

fn profile_cmd(a: ProfileArgs) -> Result<()> {
    let preset = pick_preset(a.model.preset.as_deref(), None)?;
    let s = Settings::resolve(model_defaults(preset), None, TRAIN_KEYS, &model_flags(&a.model))?;
    let (h, w) = parse_size(&a.input)?;
    let cfg = s.model()?.with_input_size(h, w);
    cfg.validate()?;
    let model = DilatedSegNet::new_initialized(cfg, 42)?;
    let shape = Shape::new(1, model.config.in_channels, h, w);
    let params = count_params(&model);
    let macs = count_macs(&model, shape)?;
    println!("preset: {} ({})", preset, model.config.arm_label());
    println!("input: {h}x{w}");
    println!("params: {:.3} M ({params})", params as f64 / 1e6);
    println!("macs: {:.3} GMac ({})", macs.total as f64 / 1e9, macs.total);
    if !a.no_fps {
        let fps = measure_fps(&model, shape, a.runs, a.warmup, a.reps)?;
        let runs: Vec<String> = fps.runs.iter().map(|f| format!("{f:.2}")).collect();
        println!("fps: {:.2} (median of [{}], {} passes each)", fps.fps, runs.join(", "), a.runs);
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> std::result::Result<(), Failure> {
    let results = gradsuite::run_all(a.full)?;
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} suites passed", results.len());
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} of {} gradient suites failed: {}",
            failed.len(),
            results.len(),
            failed.join(", ")
        )))
    }
}
