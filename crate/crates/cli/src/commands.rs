use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use log::info;
use naf::attention::AttnConfig;
use naf::bench::{bench_throughput, compare_with_dense};
use naf::encoder::{init_encoder, param_count};
use naf::filters::{gaussian_filter, jbf, jbu, BilateralConfig};
use naf::flops::flops_estimate;
use naf::image_io::{load_png, save_png};
use naf::model::{ModelConfig, NafModel};
use naf::npy::{load_npy, save_npy};
use naf::resample::{resize, ResizeMode};
use naf::restoration::{
    corrupt, denoise, evaluate_denoiser, psnr, ssim, train_denoiser, NoiseSpec, DENOISE_KERNEL,
};
use naf::rope::RopeConfig;
use naf::spectral::{export_attention_map, mean_trig_maps};
use naf::training::{
    evaluate, train, DirectorySource, ImageSource, Stage, SyntheticImages, SyntheticTeacher, TrainConfig,
};
use naf::Tensor3;
use serde_json::json;

use crate::args::*;
use crate::manifest::{manifest_path_for, manifest_path_in, RunManifest};
use crate::{usage, CliError, CliResult};

pub fn dispatch(cmd: Command, argv: Vec<String>) -> CliResult<()> {
    match cmd {
        Command::Upsample(a) => upsample(a, &argv),
        Command::Train(a) => train_cmd(a, &argv),
        Command::Denoise(DenoiseCommand::Train(a)) => denoise_train(a, &argv),
        Command::Denoise(DenoiseCommand::Apply(a)) => denoise_apply(a, &argv),
        Command::Analyze(a) => analyze(a, &argv),
        Command::Filter(a) => filter(a, &argv),
        Command::Flops(a) => flops(a),
        Command::Bench(a) => bench(a, &argv),
        Command::Replay { manifest } => {
            let m = RunManifest::read(&manifest)?;
            if m.args.first().is_some_and(|a| a == "replay") {
                return usage("a replay manifest cannot replay itself");
            }
            info!("replaying {} {:?}", m.command, m.args);
            crate::run_args(m.args)
        }
    }
}

fn at<T>(path: &Path, r: naf::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        naf::NafError::Io(io) => CliError::Run(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn read_npy(path: &Path) -> CliResult<Tensor3> {
    at(path, load_npy(path))
}

fn read_png(path: &Path) -> CliResult<Tensor3> {
    at(path, load_png(path))
}

fn read_model(path: &Path) -> CliResult<NafModel> {
    at(path, NafModel::load(path))
}

fn apply_overrides(cfg: &mut ModelConfig, o: &AttnOverrides) {
    if let Some(k) = o.kernel {
        cfg.kernel = k;
    }
    if let Some(p) = o.pos {
        cfg.positional = p;
    }
    if let Some(k) = o.keys {
        cfg.keys = k;
    }
}

fn parse_pair<T: std::str::FromStr>(text: &str, what: &str) -> CliResult<(T, T)> {
    let body = text.trim().trim_start_matches("p=");
    let parts: Vec<&str> = body.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => match (a.parse(), b.parse()) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            _ => usage(format!("cannot parse {what} {text:?}")),
        },
        _ => usage(format!("{what} must be two comma-separated values, got {text:?}")),
    }
}

fn upsample(a: UpsampleArgs, argv: &[String]) -> CliResult<()> {
    let mut model = read_model(&a.weights)?;
    apply_overrides(&mut model.config, &a.attn);
    let feats = read_npy(&a.features)?;
    let img = read_png(&a.image)?;
    let (h, w) = (feats.height(), feats.width());
    let (ih, iw) = (img.height(), img.width());
    let scale = if a.scale == "auto" {
        (ih / h).min(iw / w)
    } else {
        a.scale
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("--scale must be `auto` or an integer, got {:?}", a.scale)))?
    };
    if scale == 0 {
        return usage(format!("image {ih}x{iw} is smaller than the {h}x{w} feature grid"));
    }
    let mut steps = Vec::new();
    let out = if (ih, iw) == (h * scale, w * scale) {
        steps.push(format!("naf x{scale}: {h}x{w} -> {ih}x{iw}"));
        model.upsample(&feats, &img, scale)?
    } else {
        let (th, tw) = (h * scale, w * scale);
        let guide = resize(&img, th, tw, ResizeMode::Bilinear)?;
        steps.push(format!("bilinear guidance resize: {ih}x{iw} -> {th}x{tw}"));
        let up = model.upsample(&feats, &guide, scale)?;
        steps.push(format!("naf x{scale}: {h}x{w} -> {th}x{tw}"));
        steps.push(format!("bilinear output resize: {th}x{tw} -> {ih}x{iw}"));
        resize(&up, ih, iw, ResizeMode::Bilinear)?
    };
    save_npy(&out, &a.out)?;
    let mut m = RunManifest::new("upsample", argv, json!({ "model": model.config, "sigma": model.sigma, "scale": scale }))?
        .input("features", &a.features)
        .input("image", &a.image)
        .input("weights", &a.weights)
        .output("features", &a.out);
    m.steps = steps;
    m.write(&manifest_path_for(&a.out))?;
    println!("wrote {}x{}x{} features to {}", out.height(), out.width(), out.channels(), a.out.display());
    Ok(())
}

fn base_config(path: Option<&Path>, default: TrainConfig) -> CliResult<TrainConfig> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(default),
    }
}

fn apply_model_args(cfg: &mut ModelConfig, m: &ModelArgs) {
    if let Some(c) = m.channels {
        cfg.channels = c;
    }
    if let Some(d) = m.depth {
        cfg.depth = d;
    }
    apply_overrides(cfg, &m.attn);
}

fn image_source(dir: Option<&Path>, seed: u64) -> CliResult<Box<dyn ImageSource>> {
    Ok(match dir {
        Some(d) => Box::new(DirectorySource::open(d)?),
        None => Box::new(SyntheticImages::new(seed)),
    })
}

fn train_cmd(a: TrainArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg = base_config(a.config.as_deref(), TrainConfig::default())?;
    cfg.seed = a.seed;
    apply_model_args(&mut cfg.model, &a.model);
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.adam.learning_rate = lr;
    }
    let first = cfg
        .stages
        .first_mut()
        .ok_or_else(|| CliError::Usage("configuration has no stages".into()))?;
    if let Some(n) = a.iterations {
        first.iterations = n;
    }
    if let Some(s) = a.size {
        first.target_size = s;
        first.input_sizes = vec![s / 2];
    }
    if let Some(t) = a.refine {
        cfg = cfg.with_refinement_stage(t, a.patch);
    }
    cfg.checkpoint_dir = Some(a.out.clone());
    let teacher = SyntheticTeacher::new(a.patch, a.teacher_dim, a.seed)?;
    cfg.validate(teacher.patch)?;
    let source = image_source(a.images.as_deref(), a.seed)?;
    fs::create_dir_all(&a.out)?;
    let log_path = a.out.join("loss.csv");
    let mut log = fs::File::create(&log_path)?;
    let outcome = train(&cfg, &teacher, source.as_ref(), Some(&mut log))?;
    let losses = outcome.losses();
    println!("final_loss={}", losses.last().copied().unwrap_or(f64::NAN));
    let mut steps = Vec::new();
    if a.eval > 0 {
        let stage = &cfg.stages[0];
        let seen: usize = cfg.stages.iter().map(|s| s.iterations).sum::<usize>() * cfg.batch_size;
        let r = evaluate(&outcome.model, &teacher, source.as_ref(), seen, a.eval, stage.input_sizes[0], stage.target_size)?;
        println!("naf_mse={} bilinear_mse={}", r.naf_mse, r.bilinear_mse);
        steps.push(format!("held-out: naf_mse={} bilinear_mse={} on {} images", r.naf_mse, r.bilinear_mse, r.images));
    }
    let mut m = RunManifest::new(
        "train",
        argv,
        json!({ "train": cfg, "teacher": { "patch": a.patch, "dim": a.teacher_dim } }),
    )?
    .seed("train", a.seed)
    .seed("teacher", a.seed)
    .output("checkpoint", &a.out)
    .output("loss_log", &log_path);
    if let Some(d) = &a.images {
        m = m.input("images", d);
    }
    m.steps = steps;
    m.write(&manifest_path_in(&a.out))?;
    Ok(())
}

fn noise_spec(n: &NoiseArgs, seed: u64) -> CliResult<NoiseSpec> {
    let level_range = n
        .level_range
        .as_deref()
        .map(|r| parse_pair::<f64>(r, "--level-range"))
        .transpose()?;
    let spec = NoiseSpec {
        kind: n.noise,
        level: n.level,
        level_range,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

fn denoise_train(a: DenoiseTrainArgs, argv: &[String]) -> CliResult<()> {
    let mut default = TrainConfig::default();
    default.model.kernel = DENOISE_KERNEL;
    default.stages = vec![Stage {
        iterations: 1000,
        input_sizes: vec![64],
        target_size: 64,
    }];
    let mut cfg = base_config(a.config.as_deref(), default)?;
    cfg.seed = a.seed;
    apply_model_args(&mut cfg.model, &a.model);
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.adam.learning_rate = lr;
    }
    let first = cfg
        .stages
        .first_mut()
        .ok_or_else(|| CliError::Usage("configuration has no stages".into()))?;
    if let Some(n) = a.iterations {
        first.iterations = n;
    }
    if let Some(s) = a.size {
        first.target_size = s;
        first.input_sizes = vec![s];
    }
    cfg.checkpoint_dir = Some(a.out.clone());
    let noise = noise_spec(&a.noise, a.seed)?;
    let source = image_source(a.images.as_deref(), a.seed)?;
    fs::create_dir_all(&a.out)?;
    let log_path = a.out.join("loss.csv");
    let mut log = fs::File::create(&log_path)?;
    let outcome = train_denoiser(&cfg, &noise, source.as_ref(), Some(&mut log))?;
    println!("final_loss={}", outcome.losses().last().copied().unwrap_or(f64::NAN));
    let mut steps = Vec::new();
    if a.eval > 0 {
        let seen: usize = cfg.stages.iter().map(|s| s.iterations).sum::<usize>() * cfg.batch_size;
        let size = cfg.stages[0].target_size;
        let r = evaluate_denoiser(&outcome.model, &noise, source.as_ref(), seen, a.eval, size)?;
        println!("noisy PSNR={} SSIM={}", r.noisy_psnr, r.noisy_ssim);
        println!("denoised PSNR={} SSIM={}", r.denoised_psnr, r.denoised_ssim);
        steps.push(format!("held-out on {} images: {:?}", r.images, r));
    }
    let mut m = RunManifest::new("denoise train", argv, json!({ "train": cfg, "noise": noise }))?
        .seed("train", a.seed)
        .seed("noise", a.seed)
        .output("checkpoint", &a.out)
        .output("loss_log", &log_path);
    if let Some(d) = &a.images {
        m = m.input("images", d);
    }
    m.steps = steps;
    m.write(&manifest_path_in(&a.out))?;
    Ok(())
}

fn append_metrics(path: &Path, rows: &[(&str, f64, f64)]) -> CliResult<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "image,psnr,ssim")?;
    }
    for (name, p, s) in rows {
        writeln!(f, "{name},{p},{s}")?;
    }
    Ok(())
}

fn denoise_apply(a: DenoiseApplyArgs, argv: &[String]) -> CliResult<()> {
    let model = read_model(&a.weights)?;
    let input = read_png(&a.input)?;
    let mut m = RunManifest::new("denoise apply", argv, json!({ "model": model.config, "sigma": model.sigma }))?
        .input("weights", &a.weights)
        .input("input", &a.input)
        .output("image", &a.out);
    let (noisy, clean) = if a.add_noise {
        let seed = a
            .seed
            .ok_or_else(|| CliError::Usage("--add-noise needs --seed".into()))?;
        let spec = noise_spec(&a.noise, seed)?;
        m = m.seed("noise", seed);
        m.steps.push(format!("added noise {spec:?}"));
        (corrupt(&input, &spec)?, Some(input))
    } else {
        let clean = a.clean.as_deref().map(read_png).transpose()?;
        if let Some(c) = &a.clean {
            m = m.input("clean", c);
        }
        (input, clean)
    };
    let out = denoise(&model, &noisy)?;
    save_png(&out, &a.out)?;
    if let Some(clean) = clean {
        let rows = [
            ("noisy", psnr(&noisy, &clean, 1.0)?, ssim(&noisy, &clean)?),
            ("denoised", psnr(&out, &clean, 1.0)?, ssim(&out, &clean)?),
        ];
        for (name, p, s) in &rows {
            println!("{name} PSNR={p} SSIM={s}");
        }
        if let Some(path) = &a.metrics {
            append_metrics(path, &rows)?;
            m = m.output("metrics", path);
        }
    }
    m.write(&manifest_path_for(&a.out))?;
    Ok(())
}

fn analyze(a: AnalyzeArgs, argv: &[String]) -> CliResult<()> {
    if let Some(window) = a.trig {
        let rope = RopeConfig::new(a.channels, a.base, 64, 64)?;
        let (cos_map, sin_map) = mean_trig_maps(&rope, window)?;
        save_npy(&cos_map.cast::<f32>(), &a.out)?;
        let mut m = RunManifest::new("analyze", argv, json!({ "rope": rope, "window": window }))?.output("cos_map", &a.out);
        if let Some(p) = &a.extra_out {
            save_npy(&sin_map.cast::<f32>(), p)?;
            m = m.output("sin_map", p);
        }
        m.write(&manifest_path_for(&a.out))?;
        println!("center cos={}", cos_map.get(window / 2, window / 2, 0));
        return Ok(());
    }
    let Some(spec) = a.map.as_deref() else {
        return usage("analyze needs --map or --trig");
    };
    let (Some(weights), Some(image)) = (&a.weights, &a.image) else {
        return usage("--map needs --weights and --image");
    };
    let p = parse_pair::<usize>(spec, "--map")?;
    let mut model = read_model(&weights)?;
    apply_overrides(&mut model.config, &a.attn);
    let img = read_png(&image)?;
    let cfg: AttnConfig = model.config.attn(a.scale, model.sigma);
    let png = a.extra_out.clone().unwrap_or_else(|| a.out.with_extension("png"));
    let map = export_attention_map(&img, &model.encoder, &model.config.rope()?, &cfg, p, &a.out, &png)?;
    let total: f64 = map.data().iter().map(|&v| v as f64).sum();
    RunManifest::new("analyze", argv, json!({ "attn": cfg, "pixel": p }))?
        .input("weights", weights)
        .input("image", image)
        .output("map", &a.out)
        .output("heatmap", &png)
        .write(&manifest_path_for(&a.out))?;
    println!("weight_sum={total}");
    Ok(())
}

fn filter(a: FilterArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg = BilateralConfig::default();
    if let Some(v) = a.sigma_s {
        cfg.sigma_s = v;
    }
    if let Some(v) = a.sigma_r {
        cfg.sigma_r = v;
    }
    if let Some(v) = a.radius {
        cfg.radius = v;
    }
    let signal = read_npy(&a.input)?;
    let guide = || -> CliResult<Tensor3> {
        match &a.guidance {
            Some(g) => Ok(read_png(&g)?),
            None => usage(format!("--method {:?} needs --guidance", a.method).to_lowercase()),
        }
    };
    let mut m = RunManifest::new("filter", argv, json!({ "method": a.method, "bilateral": cfg }))?
        .input("signal", &a.input)
        .output("signal", &a.out);
    let out = match a.method {
        FilterMethod::Jbu => {
            let g = guide()?;
            let (h, w) = (signal.height(), signal.width());
            if g.height() % h != 0 || g.height() / h != g.width() / w || g.width() % w != 0 {
                return usage(format!(
                    "guidance {}x{} is not an integer multiple of the {h}x{w} signal",
                    g.height(),
                    g.width()
                ));
            }
            m.steps.push(format!("jbu x{}", g.height() / h));
            jbu(&signal, &g, g.height() / h, &cfg)?
        }
        FilterMethod::Jbf => jbf(&signal, &guide()?, &cfg)?,
        FilterMethod::Gaussian => gaussian_filter(&signal, cfg.sigma_s, cfg.radius)?,
    };
    if let Some(g) = &a.guidance {
        m = m.input("guidance", g);
    }
    save_npy(&out, &a.out)?;
    m.write(&manifest_path_for(&a.out))?;
    Ok(())
}

fn flops(a: FlopsArgs) -> CliResult<()> {
    let enc = init_encoder(a.depth, a.channels, 0)?;
    let cfg = AttnConfig {
        scale: a.scale,
        kernel: a.kernel,
        ..AttnConfig::default()
    };
    cfg.validate()?;
    let f = flops_estimate(&cfg, &enc, a.lr, a.lr, a.dim);
    let report = json!({
        "lr": a.lr,
        "scale": a.scale,
        "kernel": a.kernel,
        "channels": a.channels,
        "depth": a.depth,
        "dim": a.dim,
        "params": param_count(&enc),
        "flops": f,
        "gflops_total": f.total / 1e9,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn bench(a: BenchArgs, argv: &[String]) -> CliResult<()> {
    let sizes: Vec<usize> = a
        .sizes
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--sizes must be comma-separated integers, got {:?}", a.sizes)))?;
    if sizes.is_empty() || sizes.contains(&0) {
        return usage("--sizes must list positive sizes");
    }
    let enc = init_encoder(a.depth, a.channels, a.seed)?;
    let rope = RopeConfig::new(a.channels, naf::rope::DEFAULT_ROPE_BASE, 1, 1)?;
    let cfg = AttnConfig {
        scale: a.scale,
        kernel: a.kernel,
        ..AttnConfig::default()
    };
    let report = bench_throughput(&cfg, &enc, &rope, a.dim, &sizes, a.repeats, a.seed)?;
    let csv = report.to_csv();
    match &a.out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    if !report.monotone {
        log::warn!("median time is not monotone in output size; timings may be noisy");
    }
    if let Some(kib) = report.peak_rss_kib {
        println!("peak_rss_kib={kib}");
    }
    let mut steps = Vec::new();
    if let Some(lr) = a.dense {
        let c = compare_with_dense(&cfg, &enc, &rope, a.dim, lr, a.repeats, a.seed)?;
        println!(
            "neighborhood_s={} dense_s={} speedup={}",
            c.neighborhood_seconds, c.dense_seconds, c.speedup
        );
        steps.push(format!("dense comparison at {lr}: {c:?}"));
    }
    if let Some(p) = &a.out {
        let mut m = RunManifest::new("bench", argv, json!({ "attn": cfg, "sizes": sizes, "repeats": a.repeats }))?
            .seed("bench", a.seed)
            .output("csv", p);
        m.steps = steps;
        m.write(&manifest_path_for(p))?;
    }
    Ok(())
}
