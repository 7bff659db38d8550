use std::fs;
use std::path::{Path, PathBuf};

use edsc::datagen::{gen_sequence, write_sequence, TRAIN_TIMES};
use edsc::deformable::effective_sampling_map;
use edsc::gradcheck::{end_to_end, op_suite};
use edsc::io::{load_checkpoint, read_flow, read_image, save_checkpoint, write_image};
use edsc::metrics::{occlusion_mask, psnr, Evaluation};
use edsc::model::{
    build_model, count_flops, count_macs, count_params, forward, forward_naive_rescale, LayerKind,
    ModelConfig, ModelParams, TimeStep,
};
use edsc::training::{evaluate_psnr, overlay, samples_at, train as run_training, EpochLog};
use edsc::Frame;

use crate::config::RunConfig;
use crate::CliError;

fn ensure_empty_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(CliError::data(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        if occupied {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn gen_data(spec: Option<&Path>, out: &Path, force: bool, set: &[String]) -> Result<(), CliError> {
    let cfg = RunConfig::load(spec, set)?;
    let (mut train_spec, _) = cfg.data(true)?;
    train_spec.times = TRAIN_TIMES.to_vec();
    ensure_empty_dir(out, force)?;
    let mut manifest = String::new();
    manifest.push_str("times");
    for t in &train_spec.times {
        manifest.push_str(&format!(" {}", t));
    }
    manifest.push('\n');
    for i in 0..train_spec.count {
        let seq = gen_sequence(&train_spec.motion(i)?)?;
        let name = format!("seq_{:03}", i);
        write_sequence(out.join(&name), &seq)?;
        manifest.push_str(&format!("sequence {}\n", name));
    }
    fs::write(out.join("manifest.txt"), manifest)?;
    cfg.write(&out.join("config.txt"))?;
    println!("sequences={} dir={}", train_spec.count, out.display());
    Ok(())
}

pub fn train(config: Option<&Path>, out: Option<&Path>, set: &[String]) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config, set)?;
    if let Some(o) = out {
        cfg.set("out.dir", &o.to_string_lossy())?;
    }
    let model_cfg = cfg.model()?;
    let train_cfg = cfg.train()?;
    let (train_spec, val_spec) = cfg.data(model_cfg.multi_time)?;
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)?;
    cfg.write(&dir.join("config.txt"))?;

    let params: ModelParams<f32> = match cfg.init_checkpoint() {
        Some(p) => {
            let loaded = load_checkpoint::<f32>(&p)?;
            let mut a = loaded.config().clone();
            a.seed = model_cfg.seed;
            if a != model_cfg {
                return Err(CliError::usage(format!(
                    "{} holds a different architecture than the config",
                    p.display()
                )));
            }
            loaded
        }
        None => build_model(&model_cfg, model_cfg.seed)?,
    };
    let train_set = train_spec.generate()?;
    let val_seqs = val_spec.generate()?;
    let val = samples_at(&val_seqs, 0.5)?;

    let log_path = dir.join("train.log");
    let mut log = String::from("epoch, lr, train_loss, val_psnr\n");
    fs::write(&log_path, &log)?;
    let outcome = run_training(params, &train_set, &val, &train_cfg, |e: &EpochLog| {
        println!("{}", e);
        log.push_str(&format!("{}\n", e));
        let _ = fs::write(&log_path, &log);
    })?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &outcome.params)?;
    if let Some(why) = outcome.diverged {
        return Err(CliError::numerical(format!(
            "training diverged ({}); last good parameters saved to {}",
            why,
            ckpt.display()
        )));
    }
    let n = val.len().max(1) as f64;
    let mut ov = 0.0;
    let mut cp = 0.0;
    for s in &val {
        ov += psnr(&overlay(&s.frame1, &s.frame2), &s.target, 1.0)?;
        cp += psnr(&s.frame1, &s.target, 1.0)?;
    }
    println!(
        "val_psnr={:.4} overlay_psnr={:.4} copy_psnr={:.4} checkpoint={}",
        evaluate_psnr(&outcome.params, &val)?,
        ov / n,
        cp / n,
        ckpt.display()
    );
    Ok(())
}

fn time_tag(t: f64) -> String {
    format!("{:.3}", t)
}

pub fn interp(
    ckpt: &Path,
    frame1: &Path,
    frame2: &Path,
    times: &[f64],
    naive: bool,
    out: &Path,
) -> Result<(), CliError> {
    let params = load_checkpoint::<f32>(ckpt)?;
    let i1 = read_image(frame1)?;
    let i2 = read_image(frame2)?;
    i1.same_size(&i2, "interp")?;
    let multi = params.config().multi_time;
    if naive && multi {
        return Err(CliError::usage("--naive-rescale needs a single-time checkpoint"));
    }
    if !multi && !naive {
        if let Some(t) = times.iter().find(|&&t| t != 0.5) {
            return Err(CliError::usage(format!(
                "single-time model only synthesises t=0.5 (got {}); use --naive-rescale or a multi-time model",
                t
            )));
        }
    }
    fs::create_dir_all(out)?;
    let (a, b) = (i1.to_tensor::<f32>(), i2.to_tensor::<f32>());
    for &t in times {
        let ts = TimeStep::new(t)?;
        let (pred, _) = if naive {
            forward_naive_rescale(&params, &a, &b, ts)?
        } else {
            forward(&params, &a, &b, multi.then_some(ts))?
        };
        let frame = Frame::from_tensor(&pred, 0)?.clamped();
        let path = out.join(format!("interp_t{}.ppm", time_tag(t)));
        write_image(&path, &frame)?;
        println!("t={} file={}", t, path.display());
    }
    Ok(())
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    v.sort();
    Ok(v)
}

pub fn eval(pred: &Path, gt: &Path, occ: Option<(PathBuf, PathBuf, PathBuf)>) -> Result<(), CliError> {
    let pairs: Vec<(PathBuf, PathBuf)> = if pred.is_dir() {
        if occ.is_some() {
            return Err(CliError::usage("--flow applies to single frames, not directories"));
        }
        let mut v = Vec::new();
        for p in ppm_files(pred)? {
            let name = p.file_name().expect("file").to_owned();
            let g = gt.join(&name);
            if !g.exists() {
                return Err(CliError::data(format!("no ground truth for {}", g.display())));
            }
            v.push((p, g));
        }
        if v.is_empty() {
            return Err(CliError::data(format!("no .ppm files in {}", pred.display())));
        }
        v
    } else {
        vec![(pred.to_path_buf(), gt.to_path_buf())]
    };
    let mask = match occ {
        Some((flow, f1, f2)) => {
            let flow = read_flow::<f64>(flow)?;
            Some(occlusion_mask(&read_image(f1)?, &read_image(f2)?, &flow)?)
        }
        None => None,
    };
    let mut evals = Vec::new();
    for (p, g) in pairs {
        evals.push(Evaluation::compute(&read_image(p)?, &read_image(g)?, mask.as_ref())?);
    }
    let mean = Evaluation::mean(&evals).expect("non-empty");
    println!("{}", mean);
    Ok(())
}

pub fn gradcheck(seeds: u64) -> Result<(), CliError> {
    let mut failed = Vec::new();
    for seed in 0..seeds {
        let mut checks = op_suite(seed)?;
        checks.push(end_to_end(seed, seed % 2 == 1)?);
        for c in checks {
            println!(
                "seed={} op={} shape={} max_rel_err={:.3e} checked={} pass={}",
                seed, c.op, c.shape, c.report.max_rel_err, c.report.checked, c.report.passed
            );
            if !c.report.passed {
                failed.push(format!("{} (seed {})", c.op, seed));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numerical(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn parse_res(res: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::usage(format!("resolution must be HxW, got {:?}", res));
    let (h, w) = res.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

/// Encoder-decoder MACs at `p` versus plain 3x3 layers.
fn backbone_macs(cfg: &ModelConfig, h: usize, w: usize) -> (u64, u64) {
    let full = ModelConfig { hetconv_p: 1, ..cfg.clone() };
    let sum = |c: &ModelConfig| -> u64 {
        c.layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Het { .. }))
            .map(|l| (l.macs_per_pixel() * (h / l.scale) * (w / l.scale)) as u64)
            .sum()
    };
    (sum(cfg), sum(&full))
}

pub fn count(config: Option<&Path>, res: &str, full_scale: bool, set: &[String]) -> Result<(), CliError> {
    let (h, w) = parse_res(res)?;
    let cfg = if full_scale {
        let base = RunConfig::load(config, set)?.model()?;
        ModelConfig {
            kernel_size: base.kernel_size,
            hetconv_p: base.hetconv_p,
            multi_time: base.multi_time,
            use_mask: base.use_mask,
            use_bias: base.use_bias,
            ..ModelConfig::full_scale()
        }
    } else {
        RunConfig::load(config, set)?.model()?
    };
    cfg.validate()?;
    let params = build_model::<f32>(&cfg, 0)?;
    let n = count_params(&params);
    println!(
        "params={} flops={} macs={} res={}x{}",
        n,
        count_flops(&cfg, h, w),
        count_macs(&cfg, h, w),
        h,
        w
    );
    let (het, full) = backbone_macs(&cfg, h, w);
    println!(
        "backbone_macs={} backbone_macs_p1={} ratio={:.6}",
        het,
        full,
        het as f64 / full as f64
    );
    let other = ModelConfig { multi_time: !cfg.multi_time, ..cfg.clone() };
    let m = count_params(&build_model::<f32>(&other, 0)?);
    let (with, without) = if cfg.multi_time { (n, m) } else { (m, n) };
    println!(
        "time_channel_params={} relative={:.6}",
        with - without,
        (with - without) as f64 / without as f64
    );
    Ok(())
}

fn parse_pixel(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::usage(format!("pixel must be x,y, got {:?}", s));
    let (x, y) = s.split_once(',').ok_or_else(bad)?;
    Ok((x.trim().parse().map_err(|_| bad())?, y.trim().parse().map_err(|_| bad())?))
}

/// Green where the output pixel draws weight, over a dimmed grey copy of the
/// frame.
fn render_map(frame: &Frame, weights: &[f64]) -> Frame {
    let peak = weights.iter().cloned().fold(0.0, f64::max);
    let w = frame.width();
    Frame::from_fn(w, frame.height(), |x, y| {
        let g = 0.3 * (frame.get(x, y, 0) + frame.get(x, y, 1) + frame.get(x, y, 2)) / 3.0;
        let a = if peak > 0.0 { (weights[y * w + x] / peak).sqrt() } else { 0.0 };
        [g * (1.0 - a), g + (1.0 - g) * a, g * (1.0 - a)]
    })
}

pub fn viz_kernels(
    ckpt: &Path,
    frame1: &Path,
    frame2: &Path,
    pixel: &str,
    t: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let params = load_checkpoint::<f32>(ckpt)?;
    let i1 = read_image(frame1)?;
    let i2 = read_image(frame2)?;
    let (x, y) = parse_pixel(pixel)?;
    let ts = match (params.config().multi_time, t) {
        (true, t) => Some(TimeStep::new(t.unwrap_or(0.5))?),
        (false, Some(t)) if t != 0.5 => {
            return Err(CliError::usage("single-time model only synthesises t=0.5"))
        }
        (false, _) => None,
    };
    let (pred, fields) = forward(&params, &i1.to_tensor::<f32>(), &i2.to_tensor::<f32>(), ts)?;
    let map = effective_sampling_map(&fields.kernels, &fields.offsets, &fields.masks, 0, x, y)?;
    fs::create_dir_all(out)?;
    write_image(out.join("sampling_frame1.ppm"), &render_map(&i1, &map.frame1))?;
    write_image(out.join("sampling_frame2.ppm"), &render_map(&i2, &map.frame2))?;
    write_image(out.join("interp.ppm"), &Frame::from_tensor(&pred, 0)?.clamped())?;
    println!(
        "pixel={},{} mass_frame1={:.6} mass_frame2={:.6} dir={}",
        x,
        y,
        map.frame1.iter().sum::<f64>(),
        map.frame2.iter().sum::<f64>(),
        out.display()
    );
    Ok(())
}
