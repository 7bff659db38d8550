use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "data.size=16",
    "--set", "data.count=2",
    "--set", "data.val_count=1",
    "--set", "data.velocity=2",
    "--set", "data.background_velocity=1",
    "--set", "model.widths=8,8",
    "--set", "model.estimator_widths=4,4,4",
    "--set", "model.block_depth=1",
    "--set", "model.hetconv_p=2",
    "--set", "train.epochs=1",
    "--set", "train.crop=0",
];

fn edsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edsc")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_tiny(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--deterministic", "train", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    edsc(&args)
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(edsc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(edsc(&["count", "--set", "model.nope=3"]).status.code(), Some(1));
    assert_eq!(edsc(&["count", "--res", "64by64"]).status.code(), Some(1));
}

#[test]
fn gen_data_writes_manifest_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let o = out.to_str().unwrap();
    let args = ["gen-data", "--out", o, "--set", "data.size=16", "--set", "data.count=2"];
    let first = edsc(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().next().unwrap(), "times 0.167 0.333 0.5 0.667 0.833");
    assert_eq!(manifest.lines().filter(|l| l.starts_with("sequence ")).count(), 2);
    assert!(out.join("config.txt").exists());

    let again = edsc(&args);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));

    let snapshot: Vec<_> = walk(&out);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(edsc(&forced).status.success());
    assert_eq!(walk(&out), snapshot, "regeneration under the same seed differs");
}

fn walk(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn count_reports_a_third_of_the_backbone_macs() {
    let o = edsc(&["count", "--set", "model.hetconv_p=4", "--set", "model.widths=12,24,48"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let ratio: f64 = text
        .split_whitespace()
        .find_map(|w| w.strip_prefix("ratio="))
        .unwrap()
        .parse()
        .unwrap();
    // the 6-input first layer does not split evenly into groups of 4
    assert!((ratio - 1.0 / 3.0).abs() < 0.01, "{}", text);
    assert!(text.contains("time_channel_params="));
}

#[test]
fn train_interp_eval_and_viz() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = train_tiny(&run, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("val_psnr="));
    let resolved = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(resolved.contains("data.size=16"));
    assert!(resolved.contains("train.lr=0.001"));
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let data = tmp.path().join("data");
    assert!(edsc(&["gen-data", "--out", data.to_str().unwrap(), "--set", "data.size=16", "--set", "data.count=1"])
        .status
        .success());
    let seq = data.join("seq_000");
    let mut files: Vec<_> = fs::read_dir(&seq).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let ppm: Vec<_> = files.iter().filter(|p| p.extension().is_some_and(|x| x == "ppm")).collect();
    let flo = files.iter().find(|p| p.extension().is_some_and(|x| x == "flo")).unwrap();
    let (f1, f2) = (ppm.first().unwrap(), ppm.last().unwrap());
    let ckpt = run.join("model.ckpt");
    let ck = ckpt.to_str().unwrap();
    let (a, b) = (f1.to_str().unwrap(), f2.to_str().unwrap());

    let out = tmp.path().join("interp");
    let od = out.to_str().unwrap();
    let rejected = edsc(&["interp", "--ckpt", ck, "--frame1", a, "--frame2", b, "--t", "0.3", "--out", od]);
    assert_eq!(rejected.status.code(), Some(1));

    let mid = edsc(&["interp", "--ckpt", ck, "--frame1", a, "--frame2", b, "--out", od]);
    assert!(mid.status.success(), "{}", String::from_utf8_lossy(&mid.stderr));
    let naive = edsc(&[
        "interp", "--ckpt", ck, "--frame1", a, "--frame2", b, "--times", "0.25,0.75", "--naive-rescale", "--out", od,
    ]);
    assert!(naive.status.success());
    assert_eq!(stdout(&naive).lines().count(), 2);
    let pred = out.join("interp_t0.500.ppm");
    assert!(pred.exists() && out.join("interp_t0.250.ppm").exists() && out.join("interp_t0.750.ppm").exists());

    let ev = edsc(&["eval", "--pred", pred.to_str().unwrap(), "--gt", a]);
    assert!(ev.status.success());
    let line = stdout(&ev);
    let keys: Vec<&str> = line.split_whitespace().map(|kv| kv.split('=').next().unwrap()).collect();
    assert_eq!(keys, ["psnr", "ssim", "ie", "ie_o", "ie_b"]);
    assert!(line.contains("ie_o=na"));

    let with_flow = edsc(&[
        "eval", "--pred", pred.to_str().unwrap(), "--gt", a, "--flow", flo.to_str().unwrap(), "--frame1", a, "--frame2", b,
    ]);
    assert!(with_flow.status.success(), "{}", String::from_utf8_lossy(&with_flow.stderr));
    assert!(!stdout(&with_flow).contains("ie_o=na"));

    let same = edsc(&["eval", "--pred", a, "--gt", a]);
    assert!(stdout(&same).contains("ssim=1.000000"));

    let viz = tmp.path().join("viz");
    let v = edsc(&["viz-kernels", "--ckpt", ck, "--frame1", a, "--frame2", b, "--pixel", "8,8", "--out", viz.to_str().unwrap()]);
    assert!(v.status.success(), "{}", String::from_utf8_lossy(&v.stderr));
    for f in ["sampling_frame1.ppm", "sampling_frame2.ppm", "interp.ppm"] {
        assert!(viz.join(f).exists(), "{}", f);
    }

    let missing = edsc(&["eval", "--pred", tmp.path().join("nope.ppm").to_str().unwrap(), "--gt", a]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn multi_time_model_emits_one_frame_per_time() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(train_tiny(&run, &["--set", "model.multi_time=true"]).status.success());
    let data = tmp.path().join("data");
    edsc(&["gen-data", "--out", data.to_str().unwrap(), "--set", "data.size=16", "--set", "data.count=1"]);
    let mut ppm: Vec<_> = fs::read_dir(data.join("seq_000"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    ppm.sort();
    let out = tmp.path().join("interp");
    let o = edsc(&[
        "interp",
        "--ckpt", run.join("model.ckpt").to_str().unwrap(),
        "--frame1", ppm[0].to_str().unwrap(),
        "--frame2", ppm.last().unwrap().to_str().unwrap(),
        "--times", "0.1,0.3,0.5,0.7,0.9",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 5);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.txt");
    fs::write(&cfg, "model.widths=8,8\nmodel.hetconv_p=2\n# comment\nmodel.kernel_size=3\n").unwrap();
    let c = cfg.to_str().unwrap();
    let from_file = stdout(&edsc(&["count", "--config", c]));
    let overridden = stdout(&edsc(&["count", "--config", c, "--set", "model.kernel_size=5"]));
    let params = |s: &str| -> u64 {
        s.split_whitespace().find_map(|w| w.strip_prefix("params=")).unwrap().parse().unwrap()
    };
    assert!(params(&overridden) > params(&from_file));
}
