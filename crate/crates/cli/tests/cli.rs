use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nemto_core::image::{Image, Mask};
use nemto_core::nn::Checkpoint;

const SMALL_CONFIG: &str = "
iterations = 4
patches = 4
patch_size = 2
sil_samples = 8
eik_samples = 16
checkpoint_every = 2

[sdf]
hidden_layers = 2
width = 32
skip_layer = 1
frequencies = 2

[rbn]
hidden_layers = 2
width = 16
dir_frequencies = 2
pos_frequencies = 2
";

fn nemto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nemto"))
        .args(args)
        .env_remove("NEMTO_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nemto(args);
    assert!(
        out.status.success(),
        "nemto {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    nemto(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    env: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn fixture(views: usize, res: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let env = root.join("sky.pfm");
    ok(&[
        "make-env",
        "--preset",
        "sky",
        "--width",
        "64",
        "--height",
        "32",
        "--out",
        s(&env),
    ]);
    let data = root.join("data");
    let (v, r) = (views.to_string(), res.to_string());
    ok(&[
        "generate",
        "--shape",
        "sphere",
        "--ior",
        "1.4723",
        "--env",
        s(&env),
        "--views",
        &v,
        "--res",
        &r,
        "--out",
        s(&data),
    ]);
    let config = root.join("small.toml");
    fs::write(&config, SMALL_CONFIG).unwrap();
    Fixture {
        _dir: dir,
        root,
        env,
        data,
        config,
    }
}

fn train(f: &Fixture, name: &str, extra: &[&str]) -> PathBuf {
    let out = f.root.join(name);
    let mut args = vec![
        "train",
        "--dataset",
        s(&f.data),
        "--config",
        s(&f.config),
        "--out",
        s(&out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn generate_writes_the_split_dataset() {
    let f = fixture(20, 16);
    let cams: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.data.join("cameras.json")).unwrap()).unwrap();
    let cams = cams.as_array().unwrap();
    assert_eq!(cams.len(), 20);
    let train = cams.iter().filter(|c| c["split"] == "train").count();
    assert_eq!(train, 10);
    for i in 0..20 {
        assert!(f.data.join(format!("images/view_{i:04}.pfm")).is_file());
        assert!(f.data.join(format!("masks/view_{i:04}.png")).is_file());
    }
}

#[test]
fn generate_is_repeatable() {
    let f = fixture(6, 8);
    let again = f.root.join("again");
    ok(&[
        "generate",
        "--env",
        s(&f.env),
        "--views",
        "6",
        "--res",
        "8",
        "--out",
        s(&again),
    ]);
    assert_eq!(
        fs::read(f.data.join("cameras.json")).unwrap(),
        fs::read(again.join("cameras.json")).unwrap()
    );
}

#[test]
fn invalid_flags_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let env = dir.path().join("env.pfm");
    ok(&["make-env", "--out", s(&env)]);
    assert_eq!(
        code(&["generate", "--views", "0", "--env", s(&env), "--out", s(&out)]),
        2
    );
    assert!(!out.exists(), "validation must precede any output");
    assert_eq!(
        code(&["generate", "--shape", "cone", "--env", s(&env), "--out", s(&out)]),
        2
    );
    assert_eq!(code(&["generate", "--env", "missing.pfm", "--out", s(&out)]), 2);
    assert_eq!(
        code(&[
            "extract-mesh",
            "--checkpoint",
            s(&env),
            "--resolution",
            "8",
            "--out",
            s(&out)
        ]),
        2
    );
    assert_eq!(code(&["render", "--dataset", s(dir.path())]), 2);
    assert_eq!(code(&["bogus"]), 2);
}

#[test]
fn missing_environment_fails_training_with_usage_code() {
    let f = fixture(2, 8);
    fs::remove_file(f.data.join("env.pfm")).unwrap();
    let out = f.root.join("run");
    assert_eq!(
        code(&[
            "train",
            "--dataset",
            s(&f.data),
            "--config",
            s(&f.config),
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn training_writes_log_checkpoints_and_model() {
    let f = fixture(4, 16);
    let out = train(&f, "run", &[]);
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.starts_with("step\tloss_total\tloss_pix\tloss_sil\tloss_e\tloss_rg\tloss_rs\tlambda_rg\talpha\n"));
    assert!(out.join("checkpoints/step_000002.nmto").is_file());
    assert!(out.join("model.nmto").is_file());
    assert!(out.join("config.toml").is_file());
}

#[test]
fn frozen_training_changes_only_the_ray_bending_network() {
    let f = fixture(4, 16);
    let out = train(&f, "frozen", &["--freeze-geometry"]);
    let a = Checkpoint::load(out.join("checkpoints/step_000002.nmto")).unwrap();
    let b = Checkpoint::load(out.join("model.nmto")).unwrap();
    assert!(a.sdf.is_none() && b.sdf.is_none());
    assert_eq!(a.header.geometry, b.header.geometry);
    assert_ne!(a.rbn.params, b.rbn.params);
}

#[test]
fn non_finite_loss_exits_with_numeric_code() {
    let f = fixture(2, 8);
    let cfg = f.root.join("bad.toml");
    fs::write(&cfg, format!("{SMALL_CONFIG}\n[weights]\npix = 1e308\nsil = 1e308\n")).unwrap();
    let out = nemto(&[
        "train",
        "--dataset",
        s(&f.data),
        "--config",
        s(&cfg),
        "--out",
        s(&f.root.join("bad")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loss at step "));
}

#[test]
fn damaged_checkpoints_exit_with_checkpoint_code() {
    let f = fixture(2, 8);
    let bad = f.root.join("bad.nmto");
    fs::write(&bad, b"NOPE and then some bytes").unwrap();
    let out = f.root.join("r");
    assert_eq!(
        code(&[
            "render",
            "--checkpoint",
            s(&bad),
            "--dataset",
            s(&f.data),
            "--out",
            s(&out)
        ]),
        4
    );
    let model = train(&f, "run", &["--iterations", "0"]);
    let mut bytes = fs::read(model.join("model.nmto")).unwrap();
    bytes[4] = 99;
    fs::write(&bad, bytes).unwrap();
    assert_eq!(code(&["extract-mesh", "--checkpoint", s(&bad), "--out", s(&out)]), 4);
}

#[test]
fn relight_with_training_env_equals_render() {
    let f = fixture(4, 16);
    let model = train(&f, "run", &[]).join("model.nmto");
    let r = f.root.join("render");
    let l = f.root.join("relight");
    ok(&[
        "render",
        "--checkpoint",
        s(&model),
        "--dataset",
        s(&f.data),
        "--out",
        s(&r),
    ]);
    ok(&[
        "relight",
        "--checkpoint",
        s(&model),
        "--dataset",
        s(&f.data),
        "--env",
        s(&f.env),
        "--out",
        s(&l),
    ]);
    let mut n = 0;
    for e in fs::read_dir(r.join("images")).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(
            fs::read(r.join("images").join(&name)).unwrap(),
            fs::read(l.join("images").join(&name)).unwrap()
        );
        n += 1;
    }
    assert_eq!(n, 4, "two test views, pfm and png each");
}

#[test]
fn miss_only_crop_renders_black() {
    let f = fixture(2, 32);
    let model = train(&f, "run", &["--iterations", "0"]).join("model.nmto");
    let out = f.root.join("crop");
    ok(&[
        "render",
        "--checkpoint",
        s(&model),
        "--dataset",
        s(&f.data),
        "--split",
        "all",
        "--crop",
        "0,0,3,3",
        "--out",
        s(&out),
    ]);
    let img = Image::load_pfm(out.join("images/view_0000.pfm")).unwrap();
    assert_eq!((img.width(), img.height()), (3, 3));
    assert!(img.data().iter().all(|&v| v == 0.0));
    assert_eq!(Mask::load_png(out.join("masks/view_0000.png")).unwrap().count(), 0);
}

#[test]
fn eval_of_identical_sets_hits_the_caps() {
    let f = fixture(2, 16);
    let report = f.root.join("report.json");
    let tsv = ok(&[
        "eval",
        "--pred",
        s(&f.data),
        "--ref",
        s(&f.data),
        "--report",
        s(&report),
    ]);
    assert!(tsv.lines().any(|l| l.starts_with("mean\t99.0000\t1.000000")), "{tsv}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["aggregate"]["psnr"], 99.0);
    assert_eq!(json["aggregate"]["ssim"], 1.0);
    assert_eq!(json["per_view"].as_array().unwrap().len(), 2);
    ok(&["eval", "--pred", s(&f.data), "--ref", s(&f.data), "--masked"]);
}

#[test]
fn eval_of_mismatched_sizes_exits_with_usage_code() {
    let a = fixture(2, 16);
    let b = fixture(2, 24);
    assert_eq!(code(&["eval", "--pred", s(&a.data), "--ref", s(&b.data)]), 2);
}

#[test]
fn extract_mesh_of_analytic_checkpoint_and_empty_level_set() {
    let f = fixture(2, 8);
    let model = train(&f, "frozen", &["--freeze-geometry", "--iterations", "0"]).join("model.nmto");
    let obj = f.root.join("sphere.obj");
    ok(&[
        "extract-mesh",
        "--checkpoint",
        s(&model),
        "--resolution",
        "32",
        "--out",
        s(&obj),
    ]);
    let report = f.root.join("mesh.json");
    ok(&[
        "eval",
        "--mesh",
        s(&obj),
        "--ref-mesh",
        s(&obj),
        "--samples",
        "4000",
        "--report",
        s(&report),
    ]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["chamfer_l1"].as_f64().unwrap() < 0.05);

    // a field that stays positive everywhere has no surface
    let cfg = f.root.join("empty.toml");
    fs::write(
        &cfg,
        SMALL_CONFIG.replacen("frequencies = 2\n", "frequencies = 2\ninit_radius = 0.02\n", 1),
    )
    .unwrap();
    let run = f.root.join("empty");
    ok(&[
        "train",
        "--dataset",
        s(&f.data),
        "--config",
        s(&cfg),
        "--iterations",
        "0",
        "--out",
        s(&run),
    ]);
    let out = nemto(&[
        "extract-mesh",
        "--checkpoint",
        s(&run.join("model.nmto")),
        "--resolution",
        "17",
        "--out",
        s(&obj),
    ]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn thread_count_must_be_positive() {
    let out = Command::new(env!("CARGO_BIN_EXE_nemto"))
        .args(["make-env", "--out", "/dev/null"])
        .env("NEMTO_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
