use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slotenergy"))
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_DATA: &[&str] = &[
    "--height", "16", "--width", "16", "--size_range", "2,3", "--min_visible_pixels", "2",
    "--train.n_scenes", "6", "--test.n_scenes", "4",
];

const TINY_MODEL: &[&str] = &[
    "--steps", "4", "--batch_size", "2", "--warmup_steps", "1", "--checkpoint_every", "2",
    "--log_every", "1", "--height", "16", "--width", "16", "--latent_dim", "4",
    "--conv_layers", "2", "--channels", "4", "--kernel", "3", "--feature_dim", "6",
    "--blocks", "1", "--sampler.T", "2", "--sampler.K", "4",
];

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        let mut args = vec!["gen-data", "--out", p(&data)];
        args.extend_from_slice(SMALL_DATA);
        ok(&args);
        Fixture { _dir: dir, root }
    }

    fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    fn train(&self, name: &str, extra: &[&str]) -> Output {
        let out = self.root.join(name);
        let train = self.data("train.bin");
        let mut args = vec!["train", "--data", p(&train), "--out", p(&out)];
        args.extend_from_slice(extra);
        args.extend_from_slice(TINY_MODEL);
        run(&args)
    }

    fn trained(&self) -> PathBuf {
        let o = self.train("run", &[]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        self.root.join("run").join("final.ckpt")
    }
}

#[test]
fn gen_data_is_deterministic_and_honours_overrides() {
    let f = Fixture::new();
    let again = f.root.join("again");
    let mut args = vec!["gen-data", "--out", p(&again)];
    args.extend_from_slice(SMALL_DATA);
    ok(&args);
    for name in ["train.bin", "test.bin"] {
        assert_eq!(fs::read(f.data(name)).unwrap(), fs::read(again.join(name)).unwrap());
    }
    let m = json(&f.data("train.bin.manifest.json"));
    assert_eq!(m["config"]["height"], 16);
    assert_eq!(m["n_scenes"], 6);
    assert!(f.data("resolved_config.toml").exists());

    let bad = run(&["gen-data", "--out", p(&f.root.join("bad")), "--bogus", "1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bogus"));
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-data"];
    args.extend_from_slice(SMALL_DATA);
    let out = Command::new(env!("CARGO_BIN_EXE_slotenergy"))
        .args(&args)
        .env("SLOTENERGY_OUTPUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("data").join("train.bin").exists());
}

#[test]
fn train_resume_decompose_manipulate_eval_ablate_export() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let run_dir = f.root.join("run");
    let resolved = fs::read_to_string(run_dir.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("T = 2"));
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4);

    // A finished run refuses to restart without --resume and is a no-op with it.
    assert!(!f.train("run", &[]).status.success());
    let resumed = f.train("run", &["--resume"]);
    assert!(resumed.status.success());
    assert!(String::from_utf8_lossy(&resumed.stderr).contains("resuming at step 4"));

    // The quick run in the resolved config reproduces the same parameters.
    let cfg = run_dir.join("resolved_config.toml");
    let re = f.root.join("rerun");
    ok(&["train", "--data", p(&f.data("train.bin")), "--out", p(&re), "--config", p(&cfg)]);
    assert_eq!(fs::read(re.join("final.ckpt")).unwrap(), fs::read(&ckpt).unwrap());

    let test = f.data("test.bin");
    let dec = f.root.join("dec");
    ok(&["decompose", "--checkpoint", p(&ckpt), "--data", p(&test), "--scenes", "0,2", "--out", p(&dec)]);
    let (w, h) = png_size(&dec.join("slots.png"));
    // K + 2 columns and one row per scene, 16 px tiles with 2 px gaps.
    assert_eq!((w, h), (6 * 16 + 7 * 2, 2 * 16 + 3 * 2));
    let (_, sh) = png_size(&dec.join("steps_2.png"));
    assert_eq!(sh, 3 * 16 + 4 * 2);
    let energies = fs::read_to_string(dec.join("energies.csv")).unwrap();
    assert_eq!(energies.lines().count(), 1 + 2 * 3);

    let man = f.root.join("man");
    ok(&["manipulate", "--checkpoint", p(&ckpt), "--data", p(&test), "--a", "0", "--b", "0", "--mode", "subtract", "--out", p(&man)]);
    assert!(man.join("steps.png").exists());
    assert!(json(&man.join("summary.json"))["foreground_mask_mass"].is_number());

    let ev = f.root.join("eval");
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&test), "--seeds", "3", "--out", p(&ev)]);
    let s = json(&ev.join("summary.json"));
    assert_eq!(s["foreground_ari"]["per_seed"].as_array().unwrap().len(), 3);
    assert!(s["foreground_ari"]["sd"].is_number());

    let oracle_dir = f.root.join("oracle");
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&test), "--oracle", "--out", p(&oracle_dir)]);
    assert_eq!(json(&oracle_dir.join("summary.json"))["foreground_ari"]["mean"], 1.0);

    let refused = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&test), "--ood", p(&test), "--k-test", "3", "--out", p(&f.root.join("ood"))]);
    assert!(!refused.status.success());
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&test), "--ood", p(&test), "--k-test", "4", "--probe-train", p(&f.data("train.bin")), "--out", p(&f.root.join("ood"))]);
    let s = json(&f.root.join("ood").join("summary.json"));
    assert!(s["ood"]["drop"].is_number());
    assert_eq!(s["probe"]["scores"].as_array().unwrap().len(), 5);

    let abl = f.root.join("abl");
    ok(&["ablate", "--checkpoint", p(&ckpt), "--data", p(&test), "--out", p(&abl), "--space.epsilon", "0.05,0.1", "--space.steps", "2", "--limit", "2"]);
    let table = fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);
    assert!(table.lines().skip(1).any(|l| l.ends_with(",true")));

    // Export drops optimizer state and scores identically.
    let exported = f.root.join("exported.ckpt");
    ok(&["export", "--checkpoint", p(&run_dir.join("checkpoint.ckpt")), "--out", p(&exported)]);
    let ev2 = f.root.join("eval2");
    ok(&["eval", "--checkpoint", p(&exported), "--data", p(&test), "--seeds", "3", "--out", p(&ev2)]);
    assert_eq!(fs::read(ev.join("ari.csv")).unwrap(), fs::read(ev2.join("ari.csv")).unwrap());

    let mut bytes = fs::read(&exported).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    let corrupt = f.root.join("corrupt.ckpt");
    fs::write(&corrupt, bytes).unwrap();
    let o = run(&["eval", "--checkpoint", p(&corrupt), "--data", p(&test), "--out", p(&f.root.join("x"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}

fn png_size(path: &Path) -> (u32, u32) {
    let bytes = fs::read(path).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    (w, h)
}
