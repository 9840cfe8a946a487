use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn motionkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motionkit"))
        .args(args)
        .env_remove("MOTIONKIT_VLM_ENDPOINT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Two characters with 16-frame clips, a pair file and a tiny config.
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let f = Self { dir };
        for (name, seed, torso) in [("src", "0", "1.0"), ("tgt", "1", "1.6")] {
            ok(&motionkit(&[
                "make-character",
                "--seed",
                seed,
                "--name",
                name,
                "--torso-scale",
                torso,
                "--frames",
                "16",
                "--motions",
                s(&f.path("clips")),
                "--out",
                s(&f.path(&format!("{name}.json"))),
            ]));
        }
        std::fs::write(f.path("pair.json"), r#"{"source": "src.json", "target": "tgt.json"}"#).unwrap();
        std::fs::write(
            f.path("tiny.toml"),
            "epochs = 1\nmax_steps = 1\nbatch_size = 2\nwindow = 8\ndeterministic = true\n",
        )
        .unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn clip(&self, character: &str, style: &str) -> PathBuf {
        self.path(&format!("clips/{character}_{style}.json"))
    }

    fn pretrain(&self) -> PathBuf {
        let ck = self.path("pre.ckpt");
        let mut args = vec![
            "pretrain".to_string(),
            "--config".into(),
            s(&self.path("tiny.toml")).into(),
            "--character".into(),
            s(&self.path("src.json")).into(),
            "--character".into(),
            s(&self.path("tgt.json")).into(),
            "--out".into(),
            s(&ck).into(),
        ];
        for c in ["src", "tgt"] {
            for style in ["walk", "wave"] {
                args.push("--motion".into());
                args.push(s(&self.clip(c, style)).into());
            }
        }
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&motionkit(&refs));
        ck
    }
}

#[test]
fn make_character_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ok(&motionkit(&["make-character", "--seed", "5", "--out", s(&a)]));
    ok(&motionkit(&["make-character", "--seed", "5", "--out", s(&b)]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    motionkit::io::load_character(&a).unwrap();
}

#[test]
fn retarget_writes_motion_file() {
    let f = Fixture::new();
    let ck = f.pretrain();
    let out = f.path("out.json");
    let src = f.clip("src", "belly");
    ok(&motionkit(&[
        "retarget",
        "--checkpoint",
        s(&ck),
        "--source",
        s(&src),
        "--pair",
        s(&f.path("pair.json")),
        "--out",
        s(&out),
    ]));
    let rec = motionkit::io::load_motion(&out).unwrap();
    assert_eq!(rec.character, "tgt");
    assert_eq!(rec.motion.frames(), 16);
}

#[test]
fn missing_checkpoint_is_a_validation_error() {
    let f = Fixture::new();
    let out = f.path("out.json");
    let src = f.clip("src", "walk");
    let pair = f.path("pair.json");
    let absent = motionkit(&["retarget", "--source", s(&src), "--pair", s(&pair), "--out", s(&out)]);
    assert_eq!(absent.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&absent.stderr).contains("--checkpoint"));
    let nonexistent = f.path("nope.ckpt");
    let missing = motionkit(&[
        "retarget",
        "--checkpoint",
        s(&nonexistent),
        "--source",
        s(&src),
        "--pair",
        s(&pair),
        "--out",
        s(&out),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--checkpoint"));
    assert!(!out.exists());
}

#[test]
fn bad_config_leaves_no_output() {
    let f = Fixture::new();
    std::fs::write(f.path("bad.toml"), "learning_rate = 0.1\n").unwrap();
    let out = f.path("pre.ckpt");
    let r = motionkit(&[
        "pretrain",
        "--config",
        s(&f.path("bad.toml")),
        "--character",
        s(&f.path("src.json")),
        "--motion",
        s(&f.clip("src", "walk")),
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("learning_rate"));
    assert!(!out.exists());
}

#[test]
fn unknown_subcommand_exits_one() {
    assert_eq!(motionkit(&["teleport"]).status.code(), Some(1));
    assert_eq!(motionkit(&["--help"]).status.code(), Some(0));
}

#[test]
fn render_writes_three_views_per_frame() {
    let f = Fixture::new();
    let dir = f.path("frames");
    ok(&motionkit(&[
        "render",
        "--motion",
        s(&f.clip("tgt", "wave")),
        "--character",
        s(&f.path("tgt.json")),
        "--stride",
        "8",
        "--out",
        s(&dir),
    ]));
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "frame_00000_front.png",
            "frame_00000_left.png",
            "frame_00000_right.png",
            "frame_00008_front.png",
            "frame_00008_left.png",
            "frame_00008_right.png"
        ]
    );
    let png = std::fs::read(dir.join("frame_00000_front.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
}

#[test]
fn render_rejects_mismatched_character() {
    let dir = TempDir::new().unwrap();
    let small = dir.path().join("small.json");
    ok(&motionkit(&["make-character", "--joints", "6", "--out", s(&small)]));
    let f = Fixture::new();
    let out = f.path("frames");
    let r = motionkit(&[
        "render",
        "--motion",
        s(&f.clip("src", "walk")),
        "--character",
        s(&small),
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn finetune_then_evaluate_without_vlm() {
    let f = Fixture::new();
    let pre = f.pretrain();
    let ft = f.path("ft.ckpt");
    let pair = f.path("pair.json");
    ok(&motionkit(&[
        "finetune",
        "--config",
        s(&f.path("tiny.toml")),
        "--checkpoint",
        s(&pre),
        "--pair",
        s(&pair),
        "--motion",
        s(&f.clip("src", "belly")),
        "--log",
        s(&f.path("ft.jsonl")),
        "--out",
        s(&ft),
    ]));
    let log = std::fs::read_to_string(f.path("ft.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let report = f.path("report.json");
    ok(&motionkit(&[
        "evaluate",
        "--checkpoint",
        s(&ft),
        "--pair",
        s(&pair),
        "--source",
        s(&f.clip("src", "belly")),
        "--source",
        s(&f.clip("src", "wave")),
        "--frame-stride",
        "8",
        "--out",
        s(&report),
    ]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["itm"].is_null());
    assert_eq!(v["clips"].as_array().unwrap().len(), 2);
    for key in ["mse_global", "mse_local", "pen_percent", "fid", "scl"] {
        assert!(v[key].as_f64().unwrap().is_finite(), "{key}");
    }
}

#[test]
fn optimize_writes_target_motion() {
    let f = Fixture::new();
    let out = f.path("opt.json");
    ok(&motionkit(&[
        "optimize",
        "--source",
        s(&f.clip("src", "belly")),
        "--pair",
        s(&f.path("pair.json")),
        "--iterations",
        "3",
        "--deterministic",
        "--out",
        s(&out),
    ]));
    assert_eq!(motionkit::io::load_motion(&out).unwrap().motion.frames(), 16);
}
