use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
screen.width = 16
screen.height = 16
vision.patch = 8
vision.d_i = 8
vision.heads = 2
qformer.d_q = 8
qformer.layers = 1
qformer.heads = 2
qformer.max_text_tokens = 32
decoder.d_l = 16
decoder.layers = 1
decoder.heads = 2
crops = 2
train.lr = 0.003
train.epochs = 2
train.batch_size = 4
data.click = 3
data.type = 2
data.scroll = 2
data.multi = 2
";

fn afragent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afragent"))
        .args(args)
        .env_remove("AFR_SEED")
        .output()
        .expect("run afragent")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("tiny.cfg");
        let mut all = vec!["--config", s(&cfg)];
        all.extend_from_slice(args);
        afragent(&all)
    }

    fn gen(&self, name: &str, seed: &str) -> std::path::PathBuf {
        let p = self.path(name);
        ok(&self.run(&["gen-data", "--out", s(&p), "--seed", seed]));
        p
    }
}

#[test]
fn gen_data_is_deterministic_and_counts_match() {
    let w = Workspace::new();
    let a = w.gen("a.jsonl", "3");
    let b = w.gen("b.jsonl", "3");
    let c = w.gen("c.jsonl", "4");
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_ne!(bytes, fs::read(&c).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    let first = text.lines().next().unwrap();
    let header: serde_json::Value = serde_json::from_str(first).unwrap();
    assert_eq!(header["format"], "afr-episodes");
    let out = ok(&w.run(&["gen-data", "--out", s(&w.path("d.jsonl")), "--seed", "3"]));
    let total: usize = out
        .lines()
        .find_map(|l| l.strip_prefix("total\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(total, text.lines().count() - 1);
    assert_eq!(total, 9);
}

#[test]
fn seed_falls_back_to_environment() {
    let w = Workspace::new();
    let flag = w.gen("flag.jsonl", "11");
    let env_path = w.path("env.jsonl");
    let cfg = w.path("tiny.cfg");
    let out = Command::new(env!("CARGO_BIN_EXE_afragent"))
        .args(["--config", s(&cfg), "gen-data", "--out", s(&env_path)])
        .env("AFR_SEED", "11")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(fs::read(flag).unwrap(), fs::read(env_path).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let w = Workspace::new();
    let out = w.path("x.jsonl");
    assert_eq!(
        w.run(&["gen-data", "--out", s(&out), "--vision.patchsize", "4"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        w.run(&["gen-data", "--out", s(&out), "--fusion.low", "mixed"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        w.run(&["gen-data", "--out", s(&out), "--vision.patch", "5"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(w.run(&["frobnicate"]).status.code(), Some(2));
    let bad = w.path("bad.cfg");
    fs::write(&bad, "seed = 1\nnot a pair\n").unwrap();
    assert_eq!(afragent(&["--config", s(&bad), "flops"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_derivative() {
    let out = ok(&afragent(&["gradcheck"]));
    for block in ["numerics", "qformer", "afr", "agent"] {
        assert!(out.lines().any(|l| l.starts_with(block)), "{out}");
    }
    ok(&afragent(&["gradcheck", "--seed", "9"]));
    let bad = afragent(&["gradcheck", "--fault", "gelu"]);
    assert_eq!(bad.status.code(), Some(5));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("gelu"), "{err}");
}

#[test]
fn flops_prints_both_resolutions() {
    let out = ok(&afragent(&["flops", "--full-size"]));
    assert!(out.contains("cross_attn=3029336064"), "{out}");
    let summary = out.lines().find(|l| l.starts_with("summary")).unwrap();
    let field = |k: &str| -> u64 {
        summary
            .split_whitespace()
            .find_map(|t| t.strip_prefix(k))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(field("high_macs=") > field("low_macs="));
    ok(&Workspace::new().run(&["flops"]));
}

fn log_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,step,loss,val_step_acc"));
    lines.map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn train_resume_and_evaluate() {
    let w = Workspace::new();
    let train = w.gen("train.jsonl", "1");
    let val = w.gen("val.jsonl", "2");
    let run = w.path("run");
    ok(&w.run(&["train", "--data", s(&train), "--val", s(&val), "--out", s(&run)]));
    let ckpt = run.join("best.ckpt");
    assert!(ckpt.exists() && run.join("last.ckpt").exists());
    let rows = log_rows(&run.join("train_log.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0", "1", "2"]);
    assert!(rows
        .iter()
        .all(|r| r.len() == 4 && r[2].parse::<f64>().unwrap().is_finite()));

    let resumed = ok(&w.run(&[
        "train",
        "--data",
        s(&train),
        "--val",
        s(&val),
        "--out",
        s(&run),
        "--resume",
        s(&run.join("last.ckpt")),
        "--train.epochs",
        "3",
    ]));
    assert!(resumed.contains("epoch 3 "), "{resumed}");
    let rows = log_rows(&run.join("train_log.csv"));
    assert_eq!(
        rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(),
        ["0", "1", "2", "3"]
    );
    assert_eq!(
        rows[3][1].parse::<u64>().unwrap(),
        3 * rows[1][1].parse::<u64>().unwrap()
    );

    let reports = w.path("reports");
    let preds = w.path("preds.jsonl");
    let text = ok(&w.run(&[
        "eval",
        "--data",
        s(&val),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&reports),
        "--closed-loop",
        "--predictions-out",
        s(&preds),
    ]));
    assert!(text.contains("step"), "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(reports.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["episodes"], 9);
    let steps: usize = fs::read_to_string(&val)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["steps"]
                .as_array()
                .unwrap()
                .len()
        })
        .sum();
    assert_eq!(report["steps"].as_u64().unwrap() as usize, steps);
    assert!(reports.join("report.txt").exists() && reports.join("report_closed_loop.json").exists());

    let rescored = w.path("rescored");
    ok(&w.run(&[
        "eval",
        "--data",
        s(&val),
        "--predictions",
        s(&preds),
        "--out",
        s(&rescored),
    ]));
    assert_eq!(
        fs::read_to_string(rescored.join("report.json")).unwrap(),
        fs::read_to_string(reports.join("report.json")).unwrap()
    );
}

#[test]
fn identity_fusion_gives_identical_epoch_zero() {
    let w = Workspace::new();
    let train = w.gen("train.jsonl", "1");
    let val = w.gen("val.jsonl", "2");
    let mut rows = Vec::new();
    for fusion in ["afr", "none"] {
        let dir = w.path(fusion);
        ok(&w.run(&[
            "train",
            "--data",
            s(&train),
            "--val",
            s(&val),
            "--out",
            s(&dir),
            "--train.epochs",
            "1",
            "--fusion.low",
            fusion,
        ]));
        rows.push(log_rows(&dir.join("train_log.csv"))[0].clone());
    }
    assert_eq!(rows[0], rows[1]);
}

#[test]
fn oracle_predictions_score_perfectly() {
    let w = Workspace::new();
    let data = w.gen("data.jsonl", "5");
    let preds = w.path("oracle.jsonl");
    let lines: Vec<String> = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let e: serde_json::Value = serde_json::from_str(l).unwrap();
            let actions: Vec<serde_json::Value> = e["steps"]
                .as_array()
                .unwrap()
                .iter()
                .map(|st| st["action"].clone())
                .collect();
            serde_json::json!({"id": e["id"], "actions": actions}).to_string()
        })
        .collect();
    fs::write(&preds, lines.join("\n")).unwrap();
    let out = w.path("out");
    ok(&w.run(&["eval", "--data", s(&data), "--predictions", s(&preds), "--out", s(&out)]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["step_accuracy"], 1.0);
    assert_eq!(report["completion_rate"], 1.0);
    assert_eq!(report["episodes"], 9);

    fs::write(&preds, lines[1..].join("\n")).unwrap();
    let missing = w.run(&["eval", "--data", s(&data), "--predictions", s(&preds), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn mismatched_artifacts_exit_4_and_predict_decodes() {
    let w = Workspace::new();
    let train = w.gen("train.jsonl", "1");
    let run = w.path("run");
    ok(&w.run(&["train", "--data", s(&train), "--out", s(&run), "--train.epochs", "1"]));
    let ckpt = run.join("best.ckpt");

    let wide = w.path("wide.jsonl");
    ok(&w.run(&["gen-data", "--out", s(&wide), "--screen.width", "32"]));
    let out = w.path("out");
    let e = w.run(&["eval", "--data", s(&wide), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert_eq!(e.status.code(), Some(4), "{}", String::from_utf8_lossy(&e.stderr));
    let t = w.run(&[
        "train",
        "--data",
        s(&wide),
        "--out",
        s(&w.path("r2")),
        "--resume",
        s(&ckpt),
    ]);
    assert_eq!(t.status.code(), Some(4));

    let ppm = w.path("screen.ppm");
    let mut bytes = b"P6\n16 32\n255\n".to_vec();
    bytes.extend((0..16 * 32 * 3).map(|i| (i % 251) as u8));
    fs::write(&ppm, &bytes).unwrap();
    let args = [
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--screen",
        s(&ppm),
        "--goal",
        "click the red button",
    ];
    let first = ok(&w.run(&args));
    assert_eq!(first.lines().count(), 1);
    let mut with_history = args.to_vec();
    with_history.extend(["--history", "click b10 b20; scroll down"]);
    ok(&w.run(&with_history));
    assert_eq!(ok(&w.run(&args)), first);

    let mut small = b"P6\n8 8\n255\n".to_vec();
    small.extend([0u8; 8 * 8 * 3]);
    fs::write(&ppm, &small).unwrap();
    assert_eq!(w.run(&args).status.code(), Some(4));
}

#[test]
fn exploding_learning_rate_exits_3() {
    let w = Workspace::new();
    let train = w.gen("train.jsonl", "1");
    let out = w.run(&[
        "train",
        "--data",
        s(&train),
        "--out",
        s(&w.path("run")),
        "--train.lr",
        "1e300",
        "--train.epochs",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
