use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bivex::image::GrayImage;
use bivex::persistence::Checkpoint;
use bivex::{Model, ModelFlags};

fn bivex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bivex"))
        .args(args)
        .env_remove("BIVEX_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn planted_checkpoint(dir: &Path) -> std::path::PathBuf {
    let file = dir.join("planted.ckpt");
    Checkpoint::of_model(Model::planted("abc", ModelFlags::BASELINE).unwrap())
        .save(&file)
        .unwrap();
    file
}

#[test]
fn generate_writes_images_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let o = bivex(&["generate", "--count", "10", "--vertical-frac", "0.5", "--seed", "7", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 10);
    let manifest = fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains("\tvertical\t")).count(), 5);
    assert!(stderr(&o).contains("effective: bivex generate --count 10 --vertical-frac 0.5 --seed 7"));
}

#[test]
fn help_is_success_and_bad_usage_is_two() {
    let o = bivex(&["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("Usage"));
    assert_eq!(bivex(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(bivex(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bivex(&["generate", "--count", "ten"]).status.code(), Some(2));
    // missing output directory
    assert_eq!(bivex(&["generate", "--count", "3"]).status.code(), Some(2));
    assert_eq!(bivex(&["generate", "--vertical-frac", "2", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    let out = tmp.path().join("d");
    fs::write(&cfg, format!("# corpus\ncount=4\nseed=3\nout={}\n", path(&out))).unwrap();
    let o = bivex(&["--config", path(&cfg), "generate", "--count", "6"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 6);
    assert!(stderr(&o).contains("--count 6 --vertical-frac 0.5 --seed 3"));

    fs::write(&cfg, "count=4\ncolour=blue\n").unwrap();
    let o = bivex(&["--config", path(&cfg), "generate", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key colour"));
}

#[test]
fn workers_fall_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let o = Command::new(env!("CARGO_BIN_EXE_bivex"))
        .args(["generate", "--count", "4", "--out", path(&out)])
        .env("BIVEX_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("--workers 2"));
}

#[test]
fn infer_prints_planted_label_and_direction() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = planted_checkpoint(tmp.path());
    let wide = tmp.path().join("wide.pgm");
    GrayImage::filled(60, 20, 200).write_pgm(&wide).unwrap();
    let tall = tmp.path().join("tall.pgm");
    GrayImage::filled(20, 60, 200).write_pgm(&tall).unwrap();

    let o = bivex(&["infer", path(&ckpt), path(&wide)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "abc\thorizontal\n");
    let o = bivex(&["infer", path(&ckpt), path(&tall)]);
    assert_eq!(stdout(&o), "abc\tvertical\n");

    let lexicon = tmp.path().join("words.txt");
    fs::write(&lexicon, "abd\nxyz\n").unwrap();
    let o = bivex(&["infer", path(&ckpt), path(&wide), "--lexicon", path(&lexicon)]);
    assert_eq!(stdout(&o), "abd\thorizontal\n");
}

#[test]
fn infer_dumps_one_map_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = planted_checkpoint(tmp.path());
    let img = tmp.path().join("w.pgm");
    GrayImage::filled(60, 20, 90).write_pgm(&img).unwrap();
    let maps = tmp.path().join("maps");
    let o = bivex(&["infer", path(&ckpt), path(&img), "--dump-attention", path(&maps)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(&maps)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["t0_a.pgm", "t1_b.pgm", "t2_c.pgm", "t3_eos.pgm"]);
    let map = GrayImage::read_pgm(&maps.join("t0_a.pgm")).unwrap();
    assert_eq!((map.width(), map.height()), (100, 32));
}

#[test]
fn runtime_failures_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = planted_checkpoint(tmp.path());
    let o = bivex(&["infer", path(&ckpt), path(&tmp.path().join("missing.pgm"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.pgm"));

    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"definitely not a checkpoint").unwrap();
    let o = bivex(&["describe", path(&junk)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad magic"));
}

#[test]
fn describe_lists_tensors() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = planted_checkpoint(tmp.path());
    let o = bivex(&["describe", path(&ckpt)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("decoder.lstm.w_x"));
}

#[test]
fn gradcheck_reports_every_op() {
    let o = bivex(&["gradcheck", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    for op in ["matmul", "conv2d", "maxpool", "lstm_step", "softmax", "cross_entropy", "attend", "model:san"] {
        assert!(text.lines().any(|l| l.starts_with(op) && l.ends_with("ok")), "{op}\n{text}");
    }
}

#[test]
fn train_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let run = tmp.path().join("run");
    assert_eq!(bivex(&["generate", "--count", "6", "--seed", "2", "--out", path(&data)]).status.code(), Some(0));
    let o = bivex(&[
        "train", "--train", path(&data), "--val", path(&data), "--use-san", "--iters", "3", "--val-interval", "2",
        "--batch", "2", "--out", path(&run),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3, "{report}");
    assert!(run.join("last.ckpt").exists());

    let o = bivex(&[
        "train", "--train", path(&data), "--val", path(&data), "--use-san", "--iters", "5", "--val-interval", "2",
        "--batch", "2", "--out", path(&run), "--resume", path(&run.join("last.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // resuming under different flags is refused
    let o = bivex(&[
        "train", "--train", path(&data), "--val", path(&data), "--iters", "5", "--out", path(&run),
        "--resume", path(&run.join("last.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let csv = tmp.path().join("eval.csv");
    let o = bivex(&["eval", path(&run.join("best.ckpt")), path(&data), "--lexicon", "50", "--out", path(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("lexicon: 50"));
    assert!(stdout(&o).contains("overall:"));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 7);
}

#[test]
fn kernel_swap_requires_mask() {
    let o = bivex(&["train", "--dem-kernel-swap", "--train", "a", "--val", "b", "--out", "c"]);
    assert_eq!(o.status.code(), Some(2));
}
