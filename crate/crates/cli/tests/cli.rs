use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdmamba::checkpoint::{load, write_checkpoint};
use cdmamba::config::RunConfig;
use cdmamba::data::{load_label, Mask};
use cdmamba::model::CdMamba;
use cdmamba::train::{evaluate, metrics, predict};

const SMALL: &str = "\
synthetic = true
n = 4
size = 16
epochs = 3
batch_size = 2
stem_channels = 4
stage_channels = 4,8,8,8
stage_depths = 1,1,1,1
state_size = 2
";

fn cdmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdmamba"))
        .args(args)
        .env("CDMAMBA_THREADS", "2")
        .output()
        .expect("spawn cdmamba")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Trains the small config into `dir/name` and returns that directory.
fn train_small(dir: &Path, name: &str, config: &Path) -> PathBuf {
    let out = dir.join(name);
    let o = cdmamba(&["train", "--config", s(config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.txt");
    fs::write(&path, SMALL).unwrap();
    path
}

#[test]
fn train_is_deterministic_and_resolved_config_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = train_small(dir.path(), "a", &cfg);
    let b = train_small(dir.path(), "b", &cfg);
    for f in ["model.ckpt", "best.ckpt", "log.csv", "resolved_config.txt"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(a.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
    assert_eq!(log, fs::read_to_string(b.join("log.csv")).unwrap());

    let resolved = fs::read_to_string(a.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("lambda1 = 0.5\n") && resolved.contains("lambda2 = 0.5\n"));
    let c = train_small(dir.path(), "c", &a.join("resolved_config.txt"));
    assert_eq!(log, fs::read_to_string(c.join("log.csv")).unwrap());
    // The checkpoints differ only in the recorded out_dir.
    let (ca, _, wa) = load(&a.join("model.ckpt")).unwrap();
    let (cb, _, wb) = load(&b.join("model.ckpt")).unwrap();
    assert_ne!(ca.out_dir, cb.out_dir);
    assert_eq!(ca.train, cb.train);
    for (x, y) in wa.iter().zip(wb.iter()) {
        assert_eq!(x.value, y.value, "{}", x.name);
    }
}

#[test]
fn eval_prints_the_library_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = train_small(dir.path(), "run", &cfg);
    let report_dir = dir.path().join("report");
    let o = cdmamba(&["eval", "--checkpoint", s(&run.join("model.ckpt")), "--out", s(&report_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);

    let (rc, model, store) = load(&run.join("model.ckpt")).unwrap();
    let data = cdmamba::data::synth_generate(rc.n, rc.size, rc.train.seed).unwrap();
    let (counts, empty) = evaluate(&model, &store, &data).unwrap();
    let first = text.lines().next().unwrap();
    assert_eq!(first, metrics(&counts).to_string());
    assert!(text.contains(&format!("samples 4  empty-label samples {empty}")), "{text}");
    for field in first.split_whitespace().skip(1).step_by(2) {
        assert_eq!(field.split('.').nth(1).map(str::len), Some(2), "{first}");
    }
    assert_eq!(fs::read_to_string(report_dir.join("metrics.txt")).unwrap(), text);
}

#[test]
fn predict_writes_masks_and_overlays_only_where_labelled() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = train_small(dir.path(), "run", &cfg);
    let ds = dir.path().join("pairs");
    let o = cdmamba(&["synth", "--config", s(&cfg), "--seed", "9", "--out", s(&ds)]);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::remove_file(ds.join("label").join("synth_0002.png")).unwrap();

    let out = dir.path().join("pred");
    let o = cdmamba(&["predict", "--checkpoint", s(&run.join("model.ckpt")), "--data", s(&ds), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("4 masks, 3 overlays"), "{}", stdout(&o));
    assert!(!out.join("overlays").join("synth_0002.png").exists());

    // Overlay colours follow the mask against the label, pixel by pixel.
    let (_, model, store) = load(&run.join("model.ckpt")).unwrap();
    let (t1, t2) = cdmamba::data::load_images(&ds, "synth_0001").unwrap();
    let pred = predict(&model, &store, &t1, &t2).unwrap();
    let gt = load_label(&ds, "synth_0001", 16, 16).unwrap();
    let mask = image::open(out.join("masks").join("synth_0001.png")).unwrap().to_luma8();
    assert_eq!(mask.as_raw(), &pred.iter().map(|&p| p * 255).collect::<Vec<u8>>());
    let overlay = image::open(out.join("overlays").join("synth_0001.png")).unwrap().to_rgb8();
    for (i, px) in overlay.pixels().enumerate() {
        let want = match (pred[i], gt.data[i]) {
            (1, 1) => [255, 255, 255],
            (0, 0) => [0, 0, 0],
            (1, 0) => [255, 0, 0],
            _ => [0, 255, 0],
        };
        assert_eq!(px.0, want, "pixel {i}");
    }

    fs::remove_dir_all(ds.join("label")).unwrap();
    let out = dir.path().join("pred_nolabel");
    let o = cdmamba(&["predict", "--checkpoint", s(&run.join("model.ckpt")), "--data", s(&ds), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("4 masks, 0 overlays"));
    assert!(!out.join("overlays").exists());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "epochs = 2\nbogus_key = 1\n").unwrap();
    let o = cdmamba(&["train", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus_key"));

    let o = cdmamba(&["train", "--nonsense"]);
    assert_eq!(o.status.code(), Some(1));

    let missing = dir.path().join("missing.txt");
    fs::write(&missing, format!("data_dir = {}\n", dir.path().join("nowhere").display())).unwrap();
    let o = cdmamba(&["train", "--config", s(&missing)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere"));

    let o = cdmamba(&["eval", "--checkpoint", s(&dir.path().join("none.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn incompatible_checkpoint_cites_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let mut written = RunConfig::parse(SMALL).unwrap();
    let (_, store) = CdMamba::new(&written.model, 0).unwrap();
    // Same parameter names, different state size.
    written.model.state_size = 3;
    let path = dir.path().join("mismatch.ckpt");
    write_checkpoint(fs::File::create(&path).unwrap(), &written, &store).unwrap();
    let o = cdmamba(&["eval", "--checkpoint", s(&path)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("model expects") && err.contains("checkpoint has"), "{err}");
}

#[test]
fn gradcheck_primitives_passes() {
    let o = cdmamba(&["gradcheck", "--scope", "primitives"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("primitives: PASS"), "{text}");
    assert!(text.contains("matmul") && text.contains("conv2d"));
    assert_eq!(cdmamba(&["gradcheck", "--scope", "everything"]).status.code(), Some(1));
}

#[test]
fn perfect_predictions_print_all_hundreds() {
    let gt = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
    let m = metrics(&cdmamba::train::confusion(&gt.data, &gt.data).unwrap());
    assert_eq!(m.to_string(), "Pre 100.00  Rec 100.00  F1 100.00  IoU 100.00  OA 100.00");
}
