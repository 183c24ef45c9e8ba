use std::path::Path;
use std::process::{Command, Output};

fn dsmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsmoe"))
        .args(args)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Parses the `(activated / total)` tail of a count-params row.
fn counts(row: &str) -> (f64, f64) {
    let tail = row.rsplit('(').next().unwrap().trim_end().trim_end_matches(')');
    let mut it = tail.split(" / ").map(|s| s.trim().parse::<f64>().unwrap());
    (it.next().unwrap(), it.next().unwrap())
}

#[test]
fn count_params_small_preset() {
    let o = dsmoe(&["count-params", "--config", "presets/dsmoe-s-e16"]);
    assert!(o.status.success());
    let (activated, total) = counts(&stdout(&o));
    assert!((total / 92e6 - 1.0).abs() <= 0.05, "{total}");
    assert!((activated / 33e6 - 1.0).abs() <= 0.05, "{activated}");
}

#[test]
fn shipped_presets_validate() {
    for name in [
        "dsmoe-s-e16",
        "dsmoe-s-e48",
        "dsmoe-b-e16",
        "dsmoe-b-e48",
        "dsmoe-l-e16",
        "dsmoe-l-e48",
        "dsmoe-3b-e16",
        "jitmoe-b16-e16",
        "jitmoe-l16-e16",
        "dsmoe-tiny",
    ] {
        let path = format!("presets/{name}.toml");
        let o = dsmoe(&["validate-config", "--config", &path]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stdout(&o));
        assert_eq!(stdout(&o).trim(), "ok");
    }
}

#[test]
fn bad_invocations_exit_codes() {
    let twice = dsmoe(&["validate-config", "--config", "presets/dsmoe-s-e16", "--ablation", "s0a3", "--ablation", "s0a3"]);
    assert_eq!(twice.status.code(), Some(1));
    assert!(stdout(&twice).contains("violation"));
    assert_eq!(dsmoe(&["count-params", "--nope"]).status.code(), Some(2));
    assert_eq!(dsmoe(&["count-params", "--config", "no/such/file.toml"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = 3\n").unwrap();
    assert_eq!(dsmoe(&["validate-config", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn train_sample_analyze_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let run = d("run");
    let o = dsmoe(&["train", "--config", "presets/dsmoe-tiny", "--steps", "4", "--batch-size", "2", "--lr", "1e-3", "--out", &run, "--checkpoint-every", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "step,loss,grad_norm,load_std_layer_0,load_std_layer_1,experts_active_fraction");
    assert_eq!(lines.count(), 4);
    assert!(dir.path().join("run/checkpoint-2.dsmk").is_file());
    let ckpt = d("run/checkpoint.dsmk");

    // resuming appends to the same metrics file
    let o = dsmoe(&["train", "--checkpoint", &ckpt, "--steps", "2", "--out", &run]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7);
    assert!(metrics.lines().last().unwrap().starts_with("6,"));

    let common = ["sample", "--checkpoint", &ckpt, "--num-samples", "3", "--ode-steps", "3", "--seed", "4"];
    let mut a: Vec<&str> = common.to_vec();
    let (oa, ob) = (d("a"), d("b"));
    a.extend(["--cfg-scale", "1.0", "--out", &oa]);
    let mut b: Vec<&str> = common.to_vec();
    b.extend(["--cfg-scale", "1.0", "--cfg-interval", "0.1,1", "--out", &ob]);
    assert!(dsmoe(&a).status.success());
    assert!(dsmoe(&b).status.success());
    let (fa, fb) = (read_dir_sorted(&dir.path().join("a")), read_dir_sorted(&dir.path().join("b")));
    let images = |f: &[(String, Vec<u8>)]| f.iter().filter(|(n, _)| n.ends_with(".ppm")).cloned().collect::<Vec<_>>();
    assert_eq!(images(&fa).len(), 3);
    assert_eq!(images(&fa), images(&fb));
    assert!(images(&fa)[0].1.starts_with(b"P6\n8 8\n255\n"));
    assert!(String::from_utf8_lossy(&fa[0].1).starts_with("file,class,seed,solver"));

    let traces = d("traces.csv");
    let mut t: Vec<&str> = common.to_vec();
    let oc = d("c");
    t.extend(["--out", &oc, "--traces", &traces]);
    assert!(dsmoe(&t).status.success());
    for out in ["u1", "u2"] {
        let o = dsmoe(&["analyze", "--traces", &traces, "--out", &d(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let u1 = read_dir_sorted(&dir.path().join("u1"));
    assert_eq!(u1, read_dir_sorted(&dir.path().join("u2")));
    assert_eq!(u1.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["usage_by_class.csv", "usage_by_layer.csv"]);

    let (g1, g2) = (d("g1"), d("g2"));
    for out in [&g1, &g2] {
        let o = dsmoe(&["analyze", "--checkpoint", &ckpt, "--num-samples", "1", "--ode-steps", "2", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read_dir_sorted(Path::new(&g1)), read_dir_sorted(Path::new(&g2)));
}
