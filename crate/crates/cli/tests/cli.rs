use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ditune(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ditune"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DFT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let help = ditune(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    let text = stdout(&help);
    for sub in [
        "gen-data",
        "pretrain",
        "ssei",
        "finetune",
        "sample",
        "analyze-schedule",
        "analyze-survival",
        "eval",
    ] {
        assert!(text.contains(sub), "{sub} missing from usage");
    }
    assert_eq!(ditune(&["finetune", "--help"], dir.path()).status.code(), Some(0));

    let unknown = ditune(&["gen-data", "--frobnicate", "3"], dir.path());
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("--frobnicate"));

    let sub = ditune(&["teleport"], dir.path());
    assert_eq!(sub.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&sub.stderr).contains("Usage"));
    assert_eq!(ditune(&[], dir.path()).status.code(), Some(1));

    assert_eq!(
        ditune(&["gen-data", "--count", "many"], dir.path()).status.code(),
        Some(1)
    );
    // Missing files are runtime failures.
    assert_eq!(
        ditune(&["pretrain", "--data", "nope.scn"], dir.path()).status.code(),
        Some(2)
    );
    fs::write(dir.path().join("bad.cfg"), "lr = banana\n").unwrap();
    let bad = ditune(&["pretrain", "--config", "bad.cfg"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 1"));
}

#[test]
fn analyze_schedule_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = ditune(&["analyze-schedule", "--schedule", "linear"], dir.path());
    ok(&out);
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,beta,alpha_bar,snr,schedule_name"));
    assert_eq!(lines.count(), 1000);
    let row500: Vec<&str> = text.lines().nth(500).unwrap().split(',').collect();
    assert_eq!(row500[0], "500");
    let ab: f64 = row500[2].parse().unwrap();
    assert!((ab - 0.0785872).abs() < 1e-6, "{ab}");

    let all = ditune(
        &["analyze-schedule", "--timesteps", "100", "--out", "s.csv"],
        dir.path(),
    );
    ok(&all);
    let text = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 300);
    assert!(dir.path().join("s.csv.manifest.csv").exists());
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let run = |extra: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_ditune"));
        c.args(["gen-data", "--count", "3", "--out", "d.scn"])
            .args(extra)
            .current_dir(dir.path());
        match env {
            Some(v) => c.env("DFT_SEED", v),
            None => c.env_remove("DFT_SEED"),
        };
        let out = c.output().unwrap();
        ok(&out);
        (
            fs::read(dir.path().join("d.scn")).unwrap(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        )
    };
    let (s7, log) = run(&["--seed", "7"], None);
    assert!(log.contains("seed = 7"), "{log}");
    let (env7, log) = run(&[], Some("7"));
    assert!(log.contains("seed = 7"));
    assert_eq!(s7, env7);
    let (flag_wins, log) = run(&["--seed", "8"], Some("7"));
    assert!(log.contains("seed = 8"));
    assert_ne!(flag_wins, s7);
    let (default, _) = run(&[], None);
    assert_ne!(default, s7);
}

/// gen-data → pretrain → ssei → finetune → eval at a tiny size, then a replay
/// of the fine-tune from its manifest.
#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("small.cfg"),
        "# tiny model so the run takes seconds\n\
         dim = 16\ndepth = 1\nheads = 2\nmlp_ratio = 2\ntimesteps = 50\n\
         steps = 6\nbatch = 4\nlr = 0.001\ntau = 5\nrank = 2\nn = 8\nk = 2\nt_probe = 20\n",
    )
    .unwrap();
    ok(&ditune(
        &[
            "gen-data", "--kind", "source", "--count", "40", "--seed", "1", "--out", "src.scn",
        ],
        p,
    ));
    ok(&ditune(
        &[
            "gen-data",
            "--kind",
            "target",
            "--count",
            "30",
            "--seed",
            "2",
            "--out",
            "tgt.scn",
            "--ppm-dir",
            "ppm",
        ],
        p,
    ));
    ok(&ditune(
        &[
            "gen-data", "--kind", "target", "--count", "45", "--seed", "3", "--out", "real.scn",
        ],
        p,
    ));
    assert_eq!(fs::read_dir(p.join("ppm")).unwrap().count(), 30);
    let ppm = fs::read(p.join("ppm/target_00000_l0.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(ppm.len(), b"P6\n32 32\n255\n".len() + 32 * 32 * 3);

    ok(&ditune(
        &[
            "pretrain",
            "--config",
            "small.cfg",
            "--data",
            "src.scn",
            "--out",
            "pre.dft",
        ],
        p,
    ));
    let trace = fs::read_to_string(p.join("pre.dft.trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,loss,schedule_power"));
    assert_eq!(trace.lines().count(), 7);

    let ssei = ditune(&["ssei", "--source", "src.scn", "--data", "tgt.scn"], p);
    ok(&ssei);
    let table = stdout(&ssei);
    assert_eq!(
        table.lines().next(),
        Some("condition_id,assigned_source_class,cosine_similarity")
    );
    assert_eq!(table.lines().count(), 6);

    let ft_args = [
        "finetune",
        "--config",
        "small.cfg",
        "--ckpt",
        "pre.dft",
        "--data",
        "tgt.scn",
        "--source",
        "src.scn",
        "--seed",
        "4",
        "--out",
        "ft.dft",
    ];
    ok(&ditune(&ft_args, p));
    let trace = fs::read_to_string(p.join("ft.dft.trace.csv")).unwrap();
    let powers: Vec<&str> = trace.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(powers, ["6", "5", "4", "3", "2", "2"]);

    ok(&ditune(
        &[
            "sample",
            "--ckpt",
            "ft.dft",
            "--condition",
            "12",
            "--n",
            "2",
            "--out",
            "draws",
        ],
        p,
    ));
    assert!(p.join("draws/row12_0001.ppm").exists());
    assert_eq!(
        ditune(&["sample", "--ckpt", "ft.dft", "--condition", "15"], p)
            .status
            .code(),
        Some(1)
    );

    let eval = ditune(
        &[
            "eval",
            "--config",
            "small.cfg",
            "--real",
            "real.scn",
            "--ckpt",
            "ft.dft",
            "--out",
            "ev",
        ],
        p,
    );
    ok(&eval);
    let metrics = fs::read_to_string(p.join("ev/metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("frechet_distance,precision,recall,object_region_mse,trainable_param_fraction,runtime_seconds")
    );
    let values: Vec<f64> = metrics
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(values[4] > 0.0 && values[4] < 1.0);
    assert_eq!(fs::read_dir(p.join("ev/samples")).unwrap().count(), 5 * 8);

    // Pretrained checkpoints need the source data to map conditions.
    assert_eq!(
        ditune(&["eval", "--real", "real.scn", "--ckpt", "pre.dft", "--n", "8"], p)
            .status
            .code(),
        Some(1)
    );
    let pre_eval = [
        "eval", "--real", "real.scn", "--ckpt", "pre.dft", "--source", "src.scn", "--n", "8", "--out", "ev0",
    ];
    assert_eq!(
        ditune(&pre_eval, p).status.code(),
        Some(1),
        "default probe level exceeds a 50-step horizon"
    );
    ok(&ditune(&[&pre_eval[..], &["--t-probe", "20"]].concat(), p));

    let survival = ditune(&["analyze-survival", "--data", "real.scn", "--timesteps", "100"], p);
    ok(&survival);
    let text = stdout(&survival);
    assert_eq!(text.lines().next(), Some("schedule,bucket,boxes,mean_survival"));
    assert_eq!(text.lines().count(), 7);

    // Replaying the manifest reproduces the checkpoint bitwise.
    let first = fs::read(p.join("ft.dft")).unwrap();
    fs::copy(p.join("ft.dft.manifest.csv"), p.join("replay.csv")).unwrap();
    fs::remove_file(p.join("ft.dft")).unwrap();
    ok(&ditune(&["finetune", "--replay", "replay.csv"], p));
    assert_eq!(fs::read(p.join("ft.dft")).unwrap(), first);
    assert_eq!(
        ditune(&["pretrain", "--replay", "replay.csv"], p).status.code(),
        Some(1)
    );
}
