//! Subcommand dispatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{error::ErrorKind, Arg, ArgMatches, Command};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ditune_core::finetune::{
    embedding_sources, prepare_finetune, select_trainable, train, trainable_fraction, EmbeddingInit, ScheduleSpec,
    TrainConfig, TrainMode, TrainReport,
};
use ditune_core::metrics::{
    frechet_feature_distance, knn_precision_recall, object_region_error, survival_report, MetricReport,
};
use ditune_core::model::{DiT, DiTConfig};
use ditune_core::pipeline::{features_of, generate};
use ditune_core::scene::{source_dataset, target_dataset, SceneSample, SOURCE_CLASSES, TARGET_CONDITIONS};
use ditune_core::schedule::{LinearBetas, NoiseSchedule, DEFAULT_OFFSET};
use ditune_core::ssei::{assign_conditions, SemanticIndex};

use crate::checkpoint::{self, TrainMeta};
use crate::config::{load_config, RunConfig, ScheduleName, KEYS};
use crate::dataset::{self, DataKind, Dataset};
use crate::error::{io_err, CliError, Result};

pub const SEED_ENV: &str = "DFT_SEED";

struct Sub {
    name: &'static str,
    about: &'static str,
    keys: &'static [&'static str],
}

const SUBCOMMANDS: &[Sub] = &[
    Sub {
        name: "gen-data",
        about: "Generate a source or target scene dataset",
        keys: &["kind", "count", "seed", "out", "ppm_dir"],
    },
    Sub {
        name: "pretrain",
        about: "Train a class-conditional model from scratch on source data",
        keys: &[
            "data",
            "steps",
            "lr",
            "batch",
            "weight_decay",
            "seed",
            "dim",
            "depth",
            "heads",
            "mlp_ratio",
            "patch",
            "timesteps",
            "out",
        ],
    },
    Sub {
        name: "ssei",
        about: "Map each target condition to its most similar source class",
        keys: &["source", "data", "out"],
    },
    Sub {
        name: "finetune",
        about: "Adapt a pretrained checkpoint to the target conditions",
        keys: &[
            "ckpt",
            "data",
            "source",
            "mode",
            "steps",
            "lr",
            "batch",
            "weight_decay",
            "tau",
            "lambda",
            "schedule",
            "scos_power",
            "init",
            "rank",
            "seed",
            "out",
        ],
    },
    Sub {
        name: "sample",
        about: "Draw images for one condition row",
        keys: &["ckpt", "condition", "n", "seed", "out"],
    },
    Sub {
        name: "analyze-schedule",
        about: "Tabulate beta, alpha_bar and SNR per step",
        keys: &["schedule", "scos_power", "timesteps", "out"],
    },
    Sub {
        name: "analyze-survival",
        about: "Mean object survival time per box-size bucket",
        keys: &["data", "threshold", "scos_power", "timesteps", "out"],
    },
    Sub {
        name: "eval",
        about: "Sample every target condition and score against real data",
        keys: &["real", "ckpt", "source", "n", "k", "t_probe", "seed", "out"],
    },
];

fn flag_help(key: &str) -> &'static str {
    match key {
        "seed" => "RNG seed (DFT_SEED applies when absent)",
        "out" => "output path",
        "data" => "dataset file (SCN1)",
        "source" => "source dataset file (SCN1)",
        "real" => "held-out target dataset (SCN1)",
        "ckpt" => "checkpoint file (DFT1)",
        "ppm_dir" => "also write every image as a P6 pixmap into this directory",
        "kind" => "source | target",
        "count" => "number of samples",
        "mode" => {
            "pretrain_full | finetune_full | finetune_bias_only | finetune_lowrank_additive | finetune_modulation"
        }
        "steps" => "optimizer steps",
        "lr" => "learning rate",
        "batch" => "batch size",
        "weight_decay" => "decoupled weight decay",
        "tau" => "progressive anneal span in steps",
        "lambda" => "extra loss weight inside object boxes",
        "schedule" => "linear | cos | scos",
        "scos_power" => "cosine power (scos without a power anneals 6 -> 2)",
        "init" => "random | ssei",
        "rank" => "adapter rank",
        "dim" => "model width",
        "depth" => "transformer blocks",
        "heads" => "attention heads",
        "mlp_ratio" => "MLP expansion",
        "patch" => "patch size",
        "timesteps" => "diffusion horizon T",
        "n" => "images per condition",
        "k" => "neighbours for precision/recall",
        "condition" => "embedding row to sample",
        "threshold" => "survival contrast threshold",
        "t_probe" => "noise level for the object-region error",
        _ => "",
    }
}

fn flag_name(key: &str) -> &'static str {
    // clap wants 'static names; the key table is static, so map by hand.
    match key {
        "ppm_dir" => "ppm-dir",
        "weight_decay" => "weight-decay",
        "scos_power" => "scos-power",
        "mlp_ratio" => "mlp-ratio",
        "t_probe" => "t-probe",
        k => KEYS.iter().find(|x| **x == k).copied().unwrap_or("unknown"),
    }
}

pub fn command() -> Command {
    let mut root = Command::new("ditune")
        .about("Parameter-efficient fine-tuning workbench for small diffusion transformers")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for sub in SUBCOMMANDS {
        let mut c = Command::new(sub.name)
            .about(sub.about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("PATH")
                    .help("key = value file; flags override it"),
            )
            .arg(
                Arg::new("replay")
                    .long("replay")
                    .value_name("MANIFEST")
                    .help("reuse the resolved settings of an earlier run"),
            );
        for key in sub.keys {
            c = c.arg(
                Arg::new(*key)
                    .long(flag_name(key))
                    .value_name("VALUE")
                    .help(flag_help(key)),
            );
        }
        root = root.subcommand(c);
    }
    root
}

/// Runs one invocation; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match resolve(name, sub).and_then(|cfg| execute(name, &cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn sub_spec(name: &str) -> &'static Sub {
    SUBCOMMANDS
        .iter()
        .find(|s| s.name == name)
        .expect("registered subcommand")
}

fn resolve(name: &str, m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => load_config(Path::new(p))?,
        None => RunConfig::default(),
    };
    let replay = m.get_one::<String>("replay");
    if let Some(p) = replay {
        apply_manifest(&mut cfg, Path::new(p), name)?;
    }
    let spec = sub_spec(name);
    // A replayed manifest already pins the seed.
    if replay.is_none() && spec.keys.contains(&"seed") && m.get_one::<String>("seed").is_none() {
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.set("seed", &v)
                .map_err(|e| CliError::Usage(format!("{SEED_ENV}: {e}")))?;
        }
    }
    for key in spec.keys {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)
                .map_err(|e| CliError::Usage(format!("--{}: {e}", flag_name(key))))?;
        }
    }
    eprintln!("ditune {name}");
    for key in spec.keys {
        eprintln!("  {key} = {}", cfg.get(key).unwrap_or_default());
    }
    Ok(cfg)
}

/// Resolved settings next to an artifact, as `key,value` CSV rows.
pub fn write_manifest(path: &Path, name: &str, cfg: &RunConfig) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["key", "value"])?;
    w.write_record(["subcommand", name])?;
    for key in sub_spec(name).keys {
        w.write_record([*key, cfg.get(key).unwrap_or_default().as_str()])?;
    }
    w.flush().map_err(io_err(path))
}

fn apply_manifest(cfg: &mut RunConfig, path: &Path, name: &str) -> Result<()> {
    let mut r = csv::Reader::from_path(path)?;
    for rec in r.records() {
        let rec = rec?;
        let (k, v) = (&rec[0], &rec[1]);
        if k == "subcommand" {
            if v != name {
                return Err(CliError::Usage(format!(
                    "manifest {} is for `{v}`, not `{name}`",
                    path.display()
                )));
            }
        } else if !v.is_empty() {
            cfg.set(k, v)
                .map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))?;
        }
    }
    Ok(())
}

fn manifest_beside(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.csv");
    PathBuf::from(s)
}

fn with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn execute(name: &str, cfg: &RunConfig) -> Result<()> {
    match name {
        "gen-data" => gen_data(cfg),
        "pretrain" => pretrain(cfg),
        "ssei" => ssei(cfg),
        "finetune" => finetune(cfg),
        "sample" => sample(cfg),
        "analyze-schedule" => analyze_schedule(cfg),
        "analyze-survival" => analyze_survival(cfg),
        "eval" => eval(cfg),
        other => Err(CliError::Usage(format!("unknown subcommand {other}"))),
    }
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let samples = match cfg.kind {
        DataKind::Source => source_dataset(cfg.count, cfg.seed),
        DataKind::Target => target_dataset(cfg.count, cfg.seed),
    };
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| format!("{}.scn", cfg.kind.name()).into());
    dataset::save(
        &out,
        &Dataset {
            kind: cfg.kind,
            samples: samples.clone(),
        },
    )?;
    if let Some(dir) = &cfg.ppm_dir {
        create_dir(dir)?;
        for (i, s) in samples.iter().enumerate() {
            dataset::write_ppm(
                &dir.join(format!("{}_{i:05}_l{}.ppm", cfg.kind.name(), s.label)),
                &s.image,
            )?;
        }
    }
    write_manifest(&manifest_beside(&out), "gen-data", cfg)?;
    eprintln!(
        "wrote {} {} samples to {}",
        samples.len(),
        cfg.kind.name(),
        out.display()
    );
    Ok(())
}

/// Trace CSV: step, loss, schedule_power (empty for fixed schedules).
pub fn write_trace(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "schedule_power"])?;
    for row in &report.trace {
        let power = row.power.map(|p| p.to_string()).unwrap_or_default();
        w.write_record([row.step.to_string(), row.loss.to_string(), power])?;
    }
    w.flush().map_err(io_err(path))
}

fn train_logged(model: &mut DiT<f32>, data: &[SceneSample], tc: &TrainConfig) -> Result<TrainReport> {
    let start = Instant::now();
    let report = train(model, data, tc)?;
    let n = report.trace.len();
    let window = n.min(50);
    eprintln!(
        "trained {n} steps in {:.1}s: mean loss first {window} {:.5}, last {window} {:.5}",
        start.elapsed().as_secs_f64(),
        report.mean_loss(0..window),
        report.mean_loss(n - window..n)
    );
    Ok(report)
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let data = dataset::load_kind(required(&cfg.data, "data")?, DataKind::Source)?;
    let model_cfg = DiTConfig {
        dim: cfg.dim,
        depth: cfg.depth,
        heads: cfg.heads,
        mlp_ratio: cfg.mlp_ratio,
        patch: cfg.patch,
        steps: cfg.timesteps,
        num_classes: SOURCE_CLASSES,
        ..DiTConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DiT::new(model_cfg, &mut rng)?;
    let tc = TrainConfig {
        mode: TrainMode::PretrainFull,
        steps: cfg.steps.unwrap_or(1000),
        batch_size: cfg.batch,
        learning_rate: cfg.lr,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
        schedule: ScheduleSpec::Linear,
        ..TrainConfig::default()
    };
    let report = train_logged(&mut model, &data, &tc)?;
    let out = cfg.out.clone().unwrap_or_else(|| "pretrained.dft".into());
    checkpoint::save(
        &out,
        &model,
        &TrainMeta {
            mode: TrainMode::PretrainFull,
            schedule: ScheduleSpec::Linear,
        },
    )?;
    write_trace(&with_suffix(&out, ".trace.csv"), &report)?;
    write_manifest(&manifest_beside(&out), "pretrain", cfg)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn ssei(cfg: &RunConfig) -> Result<()> {
    let source = dataset::load_kind(required(&cfg.source, "source")?, DataKind::Source)?;
    let target = dataset::load_kind(required(&cfg.data, "data")?, DataKind::Target)?;
    let s = SemanticIndex::build(&source, SOURCE_CLASSES)?;
    let t = SemanticIndex::build(&target, TARGET_CONDITIONS)?;
    let rows: Vec<[String; 3]> = assign_conditions(&s, &t)?
        .iter()
        .enumerate()
        .map(|(c, a)| [c.to_string(), a.source_class.to_string(), a.similarity.to_string()])
        .collect();
    let header = ["condition_id", "assigned_source_class", "cosine_similarity"];
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.write_record(header)?;
    rows.iter().try_for_each(|r| w.write_record(r))?;
    w.flush().map_err(io_err(Path::new("<stdout>")))?;
    if let Some(out) = &cfg.out {
        let mut f = csv::Writer::from_path(out)?;
        f.write_record(header)?;
        rows.iter().try_for_each(|r| f.write_record(r))?;
        f.flush().map_err(io_err(out))?;
        write_manifest(&manifest_beside(out), "ssei", cfg)?;
    }
    Ok(())
}

/// Training forward process named by the flags.
pub fn finetune_schedule(cfg: &RunConfig) -> ScheduleSpec {
    match (cfg.schedule.unwrap_or(ScheduleName::Scos), cfg.scos_power) {
        (ScheduleName::Linear, _) => ScheduleSpec::Linear,
        (ScheduleName::Cos, p) => ScheduleSpec::CosinePower(p.unwrap_or(2.0)),
        (ScheduleName::Scos, Some(p)) => ScheduleSpec::Scos(p),
        (ScheduleName::Scos, None) => ScheduleSpec::ProgressiveScos,
    }
}

fn finetune(cfg: &RunConfig) -> Result<()> {
    let (base, meta) = checkpoint::load(required(&cfg.ckpt, "ckpt")?)?;
    if meta.mode != TrainMode::PretrainFull {
        return Err(CliError::Usage(format!(
            "--ckpt must be a pretrained checkpoint, found mode {}",
            meta.mode.name()
        )));
    }
    let mode = cfg.mode.unwrap_or(TrainMode::FinetuneModulation);
    if !mode.is_finetune() {
        return Err(CliError::Usage(format!(
            "--mode {} is not a fine-tuning mode",
            mode.name()
        )));
    }
    let target = dataset::load_kind(required(&cfg.data, "data")?, DataKind::Target)?;
    let source = match (&cfg.source, cfg.init) {
        (Some(p), _) => dataset::load_kind(p, DataKind::Source)?,
        (None, EmbeddingInit::Random) => Vec::new(),
        (None, EmbeddingInit::Ssei) => return Err(CliError::Usage("--source is required with --init ssei".into())),
    };
    let sources = embedding_sources(cfg.init, &source, &target, SOURCE_CLASSES, TARGET_CONDITIONS, cfg.seed)?;
    eprintln!("condition rows initialised from source classes {sources:?}");
    let mut model = prepare_finetune(&base, mode, cfg.rank, &sources, cfg.seed)?;
    eprintln!(
        "trainable {} of {} parameters ({:.3}%)",
        model.params().trainable_count(),
        model.params().total_count(),
        100.0 * trainable_fraction(&model)
    );
    let schedule = finetune_schedule(cfg);
    let tc = TrainConfig {
        mode,
        steps: cfg.steps.unwrap_or(500),
        batch_size: cfg.batch,
        learning_rate: cfg.lr,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
        tau: cfg.tau,
        osl_lambda: cfg.lambda,
        schedule,
        linear: None,
    };
    let report = train_logged(&mut model, &target, &tc)?;
    let out = cfg.out.clone().unwrap_or_else(|| "finetuned.dft".into());
    checkpoint::save(&out, &model, &TrainMeta { mode, schedule })?;
    write_trace(&with_suffix(&out, ".trace.csv"), &report)?;
    write_manifest(&manifest_beside(&out), "finetune", cfg)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// Schedule a checkpoint should be sampled with: the last one it trained on.
pub fn sampling_schedule(model: &DiT<f32>, meta: &TrainMeta) -> Result<NoiseSchedule> {
    let t = model.config().steps;
    Ok(meta.schedule.final_schedule(t, LinearBetas::scaled_for(t))?)
}

fn sample(cfg: &RunConfig) -> Result<()> {
    let (model, meta) = checkpoint::load(required(&cfg.ckpt, "ckpt")?)?;
    let sched = sampling_schedule(&model, &meta)?;
    let rows = model.embeddings().rows();
    if cfg.condition >= rows {
        return Err(CliError::Usage(format!(
            "--condition {} out of range (model has {rows} rows)",
            cfg.condition
        )));
    }
    let images = generate(&model, &sched, &[cfg.condition], cfg.n, cfg.seed)?;
    let dir = cfg.out.clone().unwrap_or_else(|| "samples".into());
    create_dir(&dir)?;
    for (i, img) in images.iter().enumerate() {
        dataset::write_ppm(&dir.join(format!("row{}_{i:04}.ppm", cfg.condition)), img)?;
    }
    write_manifest(&dir.join("manifest.csv"), "sample", cfg)?;
    eprintln!("wrote {} images to {}", images.len(), dir.display());
    Ok(())
}

fn emit_csv(out: Option<&Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = csv::Writer::from_writer(Vec::new());
    buf.write_record(header)?;
    rows.iter().try_for_each(|r| buf.write_record(r))?;
    let bytes = buf.into_inner().map_err(|e| CliError::Io {
        path: PathBuf::from("<memory>"),
        source: e.into_error(),
    })?;
    match out {
        Some(p) => fs::write(p, &bytes).map_err(io_err(p)),
        None => std::io::stdout()
            .write_all(&bytes)
            .map_err(io_err(Path::new("<stdout>"))),
    }
}

fn analyze_schedule(cfg: &RunConfig) -> Result<()> {
    let t = cfg.timesteps;
    let lin = LinearBetas::scaled_for(t);
    let p = cfg.scos_power.unwrap_or(2.0);
    let scheds = match cfg.schedule {
        Some(ScheduleName::Linear) => vec![NoiseSchedule::linear(t, lin.beta_1, lin.beta_t)?],
        Some(ScheduleName::Cos) => vec![NoiseSchedule::cosine_power(t, p, DEFAULT_OFFSET)?],
        Some(ScheduleName::Scos) => vec![NoiseSchedule::scos(t, p, DEFAULT_OFFSET, lin)?],
        None => vec![
            NoiseSchedule::linear(t, lin.beta_1, lin.beta_t)?,
            NoiseSchedule::cosine_power(t, p, DEFAULT_OFFSET)?,
            NoiseSchedule::scos(t, p, DEFAULT_OFFSET, lin)?,
        ],
    };
    let mut rows = Vec::new();
    for s in &scheds {
        for step in 1..=t {
            rows.push(vec![
                step.to_string(),
                s.beta(step).to_string(),
                s.alpha_bar(step).to_string(),
                s.snr(step).to_string(),
                s.name(),
            ]);
        }
    }
    emit_csv(
        cfg.out.as_deref(),
        &["t", "beta", "alpha_bar", "snr", "schedule_name"],
        &rows,
    )?;
    if let Some(out) = &cfg.out {
        write_manifest(&manifest_beside(out), "analyze-schedule", cfg)?;
    }
    Ok(())
}

fn analyze_survival(cfg: &RunConfig) -> Result<()> {
    let data = dataset::load_kind(required(&cfg.data, "data")?, DataKind::Target)?;
    let t = cfg.timesteps;
    let lin = LinearBetas::scaled_for(t);
    let scheds = [
        NoiseSchedule::linear(t, lin.beta_1, lin.beta_t)?,
        NoiseSchedule::scos(t, cfg.scos_power.unwrap_or(2.0), DEFAULT_OFFSET, lin)?,
    ];
    let rows: Vec<Vec<String>> = survival_report(&data, &scheds, cfg.threshold)?
        .into_iter()
        .map(|r| {
            vec![
                r.schedule,
                format!("{}-{}", r.bucket.0, r.bucket.1),
                r.boxes.to_string(),
                r.mean_survival.map(|v| v.to_string()).unwrap_or_else(|| "NA".into()),
            ]
        })
        .collect();
    emit_csv(
        cfg.out.as_deref(),
        &["schedule", "bucket", "boxes", "mean_survival"],
        &rows,
    )?;
    if let Some(out) = &cfg.out {
        write_manifest(&manifest_beside(out), "analyze-survival", cfg)?;
    }
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let real = dataset::load_kind(required(&cfg.real, "real")?, DataKind::Target)?;
    let (mut model, meta) = checkpoint::load(required(&cfg.ckpt, "ckpt")?)?;
    let table = model.embeddings();
    let rows: Vec<usize> = if table.expanded_rows >= TARGET_CONDITIONS {
        (0..TARGET_CONDITIONS).map(|c| table.base_rows + c).collect()
    } else {
        let p = cfg.source.as_deref().ok_or_else(|| {
            CliError::Usage("checkpoint has no target rows; pass --source to map conditions by similarity".into())
        })?;
        let source = dataset::load_kind(p, DataKind::Source)?;
        embedding_sources(
            EmbeddingInit::Ssei,
            &source,
            &real,
            SOURCE_CLASSES,
            TARGET_CONDITIONS,
            cfg.seed,
        )?
    };
    let sched = sampling_schedule(&model, &meta)?;
    if cfg.t_probe == 0 || cfg.t_probe > sched.steps() {
        return Err(CliError::Usage(format!(
            "--t-probe {} outside 1..={}",
            cfg.t_probe,
            sched.steps()
        )));
    }
    let images = generate(&model, &sched, &rows, cfg.n, cfg.seed)?;
    let real_feats = features_of(&real.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let gen_feats = features_of(&images)?;
    let fd = frechet_feature_distance(&real_feats, &gen_feats, true)?;
    let (precision, recall) = knn_precision_recall(&real_feats, &gen_feats, cfg.k)?;
    let probe_rows: Vec<usize> = real.iter().map(|s| rows[s.label as usize]).collect();
    let region = object_region_error(&model, &sched, &real, &probe_rows, cfg.t_probe, cfg.seed)?;
    select_trainable(&mut model, meta.mode)?;
    let report = MetricReport {
        frechet_distance: fd,
        precision,
        recall,
        object_region_mse: region,
        trainable_param_fraction: trainable_fraction(&model),
        runtime_seconds: start.elapsed().as_secs_f64(),
    };

    let dir = cfg.out.clone().unwrap_or_else(|| "eval".into());
    let sample_dir = dir.join("samples");
    create_dir(&sample_dir)?;
    for (i, img) in images.iter().enumerate() {
        let (c, j) = (i / cfg.n.max(1), i % cfg.n.max(1));
        dataset::write_ppm(&sample_dir.join(format!("cond{c}_{j:04}.ppm")), img)?;
    }
    let values: Vec<String> = report.values().iter().map(|v| v.to_string()).collect();
    emit_csv(Some(&dir.join("metrics.csv")), &MetricReport::HEADER, &[values.clone()])?;
    emit_csv(None, &MetricReport::HEADER, &[values])?;
    write_manifest(&dir.join("manifest.csv"), "eval", cfg)?;
    Ok(())
}
