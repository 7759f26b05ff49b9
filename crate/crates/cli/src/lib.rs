//! The `zoo` command line: `train`, `attack` and `eval`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod image;
pub mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Arg, ArgMatches, Command};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zoo_core::attackspace::AttackSpace;
use zoo_core::dataset::{load_idx, synthetic_dataset, write_idx_tensor, LabeledImage};
use zoo_core::loss::AttackGoal;
use zoo_core::model::{accuracy, train, Network};
use zoo_core::optimizer::binary_search_c;
use zoo_core::oracle::{NetworkOracle, Oracle};

use config::{AttackMode, CampaignConfig, DataSource, SpacePreset, KEYS, OUTPUT_DIR_ENV};
use report::{AttackRow, CTrialRow, CampaignReport, Files, Queries, StageSwitchRow, Summary, Timing};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Core(#[from] zoo_core::Error),
    #[error("campaign failed: {0}")]
    Campaign(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Campaign(_) => 1,
            _ => 2,
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn load_split(cfg: &CampaignConfig, test_only: bool) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>), CliError> {
    Ok(match &cfg.data {
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = if test_only {
                Vec::new()
            } else {
                load_idx(train_images, train_labels, cfg.classes)?
            };
            (train, load_idx(test_images, test_labels, cfg.classes)?)
        }
        DataSource::Synthetic { seed, train, test, side } => {
            let tr = if test_only {
                Vec::new()
            } else {
                synthetic_dataset(*seed, *train, *side, cfg.classes)?
            };
            (tr, synthetic_dataset(seed.wrapping_add(1), *test, *side, cfg.classes)?)
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: PathBuf,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Trains the configured MLP and writes it to `cfg.model`.
pub fn cmd_train(cfg: &CampaignConfig) -> Result<TrainOutcome, CliError> {
    let (train_set, test_set) = load_split(cfg, false)?;
    let first = train_set
        .first()
        .ok_or_else(|| CliError::Config("training set is empty".into()))?;
    let net = Network::mlp(first.image.shape(), &cfg.train.hidden, cfg.classes, cfg.train.init_seed)?;
    let (net, _) = train(&net, &train_set, &cfg.train.config)?;
    write_file(&cfg.model, &net.to_bytes())?;
    Ok(TrainOutcome {
        model: cfg.model.clone(),
        train_accuracy: accuracy(&net, &train_set)?,
        test_accuracy: if test_set.is_empty() { 0.0 } else { accuracy(&net, &test_set)? },
    })
}

fn build_space(cfg: &CampaignConfig, shape: &[usize]) -> Result<AttackSpace, CliError> {
    Ok(match &cfg.space {
        SpacePreset::Full => AttackSpace::full(shape)?,
        SpacePreset::Hierarchical {
            stages,
            importance_from_stage,
        } => AttackSpace::new(shape, stages.clone(), *importance_from_stage)?,
    })
}

/// Runs the campaign, writing `report.json`, `timing.json` and per-attack
/// artifacts under `cfg.output_dir`. `on_attack` sees each row as it lands.
pub fn cmd_attack(cfg: &CampaignConfig, on_attack: &mut dyn FnMut(&AttackRow)) -> Result<CampaignReport, CliError> {
    let net = Network::load(&cfg.model)?;
    let (_, test_set) = load_split(cfg, true)?;
    if net.num_classes() != cfg.classes {
        return Err(CliError::Config(format!(
            "model has {} classes, config says {}",
            net.num_classes(),
            cfg.classes
        )));
    }
    let mut order: Vec<usize> = (0..test_set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    // Correctness is judged directly on the model; these are not attack queries.
    let mut chosen = Vec::new();
    let mut skipped = 0;
    for &i in &order {
        if chosen.len() == cfg.n_images {
            break;
        }
        let sample = &test_set[i];
        if sample.image.shape() != net.input_shape() {
            return Err(CliError::Config(format!(
                "test image shape {:?} does not fit model input {:?}",
                sample.image.shape(),
                net.input_shape()
            )));
        }
        if net.predict(&sample.image)? == sample.label {
            chosen.push(i);
        } else {
            skipped += 1;
        }
    }
    if chosen.is_empty() {
        return Err(CliError::Campaign("no correctly classified test images".into()));
    }

    let oracle = NetworkOracle::new(net.clone());
    let space = build_space(cfg, net.input_shape())?;
    let mut rows = Vec::new();
    let mut seconds = Vec::new();
    for &index in &chosen {
        let sample = &test_set[index];
        let goals: Vec<(Option<usize>, AttackGoal)> = match cfg.mode {
            AttackMode::Untargeted => vec![(None, AttackGoal::untargeted(sample.label))],
            AttackMode::TargetedAll => (0..cfg.classes)
                .filter(|&t| t != sample.label)
                .map(|t| (Some(t), AttackGoal::targeted(t)))
                .collect(),
        };
        for (target, goal) in goals {
            let id = rows.len();
            let goal = goal.with_kappa(cfg.kappa);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(id as u64);
            let before = oracle.total_queries();
            let started = Instant::now();
            let result = binary_search_c(
                &sample.image,
                &goal,
                &cfg.solver,
                &space,
                &oracle,
                &mut rng,
                cfg.c0,
                cfg.search_steps,
            )?;
            seconds.push(started.elapsed().as_secs_f64());
            let spent = oracle.total_queries() - before;

            let dir = format!("attacks/{id:04}");
            let files = Files {
                original: format!("{dir}/original.ppm"),
                noise: format!("{dir}/noise.ppm"),
                adversarial: format!("{dir}/adversarial.ppm"),
                adversarial_tensor: format!("{dir}/adversarial.idx"),
                trace: format!("{dir}/trace.csv"),
            };
            let out = |rel: &str| cfg.output_dir.join(rel);
            let adv = &result.adversarial_image;
            write_file(&out(&files.original), &image::to_ppm(&sample.image)?)?;
            write_file(&out(&files.noise), &image::to_ppm(&image::noise_image(adv, &sample.image)?)?)?;
            write_file(&out(&files.adversarial), &image::to_ppm(adv)?)?;
            write_file(&out(&files.adversarial_tensor), &write_idx_tensor(adv)?)?;
            write_file(&out(&files.trace), result.trace_csv().as_bytes())?;

            let q = result.queries;
            let row = AttackRow {
                id,
                image_index: index,
                original_label: sample.label,
                target,
                success: result.success,
                adversarial_label: net.predict(adv)?,
                l2: result.l2_distortion,
                final_c: result.final_c,
                iterations: result.iterations,
                batch: result.batch,
                first_valid_iteration: result.first_valid_iteration,
                queries: Queries {
                    estimator: q.estimator,
                    initial: q.initial,
                    iterate: q.iterate,
                    stage: q.stage,
                    total: q.total(),
                    oracle: spent,
                },
                c_trials: result
                    .c_trials
                    .iter()
                    .map(|t| CTrialRow {
                        c: t.c,
                        success: t.success,
                        l2: t.l2,
                        iterations: t.iterations,
                    })
                    .collect(),
                stage_switches: result
                    .stage_switches
                    .iter()
                    .map(|s| StageSwitchRow {
                        iteration: s.iteration,
                        loss_before: s.loss_before,
                        loss_after: s.loss_after,
                    })
                    .collect(),
                files,
            };
            on_attack(&row);
            rows.push(row);
        }
    }

    let mut config = cfg.settings.clone();
    config.remove("output_dir");
    let report = CampaignReport {
        mode: cfg.mode.as_str().into(),
        config,
        skipped_misclassified: skipped,
        summary: Summary::from_rows(&rows),
        attacks: rows,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&cfg.output_dir.join("report.json"), json.as_bytes())?;
    let timing = serde_json::to_string_pretty(&Timing::new(seconds)).expect("timing serializes");
    write_file(&cfg.output_dir.join("timing.json"), timing.as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub summary: Summary,
    pub timing: Option<Timing>,
}

impl EvalOutcome {
    pub fn table(&self) -> String {
        let s = &self.summary;
        if s.attacks == 0 {
            return "no attacks\n".into();
        }
        let opt = |v: Option<f64>, prec: usize| v.map_or("n/a".to_string(), |v| format!("{v:.prec$}"));
        let time = self.timing.as_ref().and_then(|t| t.mean_seconds);
        format!(
            "{:<10} {:>12} {:>10} {:>14} {:>12}\n{:<10} {:>12} {:>10} {:>14} {:>12}\n",
            "attacks",
            "success rate",
            "avg L2",
            "avg queries",
            "avg time s",
            s.attacks,
            opt(s.success_rate.map(|r| r * 100.0), 2) + " %",
            opt(s.mean_l2, 5),
            opt(s.mean_queries, 1),
            opt(time, 3),
        )
    }
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0),
        _ => false,
    }
}

/// Recomputes the aggregates of a report. A stored summary that disagrees
/// with its rows is rejected. `timing.json` beside the report is optional.
pub fn cmd_eval(report_path: &Path) -> Result<EvalOutcome, CliError> {
    let text = std::fs::read_to_string(report_path).map_err(|e| CliError::io(report_path, e))?;
    let report: CampaignReport =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("malformed report: {e}")))?;
    let summary = Summary::from_rows(&report.attacks);
    let stored = &report.summary;
    if stored.attacks != summary.attacks
        || stored.successes != summary.successes
        || !close(stored.success_rate, summary.success_rate)
        || !close(stored.mean_l2, summary.mean_l2)
        || !close(stored.mean_queries, summary.mean_queries)
    {
        return Err(CliError::Config("malformed report: summary disagrees with rows".into()));
    }
    let timing_path = report_path.with_file_name("timing.json");
    let timing = match std::fs::read_to_string(&timing_path) {
        Ok(t) => Some(serde_json::from_str(&t).map_err(|e| CliError::Config(format!("malformed timing: {e}")))?),
        Err(_) => None,
    };
    Ok(EvalOutcome { summary, timing })
}

fn command() -> Command {
    let keyed = |c: Command| {
        c.arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .help("key = value campaign file"),
        )
        .args(KEYS.iter().map(|(key, default, help)| {
            Arg::new(*key)
                .long(key.replace('_', "-"))
                .value_name("VALUE")
                .help(format!("{help} [default: {default}]"))
        }))
    };
    Command::new("zoo")
        .about("Zeroth-order black-box attacks on image classifiers")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(keyed(Command::new("train").about("Train the target model and write its weight file")))
        .subcommand(keyed(Command::new("attack").about("Run an attack campaign")))
        .subcommand(
            Command::new("eval")
                .about("Summarize a campaign report")
                .arg(Arg::new("report").required(true).value_name("REPORT_JSON")),
        )
}

fn config_from(m: &ArgMatches) -> Result<CampaignConfig, CliError> {
    let mut settings = match m.get_one::<String>("config") {
        Some(path) => config::read_settings(Path::new(path))?,
        None => Default::default(),
    };
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        settings.insert("output_dir".into(), dir);
    }
    for (key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            settings.insert(key.to_string(), v.clone());
        }
    }
    CampaignConfig::from_settings(&settings)
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match matches.subcommand() {
        Some(("train", m)) => config_from(m).and_then(|cfg| {
            let t = cmd_train(&cfg)?;
            let _ = writeln!(stdout, "model written to {}", t.model.display());
            let _ = writeln!(stdout, "train accuracy: {:.4}", t.train_accuracy);
            let _ = writeln!(stdout, "test accuracy: {:.4}", t.test_accuracy);
            Ok(())
        }),
        Some(("attack", m)) => config_from(m).and_then(|cfg| {
            cmd_attack(&cfg, &mut |row| {
                let target = row.target.map_or("any".to_string(), |t| t.to_string());
                let _ = writeln!(
                    stdout,
                    "attack {:>4}: image {:>5} label {} -> {}: {} l2 {:.4} queries {}",
                    row.id,
                    row.image_index,
                    row.original_label,
                    target,
                    if row.success { "success" } else { "failure" },
                    row.l2,
                    row.queries.total
                );
            })?;
            let path = cfg.output_dir.join("report.json");
            let _ = write!(stdout, "{}", cmd_eval(&path)?.table());
            let _ = writeln!(stdout, "report written to {}", path.display());
            Ok(())
        }),
        Some(("eval", m)) => {
            let path = m.get_one::<String>("report").expect("required");
            cmd_eval(Path::new(path)).map(|e| {
                let _ = write!(stdout, "{}", e.table());
            })
        }
        _ => unreachable!("subcommand required"),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
