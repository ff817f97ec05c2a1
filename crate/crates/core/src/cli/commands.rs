use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;
use serde_json::json;

use super::{usage, AttackArgs, BottomArg, CliError, CodesArgs, Command, DataArgs, ReplayArgs, ReportArgs, RunManifest, TrainArgs, WORKERS_ENV};
use crate::attacks::{parse_params, run_campaign, AttackConfig, AttackKind, CampaignSpec};
use crate::codes::build_codeword_matrix;
use crate::data::{load_idx, synthesize_gaussian_blobs, Dataset};
use crate::evaluation::{
    append_records, asr_vs_psnr_curve, confidence_table, histogram_rows, probability_histogram, read_record_files,
    summarize, top_class_probabilities, write_confidence_table, write_records, write_summaries, write_two_columns,
    AttackRecord, Summary,
};
use crate::model::{load_checkpoint, save_checkpoint, Architecture, BottomSpec, Model};
use crate::training::{evaluate_error_rate, finetune_ensemble, train_base, BottomMode, EpochRecord, TrainConfig};

type Outcome = Result<i32, CliError>;

/// Uniform draw among the classes other than the true one.
const TARGET_POLICY: &str = "uniform-other";

pub(super) fn dispatch(command: Command, argv: &[String]) -> Outcome {
    match command {
        Command::Codes(a) => codes(&a),
        Command::Train(a) => train(&a, argv),
        Command::Attack(a) => attack(&a, argv),
        Command::Report(a) => report(&a, argv),
        Command::Selftest => selftest(),
        Command::Replay(a) => replay(&a),
    }
}

fn codes(args: &CodesArgs) -> Outcome {
    let length = args.length.unwrap_or(args.classes.next_power_of_two());
    let c = build_codeword_matrix(args.classes, length).map_err(|e| usage("codes", e.to_string()))?;
    for row in c.rows() {
        let line: Vec<&str> = row.iter().map(|&b| if b > 0 { "+1" } else { "-1" }).collect();
        println!("{}", line.join(" "));
    }
    println!("min distance: {}", c.min_hamming_distance());
    Ok(0)
}

struct Splits {
    train: Dataset,
    test: Dataset,
    inputs: Vec<PathBuf>,
}

fn require_file(command: &'static str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(command, format!("no such file: {}", path.display())))
    }
}

fn load_data(command: &'static str, args: &DataArgs) -> Result<Splits, CliError> {
    let f = args.test_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(usage(command, "--test-fraction must lie strictly between 0 and 1"));
    }
    let (data, inputs) = match (&args.synthetic, &args.idx_images, &args.idx_labels) {
        (Some(spec), _, _) => (synthesize_gaussian_blobs(spec).map_err(|e| usage(command, e.to_string()))?, Vec::new()),
        (None, Some(images), Some(labels)) => {
            require_file(command, images)?;
            require_file(command, labels)?;
            let data = load_idx(images, labels).context("loading IDX data")?;
            (data, vec![images.clone(), labels.clone()])
        }
        _ => return Err(usage(command, "a dataset is required: --synthetic or --idx-images/--idx-labels")),
    };
    let mut parts = data.split(&[1.0 - f, f], args.split_seed).context("splitting data")?;
    let test = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    Ok(Splits { train, test, inputs })
}

fn data_config(args: &DataArgs) -> serde_json::Value {
    json!({
        "synthetic": args.synthetic.as_ref().map(|s| s.to_string()),
        "idx_images": args.idx_images,
        "idx_labels": args.idx_labels,
        "test_fraction": args.test_fraction,
        "split_seed": args.split_seed,
    })
}

fn architecture(args: &TrainArgs, shape: &[usize]) -> Architecture {
    let bottom = if shape.len() == 3 {
        BottomSpec::Conv {
            channels: args.channels.clone(),
            kernel: args.kernel,
        }
    } else {
        BottomSpec::Dense {
            widths: args.dense_widths.clone(),
        }
    };
    Architecture {
        input_shape: shape.to_vec(),
        bottom,
        head_hidden: args.hidden,
    }
}

fn train(args: &TrainArgs, argv: &[String]) -> Outcome {
    let splits = load_data("train", &args.data)?;
    let classes = splits.train.classes();
    let length = args.code_length.unwrap_or(classes.next_power_of_two());
    let codes = build_codeword_matrix(classes, length).map_err(|e| usage("train", e.to_string()))?;
    let arch = architecture(args, splits.train.shape());
    arch.validate().map_err(|e| usage("train", e.to_string()))?;
    let base_config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        momentum: args.momentum,
        seed: args.seed,
        validation_fraction: args.validation_fraction,
        bottom: match args.bottom {
            BottomArg::Frozen => BottomMode::Frozen,
            BottomArg::Shared => BottomMode::Shared,
        },
        ..TrainConfig::default()
    };
    base_config.validate().map_err(|e| usage("train", e.to_string()))?;
    let finetune_config = TrainConfig {
        epochs: args.finetune_epochs.unwrap_or(args.epochs),
        ..base_config.clone()
    };
    finetune_config.validate().map_err(|e| usage("train", e.to_string()))?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut log = format!("{}\n", EpochRecord::CSV_HEADER);
    println!("{}", EpochRecord::CSV_HEADER);
    let mut record = |r: &EpochRecord| {
        println!("{}", r.csv_line());
        log.push_str(&r.csv_line());
        log.push('\n');
    };
    let (base, base_report) = train_base(&splits.train, &arch, &base_config, &mut record).context("training base network")?;
    let (ensemble, ensemble_report) =
        finetune_ensemble(&base, &splits.train, &codes, &finetune_config, &mut record).context("fine-tuning ensemble")?;
    let base_test = evaluate_error_rate(&base, &splits.test).context("evaluating base network")?;
    let ensemble_test = evaluate_error_rate(&ensemble, &splits.test).context("evaluating ensemble")?;

    let model_path = args.out.join("model.ckpt");
    let base_path = args.out.join("base.ckpt");
    let log_path = args.out.join("training.csv");
    save_checkpoint(&Model::from(ensemble), &model_path).context("saving ensemble")?;
    save_checkpoint(&Model::from(base), &base_path).context("saving base network")?;
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;

    let config = json!({
        "data": data_config(&args.data),
        "architecture": arch,
        "code_length": length,
        "base": base_config,
        "finetune": finetune_config,
    });
    let mut manifest = RunManifest::new("train", argv, config)?;
    manifest.seed("train", args.seed);
    manifest.seed("split", args.data.split_seed);
    if let Some(spec) = &args.data.synthetic {
        manifest.seed("synthetic", spec.seed);
    }
    for p in &splits.inputs {
        manifest.input(p)?;
    }
    for p in [&model_path, &base_path, &log_path] {
        manifest.output(p)?;
    }
    manifest.results = json!({
        "classes": classes,
        "train_images": splits.train.len(),
        "test_images": splits.test.len(),
        "base_validation_error": base_report.validation_error,
        "ensemble_validation_error": ensemble_report.validation_error,
        "base_test_error": base_test,
        "ensemble_test_error": ensemble_test,
    });
    manifest.write(args.out.join("manifest.json"))?;
    eprintln!("base test error {base_test:.4}");
    eprintln!("ensemble test error {ensemble_test:.4}");
    eprintln!("checkpoint {}", model_path.display());
    Ok(0)
}

/// Attack settings read from `--job`; every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct JobFile {
    kind: Option<String>,
    params: Option<String>,
    lambda_start: Option<f64>,
    n: Option<usize>,
    m: Option<usize>,
    c: Option<f64>,
    epsilon: Option<f64>,
    seed: Option<u64>,
    images: Option<usize>,
    image_ids: Option<Vec<usize>>,
    lots_pool: Option<usize>,
    /// Only `uniform-other` is supported.
    target_policy: Option<String>,
}

fn workers() -> Result<Option<usize>, CliError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage("attack", format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// `<stem>.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn attack(args: &AttackArgs, argv: &[String]) -> Outcome {
    let job = match &args.job {
        Some(p) => {
            require_file("attack", p)?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<JobFile>(&text).map_err(|e| usage("attack", format!("bad job file: {e}")))?
        }
        None => JobFile::default(),
    };
    let kind = match (&job.kind, args.kind) {
        (Some(k), _) => k.parse::<AttackKind>().map_err(|e| usage("attack", e.to_string()))?,
        (None, Some(k)) => k,
        (None, None) => return Err(usage("attack", "--kind is required")),
    };
    let params = job.params.clone().unwrap_or_else(|| args.params.clone());
    let (lambda, n, m, c) = parse_params(&params).map_err(|e| usage("attack", e.to_string()))?;
    let (lambda, n, m, c) = (
        job.lambda_start.unwrap_or(lambda),
        job.n.unwrap_or(n),
        job.m.unwrap_or(m),
        job.c.unwrap_or(c),
    );
    if let Some(p) = job.target_policy.as_deref().filter(|&p| p != TARGET_POLICY) {
        return Err(usage("attack", format!("unsupported target policy {p:?}")));
    }
    let config = AttackConfig::new(kind, lambda, n, m, c).with_step_size(job.epsilon.unwrap_or(args.epsilon));
    config.validate().map_err(|e| usage("attack", e.to_string()))?;
    let mut spec = CampaignSpec::new(config.clone(), job.images.unwrap_or(args.images), job.seed.unwrap_or(args.seed));
    spec.image_ids = job.image_ids.clone().or_else(|| args.image_ids.clone());
    spec.lots_pool = job.lots_pool.unwrap_or(args.lots_pool);
    let workers = workers()?;

    require_file("attack", &args.checkpoint)?;
    let model = load_checkpoint(&args.checkpoint).context("loading checkpoint")?;
    let classifier = model.as_classifier();
    kind.check_compatible(&classifier.decoder()).map_err(|e| usage("attack", format!("refused: {e}")))?;
    let splits = load_data("attack", &args.data)?;
    if splits.test.shape() != classifier.input_shape() {
        return Err(usage(
            "attack",
            format!("data shape {:?} does not match model input {:?}", splits.test.shape(), classifier.input_shape()),
        ));
    }

    let items = run_campaign(classifier, &splits.test, &splits.train, &spec, workers).context("running attacks")?;
    let records: Vec<AttackRecord> = items.iter().map(|i| AttackRecord::from_item(i, &config)).collect();
    if args.append && args.out.is_file() {
        let file = OpenOptions::new().append(true).open(&args.out)?;
        append_records(BufWriter::new(file), &records).context("appending results")?;
    } else {
        write_records(BufWriter::new(File::create(&args.out)?), &records).context("writing results")?;
    }

    let mut outputs = vec![args.out.clone()];
    let summary = if records.is_empty() {
        None
    } else {
        let rows: Vec<&AttackRecord> = records.iter().collect();
        let s = Summary::of(records[0].setting(), &rows).context("summarising")?;
        let path = sibling(&args.out, "summary.csv");
        write_summaries(BufWriter::new(File::create(&path)?), std::slice::from_ref(&s)).context("writing summary")?;
        outputs.push(path);
        Some(s)
    };

    let config_echo = json!({
        "data": data_config(&args.data),
        "campaign": spec,
        "target_policy": TARGET_POLICY,
        "checkpoint_kind": model.kind().name(),
        "append": args.append,
        "workers": workers,
    });
    let mut manifest = RunManifest::new("attack", argv, config_echo)?;
    manifest.seed("attack", spec.seed);
    manifest.seed("split", args.data.split_seed);
    if let Some(s) = &args.data.synthetic {
        manifest.seed("synthetic", s.seed);
    }
    manifest.input(&args.checkpoint)?;
    if let Some(p) = &args.job {
        manifest.input(p)?;
    }
    for p in &splits.inputs {
        manifest.input(p)?;
    }
    for p in &outputs {
        manifest.output(p)?;
    }
    manifest.results = json!({ "summary": summary });
    manifest.write(sibling(&args.out, "manifest.json"))?;

    match summary {
        Some(s) => {
            println!("{}", s.setting);
            println!("attacked {} succeeded {} asr {:.4}", s.attacks, s.successes, s.asr);
            match s.mean_psnr_successes {
                Some(p) => println!("mean psnr of successes {p:.2} dB"),
                None => println!("mean psnr of successes n/a"),
            }
        }
        None => println!("no images attacked"),
    }
    Ok(0)
}

fn parse_thresholds(s: &str) -> Option<Vec<f64>> {
    let parts: Vec<f64> = s.split(':').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    let [start, stop, step] = parts[..] else { return None };
    if !(step > 0.0 && start <= stop && start.is_finite() && stop.is_finite()) {
        return None;
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize;
    Some((0..=count).map(|i| start + i as f64 * step).collect())
}

fn report(args: &ReportArgs, argv: &[String]) -> Outcome {
    for p in &args.inputs {
        require_file("report", p)?;
    }
    let thresholds = parse_thresholds(&args.psnr_thresholds)
        .ok_or_else(|| usage("report", "--psnr-thresholds must be start:stop:step with a positive step"))?;
    if args.bins == 0 {
        return Err(usage("report", "--bins must be positive"));
    }
    let records = read_record_files(&args.inputs).context("reading results")?;
    if records.is_empty() {
        return Err(usage("report", "the input files hold no rows"));
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let out = |name: &str| args.out.join(name);
    let create = |p: &Path| File::create(p).map(BufWriter::new).with_context(|| format!("creating {}", p.display()));

    let summaries = summarize(&records).context("summarising")?;
    write_summaries(create(&out("summary.csv"))?, &summaries)?;
    write_confidence_table(create(&out("confidence.csv"))?, &confidence_table(&records)?)?;
    let (clean, adversarial) = top_class_probabilities(&records);
    let header = ["bin_lower", "count"];
    write_two_columns(create(&out("histogram-clean.csv"))?, header, &histogram_rows(&probability_histogram(&clean, args.bins)?))?;
    write_two_columns(
        create(&out("histogram-adversarial.csv"))?,
        header,
        &histogram_rows(&probability_histogram(&adversarial, args.bins)?),
    )?;
    write_two_columns(create(&out("asr-psnr.csv"))?, ["psnr_threshold", "asr"], &asr_vs_psnr_curve(&records, &thresholds))?;

    let names = ["summary.csv", "confidence.csv", "histogram-clean.csv", "histogram-adversarial.csv", "asr-psnr.csv"];
    let config = json!({ "inputs": args.inputs, "bins": args.bins, "psnr_thresholds": args.psnr_thresholds });
    let mut manifest = RunManifest::new("report", argv, config)?;
    for p in &args.inputs {
        manifest.input(p)?;
    }
    for n in names {
        manifest.output(out(n))?;
    }
    manifest.results = json!({ "rows": records.len(), "settings": summaries.len() });
    manifest.write(out("manifest.json"))?;
    for s in &summaries {
        println!("{}: asr {:.4} over {} images", s.setting, s.asr, s.attacks);
    }
    Ok(0)
}

fn selftest() -> Outcome {
    let start = std::time::Instant::now();
    let checks = crate::selftest::run_all();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed, {:.1}s", checks.len(), start.elapsed().as_secs_f64());
    Ok(i32::from(failed > 0))
}

fn replay(args: &ReplayArgs) -> Outcome {
    require_file("replay", &args.manifest)?;
    let manifest = RunManifest::read(&args.manifest)?;
    if manifest.command == "attack" && manifest.config.get("append").and_then(|v| v.as_bool()) == Some(true) {
        return Err(usage("replay", "runs with --append cannot be replayed bit-exactly"));
    }
    let here = std::env::current_dir()?;
    std::env::set_current_dir(&manifest.cwd).with_context(|| format!("entering {}", manifest.cwd.display()))?;
    let argv = std::iter::once("ecoc".to_string()).chain(manifest.argv.iter().cloned());
    let code = super::run(argv);
    let mut mismatches = Vec::new();
    if code == 0 {
        for a in &manifest.outputs {
            match super::sha256_file(&a.path) {
                Ok(h) if h == a.sha256 => {}
                Ok(_) => mismatches.push(format!("{} differs", a.path.display())),
                Err(e) => mismatches.push(format!("{}: {e:#}", a.path.display())),
            }
        }
    }
    std::env::set_current_dir(here)?;
    if code != 0 {
        return Ok(code);
    }
    for m in &mismatches {
        eprintln!("mismatch: {m}");
    }
    if mismatches.is_empty() {
        println!("reproduced {} outputs", manifest.outputs.len());
        Ok(0)
    } else {
        Ok(1)
    }
}
