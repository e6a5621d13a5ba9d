use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use bst::eval::{compare_report, evaluate, metrics_records, Metrics};
use bst::experiment::{compare_models, encode_all, model_tag, Dataset, Ordering};
use bst::features::synth::synth_generate;
use bst::features::{
    build_feature_spec, load_examples, load_unlabeled, temporal_split, write_examples, Example, FeatureSpec,
};
use bst::model::{InputSchema, Model};
use bst::trainer::{Checkpoint, Trainer};
use log::info;

use crate::config::RunConfig;
use crate::CliError;

const TRAIN_FILE: &str = "train.jsonl";
const TEST_FILE: &str = "test.jsonl";

/// Refuses to clobber existing outputs unless forced; creates parents.
fn prepare_outputs(paths: &[&Path], force: bool) -> Result<(), CliError> {
    if !force {
        let existing: Vec<String> = paths
            .iter()
            .filter(|p| p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !existing.is_empty() {
            return Err(CliError::Config(format!(
                "refusing to overwrite {} (pass --force)",
                existing.join(", ")
            )));
        }
    }
    for p in paths {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| bst::Error::io(dir, e))?;
        }
    }
    Ok(())
}

fn require(paths: &[&Path]) -> Result<(), CliError> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(format!("missing input file(s): {}", missing.join(", "))))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| bst::Error::io(path, e).into())
}

fn base_rate(examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    examples.iter().map(|e| f64::from(e.label)).sum::<f64>() / examples.len() as f64
}

fn generate_split(cfg: &RunConfig) -> Result<(Vec<Example>, Vec<Example>), CliError> {
    let all = synth_generate(&cfg.synth, cfg.train.seed)?;
    Ok(temporal_split(all, cfg.split_boundary()))
}

fn write_dataset(cfg: &RunConfig, data_dir: &Path, train: &[Example], test: &[Example], force: bool) -> Result<(), CliError> {
    let (train_path, test_path, meta_path) = (
        data_dir.join(TRAIN_FILE),
        data_dir.join(TEST_FILE),
        data_dir.join("meta.toml"),
    );
    prepare_outputs(&[&train_path, &test_path, &meta_path], force)?;
    write_examples(train, &train_path)?;
    write_examples(test, &test_path)?;
    let train_days = cfg.split_day() - 1;
    let test_days = cfg.synth.days - train_days;
    let mut meta = String::new();
    let _ = writeln!(meta, "train_examples = {}", train.len());
    let _ = writeln!(meta, "test_examples = {}", test.len());
    let _ = writeln!(meta, "train_base_rate = {}", base_rate(train));
    let _ = writeln!(meta, "test_base_rate = {}", base_rate(test));
    let _ = writeln!(meta, "days = {}", cfg.synth.days);
    let _ = writeln!(meta, "split_day = {}", cfg.split_day());
    let _ = writeln!(meta, "train_days = {train_days}");
    let _ = writeln!(meta, "test_days = {test_days}");
    let _ = writeln!(meta, "day_ratio = \"{train_days}:{test_days}\"");
    let _ = writeln!(meta, "\n[config]\n{}", indent_table(&cfg.echo()));
    write_text(&meta_path, &meta)
}

/// Nests a TOML document under an already-open table by quoting it.
fn indent_table(echo: &str) -> String {
    format!("echo = {}", toml::Value::String(echo.to_string()))
}

pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let run_dir = cfg.run_dir();
    let data_dir = cfg.data_dir(&run_dir);
    let (train, test) = generate_split(cfg)?;
    write_dataset(cfg, &data_dir, &train, &test, force)?;
    println!("data: {}", data_dir.display());
    println!("train: {} examples, base rate {:.4}", train.len(), base_rate(&train));
    println!("test: {} examples, base rate {:.4}", test.len(), base_rate(&test));
    Ok(())
}

/// Loads the spec at `path`, or builds it from `train` and saves it there.
fn load_or_build_spec(cfg: &RunConfig, path: &Path, train: &[Example]) -> Result<FeatureSpec, CliError> {
    if path.is_file() {
        info!("using feature spec {}", path.display());
        return Ok(FeatureSpec::load(path)?);
    }
    let spec = build_feature_spec(train, &cfg.vocab())?;
    prepare_outputs(&[path], false)?;
    spec.save(path)?;
    info!("built feature spec {}", path.display());
    Ok(spec)
}

fn loss_log_path(run_dir: &Path, tag: &str) -> PathBuf {
    run_dir.join(format!("{}.loss.tsv", slug(tag)))
}

/// File-name form of a report tag: `BST(b=1)` → `bst_b1`.
fn slug(tag: &str) -> String {
    let mut s: String = tag
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    s = s.replace("_b_", "_b").replace("__", "_");
    s.trim_matches('_').to_string()
}

pub fn train(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let run_dir = cfg.run_dir();
    let data_dir = cfg.data_dir(&run_dir);
    let train_path = data_dir.join(TRAIN_FILE);
    require(&[&train_path])?;
    let ckpt_path = cfg.checkpoint_path(&run_dir);
    let kind = cfg.train.model;
    let tag = model_tag(kind, cfg.model.num_blocks);
    let loss_path = loss_log_path(&run_dir, &tag);
    let echo_path = run_dir.join(format!("{}.config.toml", slug(&tag)));
    prepare_outputs(&[&ckpt_path, &loss_path, &echo_path], force)?;

    let examples = load_examples(&train_path)?;
    let spec = load_or_build_spec(cfg, &cfg.spec_path(&run_dir), &examples)?;
    cfg.model.check_spec(&spec)?;
    let data = encode_all(&examples, &spec, cfg.model.sequence_length)?;
    let model = Model::new(kind, cfg.model.clone(), InputSchema::from_spec(&spec), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    info!(
        "training {tag} on {} examples for {} steps",
        data.len(),
        trainer.total_steps(data.len())
    );
    let log = trainer.run(&data, None)?;
    let echo = cfg.echo();
    Checkpoint::from_trainer(&trainer, echo.clone()).save(&ckpt_path)?;
    log.write(&loss_path)?;
    write_text(&echo_path, &echo)?;
    let tail = log.smoothed(log.0.len() - 1, 50);
    println!("{tag}: {} steps, final smoothed loss {tail:.4}", log.0.len());
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

/// Checkpoint and spec, checked against each other.
fn load_model(cfg: &RunConfig, run_dir: &Path) -> Result<(Checkpoint, FeatureSpec), CliError> {
    let ckpt_path = cfg.checkpoint_path(run_dir);
    let spec_path = cfg.spec_path(run_dir);
    require(&[&ckpt_path, &spec_path])?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let spec = FeatureSpec::load(&spec_path)?;
    let from_spec = InputSchema::from_spec(&spec);
    if from_spec != ckpt.model.schema {
        return Err(CliError::Config(format!(
            "feature spec {} does not match checkpoint {}: vocabulary sizes differ ({:?} vs {:?})",
            spec_path.display(),
            ckpt_path.display(),
            from_spec,
            ckpt.model.schema
        )));
    }
    Ok((ckpt, spec))
}

pub fn eval(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let run_dir = cfg.run_dir();
    let test_path = cfg.data_dir(&run_dir).join(TEST_FILE);
    require(&[&test_path])?;
    let report_path = cfg.report_path(&run_dir);
    prepare_outputs(&[&report_path], force)?;
    let (ckpt, spec) = load_model(cfg, &run_dir)?;
    let model = &ckpt.model;
    let test = encode_all(&load_examples(&test_path)?, &spec, model.config.sequence_length)?;
    let tag = model_tag(model.kind, model.config.num_blocks);
    let metrics = evaluate(model, &test, &cfg.eval, &tag, &ckpt.echo)?;
    print!("{}", compare_report(std::slice::from_ref(&metrics)));
    write_text(&report_path, &metrics_records(&[metrics]))?;
    println!("metrics: {}", report_path.display());
    Ok(())
}

pub fn predict(cfg: &RunConfig, input: &Path, output: Option<&Path>, force: bool) -> Result<(), CliError> {
    let run_dir = cfg.run_dir();
    require(&[input])?;
    if let Some(out) = output {
        prepare_outputs(&[out], force)?;
    }
    let (ckpt, spec) = load_model(cfg, &run_dir)?;
    let model = &ckpt.model;
    let examples = load_unlabeled(input)?;
    let encoded = encode_all(&examples, &spec, model.config.sequence_length)?;
    let probs = if encoded.is_empty() {
        Vec::new()
    } else {
        model.predict_all(&encoded, cfg.eval.batch_size)?
    };
    let mut text = String::with_capacity(probs.len() * 12);
    for p in &probs {
        let _ = writeln!(text, "{p}");
    }
    match output {
        Some(out) => write_text(out, &text)?,
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| bst::Error::io("<stdout>", e))?,
    }
    Ok(())
}

pub fn experiment(cfg: &RunConfig, ablate_blocks: bool, force: bool) -> Result<(), CliError> {
    let run_dir = cfg.run_dir();
    let data_dir = cfg.data_dir(&run_dir);
    let (train_path, test_path) = (data_dir.join(TRAIN_FILE), data_dir.join(TEST_FILE));
    let report_path = cfg.report_path(&run_dir);
    let table_path = run_dir.join("report.txt");
    let extra: Vec<usize> = if ablate_blocks {
        [2, 3].into_iter().filter(|&b| b != cfg.model.num_blocks).collect()
    } else {
        Vec::new()
    };
    prepare_outputs(&[&report_path, &table_path], force)?;

    let (train, test) = if train_path.is_file() && test_path.is_file() {
        info!("using existing data in {}", data_dir.display());
        (load_examples(&train_path)?, load_examples(&test_path)?)
    } else {
        let (train, test) = generate_split(cfg)?;
        write_dataset(cfg, &data_dir, &train, &test, force)?;
        (train, test)
    };
    let spec = load_or_build_spec(cfg, &cfg.spec_path(&run_dir), &train)?;
    cfg.model.check_spec(&spec)?;
    let data = Dataset {
        train: encode_all(&train, &spec, cfg.model.sequence_length)?,
        test: encode_all(&test, &spec, cfg.model.sequence_length)?,
        spec,
    };
    let echo = cfg.echo();
    let runs = compare_models(&data, &cfg.model, &cfg.train, &cfg.eval, &extra, &echo)?;
    for r in &runs {
        let path = loss_log_path(&run_dir, &r.metrics.model);
        prepare_outputs(&[&path], force)?;
        r.losses.write(&path)?;
    }
    let metrics: Vec<Metrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    let table = compare_report(&metrics);
    print!("{table}");
    write_text(&table_path, &table)?;
    write_text(&report_path, &metrics_records(&metrics))?;
    println!("report: {}", report_path.display());

    let ordering = Ordering::from_runs(&runs).expect("all three kinds were trained");
    println!("{}", ordering.describe());
    if ordering.holds() {
        Ok(())
    } else {
        Err(CliError::Assertion(format!(
            "expected AUC ordering BST > WDL(+Seq) > WDL failed: {}",
            ordering.describe()
        )))
    }
}
