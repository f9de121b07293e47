//! `pcae`: generate or ingest datasets, train the auto-encoder, and run the
//! downstream evaluation tasks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numerical abort during training.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pcae_core::dataset::{self, Dataset, Sample, Split};
use pcae_core::eval;
use pcae_core::fixtures;
use pcae_core::geometry::write_xyz;
use pcae_core::model::{load_checkpoint, save_checkpoint, Model};
use pcae_core::training::{self, RunConfig};
use pcae_core::{parallel, Error};

#[derive(Parser)]
#[command(name = "pcae", version, about = "Point-cloud auto-encoder toolkit")]
struct Cli {
    /// Worker thread cap for this process; 1 forces the sequential path,
    /// 0 keeps the default pool size.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic sphere/box/plane corpus as a dataset file.
    Fixture {
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        train_per_class: usize,
        #[arg(long, default_value_t = 20)]
        test_per_class: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        /// Per-point Gaussian jitter applied before normalization.
        #[arg(long, default_value_t = 0.01)]
        jitter: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample and normalize the files of a manifest into one dataset file.
    Ingest {
        /// Manifest of `path format label split` lines.
        #[arg(long)]
        manifest: PathBuf,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        /// Points per cloud; meshes are surface-sampled to this count.
        #[arg(long, default_value_t = 1024)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset's train split; writes checkpoint and loss history.
    Train {
        /// Dataset file from `fixture` or `ingest`.
        #[arg(long)]
        data: PathBuf,
        /// Key-value config file; omitted keys use defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for `checkpoint.pcae` and `history.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the configured training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured initial learning rate.
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Override the configured batch size.
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Run a downstream task against a trained checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        /// Output directory for task artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Which split to evaluate.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Upsampling target size; defaults to 4x the cloud size.
        #[arg(long)]
        target_n: Option<usize>,
        /// Seed for the seeded evaluation stages (upsampling).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cloud id for single-cloud tasks (attention, reconstruct);
        /// defaults to the first cloud of the split.
        #[arg(long)]
        id: Option<String>,
    },
}

#[derive(ValueEnum, Clone, Copy)]
enum Task {
    Classify,
    Retrieve,
    Upsample,
    Attention,
    Reconstruct,
}

#[derive(ValueEnum, Clone, Copy)]
enum SplitArg {
    Train,
    Test,
    All,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1; --help and --version are successes.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    parallel::configure_threads(cli.threads);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFiniteLoss { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Fixture {
            out,
            train_per_class,
            test_per_class,
            points,
            jitter,
            seed,
        } => {
            let ds = fixtures::synthetic_dataset(fixtures::FixtureConfig {
                train_per_class,
                test_per_class,
                points,
                jitter,
                seed,
            })?;
            ds.save(&out)?;
            println!(
                "wrote {} clouds x {} points to {}",
                ds.len(),
                ds.points_per_cloud,
                out.display()
            );
            Ok(())
        }
        Command::Ingest {
            manifest,
            out,
            points,
            seed,
        } => {
            let entries = dataset::parse_manifest(&manifest)?;
            let report = dataset::ingest(&entries, points, seed)?;
            for (path, err) in &report.skipped {
                eprintln!("skipped {}: {err}", path.display());
            }
            report.dataset.save(&out)?;
            println!(
                "wrote {} clouds x {points} points to {} ({} skipped)",
                report.dataset.len(),
                out.display(),
                report.skipped.len()
            );
            Ok(())
        }
        Command::Train {
            data,
            config,
            out,
            epochs,
            seed,
            learning_rate,
            batch_size,
        } => cmd_train(&data, config.as_deref(), &out, epochs, seed, learning_rate, batch_size),
        Command::Eval {
            data,
            ckpt,
            task,
            out,
            split,
            target_n,
            seed,
            id,
        } => cmd_eval(&data, &ckpt, task, &out, split, target_n, seed, id.as_deref()),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    config_path: Option<&Path>,
    out: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
) -> Result<(), Error> {
    let dataset = Dataset::load(data)?;
    let mut cfg = match config_path {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            training::parse_config(&text, path, RunConfig::default())?
        }
        None => RunConfig::default(),
    };
    // The dataset dictates the cloud size; flags override the file.
    cfg.model.points_per_cloud = dataset.points_per_cloud;
    if let Some(v) = epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = seed {
        cfg.train.seed = v;
    }
    if let Some(v) = learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = batch_size {
        cfg.train.batch_size = v;
    }
    cfg.train.validate()?;
    cfg.model.validate()?;

    fs::create_dir_all(out)?;
    let mut model = Model::new(cfg.model)?;
    let report = training::train(&mut model, &dataset, &cfg.train, Some(out))?;
    let ckpt = out.join("checkpoint.pcae");
    save_checkpoint(&ckpt, &model)?;
    fs::write(out.join("history.csv"), training::history_csv(&report.history))?;
    let last = report.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs; final loss {:.6} (local {:.6}, global {:.6}); checkpoint {}",
        report.history.len(),
        last.total,
        last.local,
        last.global_,
        ckpt.display()
    );
    Ok(())
}

fn pick_samples(dataset: &Dataset, split: SplitArg) -> Vec<&Sample> {
    match split {
        SplitArg::Train => dataset.split(Split::Train).collect(),
        SplitArg::Test => dataset.split(Split::Test).collect(),
        SplitArg::All => dataset.samples.iter().collect(),
    }
}

fn split_name(split: SplitArg) -> &'static str {
    match split {
        SplitArg::Train => "train",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    data: &Path,
    ckpt: &Path,
    task: Task,
    out: &Path,
    split: SplitArg,
    target_n: Option<usize>,
    seed: u64,
    id: Option<&str>,
) -> Result<(), Error> {
    let dataset = Dataset::load(data)?;
    let model = load_checkpoint(ckpt)?;
    if model.config.points_per_cloud != dataset.points_per_cloud {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} points per cloud, dataset {} has {}",
            model.config.points_per_cloud,
            data.display(),
            dataset.points_per_cloud
        )));
    }
    let samples = pick_samples(&dataset, split);
    if samples.is_empty() {
        return Err(Error::invalid(format!(
            "dataset has no samples in the {} split",
            split_name(split)
        )));
    }
    fs::create_dir_all(out)?;
    match task {
        Task::Classify => cmd_classify(&dataset, &model, &samples, out),
        Task::Retrieve => cmd_retrieve(&model, &samples, out),
        Task::Upsample => cmd_upsample(&model, &samples, out, target_n, seed),
        Task::Attention => cmd_attention(&model, &samples, out, id),
        Task::Reconstruct => cmd_reconstruct(&model, &samples, out, id),
    }
}

fn cmd_classify(
    dataset: &Dataset,
    model: &Model,
    eval_samples: &[&Sample],
    out: &Path,
) -> Result<(), Error> {
    let train_samples: Vec<&Sample> = dataset.split(Split::Train).collect();
    if train_samples.is_empty() {
        return Err(Error::invalid("classification needs a train split to fit on"));
    }
    let train_table = eval::extract_features(model, &train_samples)?;
    let svm = eval::train_linear_svm(&train_table, eval::SvmConfig::default())?;
    let eval_table = eval::extract_features(model, eval_samples)?;
    let accuracy = svm.accuracy(&eval_table);
    println!("accuracy {accuracy:.4}");
    for class in &svm.classes {
        let total = eval_table.labels.iter().filter(|l| *l == class).count();
        if total == 0 {
            continue;
        }
        let hits = (0..eval_table.len())
            .filter(|&i| {
                eval_table.labels[i] == *class
                    && svm.predict_label(eval_table.row(i)) == *class
            })
            .count();
        println!(
            "class {class}: {hits}/{total} correct ({:.4})",
            hits as f64 / total as f64
        );
    }
    fs::write(out.join("features.csv"), eval::features_csv(&eval_table))?;
    Ok(())
}

fn cmd_retrieve(model: &Model, samples: &[&Sample], out: &Path) -> Result<(), Error> {
    let table = eval::extract_features(model, samples)?;
    let result = eval::retrieval_map(&table)?;
    println!("mAP {:.4}", result.map);
    fs::write(out.join("features.csv"), eval::features_csv(&table))?;
    fs::write(out.join("pr.csv"), eval::pr_csv(&result.pr_curve))?;
    Ok(())
}

fn cmd_upsample(
    model: &Model,
    samples: &[&Sample],
    out: &Path,
    target_n: Option<usize>,
    seed: u64,
) -> Result<(), Error> {
    let target = target_n.unwrap_or(4 * model.config.points_per_cloud);
    let mut total = 0.0;
    for sample in samples {
        let up = eval::upsample(model, &sample.cloud, target, seed)?;
        let cd = eval::chamfer_to(&sample.cloud, &up)?;
        total += cd;
        write_xyz(&out.join(format!("{}-up{target}.xyz", sample.cloud.id)), &up)?;
    }
    println!("upsampled {} clouds to {target} points; mCD {:.6}", samples.len(), total / samples.len() as f64);
    Ok(())
}

fn choose<'a>(samples: &[&'a Sample], id: Option<&str>) -> Result<&'a Sample, Error> {
    match id {
        None => Ok(samples[0]),
        Some(id) => samples
            .iter()
            .find(|s| s.cloud.id == id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no cloud with id {id:?} in this split"))),
    }
}

fn cmd_attention(
    model: &Model,
    samples: &[&Sample],
    out: &Path,
    id: Option<&str>,
) -> Result<(), Error> {
    let sample = choose(samples, id)?;
    let maps = eval::attention_of(model, &sample.cloud)?;
    let Some(region) = maps.region else {
        return Err(Error::invalid(
            "this checkpoint was trained without region attention; no map to export",
        ));
    };
    let summary = eval::attention_summary(&region)?;
    fs::write(out.join("attention_map.csv"), eval::matrix_csv(&region))?;
    let mut lines = String::from("region,influence\n");
    for (i, v) in summary.iter().enumerate() {
        lines.push_str(&format!("{i},{v}\n"));
    }
    fs::write(out.join("attention_summary.csv"), lines)?;
    println!(
        "wrote {}x{} region attention map and summary for {}",
        region.rows(),
        region.cols(),
        sample.cloud.id
    );
    Ok(())
}

fn cmd_reconstruct(
    model: &Model,
    samples: &[&Sample],
    out: &Path,
    id: Option<&str>,
) -> Result<(), Error> {
    let sample = choose(samples, id)?;
    let (recon, per_scale) = eval::reconstruct_cloud(model, &sample.cloud)?;
    let cd = eval::chamfer_to(&sample.cloud, &recon)?;
    write_xyz(&out.join(format!("{}-recon.xyz", sample.cloud.id)), &recon)?;
    for (t, cloud) in per_scale.iter().enumerate() {
        write_xyz(&out.join(format!("{}-scale{t}.xyz", sample.cloud.id)), cloud)?;
    }
    println!(
        "reconstructed {} ({} points, {} scale files); chamfer {:.6}",
        sample.cloud.id,
        recon.points.len(),
        per_scale.len(),
        cd
    );
    Ok(())
}
