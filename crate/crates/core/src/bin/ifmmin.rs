//! Command-line front end: dataset synthesis, two-stage training, condition-
//! wise evaluation, invariant-feature export, gradient checking, and the
//! full ablation matrix. Every run writes a manifest next to its outputs so
//! results can be traced back to the exact config, seed, and dataset.

use clap::{Args, Parser, Subcommand};
use ifmmin::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use ifmmin::config::RunConfig;
use ifmmin::data::{self, RawUtterance};
use ifmmin::gradcheck::finite_difference_check;
use ifmmin::graph::Graph;
use ifmmin::pipeline::{self, TrainConfig};
use ifmmin::tensor::Tensor;
use ifmmin::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ifmmin", version, about = "Missing-modality emotion recognition trainer")]
struct Cli {
    /// Path to a key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct AblationFlags {
    /// Drop the invariance distillation term from the training loss.
    #[arg(long)]
    no_inv_loss: bool,
    /// Later imagination stages see only the previous stage's output.
    #[arg(long)]
    no_cascaded_input: bool,
    /// Remove the imagination module entirely (zero-fill baseline).
    #[arg(long)]
    no_ifim: bool,
    /// Keep the encoders at their pretrained weights during stage 2.
    #[arg(long)]
    freeze_student_encoders: bool,
}

impl AblationFlags {
    fn apply(&self, t: &mut TrainConfig) {
        t.no_inv_loss |= self.no_inv_loss;
        t.no_cascaded_input |= self.no_cascaded_input;
        t.no_ifim |= self.no_ifim;
        t.freeze_student_encoders |= self.freeze_student_encoders;
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset configured in the config file.
    GenData {
        /// Overwrite an existing dataset file.
        #[arg(long)]
        force: bool,
    },
    /// Stage 1: full-modality pretraining with the CMD constraint.
    Pretrain,
    /// Stage 2: train the imagination network against the frozen teacher.
    Train {
        /// Teacher checkpoint (defaults to the pretrain output path).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        flags: AblationFlags,
        /// Suffix for output file names, e.g. an ablation label.
        #[arg(long, default_value = "ifmmin")]
        tag: String,
    },
    /// Evaluate a trained checkpoint over every missing-modality condition.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: AblationFlags,
        /// Report file name (under the reports directory).
        #[arg(long, default_value = "eval.json")]
        out: String,
    },
    /// Export invariant features per condition as CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Utterances per condition.
        #[arg(long, default_value_t = 100)]
        per_condition: usize,
        #[arg(long, default_value = "features.csv")]
        out: String,
    },
    /// Finite-difference checks over every differentiable building block.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train and evaluate the full model and all ablations, then print a
    /// combined per-condition table.
    Ablate {
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?),
        None => {
            // still honor the env override on the default config
            RunConfig::parse("")
        }
    }
}

/// Write via a temp file in the same directory, then rename.
fn atomic_write(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_fingerprint: String,
    seed: u64,
    dataset: Option<String>,
    dataset_sha256: Option<String>,
    outputs: Vec<String>,
}

fn write_manifest(cfg: &RunConfig, command: &str, outputs: &[&Path]) -> Result<()> {
    let dataset_hash = if cfg.dataset.is_file() {
        Some(sha256_file(&cfg.dataset)?)
    } else {
        None
    };
    let manifest = Manifest {
        command: command.to_string(),
        config_fingerprint: cfg.fingerprint(),
        seed: cfg.train.seed,
        dataset: cfg.dataset.to_str().map(String::from),
        dataset_sha256: dataset_hash,
        outputs: outputs
            .iter()
            .filter_map(|p| p.to_str().map(String::from))
            .collect(),
    };
    let path = cfg.reports_dir.join(format!("manifest-{command}.json"));
    atomic_write(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        writeln!(w)?;
        Ok(())
    })
}

fn load_dataset(cfg: &RunConfig) -> Result<Vec<RawUtterance>> {
    let f = File::open(&cfg.dataset).map_err(|e| {
        Error::invalid(format!(
            "cannot open dataset {}: {e} (run gen-data first?)",
            cfg.dataset.display()
        ))
    })?;
    data::read_jsonl(BufReader::new(f))
}

fn load_ckpt(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let ck = read_checkpoint(&mut r)?;
    if ck.config != cfg.fingerprint() {
        eprintln!(
            "warning: checkpoint {} was produced by a different configuration",
            path.display()
        );
    }
    Ok(ck)
}

fn teacher_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoints_dir.join("teacher.ckpt")
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::GenData { force } => gen_data(&cfg, force),
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::Train { teacher, flags, tag } => cmd_train(&cfg, teacher, &flags, &tag),
        Command::Eval { checkpoint, flags, out } => cmd_eval(&cfg, &checkpoint, &flags, &out),
        Command::ExportFeatures {
            checkpoint,
            per_condition,
            out,
        } => cmd_export(&cfg, &checkpoint, per_condition, &out),
        Command::Gradcheck { seeds, tolerance } => cmd_gradcheck(seeds, tolerance),
        Command::Ablate { teacher } => cmd_ablate(&cfg, teacher),
    }
}

fn gen_data(cfg: &RunConfig, force: bool) -> Result<()> {
    if cfg.dataset.exists() && !force {
        return Err(Error::invalid(format!(
            "{} already exists; pass --force to overwrite",
            cfg.dataset.display()
        )));
    }
    let utts = data::generate(&cfg.synth)?;
    atomic_write(&cfg.dataset, |w| data::write_jsonl(w, &utts))?;
    write_manifest(cfg, "gen-data", &[&cfg.dataset])?;
    println!(
        "wrote {} utterances to {}",
        utts.len(),
        cfg.dataset.display()
    );
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let utts = load_dataset(cfg)?;
    let result = pipeline::pretrain(&utts, &cfg.train)?;
    for e in &result.trace {
        println!(
            "epoch {:>3}  cls {:.4}  cmd {:.4}  total {:.4}  val_wa {:.4}",
            e.epoch, e.l_cls, e.l_cmd, e.total, e.val_wa
        );
    }
    let out = teacher_path(cfg);
    atomic_write(&out, |w| write_checkpoint(w, &result.params, &cfg.fingerprint()))?;
    let trace_path = cfg.reports_dir.join("pretrain-trace.json");
    atomic_write(&trace_path, |w| {
        serde_json::to_writer_pretty(&mut *w, &result.trace)?;
        writeln!(w)?;
        Ok(())
    })?;
    write_manifest(cfg, "pretrain", &[&out, &trace_path])?;
    println!("teacher checkpoint: {}", out.display());
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    teacher: Option<PathBuf>,
    flags: &AblationFlags,
    tag: &str,
) -> Result<()> {
    let utts = load_dataset(cfg)?;
    let teacher_file = teacher.unwrap_or_else(|| teacher_path(cfg));
    let teacher_ck = load_ckpt(cfg, &teacher_file)?;
    let mut train_cfg = cfg.train.clone();
    flags.apply(&mut train_cfg);
    let result = pipeline::train_ifmmin(&utts, &teacher_ck.params, &train_cfg)?;
    for e in &result.trace {
        println!(
            "epoch {:>3}  cls {:.4}  img {:.4}  inv {:.4}  total {:.4}  val_wa {:.4}",
            e.epoch, e.l_cls, e.l_img, e.l_inv, e.total, e.val_wa
        );
    }
    let out = cfg.checkpoints_dir.join(format!("{tag}.ckpt"));
    atomic_write(&out, |w| write_checkpoint(w, &result.params, &cfg.fingerprint()))?;
    let trace_path = cfg.reports_dir.join(format!("{tag}-trace.json"));
    atomic_write(&trace_path, |w| {
        serde_json::to_writer_pretty(&mut *w, &result.trace)?;
        writeln!(w)?;
        Ok(())
    })?;
    write_manifest(cfg, &format!("train-{tag}"), &[&out, &trace_path])?;
    println!(
        "best epoch {} -> {}",
        result.best_epoch,
        out.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, flags: &AblationFlags, out: &str) -> Result<()> {
    let utts = load_dataset(cfg)?;
    let ck = load_ckpt(cfg, checkpoint)?;
    let mut train_cfg = cfg.train.clone();
    flags.apply(&mut train_cfg);
    let no_ifim = train_cfg.no_ifim || !ck.params.contains("ifim.ae0.enc0.w");
    let splits = pipeline::kfold_split(utts.len(), train_cfg.folds, train_cfg.seed)?;
    let split = &splits[train_cfg.fold_index];
    let test: Vec<RawUtterance> = split.test.iter().map(|&i| utts[i].clone()).collect();
    let report = data::evaluate_conditions(
        &train_cfg.model_spec(),
        &ck.params,
        no_ifim,
        !train_cfg.no_cascaded_input,
        &test,
    )?;
    print_report(&report);
    let path = cfg.reports_dir.join(out);
    atomic_write(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })?;
    write_manifest(cfg, "eval", &[&path])?;
    Ok(())
}

fn print_report(report: &data::ConditionReport) {
    println!("{:<10} {:>8} {:>8}", "condition", "WA", "UA");
    for c in &report.conditions {
        println!("{:<10} {:>8.4} {:>8.4}", c.condition, c.wa, c.ua);
    }
    println!(
        "{:<10} {:>8.4} {:>8.4}",
        "average", report.average_wa, report.average_ua
    );
}

fn cmd_export(cfg: &RunConfig, checkpoint: &Path, per_condition: usize, out: &str) -> Result<()> {
    let utts = load_dataset(cfg)?;
    let ck = load_ckpt(cfg, checkpoint)?;
    let rows = data::invariant_feature_rows(
        &cfg.train.model_spec(),
        &ck.params,
        &utts,
        &pipeline::ALL_CONDITIONS,
        per_condition,
    )?;
    let path = cfg.reports_dir.join(out);
    atomic_write(&path, |w| data::write_feature_csv(w, &rows))?;
    write_manifest(cfg, "export-features", &[&path])?;
    println!("wrote {} feature rows to {}", rows.len(), path.display());
    Ok(())
}

fn cmd_gradcheck(seeds: u64, tolerance: f64) -> Result<()> {
    use rand::Rng;
    let mut failures = 0;
    println!("{:<28} {:>6} {:>14} {:>6}", "check", "seed", "max_rel_err", "pass");
    for seed in 0..seeds {
        let mut rng = ifmmin::rng::stream(seed, "cli-gradcheck");
        let mut rand_vec = |n: usize| -> Tensor {
            Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let mut case = |name: &str,
                        x: Tensor,
                        f: &dyn Fn(&mut Graph, usize) -> Result<usize>|
         -> Result<()> {
            let report = finite_difference_check(f, &x, 1e-5, tolerance)?;
            println!(
                "{:<28} {:>6} {:>14.3e} {:>6}",
                name,
                seed,
                report.max_rel_err,
                if report.pass { "yes" } else { "NO" }
            );
            if !report.pass {
                failures += 1;
            }
            Ok(())
        };
        case("sigmoid-sum", rand_vec(8), &|g, x| {
            let y = g.sigmoid(x)?;
            g.sum_all(y)
        })?;
        case("tanh-sum", rand_vec(8), &|g, x| {
            let y = g.tanh(x)?;
            g.sum_all(y)
        })?;
        case("square-mean", rand_vec(8), &|g, x| {
            let y = g.mul(x, x)?;
            g.mean_all(y)
        })?;
        let m = {
            let mut rng2 = ifmmin::rng::stream(seed, "cli-gradcheck-m");
            Tensor::new(
                vec![32, 4],
                (0..128).map(|_| rng2.gen_range(-1.0..1.0)).collect(),
            )?
        };
        case("matmul-quadratic", m.clone(), &|g, x| {
            let w = g.constant(Tensor::new(
                vec![4, 2],
                (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect(),
            )?);
            let y = g.matmul(x, w)?;
            let z = g.mul(y, y)?;
            g.mean_all(z)
        })?;
        // two 16x4 samples, both differentiable, K = 5
        case("cmd-pair", m, &|g, x| {
            let a = g.slice_rows(x, 0, 16)?;
            let b = g.slice_rows(x, 16, 16)?;
            ifmmin::cmd::cmd_pair(g, a, b, &ifmmin::cmd::CmdConfig::default())
        })?;
    }
    if failures > 0 {
        return Err(Error::invalid(format!("{failures} gradient checks failed")));
    }
    println!("all gradient checks passed");
    Ok(())
}

#[derive(Serialize)]
struct AblationReport {
    variant: String,
    report: data::ConditionReport,
}

fn cmd_ablate(cfg: &RunConfig, teacher: Option<PathBuf>) -> Result<()> {
    let utts = load_dataset(cfg)?;
    let teacher_file = teacher.unwrap_or_else(|| teacher_path(cfg));
    let teacher_ck = load_ckpt(cfg, &teacher_file)?;
    let splits = pipeline::kfold_split(utts.len(), cfg.train.folds, cfg.train.seed)?;
    let test: Vec<RawUtterance> = splits[cfg.train.fold_index]
        .test
        .iter()
        .map(|&i| utts[i].clone())
        .collect();
    let variants: [(&str, fn(&mut TrainConfig)); 4] = [
        ("ifmmin", |_| {}),
        ("no_inv_loss", |t| t.no_inv_loss = true),
        ("no_cascaded_input", |t| t.no_cascaded_input = true),
        ("no_ifim", |t| t.no_ifim = true),
    ];
    let mut reports = Vec::new();
    for (name, tweak) in variants {
        let mut train_cfg = cfg.train.clone();
        tweak(&mut train_cfg);
        println!("== {name} ==");
        let result = pipeline::train_ifmmin(&utts, &teacher_ck.params, &train_cfg)?;
        let out = cfg.checkpoints_dir.join(format!("{name}.ckpt"));
        atomic_write(&out, |w| write_checkpoint(w, &result.params, &cfg.fingerprint()))?;
        let report = data::evaluate_conditions(
            &train_cfg.model_spec(),
            &result.params,
            train_cfg.no_ifim,
            !train_cfg.no_cascaded_input,
            &test,
        )?;
        print_report(&report);
        reports.push(AblationReport {
            variant: name.to_string(),
            report,
        });
    }
    let path = cfg.reports_dir.join("ablation.json");
    atomic_write(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &reports)?;
        writeln!(w)?;
        Ok(())
    })?;
    write_manifest(cfg, "ablate", &[&path])?;
    // condition-wise comparison table
    println!();
    print!("{:<10}", "condition");
    for r in &reports {
        print!(" {:>18}", r.variant);
    }
    println!();
    for (i, c) in reports[0].report.conditions.iter().enumerate() {
        print!("{:<10}", c.condition);
        for r in &reports {
            print!(" {:>18.4}", r.report.conditions[i].wa);
        }
        println!();
    }
    print!("{:<10}", "average");
    for r in &reports {
        print!(" {:>18.4}", r.report.average_wa);
    }
    println!();
    Ok(())
}
