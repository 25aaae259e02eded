//! `objmim`: data generation, mask preprocessing, two-stage training,
//! evaluation, rendering and parameter sweeps.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use objmim::eval::{
    context_recovery_rate, grid_panels, prompt_grid_miou, recovery_panels, render_report, shortcut_score, EvalReport,
    EvalSet,
};
use objmim::objtok::{preprocess_masks, BinaryMask, ObjectCache, TokenizerBackend};
use objmim::scenegen::{generate_dataset, generate_prompt_grid_dataset, load_manifest, Scene};
use objmim::trainer::{
    train, train_stage1, train_stage2, Checkpoint, ObjectSource, TrainData, TrainOptions, TrainState,
};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(objmim::Error),
}

impl From<objmim::Error> for CliError {
    fn from(e: objmim::Error) -> Self {
        match e {
            objmim::Error::Config(m) => CliError::Config(m),
            e => CliError::Run(e),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Run(e) => write!(f, "error: {e}"),
        }
    }
}

fn io<T>(r: std::io::Result<T>, path: &Path) -> Result<T, CliError> {
    r.map_err(|source| {
        CliError::Run(objmim::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

#[derive(Parser, Debug)]
#[command(name = "objmim", version, about = "Object-centric masked image modeling on toy scenes")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set stage2.r_obj=0.25`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for the model and both training stages.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a scene dataset or a prompt-grid dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Compose prompt grids instead of single scenes.
        #[arg(long)]
        grids: bool,
    },
    /// Extract object masks once into a cache directory.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ObjectsArg::Annotations)]
        objects: ObjectsArg,
        /// Cache directory for `--objects cache`.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Continue from `<out>/stage<N>_last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write reconstruction panels.
    Render {
        #[arg(long, value_enum, default_value_t = Task::Recovery)]
        task: Task,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Retrain stage 2 for each value of one parameter and record recovery.
    Sweep {
        /// Stage-2 key, e.g. `r_obj`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Oracle,
    ConnectedComponents,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ObjectsArg {
    Annotations,
    Online,
    Cache,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Recovery,
    Miou,
    Shortcut,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Run(_) => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.sets, cli.seed)?;
    if cli.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(cmd) = cli.cmd else {
        return Err(CliError::Config("no subcommand given (see --help)".into()));
    };
    match cmd {
        Cmd::GenData { out, n, grids } => gen_data(&cfg, &out, n, grids, cli.seed.unwrap_or(cfg.model.seed)),
        Cmd::Preprocess { data, cache, backend } => {
            let backend = match backend {
                Some(BackendArg::Oracle) => TokenizerBackend::Oracle,
                Some(BackendArg::ConnectedComponents) => TokenizerBackend::connected_components(),
                None => cfg.backend,
            };
            let manifest = load_manifest(&data)?;
            let index = preprocess_masks(&manifest, &data, &backend, &cache)?;
            println!(
                "{} entries, {} segmentations run, backend {}",
                index.entries.len(),
                index.segmentations_run,
                backend.name()
            );
            Ok(())
        }
        Cmd::Train {
            stage,
            data,
            out,
            init,
            objects,
            cache,
            resume,
        } => train_cmd(&cfg, stage, &data, &out, init.as_deref(), objects, cache.as_deref(), resume),
        Cmd::Eval { task, ckpt, data, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let report = evaluate(&cfg, task, &ck, &data)?;
            let json = report.to_json().map_err(CliError::from)?;
            match out {
                Some(p) => {
                    write_file(&p, json.as_bytes())?;
                    println!("{} = {:.4}", report.metric, report.value);
                }
                None => println!("{json}"),
            }
            Ok(())
        }
        Cmd::Render { task, ckpt, data, out, n } => {
            let ck = Checkpoint::load(&ckpt)?;
            let n = n.unwrap_or(cfg.eval.panels);
            let panels = if task == Task::Miou {
                grid_panels(&ck, &load_grids(&data)?, n)?
            } else {
                recovery_panels(&ck, &load_eval_set(&data)?, n)?
            };
            let files = render_report(&panels, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
            Ok(())
        }
        Cmd::Sweep {
            param,
            values,
            data,
            eval_data,
            init,
            out,
        } => sweep(&cli.config, &cli.sets, cli.seed, &param, &values, &data, &eval_data, &init, &out),
    }
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        io(fs::create_dir_all(d), d)?;
    }
    io(fs::write(p, bytes), p)
}

fn gen_data(cfg: &RunConfig, out: &Path, n: usize, grids: bool, seed: u64) -> Result<(), CliError> {
    let manifest = if grids {
        generate_prompt_grid_dataset(&cfg.scene, n, seed, out)?
    } else {
        generate_dataset(&cfg.scene, n, seed, out)?
    };
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    println!("{} entries written to {}", manifest.entries.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    cfg: &RunConfig,
    stage: u8,
    data_dir: &Path,
    out: &Path,
    init: Option<&Path>,
    objects: ObjectsArg,
    cache: Option<&Path>,
    resume: bool,
) -> Result<(), CliError> {
    let tc = cfg.stage(stage);
    let source = match objects {
        ObjectsArg::Annotations => ObjectSource::Annotations,
        ObjectsArg::Online => ObjectSource::Online(cfg.backend),
        ObjectsArg::Cache => {
            let dir = cache.ok_or_else(|| CliError::Config("--objects cache needs --cache DIR".into()))?;
            ObjectSource::Cache(ObjectCache::open(dir)?)
        }
    };
    let data = TrainData::from_dir(data_dir, cfg.model.patch_size, source)?;
    io(fs::create_dir_all(out), out)?;
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let opts = TrainOptions {
        log_path: Some(out.join(format!("stage{stage}_log.jsonl"))),
        checkpoint_dir: Some(out.join("checkpoints")),
        stop_after_epoch: None,
        quiet: false,
    };
    let last = out.join("checkpoints").join(format!("stage{stage}_last.ckpt"));
    let (ckpt, summary) = if resume && last.exists() {
        let mut state = TrainState::from_checkpoint(Checkpoint::load(&last)?);
        if state.config != cfg.model {
            return Err(CliError::Config("resume checkpoint was trained with a different model config".into()));
        }
        let s = train(&data, tc, &mut state, &opts)?;
        (state.checkpoint(), s)
    } else if stage == 1 {
        train_stage1(&data, &cfg.model, tc, None, &opts)?
    } else {
        let init = init.map(Checkpoint::load).transpose()?;
        train_stage2(&data, &cfg.model, tc, init.as_ref(), &opts)?
    };
    let final_path = out.join(format!("stage{stage}.ckpt"));
    ckpt.save(&final_path)?;
    write_file(
        &out.join(format!("stage{stage}_summary.json")),
        &serde_json::to_vec_pretty(&summary).map_err(|e| CliError::Run(e.into()))?,
    )?;
    println!(
        "stage {stage}: {} steps, fallback fraction {:.3}, checkpoint {}",
        summary.steps,
        summary.fallback_fraction(),
        final_path.display()
    );
    Ok(())
}

fn load_eval_set(dir: &Path) -> Result<EvalSet, CliError> {
    let m = load_manifest(dir)?;
    Ok(EvalSet {
        scenes: m.load_scenes(dir)?,
        colors: m.colors.clone(),
    })
}

fn load_grids(dir: &Path) -> Result<Vec<(Scene, BinaryMask)>, CliError> {
    let m = load_manifest(dir)?;
    let scenes = m.load_scenes(dir)?;
    let targets = m.targets()?;
    scenes
        .into_iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (s, t))| {
            t.map(|t| (s, t))
                .ok_or_else(|| CliError::Config(format!("entry {i} has no prompt-grid target; generate with --grids")))
        })
        .collect()
}

fn evaluate(cfg: &RunConfig, task: Task, ck: &Checkpoint, data: &Path) -> Result<EvalReport, CliError> {
    Ok(match task {
        Task::Recovery => context_recovery_rate(ck, &load_eval_set(data)?, cfg.eval.trials)?,
        Task::Shortcut => shortcut_score(ck, &load_eval_set(data)?)?,
        Task::Miou => prompt_grid_miou(ck, &load_grids(data)?)?,
    })
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    file: &Option<PathBuf>,
    sets: &[String],
    seed: Option<u64>,
    param: &str,
    values: &[String],
    data_dir: &Path,
    eval_dir: &Path,
    init: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let key = if param.contains('.') {
        param.to_string()
    } else {
        format!("stage2.{param}")
    };
    let init = Checkpoint::load(init)?;
    let eval_set = load_eval_set(eval_dir)?;
    io(fs::create_dir_all(out), out)?;
    let mut csv = String::from("param,value,recovery,shortcut\n");
    let mut rows = Vec::new();
    for v in values {
        let mut s = sets.to_vec();
        s.push(format!("{key}={v}"));
        let cfg = RunConfig::load(file.as_deref(), &s, seed)?;
        let data = TrainData::from_dir(data_dir, cfg.model.patch_size, ObjectSource::Annotations)?;
        let run_dir = out.join(format!("{param}_{v}"));
        write_file(&run_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
        let opts = TrainOptions {
            log_path: Some(run_dir.join("stage2_log.jsonl")),
            quiet: true,
            ..Default::default()
        };
        let (ck, _) = train_stage2(&data, &cfg.model, &cfg.stage2, Some(&init), &opts)?;
        ck.save(&run_dir.join("stage2.ckpt"))?;
        let rec = context_recovery_rate(&ck, &eval_set, cfg.eval.trials)?;
        let sc = shortcut_score(&ck, &eval_set)?;
        let _ = writeln!(csv, "{param},{v},{:.6},{:.6}", rec.value, sc.value);
        println!("{param}={v}: recovery {:.4}, shortcut {:.4}", rec.value, sc.value);
        rows.push(serde_json::json!({
            "value": v,
            "recovery": rec.value,
            "recovery_by_direction": rec.breakdown,
            "shortcut": sc.value,
        }));
    }
    write_file(&out.join("sweep.csv"), csv.as_bytes())?;
    let plot = serde_json::json!({ "param": param, "rows": rows });
    write_file(
        &out.join("sweep.json"),
        &serde_json::to_vec_pretty(&plot).map_err(|e| CliError::Run(e.into()))?,
    )
}
