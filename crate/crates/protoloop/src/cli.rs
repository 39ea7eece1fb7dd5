//! Command-line surface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use protoloop_core::encoder::EncoderParams;
use protoloop_core::phantom::PhantomSpec;

use crate::array_io::{read_json, write_json};
use crate::dataset::load_samples;
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::manifest::Manifest;
use crate::pipeline::{Pipeline, PipelineConfig, FEATURE_DIR};
use crate::report::{evaluate_dirs, write_curves};
use crate::state::{existing_rounds, RoundState};
use crate::synth::write_phantom;

#[derive(Debug, Parser)]
#[command(name = "protoloop", version, about = "One-label volumetric segmentation by prototype propagation and refined self-training")]
pub struct Cli {
    /// Worker threads for per-volume stages.
    #[arg(long, global = true, env = "PROTOLOOP_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract feature grids for every volume of a manifest.
    Encode {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        encoder: EncoderArgs,
        #[arg(long)]
        force: bool,
    },
    /// Round 0 only: features, prototypes and propagated pseudo-labels.
    Init(RunArgs),
    /// Round 0 followed by rounds 1..R and the run report.
    Run(RunArgs),
    /// Resume a run with round N from the persisted round N-1.
    Round {
        #[arg(long = "r")]
        round: usize,
        /// Directory of round N-1 inside the run directory.
        #[arg(long)]
        prev: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Redo uncertainty partition and KNN refinement of a persisted round.
    Refine {
        #[arg(long)]
        round: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long = "q-unc")]
        q_unc: Option<f64>,
        #[arg(long)]
        force: bool,
    },
    /// Score predicted label files against reference label files by id.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Per-round curves of a run as CSV, optionally with an SVG chart.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        plot: bool,
        #[arg(long)]
        force: bool,
    },
    /// Generate a synthetic phantom dataset.
    Synth {
        /// Phantom spec as JSON; omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct EncoderArgs {
    /// Patch side of the built-in encoder.
    #[arg(long, default_value_t = EncoderParams::default().patch_size)]
    pub patch: usize,
    /// Drop the positional channels.
    #[arg(long)]
    pub no_position: bool,
}

impl EncoderArgs {
    fn params(&self) -> EncoderParams {
        EncoderParams {
            patch_size: self.patch,
            include_position: !self.no_position,
            ..EncoderParams::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    /// Skip uncertainty-guided refinement (ablation).
    #[arg(long)]
    pub no_refine: bool,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long = "q-unc", default_value_t = 0.9)]
    pub q_unc: f64,
    /// Training iterations per round.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fully labeled manifest for checkpoint selection.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Track pseudo-label Dice against the manifest's ground truth.
    #[arg(long)]
    pub phantom: bool,
    /// Sliding-window side; whole-volume prediction when omitted.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Pipeline config JSON; explicit flags above take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub force: bool,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => read_json(p)?,
            None => PipelineConfig::default(),
        };
        c.manifest = self.manifest.clone();
        c.output = self.out.clone();
        c.rounds = self.rounds;
        c.refine = !self.no_refine;
        c.k = self.k;
        c.q_unc = self.q_unc;
        c.seed = self.seed;
        c.validation = self.validation.clone();
        c.phantom = self.phantom;
        c.window = self.window.or(c.window);
        c.stride = self.stride.or(c.stride);
        if self.config.is_none() || self.encoder.patch != EncoderParams::default().patch_size || self.encoder.no_position {
            c.encoder = self.encoder.params();
        }
        if let Some(n) = self.iters {
            c.train.iterations = n;
        }
        if let Some(lr) = self.lr {
            c.train.base_lr = lr;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    if cli.threads == Some(0) {
        return Err(Error::Validation("--threads must be at least 1".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    pool.install(|| run_command(cli.command))
}

fn run_dir_of(round_dir: &Path) -> PathBuf {
    match round_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn run_command(command: Command) -> Result<()> {
    match command {
        Command::Encode {
            manifest,
            out,
            encoder,
            force,
        } => {
            let params = encoder.params();
            params.validate().map_err(|e| Error::Validation(e.to_string()))?;
            let dir = out.join(FEATURE_DIR);
            if FeatureStore::exists(&dir) && !force {
                return Err(Error::AlreadyExists(dir));
            }
            let m = Manifest::load(&manifest)?;
            let samples = load_samples(&m)?;
            let mut store = FeatureStore::new(params)?;
            store.ensure(&samples)?;
            store.save(&dir)?;
            let c = store.counters();
            println!(
                "encoded {} volumes ({} external) into {}",
                c.encoder_calls + c.external_loads,
                c.external_loads,
                dir.display()
            );
            Ok(())
        }
        Command::Init(args) => {
            let config = args.config()?;
            let mut p = Pipeline::new(config)?.force(args.force);
            p.prepare_output()?;
            let s = p.run_round0()?;
            println!(
                "round 0: {} pseudo-labels written to {}",
                s.pseudo_labels.len(),
                args.out.display()
            );
            if let Some(d) = s.metrics.pseudo_label_dice {
                println!("pseudo-label Dice {:.2}", 100.0 * d);
            }
            Ok(())
        }
        Command::Run(args) => {
            let config = args.config()?;
            let mut p = Pipeline::new(config)?.force(args.force);
            p.run()?;
            let text = std::fs::read_to_string(args.out.join("report.txt"))
                .map_err(|e| Error::io(args.out.join("report.txt"), e))?;
            print!("{text}");
            Ok(())
        }
        Command::Round { round, prev, force } => {
            let prev_state = RoundState::load(&prev)?;
            if prev_state.round + 1 != round {
                return Err(Error::Validation(format!(
                    "--prev holds round {}, so the next round is {}",
                    prev_state.round,
                    prev_state.round + 1
                )));
            }
            let run = run_dir_of(&prev);
            let mut p = Pipeline::open(&run)?.force(force);
            let s = p.run_round(round, &prev_state)?;
            println!("round {round} written to {}", run.join(format!("round_{round}")).display());
            if let Some(d) = s.metrics.pseudo_label_dice {
                println!("pseudo-label Dice {:.2}", 100.0 * d);
            }
            Ok(())
        }
        Command::Refine {
            round,
            k,
            q_unc,
            force,
        } => {
            let state = RoundState::load(&round)?;
            let run = run_dir_of(&round);
            if existing_rounds(&run).iter().any(|&r| r > state.round) {
                return Err(Error::Validation(format!(
                    "round {} already has successors; refining it would orphan them",
                    state.round
                )));
            }
            if state.refined && !force {
                return Err(Error::AlreadyExists(round));
            }
            let mut p = Pipeline::open(&run)?.force(true);
            let c = p.config_mut();
            c.refine = true;
            if let Some(k) = k {
                c.k = k;
            }
            if let Some(q) = q_unc {
                c.q_unc = q;
            }
            p.config().validate()?;
            let s = p.rerefine(&state)?;
            println!("refined {} uncertain samples", s.audit.len());
            Ok(())
        }
        Command::Eval {
            pred,
            truth,
            json,
            force,
        } => {
            if let Some(j) = &json {
                if j.exists() && !force {
                    return Err(Error::AlreadyExists(j.clone()));
                }
            }
            let table = evaluate_dirs(&pred, &truth)?;
            print!("{}", table.to_text());
            if let Some(j) = json {
                write_json(&table, &j)?;
            }
            Ok(())
        }
        Command::Report { run, plot, force } => {
            let report = write_curves(&run, plot, force)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Synth {
            spec,
            out,
            seed,
            force,
        } => {
            let mut s: PhantomSpec = match spec {
                Some(p) => read_json(&p)?,
                None => PhantomSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let m = write_phantom(&s, &out, force)?;
            println!("wrote {} volumes to {}", m.volumes.len(), out.display());
            Ok(())
        }
    }
}
