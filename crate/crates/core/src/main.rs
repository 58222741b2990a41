use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use splitvae::config::RunConfig;
use splitvae::corpus::Corpus;
use splitvae::evaluation::{
    emit_reports, extract_latents, mi_matrix, probe, probe_all, probe_csv, Factor, Subspace,
};
use splitvae::synthesis::build_dataset;
use splitvae::training::{ablate, load_checkpoint, train, AblationGrid};
use splitvae::{verify, Error};

/// Multi-view VAE with private/shared latents on a synthetic tone corpus.
#[derive(Parser)]
#[command(name = "splitvae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a corpus (spectrograms, factor table, pairs).
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Run config supplying synthesis and front-end settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory; synthesized from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Mutual information between latent dimensions and factors.
    EvalMi {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear-probe accuracy of a latent subspace for a factor.
    EvalProbe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// private, shared, both or all
        #[arg(long)]
        subspace: String,
        /// timbre, frequency or all
        #[arg(long)]
        task: String,
        /// Also write the accuracy table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every point of an objective-weight grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in numerical self-checks.
    Verify,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn parse_all<T: std::str::FromStr<Err = Error> + Copy>(
    s: &str,
    all: &[T],
) -> Result<Vec<T>, Error> {
    if s == "all" {
        Ok(all.to_vec())
    } else {
        Ok(vec![s.parse()?])
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth {
            n,
            seed,
            out,
            config,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            cfg.synth.n_samples = n;
            cfg.synth.seed = seed;
            cfg.validate()?;
            let corpus = build_dataset(&cfg.synth, &cfg.features)?;
            corpus.write(&out)?;
            let hash = cfg.write_snapshot(&out)?;
            let m = &corpus.manifest;
            println!(
                "wrote {} samples ({} train) and {} pairs to {} [config {}]",
                m.n_samples,
                m.n_train_samples,
                m.pair_index.len(),
                out.display(),
                &hash[..12]
            );
        }
        Command::Train { config, out, data } => {
            let cfg = RunConfig::load(&config)?;
            let corpus = match data {
                Some(d) => Corpus::read(&d)?,
                None => build_dataset(&cfg.synth, &cfg.features)?,
            };
            let trained = train(&corpus, &cfg, Some(&out), |epoch, loss| {
                eprintln!("epoch {epoch:>4}  loss {:.4}", loss.total);
            })?;
            println!(
                "trained {} epochs [config {}] -> {}",
                trained.log.len(),
                &trained.config_hash[..12],
                out.display()
            );
        }
        Command::EvalMi { ckpt, data, out } => {
            let loaded = load_checkpoint(&ckpt)?;
            let corpus = Corpus::read(&data)?;
            let table = extract_latents(&loaded.model, &loaded.store, &corpus)?;
            let mi = mi_matrix(&table, loaded.config.evaluation.mi_bins)?;
            emit_reports(Some(&mi), None, &out)?;
            loaded.config.write_snapshot(&out)?;
            println!(
                "{} latents ({} orphans); timbre ratio {:.3}, frequency ratio {:.3}",
                table.rows.len(),
                table.orphans,
                mi.timbre_ratio(),
                mi.frequency_ratio()
            );
            for d in &mi.constant_dims {
                eprintln!("warning: latent dimension {d} is constant on the held-out set");
            }
        }
        Command::EvalProbe {
            ckpt,
            data,
            subspace,
            task,
            out,
        } => {
            let subspaces = parse_all(&subspace, &Subspace::ALL)?;
            let tasks = parse_all(&task, &Factor::ALL)?;
            let loaded = load_checkpoint(&ckpt)?;
            let corpus = Corpus::read(&data)?;
            let table = extract_latents(&loaded.model, &loaded.store, &corpus)?;
            let ecfg = &loaded.config.evaluation;
            for &s in &subspaces {
                for &t in &tasks {
                    println!(
                        "{},{},{:.6}",
                        s.name(),
                        t.name(),
                        probe(&table, s, t, ecfg)?
                    );
                }
            }
            if let Some(out) = out {
                let report = probe_all(&table, ecfg)?;
                emit_reports(None, Some(&report), &out)?;
                loaded.config.write_snapshot(&out)?;
                eprintln!("{}", probe_csv(&report).trim_end());
            }
        }
        Command::Ablate { grid, out } => {
            let grid = AblationGrid::load(&grid)?;
            let corpus = match &grid.data {
                Some(d) => Corpus::read(d)?,
                None => build_dataset(&grid.base.synth, &grid.base.features)?,
            };
            grid.base.write_snapshot(&out)?;
            let rows = ablate(&corpus, &grid, &out, |row| {
                let w = row.weights;
                match &row.outcome {
                    Ok(s) => eprintln!(
                        "({}, {}, {}) seed {}: score {:.3}",
                        w.alpha,
                        w.beta,
                        w.gamma,
                        row.seed,
                        s.score()
                    ),
                    Err(e) => eprintln!(
                        "({}, {}, {}) seed {}: failed: {e}",
                        w.alpha, w.beta, w.gamma, row.seed
                    ),
                }
            })?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            println!("{} runs, {failed} failed -> {}", rows.len(), out.display());
        }
        Command::Verify => {
            let checks = verify::run_all()?;
            for c in &checks {
                println!(
                    "{} {} ({})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if checks.iter().any(|c| !c.passed) {
                return Err(Error::Estimator("self-checks failed".into()));
            }
        }
    }
    Ok(())
}
