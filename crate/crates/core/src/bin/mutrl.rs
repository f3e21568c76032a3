use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mutrl::harness::config::{ExperimentConfig, Regime, OUT_ROOT_ENV};
use mutrl::harness::reports::{
    activation_profile, channel_decomposition, complementarity_report, cost_report, csv_string, matched_teacher_check,
    ratio_statistics, shuffled_pool_control,
};
use mutrl::harness::runner::{restore_policies, run_to_dir, RunDir};
use mutrl::oracle::run_suite;
use mutrl::par::Executor;
use mutrl::thl::alignment_error_stats;

#[derive(Parser)]
#[command(name = "mutrl", version, about = "Mutual RL experiments on tabular policies with heterogeneous tokenizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train according to a config and write metrics and artifacts.
    Run {
        config: PathBuf,
        /// Overrides the config's worker count.
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the closed-form results against enumeration.
    Oracle {
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Per-length alignment error for every ordered tokenizer pair of a config.
    DiagnoseThl {
        config: PathBuf,
        /// Inclusive upper bounds of the length buckets, in target tokens.
        #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 4, 8, 16])]
        buckets: Vec<usize>,
    },
    /// Print a diagnostic table of a finished run as CSV.
    Report {
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        table: Table,
        /// Which policy snapshot the complementarity table decodes.
        #[arg(long, value_enum, default_value_t = Stage::Last)]
        stage: Stage,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    Activation,
    Ratios,
    Complementarity,
    Channels,
    Cost,
    Teacher,
    Shuffle,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Initial,
    Last,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, workers, out } => run(&config, workers, out),
        Command::Oracle { workers } => {
            let checks = run_suite(&Executor::new(workers));
            for c in &checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value);
            }
            Ok(checks.iter().all(|c| c.pass))
        }
        Command::DiagnoseThl { config, buckets } => diagnose_thl(&config, &buckets),
        Command::Report { run_dir, table, stage } => report(&run_dir, table, stage),
    }
}

fn run(path: &Path, workers: Option<usize>, out: Option<PathBuf>) -> Result<bool> {
    let cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    let dir = match out.or_else(|| cfg.resolved_output_dir()) {
        Some(d) => d,
        None => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
            let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "runs".into());
            root.join(stem)
        }
    };
    let exec = Executor::new(workers.unwrap_or(cfg.workers));
    let out = run_to_dir(&cfg, &exec, &dir).with_context(|| format!("running {}", path.display()))?;

    let mut ok = true;
    let perturb: Vec<_> = out.artifacts.iter().filter_map(|r| r.perturbation).collect();
    if perturb.iter().any(|p| !p.holds) {
        eprintln!("perturbation bound violated on a gated step");
        ok = false;
    }
    let channels = channel_decomposition(&out.artifacts);
    if channels.violations > 0 {
        eprintln!("{} prompts usable by SGT but not by XGRPO", channels.violations);
        ok = false;
    }
    if cfg.regime == Regime::Sgt && cfg.sgt.per_prompt_cap == 1 {
        let cost = cost_report(&cfg, &out.artifacts);
        if !cost.within_bound {
            eprintln!("auxiliary sequence fraction {} above {}", cost.max_step_sequence_fraction, cost.bound);
            ok = false;
        }
    }
    for m in out.metrics.iter().rev().take(cfg.policies.len()).rev() {
        println!(
            "step {} {}: reward {:.3} entropy {:.3} kl {:.2e}",
            m.step, m.policy_id, m.train_reward_mean, m.entropy, m.kl_to_reference
        );
    }
    println!("wrote {}", dir.display());
    Ok(ok)
}

fn diagnose_thl(path: &Path, buckets: &[usize]) -> Result<bool> {
    let cfg = ExperimentConfig::load(path)?;
    let resolved = cfg.resolve()?;
    let scorer = &resolved.policies[0];
    let corpus: Vec<(usize, String)> = resolved
        .env
        .prompts
        .iter()
        .enumerate()
        .flat_map(|(p, pr)| pr.responses.iter().map(move |r| (p, r.clone())))
        .collect();
    let mut ids: Vec<&String> = resolved.specs.keys().collect();
    ids.sort();
    println!("pair,bucket,texts,words,thl_rel_mae,baseline_rel_mae,prefix_leak_max,residual_max");
    let mut ok = true;
    for src in &ids {
        for tgt in &ids {
            if src == tgt {
                continue;
            }
            let stats = alignment_error_stats(
                &corpus,
                &resolved.specs[*src],
                &resolved.specs[*tgt],
                scorer,
                buckets,
                &cfg.thl,
            )?;
            for b in stats {
                let bucket = b.bucket.map(|x| format!("<={x}")).unwrap_or_else(|| "longer".into());
                println!(
                    "{src}->{tgt},{bucket},{},{},{},{},{},{}",
                    b.texts, b.words, b.thl_rel_mae, b.baseline_rel_mae, b.prefix_leak_max, b.residual_max
                );
                ok &= [b.thl_rel_mae, b.baseline_rel_mae, b.prefix_leak_max, b.residual_max]
                    .iter()
                    .all(|v| v.is_finite());
            }
        }
    }
    Ok(ok)
}

fn report(dir: &Path, table: Table, stage: Stage) -> Result<bool> {
    let run = RunDir::load(dir).with_context(|| format!("reading run directory {}", dir.display()))?;
    let band = run.config.diagnostics.ratio_band;
    let (text, ok) = match table {
        Table::Activation => {
            let t = activation_profile(&run.artifacts);
            let ok = t.iter().all(|r| r.gated + r.ungated == r.prompts);
            (csv_string(&t)?, ok)
        }
        Table::Ratios => (csv_string(&ratio_statistics(&run.artifacts, band))?, true),
        Table::Complementarity => {
            let snaps = match stage {
                Stage::Initial => &run.policies.initial,
                Stage::Last => &run.policies.last,
            };
            let (env, policies) = restore_policies(&run.config, snaps)?;
            let t = complementarity_report(&env, &policies);
            (t.to_csv()?, t.pool.identities_hold())
        }
        Table::Channels => {
            let t = channel_decomposition(&run.artifacts);
            let summed: usize = t.cells.iter().map(|c| c.count).sum::<usize>() + t.violations;
            if summed != t.total {
                bail!("channel cells sum to {summed}, expected {}", t.total);
            }
            (format!("{}violations,{}\n", csv_string(&t.cells)?, t.violations), t.violations == 0)
        }
        Table::Cost => {
            let t = cost_report(&run.config, &run.artifacts);
            let ok = t.within_bound || run.config.regime != Regime::Sgt || run.config.sgt.per_prompt_cap != 1;
            (csv_string(&[t])?, ok)
        }
        Table::Teacher => (csv_string(&matched_teacher_check(&run.artifacts))?, true),
        Table::Shuffle => {
            let t = shuffled_pool_control(&run.artifacts);
            let ok = t.iter().all(|r| (0.0..=1.0).contains(&r.sign_flip_rate));
            (csv_string(&t)?, ok)
        }
    };
    print!("{text}");
    Ok(ok)
}
