//! `iclpac`: scenario checks, bound calculation, verification campaigns and plots.

mod plot;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use icl_pac::diagnostics::{
    check_theorem2_conditions, kl_monte_carlo, lemma1_sample_complexity, margin_thresholds, scenario_constants,
    LEMMA1_CONDITION,
};
use icl_pac::experiments::{run_campaign, write_records_csv, Campaign, ExperimentConfig, ModelKind};
use icl_pac::seed::rng_from_parts;
use icl_pac::{Error, MixtureModel, ScenarioFile};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "iclpac",
    version,
    about = "In-context learning guarantees for latent-concept Markov mixtures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print scenario constants and the margin-preservation conditions for every concept.
    Check {
        scenario: PathBuf,
        /// Also estimate every pairwise sequence KL from this many samples.
        #[arg(long)]
        kl_samples: Option<usize>,
        #[arg(long, env = "ICL_PAC_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Closed-form prompt length needed for the prompt-ratio and margin guarantees.
    Bounds {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        /// Downstream task concept; defaults to the scenario's.
        #[arg(long)]
        task: Option<usize>,
    },
    /// Run a campaign and write records CSV plus summary JSON.
    Run(RunArgs),
    /// Line chart of one CSV column against another.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = "k")]
        x: String,
        #[arg(long, default_value = "log_ratio")]
        y: String,
        /// A column name, or `flip_prob` to group by the flip level in each file name.
        #[arg(long)]
        group_by: Option<String>,
        #[arg(long)]
        log_y: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CampaignArg {
    Lemma1,
    Theorem1,
    Regret,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Exact,
    Perturbed,
    Empirical,
}

#[derive(clap::Args)]
struct RunArgs {
    campaign: CampaignArg,
    scenario: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,5,10,20,50")]
    k_grid: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    flip_prob: Vec<f64>,
    #[arg(long, value_enum, default_value = "exact")]
    model: ModelArg,
    #[arg(long, default_value_t = 0.05)]
    delta_pretraining: f64,
    #[arg(long, default_value_t = 10_000)]
    pretrain_docs: usize,
    /// Add-alpha smoothing for the empirical model.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long)]
    task: Option<usize>,
    /// Run even when the separation condition fails.
    #[arg(long)]
    force: bool,
    #[arg(long, env = "ICL_PAC_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

/// Process outcome: 0 success, 1 input, 2 condition, 3 I/O.
enum Failure {
    Input(String),
    Condition(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Condition(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Condition(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::ConditionViolated { .. } => Failure::Condition(e.to_string()),
            Error::Io(_) => Failure::Io(e.to_string()),
            Error::Csv(c) if c.is_io_error() => Failure::Io(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn load(path: &Path) -> std::result::Result<(ScenarioFile, MixtureModel), Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let scenario = ScenarioFile::from_json(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let mixture = scenario
        .mixture()
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Ok((scenario, mixture))
}

fn scenario_name(scenario: &ScenarioFile, path: &Path) -> String {
    scenario.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
    })
}

fn print_json(value: &impl serde::Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn cmd_check(path: &Path, kl_samples: Option<usize>, seed: u64) -> CmdResult {
    let (scenario, mixture) = load(path)?;
    let report = check_theorem2_conditions(&mixture, scenario.length)?;
    let mut out = json!({
        "scenario": scenario_name(&scenario, path),
        "T": scenario.length,
        "all_pass": report.all_pass,
        "report": report,
    });
    if let Some(n) = kl_samples {
        let mut table = Vec::new();
        for i in 0..mixture.len() {
            for j in (0..mixture.len()).filter(|j| *j != i) {
                let mut rng = rng_from_parts(&[seed, i as u64, j as u64]);
                let est = kl_monte_carlo(mixture.concept(i), mixture.concept(j), scenario.length, n, &mut rng)?;
                table.push(json!({"from": i, "to": j, "exact": report.concepts[i].constants.kl_table[i][j], "monte_carlo": est}));
            }
        }
        out["kl_monte_carlo"] = json!(table);
    }
    print_json(&out)?;
    let failures: Vec<String> = report
        .failures()
        .map(|(c, k)| format!("concept {c}: {} ({} vs {})", k.name, k.lhs, k.rhs))
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Condition(format!(
            "condition violated: {}",
            failures.join("; ")
        )))
    }
}

fn cmd_bounds(path: &Path, delta: f64, epsilon: f64, task: Option<usize>) -> CmdResult {
    let (scenario, mixture) = load(path)?;
    let task = task.unwrap_or(scenario.task);
    let k = scenario_constants(&mixture, task, scenario.length)?;
    let inputs = json!({
        "delta": delta,
        "epsilon": epsilon,
        "c1": k.c1,
        "c2": k.c2,
        "c3": k.c3,
        "T": k.length,
        "delta_kl": k.delta_kl,
        "min_task_margin": k.min_task_margin,
        "condition": LEMMA1_CONDITION,
        "condition_rhs": 8.0 * (1.0 / (k.c1 * k.c2)).ln(),
    });
    match lemma1_sample_complexity(delta, epsilon, k.c1, k.c2, k.length, k.delta_kl) {
        Ok(result) => {
            let margin = (k.min_task_margin > 0.0)
                .then(|| margin_thresholds(&k, k.min_task_margin, delta))
                .transpose()?;
            print_json(&json!({
                "scenario": scenario_name(&scenario, path),
                "task": task,
                "inputs": inputs,
                "lemma1": result,
                "margin": margin,
            }))
        }
        Err(e @ Error::ConditionViolated { .. }) => {
            print_json(&json!({
                "scenario": scenario_name(&scenario, path),
                "task": task,
                "inputs": inputs,
                "error": e.to_string(),
            }))?;
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_run(args: &RunArgs) -> CmdResult {
    let (scenario, mixture) = load(&args.scenario)?;
    let campaign = match args.campaign {
        CampaignArg::Lemma1 => Campaign::Lemma1,
        CampaignArg::Theorem1 => Campaign::Theorem1,
        CampaignArg::Regret => Campaign::Regret,
    };
    let config = ExperimentConfig {
        scenario: scenario_name(&scenario, &args.scenario),
        model: match args.model {
            ModelArg::Exact => ModelKind::Exact,
            ModelArg::Perturbed => ModelKind::Perturbed {
                delta: args.delta_pretraining,
            },
            ModelArg::Empirical => ModelKind::Empirical {
                n_docs: args.pretrain_docs,
                alpha: args.alpha,
            },
        },
        k_grid: args.k_grid.clone(),
        flip_grid: args.flip_prob.clone(),
        length: scenario.length,
        num_trials: args.trials,
        base_seed: args.seed,
        delta: args.delta,
        epsilon: args.epsilon,
        task: args.task.unwrap_or(scenario.task),
        allow_infeasible: args.force,
    };
    let pool = rayon_pool(args.workers)?;
    let output = match pool.install(|| run_campaign(campaign, &mixture, &config)) {
        Ok(o) => o,
        Err(e @ Error::ConditionViolated { .. }) => {
            if let Ok(report) = check_theorem2_conditions(&mixture, scenario.length) {
                print_json(&report)?;
            }
            return Err(Failure::Condition(format!("{e}; pass --force to run anyway")));
        }
        Err(e) => return Err(e.into()),
    };

    std::fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;
    for set in &output.sets {
        let path = args.out.join(format!("records_flip{}.csv", set.flip_prob));
        let file = File::create(&path).map_err(|e| io_failure(&path, e))?;
        write_records_csv(BufWriter::new(file), &set.records).map_err(|e| io_failure(&path, e))?;
    }
    let path = args.out.join("summary.json");
    let text = serde_json::to_string_pretty(&output.summary).map_err(|e| Failure::Io(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| io_failure(&path, e))?;
    eprintln!(
        "{} {}: wrote {} record file(s) and summary.json to {}",
        campaign.name(),
        config.scenario,
        output.sets.len(),
        args.out.display()
    );
    Ok(())
}

fn rayon_pool(workers: usize) -> std::result::Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure::Input(format!("cannot start {workers} workers: {e}")))
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
    let result = match &cli.command {
        Command::Check {
            scenario,
            kl_samples,
            seed,
        } => cmd_check(scenario, *kl_samples, *seed),
        Command::Bounds {
            scenario,
            delta,
            epsilon,
            task,
        } => cmd_bounds(scenario, *delta, *epsilon, *task),
        Command::Run(args) => cmd_run(args),
        Command::Plot {
            csv,
            x,
            y,
            group_by,
            log_y,
            out,
        } => plot::cmd_plot(csv, x, y, group_by.as_deref(), *log_y, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
