//! `geotrain`: simulate geo-distributed pipeline training, pick DP-cell
//! counts, compare what-if scenarios and pack prefills into bubbles.
//!
//! Exit codes: 0 success, 1 output failure, 2 configuration error,
//! 3 infeasible plan. Every output file of a run is computed first and
//! then moved into place, so a failing run leaves no files behind.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use geotrain::bubbletea::{read_requests_csv, results_csv, same_rank_pipelines, schedule_prefills, synthetic_requests};
use geotrain::comm::WanMode;
use geotrain::config::{load_run, RunDocument, Workload};
use geotrain::engine::{run, run_problem};
use geotrain::error::{ConfigError, PlanError, SimError};
use geotrain::export::{
    chrome_trace, metrics_csv, pretty_table, selection_csv, sweep_csv, tasks_csv, transfers_csv, whatif_summary_csv,
};
use geotrain::metrics::{report, utilization};
use geotrain::schedule::{append_allreduce, Policy, ProblemOptions, Timeline};
use geotrain::select::{f_sweep, whatif, Scenario, SelectionInput};
use geotrain::units::Nanos;
use geotrain::workload::build_plan;

#[derive(Parser)]
#[command(name = "geotrain", version, about = "Pipeline-parallel training across datacenters")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one iteration; writes metrics.csv and trace.json.
    Simulate(RunArgs),
    /// Sweep the DP-cell count; writes selection.csv (and sweep.csv with a `sweep` section).
    SelectDc(PlanArgs),
    /// Evaluate every scenario against the Varuna baseline; writes whatif.csv and whatif_summary.csv.
    Whatif(PlanArgs),
    /// Place prefill requests into training bubbles; writes prefill_results.csv, utilization.csv and trace.json.
    Bubbletea(BubbleArgs),
    /// Run one iteration; writes trace.json, tasks.csv and transfers.csv.
    Trace(RunArgs),
}

#[derive(Args)]
struct Paths {
    /// Run document (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    paths: Paths,
    /// gpipe, 1f1b, varuna or atlas.
    #[arg(long, default_value = "atlas")]
    policy: Policy,
    /// Baselines open parallel TCP connections per node pair; ATLAS always does.
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    multi_conn: bool,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    recompute: bool,
    /// In-flight microbatches per stage for Varuna and ATLAS; default is the stage count.
    #[arg(long)]
    mem_limit: Option<u32>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    paths: Paths,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    recompute: bool,
    #[arg(long)]
    mem_limit: Option<u32>,
}

#[derive(Args)]
struct BubbleArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Seed of the synthetic request stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// End of the bubble search window in ms; default is the iteration makespan.
    #[arg(long)]
    horizon: Option<f64>,
    /// Request trace CSV (`id,arrival_ms,tokens[,model_id]`); overrides `prefill.requests`.
    requests: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Infeasible(String),
    Output(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Output(_) => 1,
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Infeasible(m) => write!(f, "infeasible: {m}"),
            CliError::Output(m) => write!(f, "output error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        CliError::Infeasible(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Infeasible(e.to_string())
    }
}

/// Files of one run, written only once all of them exist in memory.
struct Outputs(Vec<(&'static str, String)>);

impl Outputs {
    fn commit(self, dir: &Path) -> Result<(), CliError> {
        let io = |e: std::io::Error| CliError::Output(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut staged = Vec::with_capacity(self.0.len());
        for (name, body) in self.0 {
            let mut f = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
            f.write_all(body.as_bytes()).map_err(io)?;
            staged.push((f, dir.join(name)));
        }
        for (f, path) in staged {
            f.persist(&path)
                .map_err(|e| CliError::Output(format!("{}: {}", path.display(), e.error)))?;
        }
        Ok(())
    }
}

fn load(paths: &Paths) -> Result<RunDocument, CliError> {
    let text = std::fs::read_to_string(&paths.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", paths.config.display())))?;
    Ok(load_run(&text)?)
}

fn need_cluster(doc: &RunDocument, cmd: &str) -> Result<(), CliError> {
    match doc.workload {
        Workload::Cluster(_) => Ok(()),
        Workload::Cell(_) => Err(CliError::Config(format!("{cmd} needs a cluster document, not a `cell`"))),
    }
}

/// One iteration under `args`; cluster runs end with the stage all-reduce.
/// Also returns which stage boundaries cross the WAN.
fn iteration(doc: &RunDocument, args: &RunArgs) -> Result<(Timeline, Vec<bool>), CliError> {
    match &doc.workload {
        Workload::Cell(pr) => {
            let mut pr = pr.clone();
            if !args.recompute {
                pr.recompute.iter_mut().for_each(|r| *r = Nanos::ZERO);
            }
            let t = run_problem(&pr, args.policy, args.mem_limit)?;
            Ok((t, pr.links.iter().map(|l| l.wan).collect()))
        }
        Workload::Cluster(c) => {
            let plan = build_plan(&c.topo, &c.model, &c.params)?;
            let opts = ProblemOptions {
                policy: args.policy,
                wan_mode: WanMode::from_multi_conn(args.multi_conn),
                recompute: args.recompute,
                mem_limit: args.mem_limit,
            };
            let t = run(&plan, &c.model, &c.topo, c.durations(), &opts)?;
            Ok((append_allreduce(t, &plan, &c.model, &c.topo), c.wan_boundaries()))
        }
    }
}

fn simulate(args: &RunArgs) -> Result<(), CliError> {
    let doc = load(&args.paths)?;
    let (t, wan) = iteration(&doc, args)?;
    let r = report(&t, None, &wan);
    Outputs(vec![("metrics.csv", metrics_csv(&r)), ("trace.json", chrome_trace(&t))]).commit(&args.paths.out)?;
    println!(
        "{}: iteration {:.3} ms, {:.4} iterations/s, mean utilization {:.3}",
        args.policy, r.iteration_ms, r.throughput_iters_per_s, r.mean_utilization
    );
    Ok(())
}

fn trace(args: &RunArgs) -> Result<(), CliError> {
    let doc = load(&args.paths)?;
    let (t, _) = iteration(&doc, args)?;
    Outputs(vec![
        ("trace.json", chrome_trace(&t)),
        ("tasks.csv", tasks_csv(&t)),
        ("transfers.csv", transfers_csv(&t)),
    ])
    .commit(&args.paths.out)?;
    println!("{}: {} tasks, {} transfers", args.policy, t.tasks.len(), t.transfers.len());
    Ok(())
}

fn tune(mut inp: SelectionInput, args: &PlanArgs) -> SelectionInput {
    inp.recompute = args.recompute;
    inp.mem_limit = args.mem_limit;
    inp
}

fn select_dc(args: &PlanArgs) -> Result<(), CliError> {
    let doc = load(&args.paths)?;
    need_cluster(&doc, "select-dc")?;
    let input = tune(doc.selection_input().expect("cluster document"), args);
    let first = input.topo.datacenters[0].gpu_count;
    let results = whatif(&[Scenario {
        name: "base".into(),
        input,
    }])?;
    let table = selection_csv(&results);
    let mut files = vec![("selection.csv", table.clone())];
    if let Some(steps) = doc.sweep_steps {
        if doc.sweep_input(first).is_none() {
            return Err(CliError::Config("sweep needs exactly two datacenters".into()));
        }
        let rows = f_sweep(first, steps, |second| tune(doc.sweep_input(second).expect("two datacenters"), args))?;
        files.push(("sweep.csv", sweep_csv(&rows)));
    }
    Outputs(files).commit(&args.paths.out)?;
    print!("{}", pretty_table(&table));
    Ok(())
}

fn what_if(args: &PlanArgs) -> Result<(), CliError> {
    let doc = load(&args.paths)?;
    need_cluster(&doc, "whatif")?;
    let scenarios: Vec<Scenario> = doc
        .scenarios()?
        .into_iter()
        .map(|s| Scenario {
            input: tune(s.input, args),
            ..s
        })
        .collect();
    let results = whatif(&scenarios)?;
    let summary = whatif_summary_csv(&results);
    Outputs(vec![("whatif.csv", selection_csv(&results)), ("whatif_summary.csv", summary.clone())])
        .commit(&args.paths.out)?;
    print!("{}", pretty_table(&summary));
    Ok(())
}

fn bubbletea(args: &BubbleArgs) -> Result<(), CliError> {
    let doc = load(&args.run.paths)?;
    need_cluster(&doc, "bubbletea")?;
    let c = doc.cluster().expect("cluster document");
    let (t, _) = iteration(&doc, &args.run)?;
    let requests = match &args.requests {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            read_requests_csv(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => doc
            .prefill
            .stream
            .map(|s| synthetic_requests(&s, args.seed))
            .unwrap_or_default(),
    };
    let horizon = match args.horizon {
        Some(ms) if ms > 0.0 && ms.is_finite() => Nanos::from_ms(ms),
        Some(ms) => return Err(CliError::Config(format!("--horizon must be positive, got {ms}"))),
        None => t.makespan,
    };
    let plan = build_plan(&c.topo, &c.model, &c.params)?;
    let pre = &doc.prefill;
    let pipes = same_rank_pipelines(&plan, pre.inference_layers, pre.inference_model_bytes);
    for p in &pipes {
        p.validate(&c.topo, pre.config.memory_budget)
            .map_err(|e| CliError::Infeasible(e.to_string()))?;
    }
    let (placed, out) = schedule_prefills(&t, horizon, &requests, &pipes, &pre.config);
    let (before, after) = (utilization(&t, horizon), utilization(&out, horizon));
    let summary = format!(
        "metric,value\nhorizon_ms,{}\nutilization_before,{before}\nutilization_after,{after}\naccepted,{}\nrejected,{}\n",
        horizon.as_ms(),
        placed.accepted.len(),
        placed.rejected.len()
    );
    Outputs(vec![
        ("prefill_results.csv", results_csv(&placed)),
        ("utilization.csv", summary),
        ("trace.json", chrome_trace(&out)),
    ])
    .commit(&args.run.paths.out)?;
    println!(
        "utilization {before:.3} -> {after:.3}; {} accepted, {} rejected",
        placed.accepted.len(),
        placed.rejected.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::SelectDc(a) => select_dc(a),
        Cmd::Whatif(a) => what_if(a),
        Cmd::Bubbletea(a) => bubbletea(a),
        Cmd::Trace(a) => trace(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("geotrain: {e}");
            ExitCode::from(e.code())
        }
    }
}
