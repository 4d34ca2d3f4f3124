use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lorascale_core::experiment::config::OUTPUT_ROOT_ENV;
use lorascale_core::experiment::{self, report, ExperimentConfig, Manifest, Phase};
use lorascale_core::gamma::{classify_table, standard_table_configs};
use lorascale_core::optim::LrSpec;
use lorascale_core::probe::{ProbeConfig, DEFAULT_TOLERANCE};
use lorascale_core::{adam_regime, sgd_regime, GammaExp, SchemeKind};

#[derive(Parser, Debug)]
#[command(name = "lorascale", version, about = "Width-scaling analysis and toy experiments for LoRA initialization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the exponent system for one configuration or print the regime table.
    Gamma(GammaArgs),
    /// Pretrain the toy MLP and write a checkpoint.
    Pretrain(RunArgs),
    /// Fine-tune one (scheme, lr, init size) cell over all seeds.
    Finetune(FinetuneArgs),
    /// Run the full scheme × lr × init size × seed lattice.
    Grid(GridArgs),
    /// Measure width-scaling slopes and compare them with the predicted exponents.
    Probe(ProbeArgs),
    /// Merge grid run directories into summary tables.
    Report(ReportArgs),
    /// Replay a run from its manifest and check the outputs are byte-identical.
    Rerun(RerunArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Opt {
    Adam,
    Sgd,
}

#[derive(Args, Debug)]
struct GammaArgs {
    #[arg(long, value_enum, default_value = "adam")]
    opt: Opt,
    /// Exponent of the initial A, as `p/q`, a decimal or `-inf`.
    #[arg(long, allow_hyphen_values = true)]
    a0: Option<GammaExp>,
    #[arg(long, allow_hyphen_values = true)]
    b0: Option<GammaExp>,
    /// Uniform learning-rate exponent.
    #[arg(long, allow_hyphen_values = true)]
    eta: Option<GammaExp>,
    #[arg(long, allow_hyphen_values = true)]
    eta_a: Option<GammaExp>,
    #[arg(long, allow_hyphen_values = true)]
    eta_b: Option<GammaExp>,
    /// Recurrence steps for `--opt sgd`.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Also require internal stability (γ[Z_A] = 0).
    #[arg(long)]
    internal: bool,
    /// Print the stability / efficiency / robustness table of the standard schemes.
    #[arg(long)]
    table1: bool,
    /// Write the machine-readable rows to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Plain-text `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full protocol (n = 4096, 10 seeds, published grids).
    #[arg(long)]
    paper_scale: bool,
    /// Use the synthetic datasets instead of MNIST / FashionMNIST.
    #[arg(long)]
    synthetic: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    finetune_steps: Option<usize>,
    /// Directory holding the MNIST IDX files.
    #[arg(long)]
    pretrain_data: Option<PathBuf>,
    /// Directory holding the FashionMNIST IDX files.
    #[arg(long)]
    finetune_data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (default: `$LORASCALE_OUT/<phase>` or `runs/<phase>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "init_a")]
    scheme: SchemeKind,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Init size as a multiple of the Kaiming deviation.
    #[arg(long, conflicts_with = "sigma")]
    beta: Option<f64>,
    /// Init size as an absolute standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Run cells one after another instead of in parallel.
    #[arg(long)]
    serial: bool,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// Scheme(s) to probe; repeat for a side-by-side comparison.
    #[arg(long = "scheme")]
    schemes: Vec<SchemeKind>,
    #[arg(long, value_enum, default_value = "adam")]
    opt: Opt,
    #[arg(long, allow_hyphen_values = true)]
    eta: Option<GammaExp>,
    #[arg(long, allow_hyphen_values = true)]
    eta_a: Option<GammaExp>,
    #[arg(long, allow_hyphen_values = true)]
    eta_b: Option<GammaExp>,
    #[arg(long, allow_hyphen_values = true)]
    a0: Option<GammaExp>,
    #[arg(long, allow_hyphen_values = true)]
    b0: Option<GammaExp>,
    /// Learning-rate constant `c` in `η = c·n^γ`.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    master_seed: u64,
    /// Fixed output dimension (default: square layer for Adam, 16 for SGD).
    #[arg(long)]
    out_dim: Option<usize>,
    /// Resample inputs at every width instead of truncating one draw.
    #[arg(long)]
    resample_inputs: bool,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Grid or finetune run directories.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Also write `report.csv` and `report.txt` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RerunArgs {
    /// Manifest file or run directory.
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gamma(a) => cmd_gamma(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Report(a) => cmd_report(a),
        Command::Rerun(a) => cmd_rerun(a),
    }
}

fn mark(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        "✗"
    }
}

fn lr_exponents(eta: Option<GammaExp>, eta_a: Option<GammaExp>, eta_b: Option<GammaExp>) -> Result<(GammaExp, GammaExp)> {
    match (eta, eta_a, eta_b) {
        (Some(e), None, None) => Ok((e, e)),
        (None, Some(a), Some(b)) => Ok((a, b)),
        (Some(e), a, b) => Ok((a.unwrap_or(e), b.unwrap_or(e))),
        _ => bail!("give --eta, or both --eta-a and --eta-b"),
    }
}

fn cmd_gamma(a: GammaArgs) -> Result<()> {
    let mut csv = String::new();
    if a.table1 {
        println!("{:<10} stable efficient robust  optimal eta", "scheme");
        csv.push_str("scheme,stable,efficient,robust,optimal_eta\n");
        for row in classify_table(&standard_table_configs())? {
            let eta = row.optimal_eta.map_or_else(|| "-".to_string(), |e| e.to_string());
            println!(
                "{:<10} {:^6} {:^9} {:^6}  {eta}",
                row.name,
                mark(row.stability),
                mark(row.efficiency),
                mark(row.robustness)
            );
            csv.push_str(&format!("{},{},{},{},{eta}\n", row.name, row.stability, row.efficiency, row.robustness));
        }
    } else {
        let (Some(a0), Some(b0)) = (a.a0, a.b0) else {
            bail!("--a0 and --b0 are required unless --table1 is given");
        };
        let (eta_a, eta_b) = lr_exponents(a.eta, a.eta_a, a.eta_b)?;
        match a.opt {
            Opt::Adam => {
                let rep = adam_regime(a0, b0, eta_a, eta_b, a.internal)?;
                println!(
                    "a0={a0} b0={b0} eta_a={eta_a} eta_b={eta_b}\n\
                     gamma: d1={} d2={} d3={} zA={} zB={}",
                    rep.gamma_d1, rep.gamma_d2, rep.gamma_d3, rep.gamma_za, rep.gamma_zb
                );
                let mut verdict = format!(
                    "stable {} efficient {} robust {}",
                    mark(rep.stable),
                    mark(rep.efficient),
                    mark(rep.robust())
                );
                if a.internal {
                    verdict.push_str(&format!(" internally-stable {}", mark(rep.internally_stable)));
                }
                if !rep.stable && rep.bounded {
                    verdict.push_str(" (bounded: output vanishes with width)");
                }
                println!("{verdict}");
                csv = format!("{}\n{}\n", lorascale_core::RegimeReport::CSV_HEADER, rep.csv_row());
                println!("{}", rep.csv_row());
            }
            Opt::Sgd => {
                let steps = sgd_regime(a0, b0, eta_a, eta_b, a.steps)?;
                println!("{:>4} {:>8} {:>8} {:>8} {:>8} {:>8}  efficient", "t", "a", "b", "d1", "d2", "f");
                csv.push_str("t,gamma_a,gamma_b,gamma_d1,gamma_d2,gamma_f,efficient\n");
                for s in &steps {
                    println!(
                        "{:>4} {:>8} {:>8} {:>8} {:>8} {:>8}  {}",
                        s.t,
                        s.gamma_a.to_string(),
                        s.gamma_b.to_string(),
                        s.gamma_d1.to_string(),
                        s.gamma_d2.to_string(),
                        s.gamma_f.to_string(),
                        mark(s.efficient())
                    );
                    csv.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        s.t,
                        s.gamma_a,
                        s.gamma_b,
                        s.gamma_d1,
                        s.gamma_d2,
                        s.gamma_f,
                        s.efficient()
                    ));
                }
                let all = steps.iter().all(|s| s.efficient());
                println!("{}", if all { "all steps efficient" } else { "not efficient at every step" });
            }
        }
    }
    if let Some(path) = a.csv {
        std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn build_config(run: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = if run.paper_scale {
        ExperimentConfig::paper_scale()
    } else {
        ExperimentConfig::desk()
    };
    if let Some(path) = &run.config {
        cfg.apply_file(path)?;
    }
    for kv in &run.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if run.synthetic {
        cfg.synthetic = true;
    }
    macro_rules! over {
        ($($field:ident),*) => { $( if let Some(v) = &run.$field { cfg.$field = v.clone(); } )* };
    }
    over!(n, r, seeds, master_seed, pretrain_steps, finetune_steps);
    if run.pretrain_data.is_some() {
        cfg.pretrain_data = run.pretrain_data.clone();
    }
    if run.finetune_data.is_some() {
        cfg.finetune_data = run.finetune_data.clone();
    }
    if run.checkpoint.is_some() {
        cfg.checkpoint = run.checkpoint.clone();
    }
    if run.out.is_some() {
        cfg.out_dir = run.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(explicit: Option<&Path>, phase: Phase) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(phase.to_string()),
    }
}

fn cmd_pretrain(run: RunArgs) -> Result<()> {
    let cfg = build_config(&run)?;
    let out = out_dir(cfg.out_dir.as_deref(), Phase::Pretrain);
    let res = experiment::run_pretrain(&cfg, &out)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{:>6} {:>10} {:>10} {:>9}", "step", "train", "test", "accuracy")?;
    for row in &res.log {
        writeln!(
            stdout,
            "{:>6} {:>10.5} {:>10.5} {:>9.4}",
            row.step, row.train_loss, row.test_loss, row.test_accuracy
        )?;
    }
    writeln!(stdout, "wrote {}", out.join(experiment::CHECKPOINT_FILE).display())?;
    Ok(())
}

fn print_grid(outcome: &experiment::GridOutcome) -> Result<()> {
    let text = std::fs::read_to_string(outcome.dir.join(experiment::SUMMARY_TXT))?;
    print!("{text}");
    println!("wrote {}", outcome.dir.display());
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = build_config(&a.run)?;
    cfg.schemes = vec![a.scheme];
    cfg.lrs = vec![a.lr];
    match (a.beta, a.sigma) {
        (_, Some(sigma)) => {
            cfg.init_axis = experiment::InitAxis::Sigma;
            cfg.init_sizes = vec![sigma];
        }
        (beta, None) => {
            cfg.init_axis = experiment::InitAxis::Beta;
            cfg.init_sizes = vec![beta.unwrap_or(1.0)];
        }
    }
    cfg.validate()?;
    let out = out_dir(cfg.out_dir.as_deref(), Phase::Finetune);
    let outcome = experiment::run_grid_phase(&cfg, &out, true, Phase::Finetune)?;
    for row in &outcome.grid.rows {
        println!(
            "seed {}: step-0 loss {:.6}  final loss {:.6}  accuracy {:.4}{}",
            row.spec.seed,
            row.step0_test_loss,
            row.final_test_loss,
            row.final_test_accuracy,
            row.failure.as_deref().map(|f| format!("  FAILED: {f}")).unwrap_or_default()
        );
    }
    print_grid(&outcome)
}

fn cmd_grid(a: GridArgs) -> Result<()> {
    let cfg = build_config(&a.run)?;
    let out = out_dir(cfg.out_dir.as_deref(), Phase::Grid);
    let outcome = experiment::run_grid_phase(&cfg, &out, !a.serial, Phase::Grid)?;
    print_grid(&outcome)
}

fn probe_configs(a: &ProbeArgs) -> Result<Vec<ProbeConfig>> {
    let schemes = if a.schemes.is_empty() {
        vec![match a.opt {
            Opt::Adam => SchemeKind::InitA,
            Opt::Sgd => SchemeKind::InitABPlus,
        }]
    } else {
        a.schemes.clone()
    };
    let default_eta = GammaExp::ratio(-1, 2);
    let (eta_a, eta_b) = match (a.eta, a.eta_a, a.eta_b) {
        (None, None, None) => (default_eta, default_eta),
        (e, ea, eb) => lr_exponents(e.or(Some(default_eta)).filter(|_| ea.is_none() || eb.is_none()), ea, eb)?,
    };
    schemes
        .into_iter()
        .map(|scheme| {
            let mut cfg = match a.opt {
                Opt::Adam => {
                    let mut c = ProbeConfig::new(scheme, eta_a);
                    c.lr = LrSpec::uniform(0.25, eta_a);
                    c
                }
                Opt::Sgd => {
                    let mut c = ProbeConfig::sgd_fixed_output(
                        GammaExp::ratio(-3, 4),
                        GammaExp::ratio(-1, 4),
                        eta_a,
                        0.05,
                        16,
                    );
                    c.scheme = scheme;
                    c
                }
            };
            if eta_a != eta_b {
                cfg.lr = LrSpec::decoupled(cfg.lr.c, eta_a, eta_b);
            }
            if let Some(c) = a.c {
                cfg.lr.c = c;
            }
            if let Some(v) = a.a0 {
                cfg.a0 = v;
            }
            if let Some(v) = a.b0 {
                cfg.b0 = v;
            }
            if let Some(w) = &a.widths {
                cfg.widths = w.clone();
            }
            if let Some(v) = a.r {
                cfg.r = v;
            }
            if let Some(v) = a.steps {
                cfg.steps = v;
            }
            if let Some(v) = a.seeds {
                cfg.seeds = v;
            }
            if a.out_dim.is_some() {
                cfg.out_dim = a.out_dim;
            }
            cfg.master_seed = a.master_seed;
            cfg.shared_inputs = !a.resample_inputs;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let probes = probe_configs(&a)?;
    let out = out_dir(a.out.as_deref(), Phase::Probe);
    let outcome = experiment::run_probe_phase(&probes, a.tolerance, &out)?;
    print!("{}", std::fs::read_to_string(out.join(experiment::VERDICT_TXT))?);
    let pass = outcome.verdicts.iter().all(|v| v.all_pass());
    println!("overall: {}", if pass { "PASS" } else { "FAIL" });
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let merged = report::merge_runs(&a.dirs)?;
    let text = report::render_text(&merged)?;
    print!("{text}");
    if let Some(out) = a.out {
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join("report.txt"), &text)?;
        std::fs::write(out.join("report.csv"), merged.summary.to_csv())?;
        std::fs::write(out.join("merged_grid.csv"), merged.grid.to_csv())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_rerun(a: RerunArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let differ = experiment::rerun(&manifest, &a.out)?;
    if differ.is_empty() {
        println!("all {} outputs reproduced bit-exactly in {}", manifest.outputs.len(), a.out.display());
        Ok(())
    } else {
        bail!("outputs differ from the manifest: {}", differ.join(", "))
    }
}
