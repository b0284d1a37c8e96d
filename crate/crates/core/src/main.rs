use clap::{Args, Parser, Subcommand};
use internodes::harness::{
    builtin_case, builtin_cases, case_to_config, check_scale, exact_name, parse_config, run_case, run_sweep,
    write_meta, write_report, write_solution_grid, CaseConfig, CaseOptions, Degrees, Method, PrecondName, SweepRow,
};
use internodes::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "internodes", version, about = "Isogeometric multipatch solver with INTERNODES coupling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one configuration.
    Run {
        /// TOML configuration file.
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Convergence sweep of a built-in case over degrees and nbar values.
    Sweep {
        config: PathBuf,
        /// Degree sets, e.g. `2,3` or `4/3,5/3` for per-role degrees.
        #[arg(long, value_delimiter = ',')]
        p: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        nbar: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// List the built-in cases.
    ListCases,
    /// Print a built-in case as an explicit configuration.
    DumpCase {
        name: String,
        #[arg(long, value_delimiter = '/')]
        p: Option<Vec<usize>>,
        #[arg(long)]
        nbar: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, value_parser = ["bicgstab", "gmres", "monolithic"])]
    solver: Option<String>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, value_parser = ["none", "local_schur", "dn"])]
    precond: Option<String>,
    /// Output directory; defaults to `output.dir` of the configuration, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Allow the 3D cases above smoke scale (nbar > 3); expect minutes to hours.
    #[arg(long)]
    full: bool,
    /// Also write the sampled solution (`solution_grid.csv`).
    #[arg(long)]
    grid: bool,
    /// Write zero timings for byte-stable reports.
    #[arg(long)]
    no_timing: bool,
}

enum Failure {
    Config(String),
    NotConverged,
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            e => Failure::Other(e.to_string()),
        }
    }
}

fn load(path: &PathBuf, common: &Common) -> Result<CaseConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    if let Some(s) = &common.solver {
        cfg.solver.method = match s.as_str() {
            "gmres" => Method::Gmres,
            "monolithic" => Method::Monolithic,
            _ => Method::Bicgstab,
        };
    }
    if let Some(t) = common.tol {
        cfg.solver.tol = t;
    }
    if let Some(p) = &common.precond {
        cfg.solver.precond = Some(match p.as_str() {
            "local_schur" => PrecondName::LocalSchur,
            "dn" => PrecondName::Dn,
            _ => PrecondName::None,
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &CaseConfig) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().or_else(|| cfg.output.dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| "out".into());
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Other(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_outputs(
    common: &Common,
    cfg: &CaseConfig,
    rows: &[SweepRow],
    rates: &[internodes::harness::Rate],
) -> Result<(), Failure> {
    let dir = out_dir(common, cfg)?;
    write_report(&dir.join("report.csv"), rows, !common.no_timing)?;
    write_meta(&dir.join("meta.txt"), cfg, rows, rates)?;
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::ListCases => {
            for (name, desc) in builtin_cases() {
                println!("{name:24} {desc}");
            }
            Ok(())
        }
        Command::DumpCase { name, p, nbar } => {
            let d = CaseOptions::default();
            let o = CaseOptions { p: p.unwrap_or(d.p.clone()), nbar: nbar.unwrap_or(d.nbar), ..d };
            let case = builtin_case(&name, &o)?;
            let text = toml::to_string(&case_to_config(&case)).map_err(|e| Failure::Other(e.to_string()))?;
            print!("{text}");
            Ok(())
        }
        Command::Run { config, common } => {
            let cfg = load(&config, &common)?;
            check_scale(&cfg, &[cfg.options().nbar], common.full)?;
            let case = cfg.build()?;
            let out = run_case(&case, &cfg.solver);
            let row = match &out {
                Ok(r) => {
                    println!("case {} (exact: {})", r.case, exact_name(&case));
                    println!("dofs {}  h {:.4e}  d_gamma {:.4e}", r.dofs, r.h, r.d_gamma);
                    println!(
                        "iterations {}  relative residual {:.3e}  converged {}{}",
                        r.krylov.iterations,
                        r.krylov.relative_residual().unwrap_or(0.0),
                        r.krylov.converged,
                        if r.krylov.breakdown { " (breakdown)" } else { "" }
                    );
                    if let Some(e) = r.err_broken {
                        println!("broken H1 error {e:.6e}");
                    }
                    if common.grid || cfg.output.grid {
                        let dir = out_dir(&common, &cfg)?;
                        write_solution_grid(&dir.join("solution_grid.csv"), &case.problem.patches, &r.solution)?;
                    }
                    (case.degrees.clone(), case.nbar, Ok(r.clone()))
                }
                Err(e) => (case.degrees.clone(), case.nbar, Err(e.to_string())),
            };
            write_outputs(&common, &cfg, std::slice::from_ref(&row), &[])?;
            match out {
                Ok(r) if !r.krylov.converged => Err(Failure::NotConverged),
                Ok(_) => Ok(()),
                Err(e) if e.stage == "solve" => Err(Failure::Other(e.to_string())),
                Err(e) => Err(Failure::from(e.error)),
            }
        }
        Command::Sweep { config, p, nbar, common } => {
            let cfg = load(&config, &common)?;
            let degrees = if p.is_empty() {
                vec![cfg.options().p]
            } else {
                p.iter()
                    .map(|s| {
                        s.split('/')
                            .map(|d| {
                                d.trim().parse::<usize>().map_err(|e| Failure::Config(format!("degree '{d}': {e}")))
                            })
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?
            };
            let nbars = if nbar.is_empty() { vec![cfg.options().nbar] } else { nbar };
            check_scale(&cfg, &nbars, common.full)?;
            let echo = CaseConfig { p: Some(Degrees::Many(degrees[0].clone())), ..cfg.clone() };
            let (rows, rates) = run_sweep(&cfg, &degrees, &nbars)?;
            for (p, n, out) in &rows {
                let tag = p.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("/");
                match out {
                    Ok(r) => println!(
                        "p={tag} nbar={n} h={:.4e} dofs={} err={} its={} converged={}",
                        r.h,
                        r.dofs,
                        r.err_broken.map(|e| format!("{e:.4e}")).unwrap_or_else(|| "n/a".into()),
                        r.krylov.iterations,
                        r.krylov.converged
                    ),
                    Err(e) => println!("p={tag} nbar={n} failed: {e}"),
                }
            }
            for r in &rates {
                let tag = r.degrees.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("/");
                let ci = r.ci95.map(|c| format!(" +/- {c:.3}")).unwrap_or_default();
                println!("rate p={tag}: {:.3}{ci}", r.slope);
            }
            write_outputs(&common, &echo, &rows, &rates)?;
            if rows.iter().any(|(_, _, o)| matches!(o, Ok(r) if !r.krylov.converged)) {
                return Err(Failure::NotConverged);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NotConverged) => {
            eprintln!("error: Krylov solver did not converge");
            ExitCode::from(2)
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: configuration: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
