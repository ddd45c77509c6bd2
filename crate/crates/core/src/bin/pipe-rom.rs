use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use pipe_rom::baselines::read_arm1;
use pipe_rom::bench::{prepare_dataset, read_snapshots, run_experiment, write_atomic};
use pipe_rom::config::ExperimentConfig;
use pipe_rom::field_data::{split_sequences, write_csv, write_snp1, FieldLayout, SnapshotMatrix};
use pipe_rom::model::{conform, fit_method, read_bundle, write_bundle, Predictor};
use pipe_rom::opinf::read_opi1;
use pipe_rom::pod::{fit_basis, read_pod1, DEFAULT_ENERGY_THRESHOLD, DEFAULT_MAX_RANK};
use pipe_rom::solver::{generate_dataset, inlet_reynolds};
use pipe_rom::{Error, Result};

#[derive(Parser)]
#[command(name = "pipe-rom", version, about = "Reduced-order pipe-flow pressure emulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. solver.n_snapshots=10. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Snp1,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run the surrogate solver and write a snapshot file.
    Datagen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "snp1")]
        format: Format,
    },
    /// Fit the first configured method and write a model bundle.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Snapshot file; the solver runs when neither this nor bench.data is set.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast from the last column of a snapshot file.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        /// Forecast CSV in raw units.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the benchmark and write summary.csv, plot.csv and report.json.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory, overriding bench.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Describe a SNP1, POD1, OPI1, ARM1 or BND1 file.
    Inspect { file: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Datagen { cfg, out, format } => datagen(&cfg.load()?, &out, format),
        Command::Fit { cfg, data, out } => fit(cfg.load()?, data, &out),
        Command::Predict { cfg, model, data, steps, out } => predict(&cfg.load()?, &model, &data, steps, &out),
        Command::Bench { cfg, out } => bench(&cfg.load()?, out),
        Command::Inspect { file } => inspect(&file),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn datagen(config: &ExperimentConfig, out: &Path, format: Format) -> Result<()> {
    let (solver, inlet) = config.solver.to_solver()?;
    let data = generate_dataset(&solver, &inlet, &config.features)?;
    let bytes = match format {
        Format::Snp1 => write_snp1(&data)?,
        Format::Csv => write_csv(&data)?.into_bytes(),
    };
    write_atomic(out, &bytes)?;
    let re = inlet_reynolds(&solver, &inlet)?;
    println!("n_rows {}", data.n_state());
    println!("n_cols {}", data.n_times());
    println!("duration {} s", data.n_times() as f64 * data.dt());
    println!("reynolds {:.2} ({})", re.value, if re.turbulent { "turbulent" } else { "laminar" });
    Ok(())
}

fn fit(mut config: ExperimentConfig, data: Option<PathBuf>, out: &Path) -> Result<()> {
    if let Some(d) = data {
        config.bench.data = Some(d.to_string_lossy().into_owned());
    }
    let method = config
        .bench
        .methods
        .first()
        .cloned()
        .ok_or_else(|| Error::Config("bench.methods is empty".into()))?;
    let dataset = prepare_dataset(&config)?;
    let (train, val, _) = split_sequences(&dataset.data, &config.bench.split)?;
    let basis = if method == "persistence_full" {
        None
    } else {
        Some(config.reduction.rank_policy().apply(&fit_basis(&train)?)?)
    };
    let fitted = fit_method(&method, basis.as_ref(), &train, &val, &config)?.model;
    write_atomic(out, &write_bundle(&fitted)?)?;
    let lambda = fitted.predictor.lambda().map(|l| format!("{l:e}")).unwrap_or_else(|| "-".into());
    let rank = fitted.rank().map(|r| r.to_string()).unwrap_or_else(|| "-".into());
    println!("fitted {method}: rank {rank}, lambda {lambda}, train {} val {}", train.n_times(), val.n_times());
    Ok(())
}

fn predict(config: &ExperimentConfig, model: &Path, data: &Path, steps: usize, out: &Path) -> Result<()> {
    let bundle = read_bundle(&read(model)?)?;
    let history = conform(&read_snapshots(&read(data)?)?, &bundle.layout)?;
    let start = Instant::now();
    let forecast = bundle.forecast(&history, steps, config.bench.block)?;
    let elapsed = start.elapsed().as_secs_f64();
    let result = SnapshotMatrix::with_spacing(
        bundle.layout.clone(),
        history.last_time() + history.dt(),
        history.dt(),
        forecast,
    )?;
    write_atomic(out, write_csv(&result)?.as_bytes())?;
    println!("rollout wall time {elapsed:.6} s for {steps} steps");
    Ok(())
}

fn bench(config: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let report = run_experiment(config)?;
    let dir = out.unwrap_or_else(|| PathBuf::from(&config.bench.out_dir));
    report.write(&dir)?;
    print!("{}", report.summary_csv()?);
    for m in report.methods.iter().filter(|m| !m.is_ok()) {
        eprintln!("method {} failed: {}", m.method, m.error.as_deref().unwrap_or("unknown"));
    }
    println!("report_hash {}", report.report_hash);
    println!("wrote {}", dir.display());
    Ok(())
}

fn print_layout(layout: &FieldLayout) {
    for f in layout.fields() {
        println!("  field {}: {} component(s) x {} point(s)", f.name, f.components, f.points);
    }
}

fn print_sigma(sigma: &[f64]) {
    let head: Vec<String> = sigma.iter().take(8).map(|s| format!("{s:.6e}")).collect();
    println!("sigma head [{}]", head.join(", "));
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = read(path)?;
    let magic = bytes.get(..4).unwrap_or(&bytes);
    match magic {
        b"SNP1" => {
            let s = pipe_rom::field_data::read_snp1(&bytes)?;
            println!("SNP1 snapshot matrix: {} rows x {} columns", s.n_state(), s.n_times());
            println!("t0 {} s, dt {} s", s.t0(), s.dt());
            print_layout(s.layout());
        }
        b"POD1" => {
            let b = read_pod1(&bytes)?;
            println!("POD1 basis: n_state {}, rank {}", b.n_state(), b.rank());
            print_sigma(b.singular_values());
            println!(
                "energy at r = {DEFAULT_MAX_RANK}: {:.6} (threshold {DEFAULT_ENERGY_THRESHOLD})",
                b.energy_at(DEFAULT_MAX_RANK)
            );
        }
        b"OPI1" => {
            let o = read_opi1(&bytes)?;
            println!("OPI1 operators: rank {}, input width {}", o.rank, o.input_width);
            println!("terms {:?}", o.terms);
            println!("lambda {:e}, dt {}", o.lambda, o.dt);
        }
        b"ARM1" => {
            let m = read_arm1(&bytes)?;
            println!("ARM1 linear autoregressive model: rank {}", m.rank());
            println!("lambda {:e}, dt {}", m.lambda, m.dt);
        }
        b"BND1" => {
            let m = read_bundle(&bytes)?;
            println!("BND1 model bundle: method {}", m.method);
            println!("n_state {}, fitted through t = {} s, dt {} s", m.layout.n_state(), m.t_end, m.dt);
            print_layout(&m.layout);
            if let Some(b) = &m.basis {
                println!("basis rank {}, energy {:.6}", b.rank(), b.energy_captured());
                print_sigma(b.singular_values());
            }
            match &m.predictor {
                Predictor::OpInf { ops, input } => {
                    println!("terms {:?}, lambda {:e}", ops.terms, ops.lambda);
                    println!("input {}", if input.is_some() { "inlet U^z" } else { "none" });
                }
                Predictor::LinearAr(ar) => println!("lambda {:e}", ar.lambda),
                _ => println!("no coefficients"),
            }
        }
        other => {
            return Err(Error::Format(format!(
                "unknown magic {:?}, expected one of SNP1, POD1, OPI1, ARM1, BND1",
                String::from_utf8_lossy(other)
            )))
        }
    }
    Ok(())
}
