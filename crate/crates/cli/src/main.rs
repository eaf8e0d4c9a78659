//! Batch command-line front door: build, run, certify, verify, integrate,
//! train, and perturb stability-certified residual networks.
//!
//! Every run reads one JSON configuration (unknown keys rejected), echoes the
//! fully resolved configuration for reproducibility, and writes plain
//! structured text artifacts into the output directory. Exit codes: 0 when
//! every assertion passed, 1 on assertion failures (a report is written
//! first), 2 on configuration errors.

mod config;

use clap::{Parser, Subcommand};
use config::{DatasetSection, NoiseSection, RunConfig};
use stbl_core::cert::{assemble_certificate, verify_growth, verify_sensitivity};
use stbl_core::data::SplitDataset;
use stbl_core::inclusion::{bound_envelope, hypotheses_check, integrate, write_trajectory};
use stbl_core::network::{forward, load_model, save_model, write_trace, NetworkSpec};
use stbl_core::oracle;
use stbl_core::robustness::{evaluate_under_noise, write_noise_table, NoiseSpec};
use stbl_core::train::{init_params, train, write_history, InitScheme};
use stbl_core::{Error, Feature64};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "stbl",
    about = "Forward-stability toolkit for residual networks",
    version
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override for commands that draw randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker-thread count (falls back to the STBL_THREADS environment
    /// variable, then to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize model parameters from the network section.
    Init,
    /// Run a forward pass on a tensor file; writes the output tensor and a
    /// per-state norm trace.
    Forward {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Record full features in memory while tracing (norms are always
        /// recorded).
        #[arg(long)]
        record: bool,
    },
    /// Assemble and print the stability certificate of a model.
    Certify {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run growth and sensitivity verification campaigns on random inputs.
    Verify {
        #[arg(long)]
        model: PathBuf,
    },
    /// Integrate the projected dynamics and check the configured envelopes.
    Integrate,
    /// Train a network on the configured dataset.
    Train,
    /// Evaluate a trained model under the configured noise settings.
    Perturb {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the dense-matrix brute-force suites.
    Oracle {
        /// Random instances per shape in the equivalence grid.
        #[arg(long, default_value_t = 50)]
        per_shape: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config(_) | Error::Format(_) | Error::Io(_) | Error::Shape(_) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    if let Some(threads) = thread_count(cli) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Init => cmd_init(cli),
        Command::Forward {
            model,
            input,
            record,
        } => cmd_forward(cli, model, input, *record),
        Command::Certify { model } => cmd_certify(cli, model),
        Command::Verify { model } => cmd_verify(cli, model),
        Command::Integrate => cmd_integrate(cli),
        Command::Train => cmd_train(cli),
        Command::Perturb { model } => cmd_perturb(cli, model),
        Command::Oracle { per_shape } => cmd_oracle(cli, *per_shape),
    }
}

fn thread_count(cli: &Cli) -> Option<usize> {
    cli.threads.or_else(|| {
        std::env::var("STBL_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
    // echo the fully resolved configuration for reproducibility
    println!(
        "resolved config:\n{}",
        serde_json::to_string_pretty(&cfg).expect("config serializes")
    );
    Ok(cfg)
}

fn network_spec(cfg: &RunConfig) -> Result<NetworkSpec, Error> {
    let spec = cfg
        .network
        .clone()
        .ok_or_else(|| Error::Config("config is missing the network section".into()))?;
    spec.validate()?;
    Ok(spec)
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_init(cli: &Cli) -> Result<ExitCode, Error> {
    let cfg = load_config(cli)?;
    let spec = network_spec(&cfg)?;
    let seed = cli.seed.unwrap_or(cfg.init_seed());
    let params = init_params(&spec, InitScheme::Default, seed);
    let path = cli.out.join("model.stbl");
    save_model(&path, &spec, &params)?;
    println!("initialized model written to {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_forward(cli: &Cli, model: &Path, input: &Path, record: bool) -> Result<ExitCode, Error> {
    let (spec, params) = load_model(model)?;
    let mut f = std::io::BufReader::new(std::fs::File::open(input)?);
    let x0 = Feature64::read_stbl(&mut f)?;
    let (logits, trace) = forward(&spec, &params, &x0, record)?;
    let out_path = cli.out.join("output.stbl");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&out_path)?);
    Feature64::from_vector(logits.clone())?.write_stbl(&mut out)?;
    drop(out);
    let trace_path = cli.out.join("trace.tsv");
    let mut tf = std::io::BufWriter::new(std::fs::File::create(&trace_path)?);
    write_trace(&mut tf, &trace)?;
    println!(
        "logits: {:?}\noutput tensor: {}\ntrace: {}",
        logits,
        out_path.display(),
        trace_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_certify(cli: &Cli, model: &Path) -> Result<ExitCode, Error> {
    let cfg = load_config(cli)?;
    let (spec, params) = load_model(model)?;
    let cert = assemble_certificate(&spec, &params, cfg.power_opts())?;
    let text = cert.render();
    print!("{text}");
    write_text(&cli.out.join("certificate.txt"), &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(cli: &Cli, model: &Path) -> Result<ExitCode, Error> {
    let cfg = load_config(cli)?;
    let (spec, params) = load_model(model)?;
    let certify = cfg.certify_section();
    let seed = cli.seed.unwrap_or(certify.seed);
    let opts = cfg.power_opts();

    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |scale: f64| {
        Feature64::from_fn(spec.height, spec.width, spec.depth, |_, _, _| {
            (rng.random::<f64>() * 2.0 - 1.0) * scale
        })
    };
    let inputs: Vec<Feature64> = (0..certify.growth_inputs)
        .map(|_| draw(certify.input_scale))
        .collect();
    let pairs: Vec<(Feature64, Feature64)> = (0..certify.sensitivity_pairs)
        .map(|_| (draw(certify.input_scale), draw(certify.input_scale)))
        .collect();

    let growth = verify_growth(&spec, &params, &inputs, opts)?;
    let sens = verify_sensitivity(&spec, &params, &pairs, opts)?;

    let mut report = String::new();
    report.push_str(&growth.certificate.render());
    match &growth.skipped {
        Some(msg) => report.push_str(&format!("growth: skipped ({msg})\n")),
        None => report.push_str(&format!(
            "growth: {} inputs, {} violations\n",
            growth.entries.len(),
            growth.violations
        )),
    }
    for (i, e) in growth.entries.iter().enumerate() {
        report.push_str(&format!(
            "growth[{i}]: input={:.6e} output={:.6e} bound={:.6e} slack={:.6e}{}\n",
            e.input_norm,
            e.output_norm,
            e.bound,
            e.slack,
            if e.violated { " VIOLATED" } else { "" }
        ));
    }
    match &sens.skipped {
        Some(msg) => report.push_str(&format!("sensitivity: skipped ({msg})\n")),
        None => report.push_str(&format!(
            "sensitivity: {} pairs, {} violations\n",
            sens.entries.len(),
            sens.violations
        )),
    }
    for (i, e) in sens.entries.iter().enumerate() {
        report.push_str(&format!(
            "sensitivity[{i}]: input_dist={:.6e} output_dist={:.6e} bound={:.6e} slack={:.6e}{}\n",
            e.input_dist,
            e.output_dist,
            e.bound,
            e.slack,
            if e.violated { " VIOLATED" } else { "" }
        ));
    }
    print!("{report}");
    let path = cli.out.join("verify.txt");
    write_text(&path, &report)?;
    if growth.violations + sens.violations > 0 {
        eprintln!("verification failed; report at {}", path.display());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_integrate(cli: &Cli) -> Result<ExitCode, Error> {
    let cfg = load_config(cli)?;
    let section = cfg
        .integrate
        .clone()
        .ok_or_else(|| Error::Config("config is missing the integrate section".into()))?;
    let problem = section.build_problem()?;
    let hyp = hypotheses_check(&problem, 1000, cli.seed.unwrap_or(0));
    println!(
        "hypotheses: contractive={} zero_at_zero={} lipschitz_c={:.6e} ok={}",
        hyp.sigma_contractive, hyp.sigma_zero_at_zero, hyp.lipschitz_c, hyp.ok
    );
    if !hyp.ok {
        eprintln!("warning: well-posedness hypotheses are not all satisfied");
    }
    let traj = integrate(&problem, section.tau)?;
    let other = match &section.y0 {
        Some(y0) => {
            let mut alt = problem.clone();
            alt.x0 = nalgebra::DVector::from_column_slice(y0);
            Some(integrate(&alt, section.tau)?)
        }
        None => None,
    };
    let mut violations = 0usize;
    let mut first_report = None;
    for kind in &section.envelopes {
        let rep = bound_envelope(&problem, &traj, other.as_ref(), *kind)?;
        println!(
            "envelope {:?}: {} points, {} violations (tol {:.3e})",
            kind,
            rep.points.len(),
            rep.violations,
            rep.tol
        );
        violations += rep.violations;
        if first_report.is_none() {
            first_report = Some(rep);
        }
    }
    let path = cli.out.join("trajectory.tsv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write_trajectory(&mut f, &traj, first_report.as_ref())?;
    println!(
        "final state at t={:.6}: {:?}",
        traj.times.last().unwrap(),
        traj.final_state().as_slice()
    );
    println!("trajectory: {}", path.display());
    if violations > 0 {
        eprintln!("envelope violations detected");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn load_dataset(section: &DatasetSection, normalize: bool) -> Result<SplitDataset, Error> {
    let mut split = section.load()?;
    if normalize {
        stbl_core::data::normalize_mean_std(&mut split)?;
    }
    Ok(split)
}

fn cmd_train(cli: &Cli) -> Result<ExitCode, Error> {
    let cfg = load_config(cli)?;
    let spec = network_spec(&cfg)?;
    let section = cfg
        .train
        .clone()
        .ok_or_else(|| Error::Config("config is missing the train section".into()))?;
    let mut optimizer = section.optimizer.clone();
    if let Some(seed) = cli.seed {
        optimizer.seed = seed;
    }
    let data = load_dataset(&section.dataset, section.normalize)?;
    let result = train(&spec, &optimizer, &data)?;

    let model_path = cli.out.join("model.stbl");
    save_model(&model_path, &spec, &result.params)?;
    let hist_path = cli.out.join("history.tsv");
    let mut hf = std::io::BufWriter::new(std::fs::File::create(&hist_path)?);
    write_history(&mut hf, &result.history)?;
    println!(
        "model: {}\nhistory: {}",
        model_path.display(),
        hist_path.display()
    );
    if let Some(last) = result.history.records.last() {
        println!(
            "final: step={} loss={:.6e} test_accuracy={:.4} c={:.6e} a={:.6e}",
            last.step, last.loss, last.test_accuracy, last.growth_c, last.sensitivity_a
        );
    }
    if let Some(step) = result.diverged {
        eprintln!("training diverged at step {step}");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_perturb(cli: &Cli, model: &Path) -> Result<ExitCode, Error> {
    let cfg = load_config(cli)?;
    let (spec, params) = load_model(model)?;
    let section = cfg
        .perturb
        .clone()
        .ok_or_else(|| Error::Config("config is missing the perturb section".into()))?;
    let train_section = cfg
        .train
        .clone()
        .ok_or_else(|| Error::Config("perturb needs the train section's dataset".into()))?;
    let data = load_dataset(&train_section.dataset, train_section.normalize)?;

    let noises: Vec<NoiseSpec> = section
        .noise
        .iter()
        .map(|n: &NoiseSection| n.build(&data.test, cli.seed))
        .collect::<Result<_, Error>>()?;
    let table = evaluate_under_noise(&spec, &params, &data.test, &noises, cfg.power_opts())?;
    let mut buf = Vec::new();
    write_noise_table(&mut buf, &table)?;
    let text = String::from_utf8(buf).expect("utf8 table");
    print!("{text}");
    let path = cli.out.join("noise_table.tsv");
    write_text(&path, &text)?;
    let violations: usize = table.rows.iter().map(|r| r.bound_violations).sum();
    if violations > 0 {
        eprintln!(
            "{violations} output shifts exceeded the certificate bound; report at {}",
            path.display()
        );
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(cli: &Cli, per_shape: usize) -> Result<ExitCode, Error> {
    let seed = cli.seed.unwrap_or(0x0CAC1E);
    let reports = oracle::run_all(per_shape, seed);
    let text = oracle::render_reports(&reports);
    print!("{text}");
    write_text(&cli.out.join("oracle.txt"), &text)?;
    if reports.iter().all(|r| r.passed()) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}
