use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use lpt::assoc::TestKind;
use lpt::compare::{compare_runs, write_comparison};
use lpt::io::load_table;
use lpt::model::fit_null;
use lpt::quadform::{self, ChiSquareMixture};
use lpt::scan::{read_results, run_scan, ScanConfig, ScanInputs};
use lpt::simulate::{self, Direction, EffectConfig, ErrorDist, ExperimentConfig, Link};
use lpt::transforms::{apply_transform, BandwidthRule, TransformKind, TransformTag, BLOM_OFFSET};

#[derive(Parser)]
#[command(name = "lpt", version, about = "Residual transformations for variant-set association tests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test every gene in a gene-set file.
    Scan(ScanArgs),
    /// Empirical type-I error of every test and transform.
    SimulateType1(Type1Args),
    /// Empirical power under one effect configuration.
    SimulatePower(PowerArgs),
    /// Difference between the exact quadratic statistic and its SKAT form.
    SimulateEquivalence(EquivalenceArgs),
    /// Write null-model residuals and their transformed values.
    Transform(TransformArgs),
    /// Tail probability of a weighted sum of χ²₁ variables.
    Pvalue(PvalueArgs),
    /// Discovery gains and validation reproducibility of scan results.
    Compare(CompareArgs),
}

#[derive(Args)]
struct Common {
    /// `key = value` lines or a JSON object setting any flag; the command line wins.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct MethodArgs {
    /// Comma-separated subset of burden, skat, ridge.
    #[arg(long, default_value = "burden,skat,ridge")]
    tests: String,
    /// Comma-separated subset of UAT, INT, LPT.
    #[arg(long, default_value = "UAT,INT,LPT")]
    transforms: String,
    /// `nrd`, `rate` or a positive number.
    #[arg(long, default_value = "nrd")]
    bandwidth: String,
    #[arg(long, default_value_t = BLOM_OFFSET)]
    int_offset: f64,
    /// Ridge penalty; defaults to trace(Σ̂)/p.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct ScanArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    methods: MethodArgs,
    #[arg(long)]
    phenotype_file: PathBuf,
    #[arg(long)]
    genotypes: PathBuf,
    #[arg(long)]
    genesets: PathBuf,
    /// Phenotype column name.
    #[arg(long, default_value = "y")]
    phenotype: String,
    #[arg(long, default_value_t = 0.05)]
    maf_min: f64,
    #[arg(long, default_value_t = 2.5e-6)]
    significance: f64,
    #[arg(long, default_value_t = 5)]
    min_snps: usize,
    #[arg(long, default_value_t = 0.95)]
    min_match_fraction: f64,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    methods: MethodArgs,
    /// Comma-separated error laws, or `all`.
    #[arg(long, default_value = "all")]
    dist: String,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    p: usize,
    #[arg(long, default_value_t = 10_000)]
    replicates: usize,
    #[arg(long, default_value_t = 1000)]
    replicates_per_gene: usize,
    #[arg(long, default_value_t = 0.05)]
    maf_low: f64,
    #[arg(long, default_value_t = 0.5)]
    maf_high: f64,
    #[arg(long, default_value_t = 0.5)]
    ld_rho: f64,
}

#[derive(Args)]
struct Type1Args {
    #[command(flatten)]
    sim: SimArgs,
    /// Comma-separated nominal levels.
    #[arg(long, default_value = "0.01,0.001")]
    alphas: String,
}

#[derive(Args)]
struct PowerArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 0.10)]
    proportion: f64,
    /// `uni` or `bi`.
    #[arg(long, default_value = "uni")]
    direction: String,
    /// `identity` or `quadratic`.
    #[arg(long, default_value = "identity")]
    link: String,
    /// Overrides the reference effect magnitude.
    #[arg(long)]
    magnitude: Option<f64>,
    /// Also write the long-format table here.
    #[arg(long)]
    long_out: Option<PathBuf>,
}

#[derive(Args)]
struct EquivalenceArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "normal")]
    dist: String,
    #[arg(long, default_value = "500,2000,8000")]
    n_grid: String,
    #[arg(long, default_value_t = 200)]
    replicates: usize,
    #[arg(long, default_value_t = 20)]
    p: usize,
}

#[derive(Args)]
struct TransformArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    phenotype_file: PathBuf,
    #[arg(long, default_value = "y")]
    phenotype: String,
    #[arg(long, default_value = "LPT")]
    transform: String,
    #[arg(long, default_value = "nrd")]
    bandwidth: String,
    #[arg(long, default_value_t = BLOM_OFFSET)]
    int_offset: f64,
}

#[derive(Args)]
struct PvalueArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated mixture weights.
    #[arg(long)]
    lambdas: String,
    #[arg(long)]
    q: f64,
    /// `default`, `inversion`, `moment` or `monte-carlo`.
    #[arg(long, default_value = "default")]
    method: String,
    #[arg(long, default_value_t = 1_000_000)]
    reps: usize,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    main: PathBuf,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long, default_value_t = 2.5e-6)]
    significance: f64,
}

fn parse_list<T: FromStr>(s: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|e| anyhow!("{v:?}: {e}")))
        .collect()
}

fn parse_dists(s: &str) -> anyhow::Result<Vec<ErrorDist>> {
    if s.trim().eq_ignore_ascii_case("all") {
        Ok(ErrorDist::ALL.to_vec())
    } else {
        parse_list(s)
    }
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn init_threads(threads: usize) -> anyhow::Result<()> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    Ok(())
}

impl MethodArgs {
    fn tests(&self) -> anyhow::Result<Vec<TestKind>> {
        parse_list(&self.tests)
    }

    fn transforms(&self) -> anyhow::Result<Vec<TransformKind>> {
        let bandwidth: BandwidthRule = self.bandwidth.parse()?;
        Ok(parse_list::<TransformTag>(&self.transforms)?
            .into_iter()
            .map(|t| TransformKind::from_tag(t, self.int_offset, bandwidth))
            .collect())
    }
}

impl SimArgs {
    fn experiment(&self, dist: ErrorDist) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::new(dist, self.n, self.replicates, self.common.seed);
        cfg.p = self.p;
        cfg.replicates_per_gene = self.replicates_per_gene;
        cfg.maf_range = (self.maf_low, self.maf_high);
        cfg.ld_rho = self.ld_rho;
        cfg.tests = self.methods.tests()?;
        cfg.transforms = self.methods.transforms()?;
        cfg.gamma = self.methods.gamma;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Scan(a) => {
            let cfg = ScanConfig {
                phenotype: a.phenotype.clone(),
                maf_min: a.maf_min,
                transforms: parse_list(&a.methods.transforms)?,
                tests: a.methods.tests()?,
                significance: a.significance,
                bandwidth: a.methods.bandwidth.parse()?,
                int_offset: a.methods.int_offset,
                gamma: a.methods.gamma,
                min_snps: a.min_snps,
                min_match_fraction: a.min_match_fraction,
                threads: a.common.threads,
                seed: a.common.seed,
            };
            let inputs = ScanInputs {
                phenotype: a.phenotype_file,
                genotypes: a.genotypes,
                genesets: a.genesets,
            };
            let out = a.common.out.ok_or_else(|| anyhow!("scan needs --out"))?;
            let manifest = run_scan(&cfg, &inputs, &out)?;
            eprintln!(
                "tested {} of {} genes, {} rows written to {}",
                manifest.counts.genes_tested,
                manifest.counts.genes_total,
                manifest.counts.result_rows,
                out.display()
            );
        }
        Command::SimulateType1(a) => {
            init_threads(a.sim.common.threads)?;
            let alphas: Vec<f64> = parse_list(&a.alphas)?;
            let mut rows = Vec::new();
            for dist in parse_dists(&a.sim.dist)? {
                rows.extend(simulate::type1_experiment(&a.sim.experiment(dist)?, &alphas)?);
            }
            simulate::write_rate_table(&rows, output(a.sim.common.out.as_deref())?)?;
        }
        Command::SimulatePower(a) => {
            init_threads(a.sim.common.threads)?;
            let effect = EffectConfig {
                proportion_nonzero: a.proportion,
                direction: a.direction.parse::<Direction>()?,
                beta_magnitude: a.magnitude,
                link: a.link.parse::<Link>()?,
            };
            let mut rows = Vec::new();
            for dist in parse_dists(&a.sim.dist)? {
                rows.extend(simulate::power_experiment(&a.sim.experiment(dist)?, &effect, a.alpha)?);
            }
            simulate::write_rate_table(&rows, output(a.sim.common.out.as_deref())?)?;
            if let Some(path) = &a.long_out {
                let long: Vec<_> = rows.into_iter().map(|r| (effect, r)).collect();
                simulate::write_power_long(&long, output(Some(path))?)?;
            }
        }
        Command::SimulateEquivalence(a) => {
            init_threads(a.common.threads)?;
            let dist: ErrorDist = a.dist.parse()?;
            let grid: Vec<usize> = parse_list(&a.n_grid)?;
            let rows = simulate::quad_equivalence_check(dist, &grid, a.replicates, a.p, a.common.seed)?;
            simulate::write_equivalence_table(dist, &rows, output(a.common.out.as_deref())?)?;
        }
        Command::Transform(a) => {
            let table = load_table(&a.phenotype_file, &a.phenotype)?;
            let fit = fit_null(&table.y, &table.design()?)?;
            let tag: TransformTag = a.transform.parse()?;
            let kind = TransformKind::from_tag(tag, a.int_offset, a.bandwidth.parse()?);
            let transformed = apply_transform(kind, &fit)?;
            let mut out = output(a.common.out.as_deref())?;
            if let Some(model) = &transformed.model {
                eprintln!("bandwidth {}", model.bandwidth());
            }
            writeln!(out, "id\tresidual\t{}", tag)?;
            for (i, id) in table.ids.iter().enumerate() {
                writeln!(out, "{id}\t{}\t{}", fit.residuals()[i], transformed.y_psi[i])?;
            }
            out.flush()?;
        }
        Command::Pvalue(a) => {
            let lambdas: Vec<f64> = parse_list(&a.lambdas)?;
            let mix = ChiSquareMixture::new(lambdas).map_err(|e| anyhow!("--lambdas: {e}"))?;
            let p = match a.method.as_str() {
                "default" => quadform::pvalue_mixture(&mix, a.q),
                "inversion" => quadform::pvalue_imhof(&mix, a.q)
                    .ok_or_else(|| anyhow!("inversion did not converge"))?,
                "moment" => quadform::pvalue_moment_match(&mix, a.q),
                "monte-carlo" => quadform::pvalue_monte_carlo(&mix, a.q, a.reps, a.common.seed)?,
                other => bail!("unknown method {other:?}"),
            };
            let mut out = output(a.common.out.as_deref())?;
            writeln!(out, "{p}")?;
            out.flush()?;
        }
        Command::Compare(a) => {
            let main = read_results(&a.main)?;
            let validation = a.validation.as_deref().map(read_results).transpose()?;
            let cmp = compare_runs(&main, validation.as_deref(), a.significance)?;
            write_comparison(&cmp, output(a.common.out.as_deref())?)?;
        }
    }
    Ok(())
}

/// Turns a config file into `--key value` pairs.
fn config_args(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let flag = |k: &str| format!("--{}", k.trim().replace('_', "-"));
    let mut args = Vec::new();
    if text.trim_start().starts_with('{') {
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        for (k, v) in map {
            let value = match v {
                serde_json::Value::String(s) => s,
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(|i| match i {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            args.push(flag(&k));
            args.push(value);
        }
    } else {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), i + 1))?;
            args.push(flag(k));
            args.push(v.trim().to_string());
        }
    }
    Ok(args)
}

/// Inserts config-file flags right after the subcommand so that explicit
/// command-line flags, which come later, override them.
fn expand_config(argv: Vec<String>) -> anyhow::Result<Vec<String>> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let path = match argv[pos].strip_prefix("--config=") {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(argv.get(pos + 1).ok_or_else(|| anyhow!("--config needs a path"))?),
    };
    let extra = config_args(&path)?;
    let mut out = argv[..2.min(argv.len())].to_vec();
    out.extend(extra);
    out.extend(argv[2.min(argv.len())..].iter().cloned());
    Ok(out)
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let matches = Cli::command()
        .args_override_self(true)
        .mut_subcommands(|c| c.args_override_self(true))
        .get_matches_from(argv);
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.downcast_ref::<lpt::Error>().is_some_and(lpt::Error::is_numerical);
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}
