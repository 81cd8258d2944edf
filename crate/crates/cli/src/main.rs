use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aesprobe::metrics::{DEFAULT_LEVEL, DEFAULT_RESAMPLES, bootstrap_ci, bootstrap_compare};
use aesprobe::piaa::{
    DEFAULT_SUPPORT, DEFAULT_TEST, DEFAULT_USERS, GiaaScores, PiaaMethod, PiaaMethodConfig,
    ProtocolInputs, RatingsTable, SplitOverrides, run_protocol, sample_users, select_hard_users,
};
use aesprobe::probing::{
    AttributeTable, SplitSpec, best_layer_csv, best_layer_report, fit_probe_model, run_probe_sweep,
};
use aesprobe::regression::{AlphaGrid, ProbeModel};
use aesprobe::store::{Component, FeatureStore, discover_stores};
use aesprobe::synth::{SynthConfig, generate_world};
use aesprobe::tables::{parse_id_list, parse_range, parse_user_values, read_text, source_name};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "aesprobe", version, about = "Aesthetic probing and personalized assessment on VLM hidden states")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
enum Command {
    /// Layer-wise attribute probing over every store in a directory.
    Probe(ProbeArgs),
    /// Fit a multi-output attribute probe on one store and save it as JSON.
    FitProbe(FitProbeArgs),
    /// Per-user evaluation of a personalization method.
    Piaa(PiaaArgs),
    /// Bootstrap CI of a per-user metric, or a paired comparison of two.
    Bootstrap(BootstrapArgs),
    /// Generate a synthetic world with planted linear structure.
    Synth(SynthArgs),
}

#[derive(Args, Serialize)]
struct ProbeArgs {
    /// Directory scanned for *.fst stores and their manifests.
    #[arg(long)]
    features: PathBuf,
    /// Only probe stores with this component (V, LT, LV, Ltau).
    #[arg(long)]
    component: Option<String>,
    /// Attribute table: image_id followed by one column per attribute.
    #[arg(long)]
    attributes: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Declared attribute value range "lo,hi".
    #[arg(long)]
    attr_range: Option<String>,
    /// Comma-separated ridge penalties replacing the default grid.
    #[arg(long)]
    alphas: Option<String>,
    /// Sweep report (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Best-layer report.
    #[arg(long)]
    best_out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct FitProbeArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    attributes: PathBuf,
    #[arg(long)]
    train: PathBuf,
    /// Attribute columns to leave out (repeatable).
    #[arg(long)]
    exclude: Vec<String>,
    #[arg(long)]
    attr_range: Option<String>,
    #[arg(long)]
    alphas: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PiaaArgs {
    /// linear-hidden, linear-hidden-giaa, reduce, adjust-bias or raw.
    #[arg(long)]
    method: String,
    /// Feature store; repeat to concatenate representations in order.
    #[arg(long)]
    store: Vec<PathBuf>,
    /// Ratings table: user_id,image_id,score.
    #[arg(long)]
    ratings: PathBuf,
    /// Declared rating range "lo,hi".
    #[arg(long)]
    score_range: Option<String>,
    /// Per-image GIAA scores or generic predictions: image_id,score.
    #[arg(long)]
    giaa: Option<PathBuf>,
    #[arg(long)]
    probe_model: Option<PathBuf>,
    /// Fixed splits: user_id,image_id,role with role support or test.
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SUPPORT)]
    support: usize,
    #[arg(long, default_value_t = DEFAULT_TEST)]
    test: usize,
    #[arg(long, default_value_t = DEFAULT_USERS)]
    users: usize,
    /// Evaluate the k users least aligned with the GIAA scores instead of a random sample.
    #[arg(long)]
    hard_users: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Affine rescaling of ratings, e.g. --rescale-from 0,100 --rescale-to 1,5.
    #[arg(long, requires = "rescale_to")]
    rescale_from: Option<String>,
    #[arg(long, requires = "rescale_from")]
    rescale_to: Option<String>,
    #[arg(long)]
    alphas: Option<String>,
    /// Add a bootstrap CI of mean ρ to the summary.
    #[arg(long)]
    bootstrap: bool,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    level: f64,
    /// Per-user report (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Aggregate report.
    #[arg(long)]
    summary_out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BootstrapArgs {
    /// Per-user values with a user_id column.
    #[arg(long)]
    values: PathBuf,
    /// Candidate values for a paired comparison; Δ = values − against.
    #[arg(long)]
    against: Option<PathBuf>,
    /// Value column to read.
    #[arg(long, default_value = "value")]
    column: String,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    latents: Option<usize>,
    #[arg(long)]
    probed: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    images_per_user: Option<usize>,
    /// Sets feature, rating and GIAA noise together.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    feature_noise: Option<f64>,
    #[arg(long)]
    rating_noise: Option<f64>,
    #[arg(long)]
    giaa_noise: Option<f64>,
    #[arg(long)]
    dispersion: Option<f64>,
    #[arg(long)]
    unprobed_weight: Option<f64>,
    #[arg(long)]
    bias_std: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug)]
enum CliError {
    Core(aesprobe::Error),
    Usage(String),
}

impl From<aesprobe::Error> for CliError {
    fn from(e: aesprobe::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(1);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .expect("global thread pool is configured once");
    }
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let input = match &e {
                CliError::Core(e) => e.is_input_error(),
                CliError::Usage(_) => true,
            };
            ExitCode::from(if input { 1 } else { 2 })
        }
    }
}

fn run(command: &Command) -> CliResult {
    let header = format!(
        "# aesprobe {} config={}\n",
        env!("CARGO_PKG_VERSION"),
        serde_json::to_string(command).expect("arguments serialize")
    );
    match command {
        Command::Probe(a) => cmd_probe(a, &header),
        Command::FitProbe(a) => cmd_fit_probe(a),
        Command::Piaa(a) => cmd_piaa(a, &header),
        Command::Bootstrap(a) => cmd_bootstrap(a, &header),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn emit(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn read(path: &Path) -> CliResult<String> {
    Ok(read_text(path)?)
}

fn grid(alphas: Option<&str>) -> CliResult<AlphaGrid> {
    let Some(text) = alphas else {
        return Ok(AlphaGrid::default());
    };
    let values = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("--alphas: `{v}` is not a number")))
        })
        .collect::<CliResult<Vec<f64>>>()?;
    Ok(AlphaGrid::new(values)?)
}

fn attribute_table(path: &Path, range: Option<&str>) -> CliResult<AttributeTable> {
    let table = AttributeTable::from_csv(&read(path)?, &source_name(path))?;
    Ok(match range {
        Some(r) => {
            let (lo, hi) = parse_range(r)?;
            table.with_range(lo, hi)?
        }
        None => table,
    })
}

fn cmd_probe(a: &ProbeArgs, header: &str) -> CliResult {
    let component = a
        .component
        .as_deref()
        .map(|c| c.parse::<Component>())
        .transpose()?;
    let mut stores = Vec::new();
    for path in discover_stores(&a.features)? {
        let store = FeatureStore::open(&path)?;
        if component.is_none_or(|c| store.manifest.component == c) {
            stores.push(store);
        }
    }
    if stores.is_empty() {
        return Err(CliError::Usage(format!(
            "no stores found in {}{}",
            a.features.display(),
            a.component.as_ref().map_or(String::new(), |c| format!(" with component {c}"))
        )));
    }
    let attrs = attribute_table(&a.attributes, a.attr_range.as_deref())?;
    let split = SplitSpec::new(
        parse_id_list(&read(&a.train)?, &source_name(&a.train))?,
        parse_id_list(&read(&a.test)?, &source_name(&a.test))?,
    )?;
    let result = run_probe_sweep(&stores, &attrs, &split, &grid(a.alphas.as_deref())?)?;
    emit(a.out.as_deref(), &format!("{header}{}", result.to_csv()))?;
    if let Some(best) = &a.best_out {
        let rows = best_layer_report(&result);
        write_file(best, &format!("{header}{}", best_layer_csv(&rows)))?;
    }
    Ok(())
}

fn cmd_fit_probe(a: &FitProbeArgs) -> CliResult {
    let store = FeatureStore::open(&a.store)?;
    let attrs = attribute_table(&a.attributes, a.attr_range.as_deref())?.without(&a.exclude)?;
    let train = parse_id_list(&read(&a.train)?, &source_name(&a.train))?;
    let model = fit_probe_model(&store, &attrs, &train, &grid(a.alphas.as_deref())?)?;
    write_file(&a.out, &model.to_json())
}

fn open_stores(paths: &[PathBuf]) -> CliResult<Option<FeatureStore>> {
    let mut combined: Option<FeatureStore> = None;
    for path in paths {
        let store = FeatureStore::open(path)?;
        combined = Some(match combined {
            Some(prev) => prev.concat(&store)?,
            None => store,
        });
    }
    Ok(combined)
}

fn cmd_piaa(a: &PiaaArgs, header: &str) -> CliResult {
    let method: PiaaMethod = a.method.parse()?;
    let score_range = a.score_range.as_deref().map(parse_range).transpose()?;
    let mut ratings = RatingsTable::from_csv(&read(&a.ratings)?, &source_name(&a.ratings), score_range)?;
    if let (Some(from), Some(to)) = (&a.rescale_from, &a.rescale_to) {
        ratings = ratings.rescaled(parse_range(from)?, parse_range(to)?)?;
    }
    let store = open_stores(&a.store)?;
    let giaa = match &a.giaa {
        Some(p) => Some(GiaaScores::from_csv(&read(p)?, &source_name(p))?),
        None => None,
    };
    let overrides = match &a.splits {
        Some(p) => Some(SplitOverrides::from_csv(&read(p)?, &source_name(p))?),
        None => None,
    };
    let mut config = PiaaMethodConfig::new(method);
    config.grid = grid(a.alphas.as_deref())?;
    config.support_size = a.support;
    config.test_size = a.test;
    if let Some(p) = &a.probe_model {
        config.probe_model = Some(ProbeModel::from_json(&read(p)?)?);
    }

    let users = if let Some(o) = &overrides {
        o.users().map(str::to_string).collect()
    } else if let Some(k) = a.hard_users {
        let g = giaa
            .as_ref()
            .ok_or_else(|| CliError::Usage("--hard-users requires --giaa".into()))?;
        select_hard_users(&ratings, g, k)?
    } else {
        sample_users(&ratings, a.users, a.support + a.test, a.seed)?
    };
    let inputs = ProtocolInputs {
        ratings: &ratings,
        store: store.as_ref(),
        giaa: giaa.as_ref(),
        overrides: overrides.as_ref(),
    };
    let result = run_protocol(&config, &users, &inputs, a.seed)?;
    emit(a.out.as_deref(), &format!("{header}{}", result.users_csv()))?;

    if let Some(path) = &a.summary_out {
        let mut summary = result.summary_csv();
        if a.bootstrap {
            let rho: Vec<f64> = result.defined_rho().into_iter().map(|(_, v)| v).collect();
            let ci = bootstrap_ci(&rho, a.resamples, a.level, a.seed)?;
            let mut lines: Vec<String> = summary.lines().map(str::to_string).collect();
            lines[0].push_str(",rho_ci_low,rho_ci_high,level,n_resamples,bootstrap_seed");
            lines[1].push_str(&format!(
                ",{},{},{},{},{}",
                ci.ci_low, ci.ci_high, ci.level, ci.n_resamples, ci.seed
            ));
            summary = lines.join("\n") + "\n";
        }
        write_file(path, &format!("{header}{summary}"))?;
    } else if a.bootstrap {
        return Err(CliError::Usage("--bootstrap requires --summary-out".into()));
    }
    Ok(())
}

fn cmd_bootstrap(a: &BootstrapArgs, header: &str) -> CliResult {
    let load = |p: &Path| -> CliResult<Vec<(String, Option<f64>)>> {
        Ok(parse_user_values(&read(p)?, &source_name(p), &a.column)?)
    };
    let values = load(&a.values)?;
    let body = match &a.against {
        None => {
            let defined: Vec<f64> = values.iter().filter_map(|(_, v)| *v).collect();
            let ci = bootstrap_ci(&defined, a.resamples, a.level, a.seed)?;
            format!(
                "n_users,n_undefined,mean,ci_low,ci_high,level,n_resamples,seed\n{},{},{},{},{},{},{},{}\n",
                defined.len(),
                values.len() - defined.len(),
                ci.point_mean,
                ci.ci_low,
                ci.ci_high,
                ci.level,
                ci.n_resamples,
                ci.seed
            )
        }
        Some(other) => {
            let against = load(other)?;
            let mut a_sorted = values.clone();
            let mut b_sorted = against.clone();
            a_sorted.sort_by(|x, y| x.0.cmp(&y.0));
            b_sorted.sort_by(|x, y| x.0.cmp(&y.0));
            if a_sorted.len() != b_sorted.len()
                || a_sorted.iter().zip(&b_sorted).any(|(x, y)| x.0 != y.0)
            {
                return Err(CliError::Usage(format!(
                    "paired mode needs the same users in both files ({} has {}, {} has {})",
                    a.values.display(),
                    values.len(),
                    other.display(),
                    against.len()
                )));
            }
            let (base, cand): (Vec<f64>, Vec<f64>) = a_sorted
                .iter()
                .zip(&b_sorted)
                .filter_map(|(x, y)| Some((x.1?, y.1?)))
                .unzip();
            let report = bootstrap_compare(&base, &cand, a.resamples, a.seed)?;
            format!(
                "n_pairs,n_dropped,point_delta,p_delta_positive,n_resamples,seed\n{},{},{},{},{},{}\n",
                base.len(),
                values.len() - base.len(),
                report.point_delta,
                report.p_delta_positive,
                report.n_resamples,
                report.seed
            )
        }
    };
    emit(a.out.as_deref(), &format!("{header}{body}"))
}

fn cmd_synth(a: &SynthArgs) -> CliResult {
    let mut c = SynthConfig::default();
    macro_rules! set {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = a.$flag { c.$field = v; })*
        };
    }
    if let Some(n) = a.noise {
        c.feature_noise = n;
        c.rating_noise = n;
        c.giaa_noise = n;
    }
    set!(
        images => n_images,
        users => n_users,
        dim => feature_dim,
        latents => latent_dim,
        probed => probed_dim,
        layers => n_layers,
        images_per_user => images_per_user,
        feature_noise => feature_noise,
        rating_noise => rating_noise,
        giaa_noise => giaa_noise,
        dispersion => user_dispersion,
        unprobed_weight => unprobed_weight,
        bias_std => bias_std,
        train_fraction => train_fraction,
        seed => seed,
    );
    let world = generate_world(&c, &a.out)?;
    println!(
        "wrote {} images × {} layers (D={}), {} users, to {}",
        c.n_images,
        c.n_layers,
        c.feature_dim,
        world.truth.user_ids.len(),
        a.out.display()
    );
    Ok(())
}
