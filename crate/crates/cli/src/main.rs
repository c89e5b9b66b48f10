use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use npsae::baselines::EbpOptions;
use npsae::em::{fit, select_g, Criterion, EmConfig};
use npsae::error::{Error, Result};
use npsae::gof::{direct_estimates, wald_gof};
use npsae::inference::CovarianceKind;
use npsae::io::{self as nio, OutputHeader, StoredFit};
use npsae::mse::{mse_report, MseOptions};
use npsae::predict::predict_areas;
use npsae::sim::{run_study, synthetic_survey, MseEstimator, Predictor, Scenario, ScenarioConfig, SyntheticConfig};

#[derive(Parser, Debug)]
#[command(name = "npsae", version, about = "Small area proportions from a logistic model with a discrete random-intercept distribution")]
struct Cli {
    /// key = value file; unknown keys are rejected
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// override one setting, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// seed for every random draw of the command
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output file (stdout when absent)
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the mixture model, choosing G by an information criterion
    Fit {
        #[arg(long)]
        sample: PathBuf,
        /// fit exactly this many components
        #[arg(long)]
        g: Option<usize>,
        #[arg(long)]
        g_min: Option<usize>,
        #[arg(long)]
        g_max: Option<usize>,
        #[arg(long)]
        criterion: Option<String>,
    },
    /// Area predictions from a stored fit
    Predict {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        crosstab: PathBuf,
    },
    /// MSE estimates and CVs of the area predictions
    Mse {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        crosstab: PathBuf,
        #[arg(long)]
        no_bias_correction: bool,
        #[arg(long)]
        covariance: Option<String>,
    },
    /// Monte Carlo study under one of the two scenarios
    Simulate {
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        replications: Option<usize>,
        /// also write per-replication results here
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Wald check of model-based against direct estimates
    Gof {
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        mse: PathBuf,
    },
    /// Write a synthetic categorical survey and its population cross-tabulation
    Synth {
        #[arg(long)]
        sample_out: PathBuf,
        #[arg(long)]
        crosstab_out: PathBuf,
        #[arg(long)]
        m: Option<usize>,
    },
}

/// Resolved settings: defaults, then the config file, then `--set`, then flags.
struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    fn resolve(defaults: Vec<(&str, String)>, cli: &Cli, flags: Vec<(&str, Option<String>)>) -> Result<Self> {
        let mut values: BTreeMap<String, String> = defaults.into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
        let mut apply = |k: &str, v: &str, origin: &str| -> Result<()> {
            match values.get_mut(k) {
                Some(slot) => {
                    *slot = v.to_owned();
                    Ok(())
                }
                None => Err(Error::InvalidInput(format!("unknown setting {k:?} in {origin}"))),
            }
        };
        if let Some(path) = &cli.config {
            let text = std::io::read_to_string(nio::open(path)?)?;
            for (k, v) in nio::parse_key_values(&text)? {
                apply(&k, &v, &path.display().to_string())?;
            }
        }
        for kv in &cli.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            apply(k.trim(), v.trim(), "--set")?;
        }
        for (k, v) in flags {
            if let Some(v) = v {
                apply(k, &v, "flags")?;
            }
        }
        if let Some(s) = cli.seed {
            if values.contains_key("seed") {
                values.insert("seed".into(), s.to_string());
            }
        }
        Ok(Self { values })
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = &self.values[key];
        v.parse().map_err(|_| Error::InvalidInput(format!("setting {key} = {v:?} has the wrong type")))
    }

    fn parse_with<T>(&self, key: &str) -> Result<T>
    where
        T: std::str::FromStr<Err = Error>,
    {
        self.values[key].parse()
    }

    fn header(&self, command: &str) -> Result<OutputHeader> {
        let seed = match self.values.get("seed") {
            Some(_) => Some(self.parse("seed")?),
            None => None,
        };
        let config = self.values.iter().filter(|(k, _)| k.as_str() != "seed").map(|(k, v)| (k.clone(), v.clone())).collect();
        Ok(OutputHeader { command: command.to_owned(), seed, config })
    }

    fn em_config(&self) -> Result<EmConfig> {
        Ok(EmConfig {
            max_iter: self.parse("max_iter")?,
            tol_rel_loglik: self.parse("tol_rel_loglik")?,
            n_random_starts: self.parse("n_random_starts")?,
            perturb_scale: self.parse("perturb_scale")?,
            min_mass: self.parse("min_mass")?,
            rng_seed: self.parse("seed")?,
        })
    }
}

fn em_defaults() -> Vec<(&'static str, String)> {
    let d = EmConfig::default();
    vec![
        ("max_iter", d.max_iter.to_string()),
        ("tol_rel_loglik", d.tol_rel_loglik.to_string()),
        ("n_random_starts", d.n_random_starts.to_string()),
        ("perturb_scale", d.perturb_scale.to_string()),
        ("min_mass", d.min_mass.to_string()),
    ]
}

const CLI_G_MIN: usize = 1;
const CLI_G_MAX: usize = 6;

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn parse_list<T>(s: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(parse).collect()
}

fn parse_predictor(s: &str) -> Result<Predictor> {
    match s.to_ascii_lowercase().as_str() {
        "sp-ebp" => Ok(Predictor::SpEbp),
        "ebp" | "gaussian-ebp" => Ok(Predictor::GaussianEbp),
        "naive" => Ok(Predictor::Naive),
        "oracle" => Ok(Predictor::Oracle),
        other => Err(Error::InvalidInput(format!("unknown predictor {other:?}"))),
    }
}

fn parse_estimator(s: &str) -> Result<MseEstimator> {
    match s.to_ascii_lowercase().as_str() {
        "mse" | "plain" => Ok(MseEstimator::Plain),
        "mse_star" | "star" => Ok(MseEstimator::Star),
        other => Err(Error::InvalidInput(format!("unknown MSE estimator {other:?}"))),
    }
}

/// Loads the sample and checks that it is coded like the stored fit.
fn load_inputs(fit_path: &Path, sample: &Path, crosstab: &Path) -> Result<(StoredFit, npsae::Dataset, Vec<npsae::PopulationCrossTab>)> {
    let stored = nio::load_fit(fit_path)?;
    let (data, design) = nio::load_sample(sample)?;
    if design != stored.design {
        return Err(Error::InvalidInput("sample covariates are coded differently from the fitted model".into()));
    }
    let tabs = nio::load_crosstab(crosstab, &stored.design)?;
    let s = nio::summarize_sample(&data);
    info!("sample: {} areas, {} units, n_i in [{}, {}]", s.m, s.n_total, s.n_min, s.n_max);
    Ok((stored, data, tabs))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit { sample, g, g_min, g_max, criterion } => {
            let mut defaults = vec![
                ("g_min", CLI_G_MIN.to_string()),
                ("g_max", CLI_G_MAX.to_string()),
                ("criterion", "aic".to_owned()),
                ("seed", EmConfig::default().rng_seed.to_string()),
            ];
            defaults.extend(em_defaults());
            let flags = vec![
                ("g_min", g.or(*g_min).map(|v| v.to_string())),
                ("g_max", g.or(*g_max).map(|v| v.to_string())),
                ("criterion", criterion.clone()),
            ];
            let settings = Settings::resolve(defaults, cli, flags)?;
            let config = settings.em_config()?;
            let (data, design) = nio::load_sample(sample)?;
            let s = nio::summarize_sample(&data);
            info!("sample: {} areas, {} units, n_i median {} in [{}, {}]", s.m, s.n_total, s.n_median, s.n_min, s.n_max);
            let (lo, hi): (usize, usize) = (settings.parse("g_min")?, settings.parse("g_max")?);
            let criterion: Criterion = settings.parse_with("criterion")?;
            let best = if lo == hi {
                fit(&data, lo, &config)?
            } else {
                let sel = select_g(&data, lo, hi, &config, criterion)?;
                for c in &sel.candidates {
                    info!("G = {} (fitted {}): loglik {:.4}, AIC {:.4}, BIC {:.4}", c.requested_g, c.g, c.loglik, c.aic, c.bic);
                }
                sel.best
            };
            info!("selected G = {}, loglik {:.6}", best.g(), best.loglik);
            let stored = StoredFit::from_fit(&best, &design, data.m());
            let mut out = open_output(&cli.output)?;
            nio::write_fit(&mut out, &stored, &settings.header("fit")?)?;
            out.flush()?;
        }
        Command::Predict { fit, sample, crosstab } => {
            let settings = Settings::resolve(vec![], cli, vec![])?;
            let (stored, data, tabs) = load_inputs(fit, sample, crosstab)?;
            let preds = predict_areas(&stored.params, &data, &tabs)?;
            let mut out = open_output(&cli.output)?;
            nio::write_predictions(&mut out, &preds, &settings.header("predict")?)?;
            out.flush()?;
        }
        Command::Mse { fit, sample, crosstab, no_bias_correction, covariance } => {
            let defaults = vec![
                ("covariance", CovarianceKind::default().to_string()),
                ("bias_correction", MseOptions::default().bias_correction.to_string()),
            ];
            let flags = vec![
                ("covariance", covariance.clone()),
                ("bias_correction", no_bias_correction.then(|| "false".to_owned())),
            ];
            let settings = Settings::resolve(defaults, cli, flags)?;
            let kind: CovarianceKind = settings.parse_with("covariance")?;
            let options = MseOptions { bias_correction: settings.parse("bias_correction")? };
            let (stored, data, tabs) = load_inputs(fit, sample, crosstab)?;
            let info = stored
                .information
                .as_ref()
                .ok_or_else(|| Error::Numerical("the fit file carries no information matrix".into()))?;
            let rows = mse_report(&stored.params, &data, &tabs, info.covariance(kind), options)?;
            let above = rows.iter().filter(|r| r.cv_percent > nio::CV_THRESHOLD).count();
            info!("{above} of {} areas have CV above {}%", rows.len(), nio::CV_THRESHOLD);
            let mut out = open_output(&cli.output)?;
            nio::write_mse(&mut out, &rows, &settings.header("mse")?)?;
            out.flush()?;
        }
        Command::Simulate { scenario, m, replications, raw } => {
            let d = ScenarioConfig::default();
            let mut defaults = vec![
                ("scenario", d.scenario.to_string()),
                ("m", d.m.to_string()),
                ("pop_size", d.pop_size.to_string()),
                ("sample_size", d.sample_size.to_string()),
                ("replications", d.replications.to_string()),
                ("beta", d.beta.to_string()),
                ("sigma1", d.sigma1.to_string()),
                ("nu_prob", d.nu_prob.to_string()),
                ("mu1", d.mu1.to_string()),
                ("mu2", d.mu2.to_string()),
                ("sigma2", d.sigma2.to_string()),
                ("g_min", d.g_min.to_string()),
                ("g_max", d.g_max.to_string()),
                ("criterion", "aic".to_owned()),
                ("covariance", d.covariance.to_string()),
                ("bias_correction", d.bias_correction.to_string()),
                ("ebp_draws", d.ebp.draws.to_string()),
                ("antithetic", d.ebp.antithetic.to_string()),
                ("n_quad", d.n_quad.to_string()),
                ("predictors", "sp-ebp,ebp,naive".to_owned()),
                ("estimators", "mse,mse_star".to_owned()),
                ("seed", d.rng_seed.to_string()),
            ];
            defaults.extend(em_defaults());
            let flags = vec![
                ("scenario", scenario.clone()),
                ("m", m.map(|v| v.to_string())),
                ("replications", replications.map(|v| v.to_string())),
            ];
            let settings = Settings::resolve(defaults, cli, flags)?;
            let mut em = settings.em_config()?;
            em.rng_seed = EmConfig::default().rng_seed;
            let config = ScenarioConfig {
                scenario: settings.parse_with::<Scenario>("scenario")?,
                m: settings.parse("m")?,
                pop_size: settings.parse("pop_size")?,
                sample_size: settings.parse("sample_size")?,
                replications: settings.parse("replications")?,
                beta: settings.parse("beta")?,
                sigma1: settings.parse("sigma1")?,
                nu_prob: settings.parse("nu_prob")?,
                mu1: settings.parse("mu1")?,
                mu2: settings.parse("mu2")?,
                sigma2: settings.parse("sigma2")?,
                g_min: settings.parse("g_min")?,
                g_max: settings.parse("g_max")?,
                criterion: settings.parse_with("criterion")?,
                em,
                covariance: settings.parse_with("covariance")?,
                bias_correction: settings.parse("bias_correction")?,
                ebp: EbpOptions { draws: settings.parse("ebp_draws")?, antithetic: settings.parse("antithetic")? },
                n_quad: settings.parse("n_quad")?,
                rng_seed: settings.parse("seed")?,
            };
            let predictors = parse_list(&settings.values["predictors"], parse_predictor)?;
            let estimators = parse_list(&settings.values["estimators"], parse_estimator)?;
            let study = run_study(&config, &predictors, &estimators)?;
            for (t, msg) in &study.report.failed {
                warn!("replication {t} failed: {msg}");
            }
            let header = settings.header("simulate")?;
            let mut out = open_output(&cli.output)?;
            nio::write_metrics(&mut out, &study.report, &header)?;
            out.flush()?;
            if let Some(path) = raw {
                let mut w = BufWriter::new(File::create(path)?);
                nio::write_replications(&mut w, &study.report.area_ids, &study.replications, &header)?;
                w.flush()?;
            }
        }
        Command::Gof { sample, predictions, mse } => {
            let settings = Settings::resolve(vec![("alpha", "0.05".to_owned())], cli, vec![])?;
            let alpha: f64 = settings.parse("alpha")?;
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::InvalidInput(format!("alpha = {alpha} must lie in (0, 1)")));
            }
            let (data, _) = nio::load_sample(sample)?;
            let preds: HashMap<String, f64> =
                nio::read_predictions(nio::open(predictions)?)?.into_iter().map(|p| (p.area_id, p.p_hat)).collect();
            let mses: HashMap<String, f64> =
                nio::read_mse(nio::open(mse)?)?.into_iter().map(|r| (r.area_id, r.mse_star)).collect();
            let (mut dir, mut pr, mut var, mut ms, mut ids) = (vec![], vec![], vec![], vec![], vec![]);
            for (id, p, v) in direct_estimates(&data) {
                match (preds.get(&id), mses.get(&id)) {
                    (Some(&q), Some(&w)) => {
                        dir.push(p);
                        pr.push(q);
                        var.push(v);
                        ms.push(w);
                        ids.push(id);
                    }
                    _ => warn!("area {id} lacks a prediction or MSE and is not compared"),
                }
            }
            let res = wald_gof(&dir, &pr, &var, &ms)?;
            let crit = npsae::gof::critical_value(res.df, alpha)?;
            let mut out = open_output(&cli.output)?;
            settings.header("gof")?.write(&mut out)?;
            writeln!(out, "statistic = {}", res.statistic)?;
            writeln!(out, "df = {}", res.df)?;
            writeln!(out, "p_value = {}", res.p_value)?;
            writeln!(out, "critical_value = {crit}")?;
            writeln!(out, "significant = {}", res.statistic > crit)?;
            let excluded: Vec<&str> = res.excluded.iter().map(|&i| ids[i].as_str()).collect();
            writeln!(out, "excluded = {}", excluded.join(" "))?;
            out.flush()?;
        }
        Command::Synth { sample_out, crosstab_out, m } => {
            let d = SyntheticConfig::default();
            let defaults = vec![
                ("m", d.m.to_string()),
                ("out_of_sample_share", d.out_of_sample_share.to_string()),
                ("mean_sample_size", d.mean_sample_size.to_string()),
                ("seed", d.rng_seed.to_string()),
            ];
            let settings = Settings::resolve(defaults, cli, vec![("m", m.map(|v| v.to_string()))])?;
            let config = SyntheticConfig {
                m: settings.parse("m")?,
                out_of_sample_share: settings.parse("out_of_sample_share")?,
                mean_sample_size: settings.parse("mean_sample_size")?,
                rng_seed: settings.parse("seed")?,
            };
            let survey = synthetic_survey(&config);
            let names: Vec<&str> = survey.covariates.iter().map(|c| c.0).collect();
            let level = |k: usize, l: usize| survey.covariates[k].1[l];

            let mut w = BufWriter::new(File::create(sample_out)?);
            let mut wtr = csv::Writer::from_writer(&mut w);
            let mut head = vec!["area_id", "y"];
            head.extend(&names);
            wtr.write_record(&head)?;
            for (id, y, lv) in &survey.sample {
                let mut row = vec![id.clone(), y.to_string()];
                row.extend(lv.iter().enumerate().map(|(k, &l)| level(k, l).to_owned()));
                wtr.write_record(&row)?;
            }
            wtr.flush()?;
            drop(wtr);
            w.flush()?;

            let mut w = BufWriter::new(File::create(crosstab_out)?);
            let mut wtr = csv::Writer::from_writer(&mut w);
            let mut head = vec!["area_id"];
            head.extend(&names);
            head.push("count");
            wtr.write_record(&head)?;
            for (id, lv, c) in &survey.crosstab {
                let mut row = vec![id.clone()];
                row.extend(lv.iter().enumerate().map(|(k, &l)| level(k, l).to_owned()));
                row.push(c.to_string());
                wtr.write_record(&row)?;
            }
            wtr.flush()?;
            drop(wtr);
            w.flush()?;
            info!("wrote {} sampled units and {} cross-tabulation cells", survey.sample.len(), survey.crosstab.len());
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("NPSAE_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidInput(format!("NPSAE_THREADS = {v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidInput(format!("cannot start {n} worker threads: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
