//! Delimited-text inputs and outputs, and the plain-text fit file.
//!
//! Output files start with `#` comment lines carrying the version, seed and
//! resolved configuration; every reader skips them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::em::FitResult;
use crate::error::{Error, Result};
use crate::inference::InformationMatrices;
use crate::model::{AreaSample, Dataset, MixtureParams, PopulationCrossTab};
use crate::mse::AreaMse;
use crate::predict::AreaPrediction;
use crate::sim::{MetricsReport, Replication};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// How one input column maps to design-matrix columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    /// sorted levels; the first is the reference and gets no indicator
    Categorical(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignColumn {
    pub name: String,
    pub kind: ColumnKind,
}

/// Covariate coding shared by the sample, the cross-tabulations and the fit.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Design {
    pub columns: Vec<DesignColumn>,
}

impl Design {
    /// A column is numeric when every value parses as a float; otherwise it is
    /// categorical with reference level the lexicographically first value.
    pub fn infer(names: &[String], rows: &[Vec<String>]) -> Self {
        let columns = names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let numeric = rows.iter().all(|r| r[c].parse::<f64>().is_ok_and(f64::is_finite));
                let kind = if numeric {
                    ColumnKind::Numeric
                } else {
                    let levels: BTreeSet<&str> = rows.iter().map(|r| r[c].as_str()).collect();
                    ColumnKind::Categorical(levels.into_iter().map(str::to_owned).collect())
                };
                DesignColumn { name: name.clone(), kind }
            })
            .collect();
        Self { columns }
    }

    pub fn n_coef(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match &c.kind {
                ColumnKind::Numeric => 1,
                ColumnKind::Categorical(l) => l.len().saturating_sub(1),
            })
            .sum()
    }

    /// Names of the design-matrix columns, `name=level` for indicators.
    pub fn coef_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.columns {
            match &c.kind {
                ColumnKind::Numeric => out.push(c.name.clone()),
                ColumnKind::Categorical(l) => out.extend(l.iter().skip(1).map(|v| format!("{}={v}", c.name))),
            }
        }
        out
    }

    pub fn encode(&self, values: &[&str], line: u64) -> Result<Vec<f64>> {
        if values.len() != self.columns.len() {
            return Err(Error::Parse { line, msg: format!("expected {} covariates, found {}", self.columns.len(), values.len()) });
        }
        let mut out = Vec::with_capacity(self.n_coef());
        for (c, v) in self.columns.iter().zip(values) {
            match &c.kind {
                ColumnKind::Numeric => {
                    let x: f64 = v
                        .parse()
                        .ok()
                        .filter(|x: &f64| x.is_finite())
                        .ok_or_else(|| Error::Parse { line, msg: format!("column {}: {v:?} is not a number", c.name) })?;
                    out.push(x);
                }
                ColumnKind::Categorical(levels) => {
                    let idx = levels.iter().position(|l| l == v).ok_or_else(|| Error::Parse {
                        line,
                        msg: format!("column {}: level {v:?} is not in the sample coding", c.name),
                    })?;
                    out.extend((1..levels.len()).map(|k| if k == idx { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok(out)
    }

    fn check_header(&self, names: &[String]) -> Result<()> {
        let expected: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        let got: Vec<&str> = names.iter().map(String::as_str).collect();
        if expected != got {
            return Err(Error::InvalidInput(format!("covariate columns {got:?} do not match the sample coding {expected:?}")));
        }
        Ok(())
    }
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).flexible(true).from_reader(r)
}

struct Table {
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table<R: Read>(r: R, what: &str) -> Result<Table> {
    let mut rdr = csv_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.iter().all(String::is_empty) {
        return Err(Error::InvalidInput(format!("{what} file is empty")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Parse { line, msg: format!("expected {} fields, found {}", header.len(), rec.len()) });
        }
        rows.push((line, rec.iter().map(str::to_owned).collect()));
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("{what} file has no data rows")));
    }
    Ok(Table { header, rows })
}

fn column(header: &[String], name: &str, pos: usize) -> Result<()> {
    if header.get(pos).map(String::as_str) != Some(name) {
        return Err(Error::InvalidInput(format!("column {} must be {name:?}, found {:?}", pos + 1, header.get(pos))));
    }
    Ok(())
}

/// Opens `path`, naming it in the error.
pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Parses a unit-level sample: `area_id, y, covariates...`.
pub fn read_sample<R: Read>(r: R) -> Result<(Dataset, Design)> {
    let t = read_table(r, "sample")?;
    column(&t.header, "area_id", 0)?;
    column(&t.header, "y", 1)?;
    let names = t.header[2..].to_vec();
    let cov_rows: Vec<Vec<String>> = t.rows.iter().map(|(_, r)| r[2..].to_vec()).collect();
    let design = Design::infer(&names, &cov_rows);
    let p = design.n_coef();
    let mut order: Vec<String> = Vec::new();
    let mut by_area: HashMap<String, (Vec<u8>, Vec<f64>)> = HashMap::new();
    for (line, row) in &t.rows {
        let y = match row[1].as_str() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Parse { line: *line, msg: format!("y must be 0 or 1, found {other:?}") }),
        };
        let vals: Vec<&str> = row[2..].iter().map(String::as_str).collect();
        let x = design.encode(&vals, *line)?;
        let entry = by_area.entry(row[0].clone()).or_insert_with(|| {
            order.push(row[0].clone());
            (Vec::new(), Vec::new())
        });
        entry.0.push(y);
        entry.1.extend(x);
    }
    let areas = order
        .into_iter()
        .map(|id| {
            let (y, x) = by_area.remove(&id).expect("grouped");
            AreaSample::new(id, p, y, x)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Dataset::new(p, areas)?, design))
}

pub fn load_sample(path: &Path) -> Result<(Dataset, Design)> {
    read_sample(open(path)?)
}

/// Writes a numeric-coded sample that [`read_sample`] reads back exactly.
pub fn write_sample<W: Write>(w: W, data: &Dataset, coef_names: &[String]) -> Result<()> {
    if coef_names.len() != data.p() {
        return Err(Error::Dimension(format!("{} names for p = {}", coef_names.len(), data.p())));
    }
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["area_id".to_owned(), "y".to_owned()];
    header.extend(coef_names.iter().cloned());
    wtr.write_record(&header)?;
    for a in &data.areas {
        for r in a.records() {
            let mut row = vec![r.area_id, r.y.to_string()];
            row.extend(r.x.iter().map(|v| format!("{v:e}")));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Parses cross-tabulations: `area_id, covariates..., count`, coded like the sample.
pub fn read_crosstab<R: Read>(r: R, design: &Design) -> Result<Vec<PopulationCrossTab>> {
    let t = read_table(r, "cross-tabulation")?;
    column(&t.header, "area_id", 0)?;
    let last = t.header.len() - 1;
    if last < 1 {
        return Err(Error::InvalidInput("cross-tabulation needs area_id and count columns".into()));
    }
    column(&t.header, "count", last)?;
    design.check_header(&t.header[1..last])?;
    let p = design.n_coef();
    let mut order: Vec<String> = Vec::new();
    let mut by_area: HashMap<String, (Vec<f64>, Vec<u64>)> = HashMap::new();
    for (line, row) in &t.rows {
        let count: i64 = row[last]
            .parse()
            .map_err(|_| Error::Parse { line: *line, msg: format!("count {:?} is not an integer", row[last]) })?;
        if count < 0 {
            return Err(Error::Parse { line: *line, msg: format!("negative count {count}") });
        }
        let vals: Vec<&str> = row[1..last].iter().map(String::as_str).collect();
        let x = design.encode(&vals, *line)?;
        let entry = by_area.entry(row[0].clone()).or_insert_with(|| {
            order.push(row[0].clone());
            (Vec::new(), Vec::new())
        });
        entry.0.extend(x);
        entry.1.push(count as u64);
    }
    order
        .into_iter()
        .map(|id| {
            let (x, c) = by_area.remove(&id).expect("grouped");
            PopulationCrossTab::new(id, p, x, c)
        })
        .collect()
}

pub fn load_crosstab(path: &Path, design: &Design) -> Result<Vec<PopulationCrossTab>> {
    read_crosstab(open(path)?, design)
}

/// Sizes of the loaded inputs, for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSummary {
    pub m: usize,
    pub n_total: usize,
    pub n_min: usize,
    pub n_median: usize,
    pub n_max: usize,
}

pub fn summarize_sample(data: &Dataset) -> SampleSummary {
    let mut n: Vec<usize> = data.areas.iter().map(AreaSample::n).collect();
    n.sort_unstable();
    SampleSummary {
        m: data.m(),
        n_total: data.n_total(),
        n_min: n.first().copied().unwrap_or(0),
        n_median: n.get(n.len() / 2).copied().unwrap_or(0),
        n_max: n.last().copied().unwrap_or(0),
    }
}

/// Comment lines written at the top of every output.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutputHeader {
    pub command: String,
    pub seed: Option<u64>,
    pub config: Vec<(String, String)>,
}

impl OutputHeader {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# npsae {VERSION} {}", self.command)?;
        if let Some(s) = self.seed {
            writeln!(w, "# seed = {s}")?;
        }
        for (k, v) in &self.config {
            writeln!(w, "# {k} = {v}")?;
        }
        Ok(())
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i as u64 + 1, msg: format!("expected key = value, found {line:?}") })?;
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(" ")
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    let mut vals = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            vals.push(m[(i, j)]);
        }
    }
    fmt_vec(&vals)
}

/// A fit read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredFit {
    pub params: MixtureParams,
    pub design: Design,
    pub m: usize,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub information: Option<InformationMatrices>,
}

impl StoredFit {
    pub fn from_fit(fit: &FitResult, design: &Design, m: usize) -> Self {
        Self {
            params: fit.params.clone(),
            design: design.clone(),
            m,
            loglik: fit.loglik,
            aic: fit.aic,
            bic: fit.bic,
            converged: fit.diagnostics.converged,
            iterations: fit.diagnostics.iterations,
            information: fit.information.clone(),
        }
    }
}

const FIT_FORMAT: &str = "npsae-fit-1";

fn check_name(s: &str) -> Result<()> {
    if s.contains(['|', ';', '\n', '=']) || s.trim() != s || s.is_empty() {
        return Err(Error::InvalidInput(format!("name {s:?} cannot be stored in a fit file")));
    }
    Ok(())
}

pub fn write_fit<W: Write>(w: &mut W, fit: &StoredFit, header: &OutputHeader) -> Result<()> {
    header.write(w)?;
    writeln!(w, "format = {FIT_FORMAT}")?;
    writeln!(w, "p = {}", fit.params.p())?;
    writeln!(w, "g = {}", fit.params.g())?;
    writeln!(w, "m = {}", fit.m)?;
    for (k, c) in fit.design.columns.iter().enumerate() {
        check_name(&c.name)?;
        let kind = match &c.kind {
            ColumnKind::Numeric => "numeric".to_owned(),
            ColumnKind::Categorical(l) => {
                for v in l {
                    check_name(v)?;
                }
                format!("categorical;{}", l.join("|"))
            }
        };
        writeln!(w, "column.{k} = {};{kind}", c.name)?;
    }
    writeln!(w, "beta = {}", fmt_vec(&fit.params.beta))?;
    writeln!(w, "xi = {}", fmt_vec(&fit.params.xi))?;
    writeln!(w, "pi = {}", fmt_vec(&fit.params.pi))?;
    writeln!(w, "loglik = {}", fmt_f(fit.loglik))?;
    writeln!(w, "aic = {}", fmt_f(fit.aic))?;
    writeln!(w, "bic = {}", fmt_f(fit.bic))?;
    writeln!(w, "converged = {}", fit.converged)?;
    writeln!(w, "iterations = {}", fit.iterations)?;
    if let Some(info) = &fit.information {
        writeln!(w, "j_oakes = {}", fmt_matrix(&info.j_oakes))?;
        writeln!(w, "v_star = {}", fmt_matrix(&info.v_star))?;
    }
    Ok(())
}

fn parse_floats(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::InvalidInput(format!("{key}: {t:?} is not a number"))))
        .collect()
}

fn parse_matrix(key: &str, v: &str, k: usize) -> Result<DMatrix<f64>> {
    let vals = parse_floats(key, v)?;
    if vals.len() != k * k {
        return Err(Error::Dimension(format!("{key} has {} values, expected {}", vals.len(), k * k)));
    }
    Ok(DMatrix::from_row_slice(k, k, &vals))
}

pub fn read_fit<R: Read>(r: R) -> Result<StoredFit> {
    let mut text = String::new();
    BufReader::new(r).read_to_string(&mut text)?;
    let kv: BTreeMap<String, String> = parse_key_values(&text)?.into_iter().collect();
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::InvalidInput(format!("fit file lacks {k:?}")));
    if get("format")? != FIT_FORMAT {
        return Err(Error::InvalidInput(format!("unsupported fit format {:?}", get("format")?)));
    }
    let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::InvalidInput(format!("{k} is not an integer"))) };
    let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::InvalidInput(format!("{k} is not a number"))) };
    let p = int("p")?;
    let g = int("g")?;
    let mut columns = Vec::new();
    for k in 0.. {
        let Some(spec) = kv.get(&format!("column.{k}")) else { break };
        let mut parts = spec.splitn(3, ';');
        let name = parts.next().unwrap_or_default().to_owned();
        let kind = match (parts.next(), parts.next()) {
            (Some("numeric"), None) => ColumnKind::Numeric,
            (Some("categorical"), Some(levels)) => ColumnKind::Categorical(levels.split('|').map(str::to_owned).collect()),
            _ => return Err(Error::InvalidInput(format!("bad column spec {spec:?}"))),
        };
        columns.push(DesignColumn { name, kind });
    }
    let design = Design { columns };
    if design.n_coef() != p {
        return Err(Error::Dimension(format!("design has {} columns, p = {p}", design.n_coef())));
    }
    let beta = parse_floats("beta", get("beta")?)?;
    let xi = parse_floats("xi", get("xi")?)?;
    let pi = parse_floats("pi", get("pi")?)?;
    if beta.len() != p || xi.len() != g || pi.len() != g {
        return Err(Error::Dimension("parameter vectors do not match p and g".into()));
    }
    let params = MixtureParams::from_parts(beta, xi, pi);
    let k = params.n_free();
    let information = match (kv.get("j_oakes"), kv.get("v_star")) {
        (Some(j), Some(v)) => Some(InformationMatrices::from_parts(parse_matrix("j_oakes", j, k)?, parse_matrix("v_star", v, k)?)?),
        _ => None,
    };
    Ok(StoredFit {
        params,
        design,
        m: int("m")?,
        loglik: float("loglik")?,
        aic: float("aic")?,
        bic: float("bic")?,
        converged: get("converged")? == "true",
        iterations: int("iterations")?,
        information,
    })
}

pub fn load_fit(path: &Path) -> Result<StoredFit> {
    read_fit(open(path)?)
}

fn out_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(w)
}

pub fn write_predictions<W: Write>(mut w: W, preds: &[AreaPrediction], header: &OutputHeader) -> Result<()> {
    header.write(&mut w)?;
    let g = preds.first().map_or(0, |p| p.tau.len());
    let mut wtr = out_writer(w);
    let mut cols = vec!["area_id", "n_sampled", "out_of_sample", "p_hat", "alpha_hat"].into_iter().map(String::from).collect::<Vec<_>>();
    cols.extend((1..=g).map(|k| format!("tau_{k}")));
    cols.extend((1..=g).map(|k| format!("p_comp_{k}")));
    wtr.write_record(&cols)?;
    for p in preds {
        let mut row = vec![p.area_id.clone(), p.n_sampled.to_string(), p.out_of_sample.to_string(), p.p_hat.to_string(), p.alpha_hat.to_string()];
        row.extend(p.tau.iter().map(f64::to_string));
        row.extend(p.component_means.iter().map(f64::to_string));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn parse_f(line: u64, s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Parse { line, msg: format!("{s:?} is not a number") })
}

fn parse_bool(line: u64, s: &str) -> Result<bool> {
    s.parse().map_err(|_| Error::Parse { line, msg: format!("{s:?} is not true/false") })
}

pub fn read_predictions<R: Read>(r: R) -> Result<Vec<AreaPrediction>> {
    let t = read_table(r, "prediction")?;
    let g = t.header.iter().filter(|h| h.starts_with("tau_")).count();
    if t.header.len() != 5 + 2 * g {
        return Err(Error::InvalidInput("unexpected prediction table layout".into()));
    }
    t.rows
        .iter()
        .map(|(line, r)| {
            let floats = |range: std::ops::Range<usize>| range.map(|c| parse_f(*line, &r[c])).collect::<Result<Vec<_>>>();
            Ok(AreaPrediction {
                area_id: r[0].clone(),
                n_sampled: r[1].parse().map_err(|_| Error::Parse { line: *line, msg: "bad n_sampled".into() })?,
                out_of_sample: parse_bool(*line, &r[2])?,
                p_hat: parse_f(*line, &r[3])?,
                alpha_hat: parse_f(*line, &r[4])?,
                tau: floats(5..5 + g)?,
                component_means: floats(5 + g..5 + 2 * g)?,
            })
        })
        .collect()
}

/// CV threshold above which an estimate is usually considered unreliable.
pub const CV_THRESHOLD: f64 = 33.0;

const MSE_COLUMNS: [&str; 14] = [
    "area_id",
    "out_of_sample",
    "p_hat",
    "d_term",
    "e_term",
    "b1",
    "b2",
    "mse_plain",
    "mse_star",
    "mse_star_raw",
    "floored",
    "bias_corrected",
    "cv_percent",
    "cv_above_33",
];

pub fn write_mse<W: Write>(mut w: W, rows: &[AreaMse], header: &OutputHeader) -> Result<()> {
    header.write(&mut w)?;
    let above = rows.iter().filter(|r| r.cv_percent > CV_THRESHOLD).count();
    writeln!(w, "# areas with cv above {CV_THRESHOLD}% = {above} of {}", rows.len())?;
    let mut wtr = out_writer(w);
    wtr.write_record(MSE_COLUMNS)?;
    for r in rows {
        wtr.write_record([
            r.area_id.clone(),
            r.out_of_sample.to_string(),
            r.p_hat.to_string(),
            r.d_term.to_string(),
            r.e_term.to_string(),
            r.b1.to_string(),
            r.b2.to_string(),
            r.mse_plain.to_string(),
            r.mse_star.to_string(),
            r.mse_star_raw.to_string(),
            r.floored.to_string(),
            r.bias_corrected.to_string(),
            r.cv_percent.to_string(),
            (r.cv_percent > CV_THRESHOLD).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_mse<R: Read>(r: R) -> Result<Vec<AreaMse>> {
    let t = read_table(r, "MSE")?;
    if t.header != MSE_COLUMNS {
        return Err(Error::InvalidInput("unexpected MSE table layout".into()));
    }
    t.rows
        .iter()
        .map(|(line, r)| {
            let f = |c: usize| parse_f(*line, &r[c]);
            Ok(AreaMse {
                area_id: r[0].clone(),
                out_of_sample: parse_bool(*line, &r[1])?,
                p_hat: f(2)?,
                d_term: f(3)?,
                e_term: f(4)?,
                b1: f(5)?,
                b2: f(6)?,
                mse_plain: f(7)?,
                mse_star: f(8)?,
                mse_star_raw: f(9)?,
                floored: parse_bool(*line, &r[10])?,
                bias_corrected: parse_bool(*line, &r[11])?,
                cv_percent: f(12)?,
            })
        })
        .collect()
}

/// Per-area metrics of a simulation study, one row per area.
pub fn write_metrics<W: Write>(mut w: W, report: &MetricsReport, header: &OutputHeader) -> Result<()> {
    header.write(&mut w)?;
    writeln!(w, "# replications = {}, failed = {}", report.replications, report.failed.len())?;
    for (g, c) in &report.g_counts {
        writeln!(w, "# selected G = {g}: {:.3}", *c as f64 / report.replications as f64)?;
    }
    for p in &report.predictors {
        let s = crate::sim::summarize(&p.rmse);
        let b = crate::sim::summarize(&p.bias);
        writeln!(w, "# {}: mean BIAS = {:.6}, mean RMSE = {:.6}, median RMSE = {:.6}", p.predictor.name(), b.mean, s.mean, s.median)?;
    }
    for e in &report.estimators {
        let r = crate::sim::summarize(&e.ratio);
        let c = crate::sim::summarize(&e.coverage);
        writeln!(w, "# {}: mean R = {:.4}, mean CR = {:.4}", e.estimator.name(), r.mean, c.mean)?;
    }
    writeln!(w, "# mean seconds per replication = {:.3}", report.mean_seconds)?;
    let mut wtr = out_writer(w);
    let mut cols = vec!["area_id".to_owned()];
    for p in &report.predictors {
        for m in ["bias", "rmse", "mae"] {
            cols.push(format!("{}_{m}", p.predictor.name()));
        }
    }
    for e in &report.estimators {
        cols.push(format!("{}_ratio", e.estimator.name()));
        cols.push(format!("{}_cr", e.estimator.name()));
    }
    wtr.write_record(&cols)?;
    for (i, id) in report.area_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        for p in &report.predictors {
            row.extend([p.bias[i], p.rmse[i], p.mae[i]].iter().map(f64::to_string));
        }
        for e in &report.estimators {
            row.push(e.ratio[i].to_string());
            row.push(e.coverage[i].to_string());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Raw per-replication results, one row per (replication, area).
pub fn write_replications<W: Write>(mut w: W, area_ids: &[String], reps: &[Replication], header: &OutputHeader) -> Result<()> {
    header.write(&mut w)?;
    let mut wtr = out_writer(w);
    let Some(first) = reps.first() else {
        wtr.flush()?;
        return Ok(());
    };
    let preds: Vec<_> = first.predictions.keys().copied().collect();
    let ests: Vec<_> = first.mse.keys().copied().collect();
    let mut cols = vec!["replication".to_owned(), "selected_g".to_owned(), "area_id".to_owned(), "truth".to_owned()];
    cols.extend(preds.iter().map(|p| p.name().to_owned()));
    cols.extend(ests.iter().map(|e| e.name().to_owned()));
    wtr.write_record(&cols)?;
    for r in reps {
        for (i, id) in area_ids.iter().enumerate() {
            let mut row = vec![r.index.to_string(), r.selected_g.to_string(), id.clone(), r.truth[i].to_string()];
            row.extend(preds.iter().map(|p| r.predictions[p][i].to_string()));
            row.extend(ests.iter().map(|e| r.mse[e][i].to_string()));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads the first non-comment line of a file; used to sniff table kinds.
pub fn first_data_line<R: Read>(r: R) -> Result<Option<String>> {
    for line in BufReader::new(r).lines() {
        let line = line?;
        if !line.starts_with('#') && !line.trim().is_empty() {
            return Ok(Some(line));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_rows_one_covariate() {
        let (d, design) = read_sample("area_id,y,x\na,1,0.5\nb,0,-1\n".as_bytes()).unwrap();
        assert_eq!(d.p(), 1);
        assert_eq!(d.m(), 2);
        assert_eq!(design.columns[0].kind, ColumnKind::Numeric);
    }

    #[test]
    fn categorical_reference_coding() {
        let text = "area_id,y,edu,x\na,1,mid,0.5\na,0,low,1\nb,0,high,2\n";
        let (d, design) = read_sample(text.as_bytes()).unwrap();
        assert_eq!(d.p(), 3);
        assert_eq!(design.coef_names(), vec!["edu=low", "edu=mid", "x"]);
        // "high" is the reference level
        assert_eq!(d.areas[1].x(0), &[0.0, 0.0, 2.0]);
        assert_eq!(d.areas[0].x(0), &[0.0, 1.0, 0.5]);
    }

    #[test]
    fn sample_errors() {
        assert!(matches!(read_sample("area_id,y,x\na,2,0.5\n".as_bytes()), Err(Error::Parse { .. })));
        assert!(read_sample("area_id,y,x\na,1\n".as_bytes()).is_err());
        assert!(read_sample("".as_bytes()).is_err());
        assert!(read_sample("area_id,y,x\n".as_bytes()).is_err());
    }

    #[test]
    fn crosstab_parsing() {
        let (_, design) = read_sample("area_id,y,edu\na,1,mid\na,0,low\n".as_bytes()).unwrap();
        let tabs = read_crosstab("area_id,edu,count\na,low,3\na,mid,4\nz,low,2\n".as_bytes(), &design).unwrap();
        assert_eq!(tabs.len(), 2);
        assert_eq!(tabs[0].population_size(), 7);
        assert!(read_crosstab("area_id,edu,count\na,low,-3\n".as_bytes(), &design).is_err());
        assert!(read_crosstab("area_id,edu,count\na,phd,3\n".as_bytes(), &design).is_err());
        assert!(read_crosstab("area_id,age,count\na,low,3\n".as_bytes(), &design).is_err());
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# c\n a = 1 \n\nb=x=y\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x=y".into())]);
        assert!(parse_key_values("novalue\n").is_err());
    }

    #[test]
    fn fit_file_round_trip() {
        let params = MixtureParams::from_parts(vec![0.1 + 0.2, -1.0 / 3.0], vec![-2.5, 0.7], vec![0.3, 0.7]);
        let j = DMatrix::from_fn(5, 5, |a, b| if a == b { 10.0 + a as f64 } else { 0.1 / (1.0 + (a + b) as f64) });
        let v = &j * 1.1;
        let stored = StoredFit {
            params,
            design: Design {
                columns: vec![
                    DesignColumn { name: "x".into(), kind: ColumnKind::Numeric },
                    DesignColumn { name: "edu".into(), kind: ColumnKind::Categorical(vec!["a".into(), "b".into()]) },
                ],
            },
            m: 12,
            loglik: -123.456789,
            aic: 1.0 / 7.0,
            bic: 2.0,
            converged: true,
            iterations: 17,
            information: Some(InformationMatrices::from_parts(j, v).unwrap()),
        };
        let mut buf = Vec::new();
        write_fit(&mut buf, &stored, &OutputHeader { command: "fit".into(), seed: Some(3), config: vec![] }).unwrap();
        let back = read_fit(buf.as_slice()).unwrap();
        assert_eq!(back, stored);
    }

    proptest! {
        #[test]
        fn sample_round_trip_is_exact(
            xs in proptest::collection::vec(-1e6f64..1e6, 1..40),
            ys in proptest::collection::vec(0u8..2, 40),
        ) {
            let n = xs.len();
            let a = AreaSample::new("a", 1, ys[..n / 2 + 1].to_vec(), xs[..n / 2 + 1].to_vec()).unwrap();
            let b = AreaSample::new("b", 1, ys[..n].to_vec(), xs.clone()).unwrap();
            let d = Dataset::new(1, vec![a, b]).unwrap();
            let mut buf = Vec::new();
            write_sample(&mut buf, &d, &["x".to_owned()]).unwrap();
            let (back, _) = read_sample(buf.as_slice()).unwrap();
            prop_assert_eq!(back, d);
        }

        #[test]
        fn mse_round_trip(v in proptest::collection::vec(-1.0f64..1.0, 9)) {
            let row = AreaMse {
                area_id: "q".into(), out_of_sample: false, p_hat: v[0].abs(), d_term: v[1], e_term: v[2], b1: v[3],
                b2: v[4], mse_plain: v[5], mse_star: v[6], mse_star_raw: v[7], floored: true, bias_corrected: true,
                cv_percent: v[8],
            };
            let mut buf = Vec::new();
            write_mse(&mut buf, std::slice::from_ref(&row), &OutputHeader::default()).unwrap();
            prop_assert_eq!(read_mse(buf.as_slice()).unwrap(), vec![row]);
        }
    }
}
