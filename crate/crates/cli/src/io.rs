use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use longfactor::model::{Dataset, Layout, ModelSpec, ParameterSet};
use longfactor::Family;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn reader(path: &Path) -> Result<csv::Reader<File>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn field<T: std::str::FromStr>(
    path: &Path,
    rec: &csv::StringRecord,
    col: usize,
    name: &str,
) -> Result<T, CliError> {
    let raw = rec.get(col).unwrap_or("");
    raw.parse().map_err(|_| {
        CliError::Input(format!(
            "{}:{}: cannot parse {name} '{raw}'",
            path.display(),
            line_of(rec)
        ))
    })
}

fn finite(path: &Path, rec: &csv::StringRecord, col: usize, name: &str) -> Result<f64, CliError> {
    let v: f64 = field(path, rec, col, name)?;
    if !v.is_finite() {
        return Err(CliError::Input(format!(
            "{}:{}: {name} is not finite",
            path.display(),
            line_of(rec)
        )));
    }
    Ok(v)
}

fn index(path: &Path, rec: &csv::StringRecord, col: usize, name: &str) -> Result<usize, CliError> {
    let v: usize = field(path, rec, col, name)?;
    if v == 0 {
        return Err(CliError::Input(format!(
            "{}:{}: {name} indices are 1-based",
            path.display(),
            line_of(rec)
        )));
    }
    Ok(v - 1)
}

fn expect_header(
    path: &Path,
    rdr: &mut csv::Reader<File>,
    prefix: &[&str],
) -> Result<usize, CliError> {
    let headers = rdr.headers()?.clone();
    let ok =
        headers.len() >= prefix.len() && prefix.iter().zip(headers.iter()).all(|(a, b)| *a == b);
    if !ok {
        return Err(CliError::Input(format!(
            "{}: header must start with '{}'",
            path.display(),
            prefix.join(",")
        )));
    }
    Ok(headers.len() - prefix.len())
}

/// Responses in long form: `(person, item, time) -> value`, zero-based keys.
#[derive(Debug)]
pub struct LongResponses {
    pub cells: BTreeMap<(usize, usize, usize), f64>,
    pub n_persons: usize,
    pub n_items: usize,
    pub n_times: usize,
}

pub fn read_responses(path: &Path) -> Result<LongResponses, CliError> {
    let mut rdr = reader(path)?;
    let extra = expect_header(path, &mut rdr, &["person", "item", "time", "value"])?;
    if extra != 0 {
        return Err(CliError::Input(format!(
            "{}: expected exactly person,item,time,value",
            path.display()
        )));
    }
    let mut cells = BTreeMap::new();
    let (mut n, mut j, mut t) = (0, 0, 0);
    for rec in rdr.records() {
        let rec = rec?;
        let i = index(path, &rec, 0, "person")?;
        let c = index(path, &rec, 1, "item")?;
        let s = index(path, &rec, 2, "time")?;
        let v = finite(path, &rec, 3, "value")?;
        if cells.insert((i, c, s), v).is_some() {
            return Err(CliError::Input(format!(
                "{}:{}: duplicate row for person {}, item {}, time {}",
                path.display(),
                line_of(&rec),
                i + 1,
                c + 1,
                s + 1
            )));
        }
        n = n.max(i + 1);
        j = j.max(c + 1);
        t = t.max(s + 1);
    }
    if cells.is_empty() {
        return Err(CliError::Input(format!("{}: no responses", path.display())));
    }
    Ok(LongResponses {
        cells,
        n_persons: n,
        n_items: j,
        n_times: t,
    })
}

/// `person,x1..xp`, one row per person; returns the `N x p` matrix.
pub fn read_covariates(path: &Path, n_persons: usize) -> Result<DMatrix<f64>, CliError> {
    let mut rdr = reader(path)?;
    let p = expect_header(path, &mut rdr, &["person"])?;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; n_persons];
    for rec in rdr.records() {
        let rec = rec?;
        let i = index(path, &rec, 0, "person")?;
        if i >= n_persons {
            return Err(CliError::Input(format!(
                "{}:{}: person {} has no responses (N = {n_persons})",
                path.display(),
                line_of(&rec),
                i + 1
            )));
        }
        if rec.len() != p + 1 {
            return Err(CliError::Input(format!(
                "{}:{}: expected {} fields",
                path.display(),
                line_of(&rec),
                p + 1
            )));
        }
        let vals = (0..p)
            .map(|l| finite(path, &rec, l + 1, "covariate"))
            .collect::<Result<Vec<_>, _>>()?;
        if rows[i].replace(vals).is_some() {
            return Err(CliError::Input(format!(
                "{}:{}: duplicate person {}",
                path.display(),
                line_of(&rec),
                i + 1
            )));
        }
    }
    let mut x = DMatrix::zeros(n_persons, p);
    for (i, row) in rows.into_iter().enumerate() {
        let row = row.ok_or_else(|| {
            CliError::Input(format!("{}: person {} is missing", path.display(), i + 1))
        })?;
        for (l, v) in row.into_iter().enumerate() {
            x[(i, l)] = v;
        }
    }
    Ok(x)
}

/// `person,time,z1..zq`, one row per person and time; returns `T` matrices of shape `N x q`.
pub fn read_time_covariates(
    path: &Path,
    n_persons: usize,
    n_times: usize,
) -> Result<Vec<DMatrix<f64>>, CliError> {
    let mut rdr = reader(path)?;
    let q = expect_header(path, &mut rdr, &["person", "time"])?;
    let mut seen = vec![false; n_persons * n_times];
    let mut mats = vec![DMatrix::zeros(n_persons, q); n_times];
    for rec in rdr.records() {
        let rec = rec?;
        let i = index(path, &rec, 0, "person")?;
        let t = index(path, &rec, 1, "time")?;
        if i >= n_persons || t >= n_times {
            return Err(CliError::Input(format!(
                "{}:{}: person or time out of range",
                path.display(),
                line_of(&rec)
            )));
        }
        if rec.len() != q + 2 {
            return Err(CliError::Input(format!(
                "{}:{}: expected {} fields",
                path.display(),
                line_of(&rec),
                q + 2
            )));
        }
        if std::mem::replace(&mut seen[i * n_times + t], true) {
            return Err(CliError::Input(format!(
                "{}:{}: duplicate row",
                path.display(),
                line_of(&rec)
            )));
        }
        for l in 0..q {
            mats[t][(i, l)] = finite(path, &rec, l + 2, "time covariate")?;
        }
    }
    if let Some(pos) = seen.iter().position(|s| !s) {
        return Err(CliError::Input(format!(
            "{}: no row for person {}, time {}",
            path.display(),
            pos / n_times + 1,
            pos % n_times + 1
        )));
    }
    Ok(mats)
}

/// Input file locations of a data-driven command.
pub struct DataPaths<'a> {
    pub responses: &'a Path,
    pub covariates: Option<&'a Path>,
    pub time_covariates: Option<&'a Path>,
}

/// Reads and validates every input file into a [`Dataset`].
pub fn load_dataset(
    paths: &DataPaths,
    family: Family,
    n_covariates: Option<usize>,
) -> Result<Dataset, CliError> {
    let long = read_responses(paths.responses)?;
    let (n, j, t) = (long.n_persons, long.n_items, long.n_times);
    let mut responses = vec![0.0; n * j * t];
    let mut counts = vec![0usize; n * t];
    for (&(i, c, s), &v) in &long.cells {
        responses[(i * j + c) * t + s] = v;
        counts[i * t + s] += 1;
    }
    for (pos, &cnt) in counts.iter().enumerate() {
        if cnt != 0 && cnt != j {
            return Err(CliError::Input(format!(
                "{}: person {}, time {} has {cnt} of {j} items; time slices must be complete or absent",
                paths.responses.display(),
                pos / t + 1,
                pos % t + 1
            )));
        }
    }
    let observed: Vec<bool> = counts.iter().map(|&c| c == j).collect();
    let x = match paths.covariates {
        Some(p) => read_covariates(p, n)?,
        None => DMatrix::zeros(n, 0),
    };
    if let Some(expected) = n_covariates {
        if x.ncols() != expected {
            return Err(CliError::Input(match paths.covariates {
                None => format!(
                    "configuration expects {expected} covariates but no covariates file was given"
                ),
                Some(p) => format!(
                    "{}: {} covariates, configuration expects {expected}",
                    p.display(),
                    x.ncols()
                ),
            }));
        }
    }
    let z = paths
        .time_covariates
        .map(|p| read_time_covariates(p, n, t))
        .transpose()?;
    Ok(Dataset::new(
        n,
        j,
        t,
        responses,
        observed,
        x,
        z,
        vec![family; j],
    )?)
}

/// Serialized form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub spec: ModelSpec,
    pub n_times: usize,
    pub n_covariates: usize,
    pub n_time_covariates: usize,
    /// Row `i` is `θ_i`.
    pub theta: Vec<Vec<f64>>,
    /// Row `j` is `u_j`.
    pub item_params: Vec<Vec<f64>>,
    pub scale: Vec<f64>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Input(format!(
            "{what} rows must have {ncols} entries"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

impl ParamsFile {
    pub fn new(spec: &ModelSpec, layout: &Layout, params: &ParameterSet) -> Self {
        ParamsFile {
            spec: spec.clone(),
            n_times: layout.n_times,
            n_covariates: layout.n_covariates,
            n_time_covariates: layout.n_time_covariates,
            theta: rows(&params.theta),
            item_params: rows(&params.item_params),
            scale: params.scale.iter().copied().collect(),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(
            &self.spec,
            self.n_times,
            self.n_covariates,
            self.n_time_covariates,
        )
    }

    pub fn params(&self) -> Result<ParameterSet, CliError> {
        let layout = self.layout();
        Ok(ParameterSet {
            theta: from_rows(&self.theta, self.spec.n_factors, "theta")?,
            item_params: from_rows(&self.item_params, layout.len(), "item_params")?,
            scale: DVector::from_vec(self.scale.clone()),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Writes a CSV with the given header; every row is already formatted.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a dataset back out in the input formats.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), CliError> {
    let (n, j, t) = (ds.n_persons(), ds.n_items(), ds.n_times());
    let mut resp = Vec::new();
    for i in 0..n {
        for s in 0..t {
            if ds.is_observed(i, s) {
                for c in 0..j {
                    let v = ds.response(i, c, s);
                    resp.push(vec![
                        (i + 1).to_string(),
                        (c + 1).to_string(),
                        (s + 1).to_string(),
                        v.to_string(),
                    ]);
                }
            }
        }
    }
    write_csv(
        &dir.join("responses.csv"),
        &["person", "item", "time", "value"],
        resp,
    )?;
    let p = ds.n_covariates();
    let names: Vec<String> = (1..=p).map(|l| format!("x{l}")).collect();
    let mut header = vec!["person"];
    header.extend(names.iter().map(String::as_str));
    let x = (0..n).map(|i| {
        let mut r = vec![(i + 1).to_string()];
        r.extend(ds.covariate_row(i).iter().map(|v| v.to_string()));
        r
    });
    write_csv(&dir.join("covariates.csv"), &header, x)?;
    if ds.has_time_covariates() {
        let q = ds.n_time_covariates();
        let names: Vec<String> = (1..=q).map(|l| format!("z{l}")).collect();
        let mut header = vec!["person", "time"];
        header.extend(names.iter().map(String::as_str));
        let mut z = Vec::new();
        for i in 0..n {
            for s in 0..t {
                let mut r = vec![(i + 1).to_string(), (s + 1).to_string()];
                r.extend(ds.time_covariate_row(i, s).iter().map(|v| v.to_string()));
                z.push(r);
            }
        }
        write_csv(&dir.join("time_covariates.csv"), &header, z)?;
    }
    Ok(())
}

/// Next-period outcomes `person,item,value`; absent rows are zeros.
pub fn read_future(
    path: &Path,
    n_persons: usize,
    n_items: usize,
) -> Result<DMatrix<bool>, CliError> {
    let mut rdr = reader(path)?;
    let extra = expect_header(path, &mut rdr, &["person", "item", "value"])?;
    if extra != 0 {
        return Err(CliError::Input(format!(
            "{}: expected exactly person,item,value",
            path.display()
        )));
    }
    let mut out = DMatrix::from_element(n_persons, n_items, false);
    for rec in rdr.records() {
        let rec = rec?;
        let i = index(path, &rec, 0, "person")?;
        let c = index(path, &rec, 1, "item")?;
        if i >= n_persons || c >= n_items {
            return Err(CliError::Input(format!(
                "{}:{}: person or item out of range",
                path.display(),
                line_of(&rec)
            )));
        }
        let v = finite(path, &rec, 2, "value")?;
        if v != 0.0 && v != 1.0 {
            return Err(CliError::Input(format!(
                "{}:{}: value must be 0 or 1",
                path.display(),
                line_of(&rec)
            )));
        }
        out[(i, c)] = v == 1.0;
    }
    Ok(out)
}
