//! Data ingestion, standardization and on-disk containers.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dpm::{DpmChain, DpmConfig, DpmState, DpmTheta, RowState};
use crate::error::{Error, Result};
use crate::fit::{prior_for_row, FittedMap, FittedRow, RestartTrace};
use crate::kernel::Hyper;
use crate::ordering::{Locations, Ordering};

/// Per-variable affine transform `y_std = (y_raw - mean) / sd`, in original variable order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardization {
    pub fn identity(n_vars: usize) -> Self {
        Self { mean: vec![0.0; n_vars], sd: vec![1.0; n_vars] }
    }

    /// Column means and sample standard deviations of an n×N replicate matrix.
    pub fn estimate(y: &DMatrix<f64>) -> Result<Self> {
        let n = y.nrows();
        if n < 2 {
            return Err(Error::data(format!("need at least 2 replicates, got {n}")));
        }
        let mut mean = Vec::with_capacity(y.ncols());
        let mut sd = Vec::with_capacity(y.ncols());
        for (j, col) in y.column_iter().enumerate() {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("column {j} contains a nonfinite value")));
            }
            let mu = col.sum() / n as f64;
            let ss: f64 = col.iter().map(|v| (v - mu) * (v - mu)).sum();
            let s = (ss / (n - 1) as f64).sqrt();
            if !(s > 0.0) {
                return Err(Error::data(format!("column {j} is constant")));
            }
            mean.push(mu);
            sd.push(s);
        }
        Ok(Self { mean, sd })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(self.mean.iter().zip(&self.sd)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(self.mean.iter().zip(&self.sd)).map(|(v, (m, s))| v * s + m).collect()
    }

    /// Standardizes every row of an n×N matrix.
    pub fn apply_matrix(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = y.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[j], self.sd[j]);
            col.apply(|v| *v = (*v - m) / s);
        }
        out
    }

    /// log|∂y_std/∂y_raw| = −Σ log sd.
    pub fn log_jacobian(&self) -> f64 {
        -self.sd.iter().map(|s| s.ln()).sum::<f64>()
    }
}

/// Options applied when reading replicate data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Take natural logs of every value first; all values must then be positive.
    pub log_transform: bool,
    pub standardize: bool,
}

/// Replicate data as read from disk: one row per replicate, one column per
/// variable. `values` are after the optional log transform and before
/// standardization; `standardization` holds the per-column transform the
/// fitted models apply (identity when standardization is off).
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateMatrix {
    pub values: DMatrix<f64>,
    pub source: PathBuf,
    pub log_transform: bool,
    pub standardization: Standardization,
}

/// Reads replicates from CSV (`.csv`, header optional) or raw binary with a JSON sidecar.
pub fn ingest(path: &Path, options: IngestOptions) -> Result<ReplicateMatrix> {
    let mut values = read_matrix(path)?;
    if values.nrows() < 2 {
        return Err(Error::data(format!("need at least 2 replicates, got {}", values.nrows())));
    }
    if options.log_transform {
        for c in 0..values.ncols() {
            for r in 0..values.nrows() {
                let v = values[(r, c)];
                if !(v > 0.0) {
                    return Err(Error::data(format!("row {}, column {}: value {v} is not positive under log transform", r + 1, c + 1)));
                }
                values[(r, c)] = v.ln();
            }
        }
    }
    let stdz = Standardization::estimate(&values)?;
    let standardization = if options.standardize { stdz } else { Standardization::identity(values.ncols()) };
    Ok(ReplicateMatrix { values, source: path.to_path_buf(), log_transform: options.log_transform, standardization })
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads a matrix from CSV or from raw binary, chosen by the `.csv` extension.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    if is_csv(path) {
        read_matrix_csv(path)
    } else {
        read_matrix_bin(path)
    }
}

/// Writes a matrix as CSV or as raw binary plus sidecar, chosen by the `.csv` extension.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    if is_csv(path) {
        write_matrix_csv(path, m)
    } else {
        write_matrix_bin(path, m)
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::data(format!("malformed CSV: {other:?}")),
    }
}

/// Numeric CSV; a first line that does not parse as numbers is taken as a header.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let (rows, _) = read_csv_rows(path)?;
    matrix_from_rows(rows)
}

/// Rows of a numeric CSV and its header, if any.
fn read_csv_rows(path: &Path) -> Result<(Vec<Vec<f64>>, Option<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path).map_err(csv_error)?;
    let mut rows = Vec::new();
    let mut header = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let parsed: Vec<std::result::Result<f64, _>> = record.iter().map(|f| f.parse::<f64>()).collect();
        if line == 0 && parsed.iter().any(|p| p.is_err()) {
            header = Some(record.iter().map(|s| s.to_string()).collect());
            continue;
        }
        let mut row = Vec::with_capacity(parsed.len());
        for (col, p) in parsed.into_iter().enumerate() {
            let v = p.map_err(|_| Error::data(format!("line {}, column {}: not a number", line + 1, col + 1)))?;
            if !v.is_finite() {
                return Err(Error::data(format!("line {}, column {}: value is not finite", line + 1, col + 1)));
            }
            row.push(v);
        }
        rows.push(row);
    }
    Ok((rows, header))
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> Result<DMatrix<f64>> {
    let n_cols = rows.first().map(|r| r.len()).ok_or_else(|| Error::data("file contains no data rows"))?;
    if let Some(r) = rows.iter().position(|r| r.len() != n_cols) {
        return Err(Error::data(format!("data row {} has {} values, expected {n_cols}", r + 1, rows[r].len())));
    }
    Ok(DMatrix::from_fn(rows.len(), n_cols, |r, c| rows[r][c]))
}

/// Header-less CSV with shortest round-trip float formatting.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string())).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Shape record stored next to a binary matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub n: usize,
    #[serde(rename = "N")]
    pub n_vars: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Raw little-endian f64, row-major, with the shape in `<path>.json`.
pub fn read_matrix_bin(path: &Path) -> Result<DMatrix<f64>> {
    let side: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    let expected = side.n * side.n_vars * 8;
    if bytes.len() != expected {
        return Err(Error::data(format!("binary matrix has {} bytes, sidecar implies {expected}", bytes.len())));
    }
    let vals = f64s_from_bytes(&bytes);
    if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::data(format!("row {}, column {}: value is not finite", k / side.n_vars + 1, k % side.n_vars + 1)));
    }
    Ok(DMatrix::from_row_slice(side.n, side.n_vars, &vals))
}

pub fn write_matrix_bin(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(m.len() * 8);
    for r in 0..m.nrows() {
        for v in m.row(r).iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    fs::write(sidecar_path(path), serde_json::to_vec(&Sidecar { n: m.nrows(), n_vars: m.ncols() })?)?;
    Ok(())
}

fn f64s_from_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect()
}

/// Locations from CSV with header `x,y`, `x,y,z` or `lon,lat` (degrees, chordal
/// metric); a header-less CSV is Euclidean. Any other extension is read as a
/// binary precomputed distance matrix.
pub fn read_locations(path: &Path) -> Result<Locations> {
    if !is_csv(path) {
        return Locations::precomputed(read_matrix_bin(path)?);
    }
    let (rows, header) = read_csv_rows(path)?;
    let coords = matrix_from_rows(rows)?;
    let names: Vec<String> = header.unwrap_or_default().iter().map(|h| h.to_ascii_lowercase()).collect();
    match names.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["lon", "lat"] => Locations::chordal(coords),
        [] | ["x", "y"] | ["x", "y", "z"] => Locations::euclidean(coords),
        other => Err(Error::data(format!("unrecognized location header {other:?}; expected x,y | x,y,z | lon,lat"))),
    }
}

/// Writes coordinates with an `x,y[,z]` header.
pub fn write_locations_csv(path: &Path, locs: &Locations) -> Result<()> {
    let coords = locs.coords();
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let header: &[&str] = if coords.ncols() == 3 { &["x", "y", "z"] } else { &["x", "y"] };
    w.write_record(header).map_err(csv_error)?;
    for r in 0..coords.nrows() {
        w.write_record(coords.row(r).iter().map(|v| v.to_string())).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub const MAP_MAGIC: &str = "BTM1";
pub const CHAIN_MAGIC: &str = "BTMDPM1";

fn write_container(magic: &str, header: &impl Serialize, payload: &[f64]) -> Result<Vec<u8>> {
    let h = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(magic.len() + 9 + h.len() + 8 * payload.len());
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Splits a container into its header and payload after checking the magic.
/// `family` is the magic without its version number.
fn read_container<'a>(bytes: &'a [u8], family: &str, version: u32, what: &str) -> Result<(&'a [u8], Vec<f64>)> {
    let nl = bytes.iter().take(32).position(|&b| b == b'\n').ok_or_else(|| Error::format(format!("not a {what} file")))?;
    let magic = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(format!("not a {what} file")))?;
    match magic.strip_prefix(family).map(|v| v.parse::<u32>()) {
        Some(Ok(v)) if v == version => {}
        Some(Ok(v)) if v > version => {
            return Err(Error::format(format!("{what} file version {v} is newer than the supported version {version}")))
        }
        _ => return Err(Error::format(format!("not a {what} file (magic {magic:?})"))),
    }
    let rest = &bytes[nl + 1..];
    if rest.len() < 8 {
        return Err(Error::format("truncated header length"));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(Error::format("truncated header"));
    }
    let (header, payload) = rest.split_at(hlen);
    if payload.len() % 8 != 0 {
        return Err(Error::format("payload is not a whole number of 64-bit floats"));
    }
    Ok((header, f64s_from_bytes(payload)))
}

/// Sequential reader over the float payload.
struct Payload {
    data: Vec<f64>,
    pos: usize,
}

impl Payload {
    fn take(&mut self, k: usize) -> Result<&[f64]> {
        if self.pos + k > self.data.len() {
            return Err(Error::format("truncated payload"));
        }
        self.pos += k;
        Ok(&self.data[self.pos - k..self.pos])
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::format(format!("{} unexpected trailing values", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MapHeader {
    #[serde(rename = "N")]
    n_vars: usize,
    n: usize,
    hyper: Hyper,
    simplified: bool,
    standardization: Standardization,
    ordering: Ordering,
    /// Active neighbors per row, for validating the payload.
    row_m: Vec<usize>,
    loglik: f64,
    trace: Vec<RestartTrace>,
}

/// Serializes a fitted map into the `BTM1` container.
pub fn map_to_bytes(map: &FittedMap) -> Result<Vec<u8>> {
    let n = map.n;
    let header = MapHeader {
        n_vars: map.n_vars(),
        n,
        hyper: map.hyper.clone(),
        simplified: map.simplified,
        standardization: map.standardization.clone(),
        ordering: map.ordering.clone(),
        row_m: map.rows.iter().map(|r| r.prior.m()).collect(),
        loglik: map.loglik,
        trace: map.trace.clone(),
    };
    let mut payload = Vec::new();
    for row in &map.rows {
        payload.extend_from_slice(&[row.alpha_tilde, row.beta_tilde, row.d_hat2]);
        for c in 0..n {
            for r in c..n {
                payload.push(row.chol_g[(r, c)]);
            }
        }
        payload.extend(row.solve_y.iter());
        payload.extend(row.train_x.iter());
    }
    write_container(MAP_MAGIC, &header, &payload)
}

pub fn map_from_bytes(bytes: &[u8]) -> Result<FittedMap> {
    let (h, data) = read_container(bytes, "BTM", 1, "map")?;
    let header: MapHeader = serde_json::from_slice(h).map_err(|e| Error::format(format!("unreadable header: {e}")))?;
    let n = header.n;
    header.ordering.validate()?;
    header.hyper.validate()?;
    if header.ordering.len() != header.n_vars || header.row_m.len() != header.n_vars || header.standardization.len() != header.n_vars {
        return Err(Error::format("header fields disagree on the number of variables"));
    }
    let mut p = Payload { data, pos: 0 };
    let mut rows = Vec::with_capacity(header.n_vars);
    for i in 0..header.n_vars {
        let prior = prior_for_row(&header.hyper, &header.ordering, i);
        let m = prior.m();
        if m != header.row_m[i] {
            return Err(Error::format(format!("row {i}: stored arity {} does not match the hyperparameters", header.row_m[i])));
        }
        let s = p.take(3)?;
        let (alpha_tilde, beta_tilde, d_hat2) = (s[0], s[1], s[2]);
        let packed = p.take(n * (n + 1) / 2)?;
        let mut chol_g = DMatrix::zeros(n, n);
        let mut k = 0;
        for c in 0..n {
            for r in c..n {
                chol_g[(r, c)] = packed[k];
                k += 1;
            }
        }
        let solve_y = DVector::from_column_slice(p.take(n)?);
        let train_x = DMatrix::from_column_slice(n, m, p.take(n * m)?);
        rows.push(FittedRow { prior, chol_g, alpha_tilde, beta_tilde, d_hat2, solve_y, train_x });
    }
    p.finish()?;
    FittedMap::from_parts(header.ordering, header.hyper, rows, n, header.standardization, header.simplified, header.trace)
}

pub fn save_map(path: &Path, map: &FittedMap) -> Result<()> {
    fs::write(path, map_to_bytes(map)?)?;
    Ok(())
}

pub fn load_map(path: &Path) -> Result<FittedMap> {
    map_from_bytes(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    theta: DpmTheta,
    iteration: usize,
    clusters: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ChainHeader {
    #[serde(rename = "N")]
    n_vars: usize,
    n: usize,
    config: DpmConfig,
    ordering: Ordering,
    standardization: Standardization,
    acceptance: [Option<f64>; 3],
    scales: [f64; 3],
    states: Vec<StateMeta>,
    last: StateMeta,
}

fn state_meta(s: &DpmState) -> StateMeta {
    StateMeta { theta: s.theta, iteration: s.iteration, clusters: s.rows.iter().map(|r| r.n_clusters()).collect() }
}

fn push_state(payload: &mut Vec<f64>, s: &DpmState, with_eps: bool) {
    for r in &s.rows {
        payload.extend(r.labels.iter().map(|&l| l as f64));
        payload.extend_from_slice(&r.mu);
        payload.extend_from_slice(&r.d2);
        payload.extend_from_slice(&r.fresh);
        if with_eps {
            payload.extend_from_slice(&r.eps);
        }
    }
}

fn pull_state(p: &mut Payload, meta: StateMeta, n: usize, with_eps: bool) -> Result<DpmState> {
    let mut rows = Vec::with_capacity(meta.clusters.len());
    for &k in &meta.clusters {
        let labels = p
            .take(n)?
            .iter()
            .map(|&l| if l >= 0.0 && l < k as f64 && l.fract() == 0.0 { Ok(l as u32) } else { Err(Error::format("invalid cluster label")) })
            .collect::<Result<Vec<u32>>>()?;
        let mu = p.take(k)?.to_vec();
        let d2 = p.take(k)?.to_vec();
        let f = p.take(2)?;
        let fresh = [f[0], f[1]];
        let eps = if with_eps { p.take(n)?.to_vec() } else { Vec::new() };
        rows.push(RowState { eps, labels, mu, d2, fresh });
    }
    Ok(DpmState { theta: meta.theta, iteration: meta.iteration, rows })
}

/// Serializes a DPM chain into the `BTMDPM1` container.
pub fn chain_to_bytes(chain: &DpmChain) -> Result<Vec<u8>> {
    let header = ChainHeader {
        n_vars: chain.n_vars(),
        n: chain.n(),
        config: chain.config.clone(),
        ordering: chain.ordering.clone(),
        standardization: chain.standardization.clone(),
        acceptance: chain.acceptance.map(|a| if a.is_finite() { Some(a) } else { None }),
        scales: chain.scales,
        states: chain.states.iter().map(state_meta).collect(),
        last: state_meta(&chain.last),
    };
    let mut payload: Vec<f64> = chain.y_ordered.iter().copied().collect();
    for s in &chain.states {
        push_state(&mut payload, s, false);
    }
    push_state(&mut payload, &chain.last, true);
    write_container(CHAIN_MAGIC, &header, &payload)
}

pub fn chain_from_bytes(bytes: &[u8]) -> Result<DpmChain> {
    let (h, data) = read_container(bytes, "BTMDPM", 1, "DPM chain")?;
    let header: ChainHeader = serde_json::from_slice(h).map_err(|e| Error::format(format!("unreadable header: {e}")))?;
    let (n, n_vars) = (header.n, header.n_vars);
    let mut p = Payload { data, pos: 0 };
    let y_ordered = DMatrix::from_column_slice(n, n_vars, p.take(n * n_vars)?);
    let states = header.states.into_iter().map(|m| pull_state(&mut p, m, n, false)).collect::<Result<Vec<_>>>()?;
    let last = pull_state(&mut p, header.last, n, true)?;
    p.finish()?;
    let acceptance = header.acceptance.map(|a| a.unwrap_or(f64::NAN));
    DpmChain::from_parts(header.ordering, header.config, header.standardization, y_ordered, states, last, acceptance, header.scales)
}

pub fn save_chain(path: &Path, chain: &DpmChain) -> Result<()> {
    fs::write(path, chain_to_bytes(chain)?)?;
    Ok(())
}

pub fn load_chain(path: &Path) -> Result<DpmChain> {
    chain_from_bytes(&fs::read(path)?)
}
