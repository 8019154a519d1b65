//! Clean and corruption error, corruption error (CE) relative to a
//! baseline, mean CE, evaluation reports and the transfer matrix.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corrupt::{derive_seed, CorruptionError, CorruptionKind, CorruptionSpec, CONSTANTS_VERSION};
use crate::data::Dataset;
use crate::imageio::{ImageIoError, Raster};
use crate::model::{CamNet, ModelError};
use crate::train::count_wrong;

pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];
const EVAL_BATCH: usize = 100;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("corruption error is undefined for {kind}: the baseline makes no mistakes at any severity")]
    UndefinedCe { kind: String },
    #[error("mean CE needs a CE for every corruption kind; missing: {}", .0.join(", "))]
    IncompleteMce(Vec<String>),
    #[error("mean CE got two values for {0}")]
    DuplicateCe(String),
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("eval cache i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("transfer matrix needs a repaired model for every corruption; {0} is missing")]
    MissingModel(String),
    #[error("cannot parse {what}: {detail}")]
    Parse { what: &'static str, detail: String },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

fn parse_err(what: &'static str, detail: impl ToString) -> MetricsError {
    MetricsError::Parse {
        what,
        detail: detail.to_string(),
    }
}

/// Top-1 error in `[0, 1]`.
pub fn error_rate(model: &CamNet<f32>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let (logits, _) = model.forward(&x)?;
        wrong += count_wrong(&logits, &labels);
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// `100 · (1 - top-1 accuracy)`.
pub fn clean_error(model: &CamNet<f32>, data: &Dataset) -> Result<f64> {
    Ok(100.0 * error_rate(model, data)?)
}

/// `100 · Σ_s E_s(model) / Σ_s E_s(baseline)`, with the ratio taken first
/// so that a model scored against itself is exactly 100.
pub fn corruption_error(kind: CorruptionKind, model_errors: &[f64], baseline_errors: &[f64]) -> Result<f64> {
    let base: f64 = baseline_errors.iter().sum();
    if base <= 0.0 {
        return Err(MetricsError::UndefinedCe {
            kind: kind.abbrev().to_string(),
        });
    }
    Ok(model_errors.iter().sum::<f64>() / base * 100.0)
}

/// Unweighted mean of the 15 per-kind CEs. Rejects a missing or repeated
/// kind.
pub fn mce(ces: &[(CorruptionKind, f64)]) -> Result<f64> {
    let mut seen = [false; CorruptionKind::ALL.len()];
    for (kind, _) in ces {
        if std::mem::replace(&mut seen[kind.index()], true) {
            return Err(MetricsError::DuplicateCe(kind.abbrev().to_string()));
        }
    }
    let missing: Vec<String> = CorruptionKind::ALL
        .iter()
        .filter(|k| !seen[k.index()])
        .map(|k| k.abbrev().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::IncompleteMce(missing));
    }
    Ok(ces.iter().map(|(_, ce)| ce).sum::<f64>() / ces.len() as f64)
}

/// Seed of the held-out corrupted copy for one `(kind, severity)`.
pub fn eval_seed(seed: u64, kind: CorruptionKind, severity: u8) -> u64 {
    derive_seed(&[seed, 0xE7A1, kind.index() as u64, severity as u64])
}

/// On-disk memo of `(model, dataset, kind, severity, seed) -> error`.
#[derive(Clone, Debug)]
pub struct EvalCache {
    dir: PathBuf,
}

impl EvalCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| MetricsError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { dir })
    }

    fn path(&self, model_hash: &str, dataset_hash: &str, cell: Option<(CorruptionKind, u8)>, seed: u64) -> PathBuf {
        let mut h = Sha256::new();
        let cell = cell.map_or("clean".to_string(), |(k, s)| format!("{}@{s}", k.abbrev()));
        h.update(format!("{model_hash}|{dataset_hash}|{cell}|{seed}|{CONSTANTS_VERSION}"));
        self.dir.join(format!("{}.err", hex::encode(h.finalize())))
    }

    fn get(&self, path: &Path) -> Option<f64> {
        let text = std::fs::read_to_string(path).ok()?;
        u64::from_str_radix(text.trim(), 16).ok().map(f64::from_bits)
    }

    fn put(&self, path: &Path, value: f64) -> Result<()> {
        std::fs::write(path, format!("{:016x}\n", value.to_bits())).map_err(|source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Evaluates models on a held-out set and its corrupted copies. Each
/// corrupted copy is generated once and shared by every model passed in.
pub struct Evaluator<'a> {
    data: &'a Dataset,
    dataset_hash: String,
    seed: u64,
    cache: Option<EvalCache>,
}

impl<'a> Evaluator<'a> {
    pub fn new(data: &'a Dataset, seed: u64) -> Self {
        Self {
            data,
            dataset_hash: data.content_hash(),
            seed,
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: EvalCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn dataset_hash(&self) -> &str {
        &self.dataset_hash
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn cached(
        &self,
        model: &CamNet<f32>,
        cell: Option<(CorruptionKind, u8)>,
        data: impl FnOnce() -> Result<Dataset>,
        memo: &mut Option<Dataset>,
    ) -> Result<f64> {
        let path = self
            .cache
            .as_ref()
            .map(|c| c.path(&model.content_hash(), &self.dataset_hash, cell, self.seed));
        if let (Some(cache), Some(p)) = (&self.cache, &path) {
            if let Some(v) = cache.get(p) {
                return Ok(v);
            }
        }
        if memo.is_none() {
            *memo = Some(data()?);
        }
        let err = error_rate(model, memo.as_ref().expect("filled above"))?;
        if let (Some(cache), Some(p)) = (&self.cache, &path) {
            cache.put(p, err)?;
        }
        Ok(err)
    }

    pub fn clean_errors(&self, models: &[&CamNet<f32>]) -> Result<Vec<f64>> {
        let mut memo = Some(self.data.clone());
        models.iter().map(|m| self.cached(m, None, || unreachable!(), &mut memo)).collect()
    }

    /// Per-severity errors of every model on one corruption kind:
    /// `result[model][severity - 1]`.
    pub fn severity_errors(&self, models: &[&CamNet<f32>], kind: CorruptionKind) -> Result<Vec<[f64; 5]>> {
        let mut out = vec![[0.0; 5]; models.len()];
        for (si, &severity) in SEVERITIES.iter().enumerate() {
            let spec = CorruptionSpec::new(kind, severity, eval_seed(self.seed, kind, severity))?;
            let mut memo = None;
            for (mi, model) in models.iter().enumerate() {
                out[mi][si] = self.cached(model, Some((kind, severity)), || Ok(self.data.corrupted(&spec)), &mut memo)?;
            }
        }
        Ok(out)
    }
}

/// Errors (percent, severities 1 to 5) of one model on one corruption kind,
/// and its CE when a baseline with nonzero errors is available.
#[derive(Clone, Debug, PartialEq)]
pub struct KindResult {
    pub kind: CorruptionKind,
    pub errors: [f64; 5],
    pub ce: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model_hash: String,
    pub baseline_hash: Option<String>,
    pub dataset_hash: String,
    pub eval_seed: u64,
    /// Percent.
    pub clean_error: f64,
    pub kinds: Vec<KindResult>,
}

impl EvalReport {
    /// Mean CE over all 15 kinds; `None` unless every kind is present with
    /// a CE.
    pub fn mce(&self) -> Option<f64> {
        let ces: Option<Vec<(CorruptionKind, f64)>> = self.kinds.iter().map(|k| k.ce.map(|ce| (k.kind, ce))).collect();
        ces.and_then(|c| mce(&c).ok())
    }

    pub fn kind(&self, kind: CorruptionKind) -> Option<&KindResult> {
        self.kinds.iter().find(|k| k.kind == kind)
    }

    /// `key=value` lines; floats are written in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model_hash={}", self.model_hash);
        let _ = writeln!(out, "baseline_hash={}", self.baseline_hash.as_deref().unwrap_or("-"));
        let _ = writeln!(out, "dataset_hash={}", self.dataset_hash);
        let _ = writeln!(out, "eval_seed={}", self.eval_seed);
        let _ = writeln!(out, "clean_error={}", self.clean_error);
        for k in &self.kinds {
            let errs: Vec<String> = k.errors.iter().map(|e| e.to_string()).collect();
            let ce = k.ce.map_or("-".to_string(), |c| c.to_string());
            let _ = writeln!(out, "kind={} errors={} ce={ce}", k.kind.abbrev(), errs.join(","));
        }
        if let Some(m) = self.mce() {
            let _ = writeln!(out, "mce={m}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let mut kinds = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if line.starts_with("kind=") {
                kinds.push(parse_kind_line(line)?);
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| parse_err("report line", line))?;
            fields.insert(k, v);
        }
        let field = |name: &'static str| fields.get(name).copied().ok_or_else(|| parse_err("report", format!("missing {name}")));
        let float = |name: &'static str| -> Result<f64> { field(name)?.parse().map_err(|e| parse_err(name, e)) };
        let report = Self {
            model_hash: field("model_hash")?.to_string(),
            baseline_hash: Some(field("baseline_hash")?).filter(|v| *v != "-").map(str::to_string),
            dataset_hash: field("dataset_hash")?.to_string(),
            eval_seed: field("eval_seed")?.parse().map_err(|e| parse_err("eval_seed", e))?,
            clean_error: float("clean_error")?,
            kinds,
        };
        if let Some(stored) = fields.get("mce") {
            let stored: f64 = stored.parse().map_err(|e| parse_err("mce", e))?;
            if report.mce() != Some(stored) {
                return Err(parse_err("mce", format!("stored {stored} disagrees with the per-kind CEs")));
            }
        }
        Ok(report)
    }

    /// Human-readable aligned table (errors in percent).
    pub fn table(&self) -> String {
        let mut out = format!("clean error  {:6.2}%\n", self.clean_error);
        let _ = writeln!(out, "{:<6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8}", "kind", "s1", "s2", "s3", "s4", "s5", "CE");
        for k in &self.kinds {
            let _ = write!(out, "{:<6}", k.kind.abbrev());
            for e in k.errors {
                let _ = write!(out, " {e:>7.2}");
            }
            match k.ce {
                Some(c) => {
                    let _ = writeln!(out, " {c:>8.2}");
                }
                None => {
                    let _ = writeln!(out, " {:>8}", "-");
                }
            }
        }
        if let Some(m) = self.mce() {
            let _ = writeln!(out, "mCE    {m:.2}");
        }
        out
    }
}

fn parse_kind_line(line: &str) -> Result<KindResult> {
    let mut kind = None;
    let mut errors = None;
    let mut ce = None;
    for part in line.split_whitespace() {
        let (k, v) = part.split_once('=').ok_or_else(|| parse_err("kind line", line))?;
        match k {
            "kind" => kind = Some(v.parse::<CorruptionKind>()?),
            "errors" => {
                let vals = v
                    .split(',')
                    .map(|s| s.parse::<f64>().map_err(|e| parse_err("errors", e)))
                    .collect::<Result<Vec<_>>>()?;
                errors = Some(<[f64; 5]>::try_from(vals).map_err(|v| parse_err("errors", format!("{} values", v.len())))?);
            }
            "ce" => ce = if v == "-" { None } else { Some(v.parse().map_err(|e| parse_err("ce", e))?) },
            other => return Err(parse_err("kind line", format!("unknown field {other}"))),
        }
    }
    Ok(KindResult {
        kind: kind.ok_or_else(|| parse_err("kind line", "missing kind"))?,
        errors: errors.ok_or_else(|| parse_err("kind line", "missing errors"))?,
        ce,
    })
}

/// Builds a report for `model`, with CEs against `baseline` when given.
pub fn evaluate(
    evaluator: &Evaluator,
    model: &CamNet<f32>,
    baseline: Option<&CamNet<f32>>,
    kinds: &[CorruptionKind],
) -> Result<EvalReport> {
    let mut models = vec![model];
    models.extend(baseline);
    let clean = 100.0 * evaluator.clean_errors(&[model])?[0];
    let mut results = Vec::new();
    for &kind in kinds {
        let errs = evaluator.severity_errors(&models, kind)?;
        let ce = match baseline {
            Some(_) => match corruption_error(kind, &errs[0], &errs[1]) {
                Ok(ce) => Some(ce),
                Err(MetricsError::UndefinedCe { .. }) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        results.push(KindResult {
            kind,
            errors: errs[0].map(|e| 100.0 * e),
            ce,
        });
    }
    Ok(EvalReport {
        model_hash: model.content_hash(),
        baseline_hash: baseline.map(|b| b.content_hash()),
        dataset_hash: evaluator.dataset_hash().to_string(),
        eval_seed: evaluator.seed(),
        clean_error: clean,
        kinds: results,
    })
}

/// `entry[r][c] = CE_r(model_c) - CE_r(vanilla)`; with CE measured against
/// the vanilla model itself the second term is 100. Negative entries mean
/// the model repaired for column `c` is more robust than vanilla on row `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferMatrix {
    pub rows: Vec<CorruptionKind>,
    /// Target corruption of each column's repaired model.
    pub columns: Vec<CorruptionKind>,
    /// `values[row][column]`; `None` for cells that were not evaluated.
    pub values: Vec<Vec<Option<f64>>>,
}

const CELL: usize = 12;

impl TransferMatrix {
    pub fn new(rows: Vec<CorruptionKind>, columns: Vec<CorruptionKind>) -> Self {
        let values = vec![vec![None; columns.len()]; rows.len()];
        Self { rows, columns, values }
    }

    pub fn get(&self, row: CorruptionKind, column: CorruptionKind) -> Option<f64> {
        let r = self.rows.iter().position(|&k| k == row)?;
        let c = self.columns.iter().position(|&k| k == column)?;
        self.values[r][c]
    }

    /// Entry of the model repaired for `kind`, evaluated on `kind`.
    pub fn diagonal(&self, kind: CorruptionKind) -> Option<f64> {
        self.get(kind, kind)
    }

    /// Filled off-diagonal entries and how many of them exceed `threshold`
    /// CE points (degradation).
    pub fn off_diagonal_above(&self, threshold: f64) -> (usize, usize) {
        let mut total = 0;
        let mut above = 0;
        for (r, row) in self.values.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if let Some(v) = v.filter(|_| self.rows[r] != self.columns[c]) {
                    total += 1;
                    above += usize::from(v > threshold);
                }
            }
        }
        (above, total)
    }

    /// Fills column `column` for `model` from per-kind severity errors of
    /// both models.
    pub fn fill_column(
        &mut self,
        column: usize,
        model_errors: &[[f64; 5]],
        vanilla_errors: &[[f64; 5]],
    ) -> Result<()> {
        for (r, &kind) in self.rows.iter().enumerate() {
            let ce = corruption_error(kind, &model_errors[r], &vanilla_errors[r])?;
            let vanilla = corruption_error(kind, &vanilla_errors[r], &vanilla_errors[r])?;
            self.values[r][column] = Some(ce - vanilla);
        }
        Ok(())
    }

    /// Evaluates each repaired model (keyed by its target corruption) on
    /// every row kind. With `require_all`, one model per corruption kind
    /// must be supplied.
    pub fn compute(
        evaluator: &Evaluator,
        vanilla: &CamNet<f32>,
        models: &[(CorruptionKind, &CamNet<f32>)],
        rows: &[CorruptionKind],
        require_all: bool,
    ) -> Result<Self> {
        let mut columns: Vec<CorruptionKind> = models.iter().map(|(k, _)| *k).collect();
        columns.sort();
        columns.dedup();
        if columns.len() != models.len() {
            return Err(parse_err("transfer matrix", "two models target the same corruption"));
        }
        if require_all {
            if let Some(missing) = CorruptionKind::ALL.iter().find(|k| !columns.contains(k)) {
                return Err(MetricsError::MissingModel(missing.abbrev().to_string()));
            }
        }
        let mut models = models.to_vec();
        models.sort_by_key(|(k, _)| *k);
        let mut matrix = Self::new(rows.to_vec(), columns);
        let mut all: Vec<&CamNet<f32>> = vec![vanilla];
        all.extend(models.iter().map(|(_, m)| *m));
        let mut errs = vec![Vec::new(); all.len()];
        for &kind in rows {
            for (i, e) in evaluator.severity_errors(&all, kind)?.into_iter().enumerate() {
                errs[i].push(e);
            }
        }
        for c in 0..models.len() {
            matrix.fill_column(c, &errs[c + 1], &errs[0])?;
        }
        Ok(matrix)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("corruption");
        for c in &self.columns {
            out.push(',');
            out.push_str(c.abbrev());
        }
        out.push('\n');
        for (kind, row) in self.rows.iter().zip(&self.values) {
            out.push_str(kind.abbrev());
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| parse_err("transfer csv", "empty"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("corruption") {
            return Err(parse_err("transfer csv", "header must start with `corruption`"));
        }
        let columns = cols.map(|c| c.parse::<CorruptionKind>()).collect::<std::result::Result<Vec<_>, _>>()?;
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() + 1 {
                return Err(parse_err("transfer csv", format!("row `{line}` has {} cells", cells.len())));
            }
            rows.push(cells[0].parse::<CorruptionKind>()?);
            values.push(
                cells[1..]
                    .iter()
                    .map(|c| if c.is_empty() { Ok(None) } else { c.parse().map(Some).map_err(|e| parse_err("cell", e)) })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self { rows, columns, values })
    }

    /// Largest absolute entry; the colour scale of the heat grid is
    /// symmetric about zero.
    pub fn scale(&self) -> f64 {
        self.values.iter().flatten().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Heat grid: one `12 x 12` cell per entry, blue for negative (more
    /// robust), red for positive, white at zero and grey when missing. The
    /// tEXt chunks carry the scale and the exact CSV, so the grid can be
    /// read back losslessly.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let (w, h) = (self.columns.len() * CELL, self.rows.len() * CELL);
        let scale = self.scale();
        let mut rgb = vec![0u8; w * h * 3];
        for (r, row) in self.values.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let color = heat_color(*v, scale);
                for y in r * CELL..(r + 1) * CELL {
                    for x in c * CELL..(c + 1) * CELL {
                        rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                    }
                }
            }
        }
        Ok(Raster::rgb8(w, h, &rgb)
            .with_text("scale", &scale.to_string())
            .with_text("transfer-csv", &self.to_csv())
            .encode()?)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let raster = Raster::decode(bytes)?;
        let csv = raster
            .text_value("transfer-csv")
            .ok_or_else(|| parse_err("heat grid", "no transfer-csv text chunk"))?;
        let matrix = Self::from_csv(csv)?;
        let pixels = raster.to_u8()?;
        let w = raster.width;
        for (r, row) in matrix.values.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let at = ((r * CELL + CELL / 2) * w + c * CELL + CELL / 2) * 3;
                if pixels.get(at..at + 3) != Some(&heat_color(*v, matrix.scale())[..]) {
                    return Err(parse_err("heat grid", format!("cell ({r}, {c}) colour disagrees with its value")));
                }
            }
        }
        Ok(matrix)
    }
}

/// Diverging white-centred map: blue below zero, red above.
pub fn heat_color(value: Option<f64>, scale: f64) -> [u8; 3] {
    let Some(v) = value else { return [128, 128, 128] };
    let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = (255.0 * (1.0 - t.abs())).round() as u8;
    if t < 0.0 {
        [fade, fade, 255]
    } else {
        [255, fade, fade]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_of_the_baseline_is_exactly_100() {
        let e = [0.1, 0.2, 0.3, 0.35, 0.5];
        assert_eq!(corruption_error(CorruptionKind::Fog, &e, &e).unwrap(), 100.0);
        assert!(matches!(
            corruption_error(CorruptionKind::Fog, &e, &[0.0; 5]),
            Err(MetricsError::UndefinedCe { .. })
        ));
        let mut ces: Vec<(CorruptionKind, f64)> = CorruptionKind::ALL.iter().map(|&k| (k, 100.0)).collect();
        assert_eq!(mce(&ces).unwrap(), 100.0);
        ces[0].1 = 85.0;
        ces[1].1 = 115.0;
        assert_eq!(mce(&ces).unwrap(), 100.0);
        let last = ces.pop().unwrap();
        assert!(matches!(mce(&ces), Err(MetricsError::IncompleteMce(m)) if m == ["JPEG"]));
        ces.push(ces[0]);
        assert!(matches!(mce(&ces), Err(MetricsError::DuplicateCe(_))));
        ces.pop();
        ces.push(last);
        assert!(mce(&[]).is_err());
    }

    #[test]
    fn heat_colors() {
        assert_eq!(heat_color(Some(0.0), 4.0), [255, 255, 255]);
        assert_eq!(heat_color(Some(-4.0), 4.0), [0, 0, 255]);
        assert_eq!(heat_color(Some(8.0), 4.0), [255, 0, 0]);
        assert_eq!(heat_color(None, 4.0), [128, 128, 128]);
    }

    #[test]
    fn partial_matrix_round_trips_through_csv_and_png() {
        let mut m = TransferMatrix::new(
            vec![CorruptionKind::GaussianNoise, CorruptionKind::Fog],
            vec![CorruptionKind::GaussianNoise, CorruptionKind::Fog],
        );
        m.values[0][0] = Some(-12.5);
        m.values[1][0] = Some(3.0625);
        let csv = m.to_csv();
        assert_eq!(csv, "corruption,GN,FG\nGN,-12.5,\nFG,3.0625,\n");
        assert_eq!(TransferMatrix::from_csv(&csv).unwrap(), m);
        assert_eq!(TransferMatrix::from_png(&m.to_png().unwrap()).unwrap(), m);
        assert_eq!(m.diagonal(CorruptionKind::GaussianNoise), Some(-12.5));
        assert_eq!(m.diagonal(CorruptionKind::Fog), None);
        assert_eq!(m.off_diagonal_above(5.0), (0, 1));
    }

    #[test]
    fn report_round_trips() {
        let report = EvalReport {
            model_hash: "ab".into(),
            baseline_hash: Some("cd".into()),
            dataset_hash: "ef".into(),
            eval_seed: 3,
            clean_error: 10.0 / 3.0,
            kinds: vec![
                KindResult {
                    kind: CorruptionKind::GaussianNoise,
                    errors: [1.0, 2.0, 100.0 / 3.0, 40.0, 50.5],
                    ce: Some(87.5),
                },
                KindResult {
                    kind: CorruptionKind::Contrast,
                    errors: [0.0; 5],
                    ce: Some(101.25),
                },
            ],
        };
        let back = EvalReport::from_text(&report.to_text()).unwrap();
        assert_eq!(back, report);
        // two kinds only: no mCE
        assert_eq!(back.mce(), None);
        assert!(!report.to_text().contains("mce="));

        let mut full = report.clone();
        full.kinds = CorruptionKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &kind)| KindResult {
                kind,
                errors: [i as f64; 5],
                ce: Some(90.0 + i as f64),
            })
            .collect();
        assert_eq!(full.mce(), Some(97.0));
        let text = full.to_text();
        assert!(text.contains("mce=97"));
        assert_eq!(EvalReport::from_text(&text).unwrap(), full);
        assert!(full.table().contains("mCE    97.00"));
        assert!(EvalReport::from_text(&text.replace("mce=97", "mce=90")).is_err());
    }
}
