//! Weather table ingestion and preparation: CSV parsing, cleaning, daily
//! aggregation, windowing into supervised samples, z-score normalization,
//! and chronological splitting.
//!
//! Timestamps are parsed with their embedded offsets and kept as epoch
//! seconds; every comparison happens on the instant timeline.

use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numcore::{read_tensor_blob, tensor_blob_bytes, write_container, Tensor};
use crate::numcore::{read_container, SeedRng};

pub const TIMESTAMP_COLUMN: &str = "Formatted Date";

/// The eight numeric variables of the weather history schema, in the order
/// they are stored internally.
pub const NUMERIC_COLUMNS: [&str; 8] = [
    "Temperature (C)",
    "Apparent Temperature (C)",
    "Humidity",
    "Wind Speed (km/h)",
    "Wind Bearing (degrees)",
    "Visibility (km)",
    "Loud Cover",
    "Pressure (millibars)",
];

const TEXT_COLUMNS: [&str; 3] = ["Summary", "Precip Type", "Daily Summary"];

const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S%.3f %z";

pub const TABLE_FORMAT_TAG: &str = "bttf-table-v1";

/// One parsed CSV row before cleaning. `None` marks a missing or
/// unparseable cell, kept so `clean` can apply the drop rules in one place.
#[derive(Debug, Clone)]
pub struct RawRow {
    pub timestamp: Option<i64>,
    pub values: Vec<Option<f64>>,
}

/// Parsed rows in file order, one `values` entry per numeric column.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub rows: Vec<RawRow>,
}

/// Clean numeric series on a shared, strictly increasing timestamp axis.
/// Values are row-major `[n_rows, n_cols]` and always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesTable {
    timestamps: Vec<i64>,
    columns: Vec<String>,
    values: Vec<f64>,
}

impl TimeSeriesTable {
    pub fn new(timestamps: Vec<i64>, columns: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let (n, d) = (timestamps.len(), columns.len());
        if values.len() != n * d {
            return Err(Error::Shape(format!(
                "table values length {} does not match {n} rows x {d} columns",
                values.len()
            )));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("table timestamps must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("table values must be finite".into()));
        }
        Ok(TimeSeriesTable { timestamps, columns, values })
    }

    pub fn n_rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.columns.len() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let d = self.columns.len();
        &self.values[row * d..(row + 1) * d]
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(name.to_string()))
    }

    /// First `n` rows as a new table.
    pub fn prefix(&self, n: usize) -> Result<TimeSeriesTable> {
        if n > self.n_rows() {
            return Err(Error::Shape(format!(
                "prefix of {n} rows from a table of {}",
                self.n_rows()
            )));
        }
        TimeSeriesTable::new(
            self.timestamps[..n].to_vec(),
            self.columns.clone(),
            self.values[..n * self.n_cols()].to_vec(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "format": TABLE_FORMAT_TAG,
            "columns": self.columns,
            "rows": self.n_rows(),
        });
        let ts = Tensor::new(
            vec![self.n_rows(), 1],
            self.timestamps.iter().map(|t| *t as f64).collect(),
        )?;
        let vals = Tensor::new(vec![self.n_rows(), self.n_cols()], self.values.clone())?;
        let mut payload = tensor_blob_bytes(&ts);
        payload.extend_from_slice(&tensor_blob_bytes(&vals));
        write_container(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<TimeSeriesTable> {
        let file = read_container(path)?;
        file.expect_tag(TABLE_FORMAT_TAG)?;
        let columns: Vec<String> = file
            .header
            .get("columns")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Format("table file header missing columns".into()))?
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::Format(format!("bad column name {v}")))
            })
            .collect::<Result<_>>()?;
        let (ts, used) = read_tensor_blob(&file.payload)?;
        let (vals, _) = read_tensor_blob(&file.payload[used..])?;
        let timestamps: Vec<i64> = ts.data().iter().map(|t| *t as i64).collect();
        TimeSeriesTable::new(timestamps, columns, vals.data().to_vec())
    }
}

impl From<&TimeSeriesTable> for RawTable {
    fn from(t: &TimeSeriesTable) -> RawTable {
        RawTable {
            columns: t.columns.to_vec(),
            rows: (0..t.n_rows())
                .map(|r| RawRow {
                    timestamp: Some(t.timestamps[r]),
                    values: t.row(r).iter().map(|v| Some(*v)).collect(),
                })
                .collect(),
        }
    }
}

/// Parse the weather history CSV. Keeps the timestamp and the eight numeric
/// variables in file order; cells that fail to parse become `None` for
/// `clean` to drop. The text columns are ignored.
pub fn ingest_csv(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header row: {e}")))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let ts_idx = find(TIMESTAMP_COLUMN).ok_or_else(|| Error::Schema(TIMESTAMP_COLUMN.into()))?;
    let mut value_idx = Vec::with_capacity(NUMERIC_COLUMNS.len());
    for name in NUMERIC_COLUMNS {
        value_idx.push(find(name).ok_or_else(|| Error::Schema(name.into()))?);
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("malformed CSV record: {e}")))?;
        let timestamp = record
            .get(ts_idx)
            .and_then(|s| DateTime::parse_from_str(s.trim(), TIMESTAMP_FORMAT).ok())
            .map(|dt| dt.timestamp());
        let values = value_idx
            .iter()
            .map(|&i| {
                record
                    .get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
            })
            .collect();
        rows.push(RawRow { timestamp, values });
    }
    Ok(RawTable { columns: NUMERIC_COLUMNS.iter().map(|s| s.to_string()).collect(), rows })
}

/// Drop rows with any missing value, sort by instant, and deduplicate equal
/// timestamps keeping the first occurrence in file order. Idempotent.
pub fn clean(raw: &RawTable) -> Result<TimeSeriesTable> {
    let d = raw.columns.len();
    let mut kept: Vec<(i64, Vec<f64>)> = Vec::with_capacity(raw.rows.len());
    for row in &raw.rows {
        let Some(ts) = row.timestamp else { continue };
        if row.values.len() != d || row.values.iter().any(Option::is_none) {
            continue;
        }
        kept.push((ts, row.values.iter().map(|v| v.unwrap()).collect()));
    }
    // Stable sort, so rows with equal timestamps keep file order and the
    // dedup below drops the later occurrences.
    kept.sort_by_key(|(ts, _)| *ts);
    let mut timestamps = Vec::with_capacity(kept.len());
    let mut values = Vec::with_capacity(kept.len() * d);
    for (ts, row) in kept {
        if timestamps.last() == Some(&ts) {
            continue;
        }
        timestamps.push(ts);
        values.extend_from_slice(&row);
    }
    if timestamps.is_empty() {
        return Err(Error::Data("no usable rows after cleaning".into()));
    }
    TimeSeriesTable::new(timestamps, raw.columns.clone(), values)
}

const SECS_PER_DAY: i64 = 86_400;

/// Collapse to daily means on the UTC calendar. Days backed by fewer than
/// `min_rows` source rows are dropped as incomplete.
pub const MIN_ROWS_PER_DAY: usize = 20;

pub fn aggregate_daily(table: &TimeSeriesTable) -> Result<TimeSeriesTable> {
    let d = table.n_cols();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut i = 0;
    while i < table.n_rows() {
        let day = table.timestamps[i].div_euclid(SECS_PER_DAY);
        let mut j = i;
        let mut sums = vec![0.0; d];
        while j < table.n_rows() && table.timestamps[j].div_euclid(SECS_PER_DAY) == day {
            for (s, v) in sums.iter_mut().zip(table.row(j)) {
                *s += v;
            }
            j += 1;
        }
        let count = j - i;
        if count >= MIN_ROWS_PER_DAY {
            timestamps.push(day * SECS_PER_DAY);
            values.extend(sums.iter().map(|s| s / count as f64));
        }
        i = j;
    }
    if timestamps.is_empty() {
        return Err(Error::Data("no complete days after aggregation".into()));
    }
    TimeSeriesTable::new(timestamps, table.columns.to_vec(), values)
}

/// One supervised sample: `window` holds the `k` observation rows before the
/// origin, `present` the non-target features of the last window row, and
/// `target` the next `h` values of the target column.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub window: Tensor,
    pub present: Vec<f64>,
    pub target: Vec<f64>,
    pub t_index: usize,
}

/// Slide a length-`k` window over the table. One sample per valid origin
/// `t`: window rows `t-k..t-1` over all features, target rows `t..t+h-1` of
/// the target column, so the sample count is `T - k - h + 1`.
pub fn make_windows(
    table: &TimeSeriesTable,
    k: usize,
    h: usize,
    target_index: usize,
) -> Result<Vec<WindowSample>> {
    let t_len = table.n_rows();
    let d = table.n_cols();
    if k == 0 || h == 0 {
        return Err(Error::Config("window length k and horizon h must be positive".into()));
    }
    if target_index >= d {
        return Err(Error::Config(format!(
            "target index {target_index} out of {d} columns"
        )));
    }
    if t_len < k + h {
        return Err(Error::Data(format!(
            "table has {t_len} rows, needs at least k + h = {}",
            k + h
        )));
    }
    let mut samples = Vec::with_capacity(t_len - k - h + 1);
    for t in k..=t_len - h {
        let mut window = Vec::with_capacity(k * d);
        for r in t - k..t {
            window.extend_from_slice(table.row(r));
        }
        let present: Vec<f64> = table
            .row(t - 1)
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != target_index)
            .map(|(_, v)| *v)
            .collect();
        let target: Vec<f64> = (t..t + h).map(|r| table.value(r, target_index)).collect();
        samples.push(WindowSample {
            window: Tensor::new(vec![k, d], window)?,
            present,
            target,
            t_index: t,
        });
    }
    Ok(samples)
}

/// Per-feature z-score statistics fitted on the training split. Population
/// standard deviation; the flag records the convention so either variant is
/// reproducible from the stored moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features with zero variance pass through unscaled (std kept at 1).
    pub constant: Vec<bool>,
    #[serde(default = "default_population")]
    pub population: bool,
}

fn default_population() -> bool {
    true
}

impl NormStats {
    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_value(&self, feature: usize, x: f64) -> f64 {
        (x - self.mean[feature]) / self.std[feature]
    }

    pub fn denormalize_value(&self, feature: usize, z: f64) -> f64 {
        z * self.std[feature] + self.mean[feature]
    }
}

/// Fit per-feature moments over every window row of the given samples.
pub fn normalize_fit(samples: &[WindowSample]) -> Result<NormStats> {
    let d = match samples.first() {
        Some(s) => s.window.dims2()?.1,
        None => return Err(Error::Data("cannot fit normalization on zero samples".into())),
    };
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for s in samples {
        let (k, sd) = s.window.dims2()?;
        if sd != d {
            return Err(Error::Shape(format!("window widths differ: {sd} vs {d}")));
        }
        for r in 0..k {
            for c in 0..d {
                sum[c] += s.window.at(r, c);
            }
        }
        count += k;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; d];
    for s in samples {
        let (k, _) = s.window.dims2()?;
        for r in 0..k {
            for c in 0..d {
                let diff = s.window.at(r, c) - mean[c];
                sq[c] += diff * diff;
            }
        }
    }
    let mut std = Vec::with_capacity(d);
    let mut constant = Vec::with_capacity(d);
    for c in 0..d {
        let var = sq[c] / count as f64;
        let s = var.sqrt();
        if s > 0.0 {
            std.push(s);
            constant.push(false);
        } else {
            std.push(1.0);
            constant.push(true);
        }
    }
    Ok(NormStats { mean, std, constant, population: true })
}

/// Z-score every sample: window columns with their own stats, the present
/// vector with its source features' stats, the target with the target
/// feature's stats. Exact affine inverse via `NormStats::denormalize_value`.
pub fn normalize_apply(
    stats: &NormStats,
    samples: &[WindowSample],
    target_index: usize,
) -> Result<Vec<WindowSample>> {
    let d = stats.n_features();
    if target_index >= d {
        return Err(Error::Config(format!(
            "target index {target_index} out of {d} features"
        )));
    }
    samples
        .iter()
        .map(|s| {
            let (k, sd) = s.window.dims2()?;
            if sd != d {
                return Err(Error::Shape(format!(
                    "sample has {sd} features, stats have {d}"
                )));
            }
            let mut w = Vec::with_capacity(k * d);
            for r in 0..k {
                for c in 0..d {
                    w.push(stats.normalize_value(c, s.window.at(r, c)));
                }
            }
            let present: Vec<f64> = s
                .present
                .iter()
                .enumerate()
                .map(|(j, v)| stats.normalize_value(present_feature_index(target_index, j), *v))
                .collect();
            let target: Vec<f64> =
                s.target.iter().map(|v| stats.normalize_value(target_index, *v)).collect();
            Ok(WindowSample {
                window: Tensor::new(vec![k, d], w)?,
                present,
                target,
                t_index: s.t_index,
            })
        })
        .collect()
}

/// Source feature index of `present[j]` when the target column is skipped.
pub fn present_feature_index(target_index: usize, j: usize) -> usize {
    if j < target_index {
        j
    } else {
        j + 1
    }
}

/// Chronological split fractions. Always positive and summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.7, val: 0.15, test: 0.15 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(f.is_finite() && f > 0.0 && f < 1.0) {
                bad.push(name);
            }
        }
        if !bad.is_empty() {
            return Err(Error::Config(format!(
                "split fractions out of (0, 1): {}",
                bad.join(", ")
            )));
        }
        if (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {}, expected 1",
                self.train + self.val + self.test
            )));
        }
        Ok(())
    }
}

/// Contiguous chronological segments with boundaries at floor(N * fraction):
/// first floor(N * train) samples, then floor(N * val), remainder to test.
/// Membership is by target position; windows may straddle a boundary.
pub fn chrono_split(
    mut samples: Vec<WindowSample>,
    spec: &SplitSpec,
) -> Result<(Vec<WindowSample>, Vec<WindowSample>, Vec<WindowSample>)> {
    spec.validate()?;
    let n = samples.len();
    let n_train = (n as f64 * spec.train).floor() as usize;
    let n_val = (n as f64 * spec.val).floor() as usize;
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config(format!(
            "split of {n} samples leaves an empty segment ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut rest = samples.split_off(n_train);
    let test = rest.split_off(n_val);
    Ok((samples, rest, test))
}

/// Write a table in the weather history CSV layout so ingest can read it
/// back. Text columns get fixed placeholder values. Numbers are printed with
/// the shortest representation that parses back to the same f64.
pub fn write_kaggle_csv(path: &Path, table: &TimeSeriesTable) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut header = vec![TIMESTAMP_COLUMN, TEXT_COLUMNS[0], TEXT_COLUMNS[1]];
    header.extend(NUMERIC_COLUMNS);
    header.push(TEXT_COLUMNS[2]);
    writer.write_record(&header).map_err(|e| Error::Data(format!("csv write: {e}")))?;
    for r in 0..table.n_rows() {
        let dt = DateTime::<Utc>::from_timestamp(table.timestamps[r], 0)
            .ok_or_else(|| Error::Data(format!("timestamp {} out of range", table.timestamps[r])))?;
        let mut record = vec![
            dt.format(TIMESTAMP_FORMAT).to_string(),
            "Clear".to_string(),
            "rain".to_string(),
        ];
        record.extend(table.row(r).iter().map(|v| v.to_string()));
        record.push("Synthetic day.".to_string());
        writer.write_record(&record).map_err(|e| Error::Data(format!("csv write: {e}")))?;
    }
    writer.flush()?;
    Ok(())
}

/// Hourly synthetic weather with the schema's eight variables: seasonal and
/// diurnal cycles, cross-variable couplings (apparent temperature from
/// temperature, wind and humidity), smooth autocorrelated noise, and a
/// constant zero cloud-cover column like the real file.
pub fn synthetic_weather(days: usize, seed: u64) -> Result<TimeSeriesTable> {
    if days == 0 {
        return Err(Error::Config("synthetic table needs at least one day".into()));
    }
    let mut rng = SeedRng::new(seed);
    let start: i64 = 1_136_073_600; // 2006-01-01 00:00:00 UTC
    let n = days * 24;
    let tau = std::f64::consts::TAU;

    // AR(1) noise per channel keeps consecutive days related, which is what
    // a window model can exploit and white noise would not give it.
    let mut ar = [0.0f64; 6];
    let step_ar = |rng: &mut SeedRng, ar: &mut [f64; 6]| {
        for a in ar.iter_mut() {
            *a = 0.92 * *a + 0.39 * rng.normal();
        }
    };

    let mut timestamps = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * 8);
    for i in 0..n {
        step_ar(&mut rng, &mut ar);
        let hour = i as f64;
        let day = hour / 24.0;
        let annual = day / 365.25;
        let diurnal = (hour % 24.0) / 24.0;

        let temp = 12.0
            + 9.0 * (tau * annual - 1.3).sin()
            + 4.5 * (tau * diurnal - 2.6).sin()
            + 3.2 * (tau * day / 13.7 + 0.4).sin()
            + 1.1 * ar[0];
        let humidity = (0.68 - 0.013 * (temp - 12.0) + 0.08 * (tau * diurnal + 0.9).sin()
            + 0.05 * ar[1])
            .clamp(0.05, 1.0);
        let wind = (7.0
            + 3.0 * (tau * annual * 2.0 + 0.7).sin()
            + 1.5 * (tau * diurnal * 2.0).sin()
            + 1.2 * ar[2])
            .abs();
        let apparent = temp - 0.35 * wind * (1.0 - humidity) + 0.45 * ar[3];
        let bearing = {
            let b = 190.0 + 110.0 * (tau * annual + 0.2).sin() + 25.0 * ar[4];
            b.rem_euclid(360.0)
        };
        let visibility =
            (10.5 + 3.0 * (tau * diurnal + 0.3).sin() - 6.0 * (humidity - 0.65) + 0.8 * ar[5])
                .clamp(0.5, 16.0);
        let pressure = 1013.0
            + 7.0 * (tau * annual * 3.0 + 1.3).sin()
            + 3.0 * (tau * day / 29.5).sin()
            + 1.0 * ar[1];

        timestamps.push(start + (i as i64) * 3600);
        values.extend_from_slice(&[
            temp, apparent, humidity, wind, bearing, visibility, 0.0, pressure,
        ]);
    }
    TimeSeriesTable::new(
        timestamps,
        NUMERIC_COLUMNS.iter().map(|s| s.to_string()).collect(),
        values,
    )
}
