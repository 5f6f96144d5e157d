//! Adjusted-close ingestion and the return statistics derived from it.
//!
//! Rows of a [`PriceSeries`] are trading days. Trading periods are laid over
//! the rows on a fixed grid of `K` days: period `t >= 1` covers rows
//! `(t-1)K + 1 ..= tK`, and row `(t-1)K` holds the close of period `t-1`.
//! Row 0 is therefore the anchor close that precedes period 1.
//!
//! All returns are base-2 logarithms of price ratios.

use std::collections::HashSet;
use std::fs::File;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Dow Jones Industrial Average constituents used as the default asset manifest.
pub const DJIA_TICKERS: [&str; 29] = [
    "MMM", "AXP", "AMGN", "AAPL", "BA", "CAT", "CVX", "CSCO", "KO", "GS", "HD", "HON", "IBM",
    "INTC", "JNJ", "JPM", "MCD", "MRK", "MSFT", "NKE", "PG", "CRM", "TRV", "UNH", "VZ", "V",
    "WBA", "WMT", "DIS",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("no `date` column in header")]
    MissingDateColumn,
    #[error("file contains no data rows")]
    Empty,
    #[error("row {row}: unparseable date {value:?}")]
    BadDate { row: usize, value: String },
    #[error("duplicate date {0}")]
    DuplicateDate(NaiveDate),
    #[error("row {row}, asset {asset}: unparseable price {value:?}")]
    BadPrice {
        row: usize,
        asset: String,
        value: String,
    },
    #[error("row {row}, asset {asset}: non-positive price {value}")]
    NonPositivePrice { row: usize, asset: String, value: f64 },
    #[error("asset {0} is not a column of the data")]
    MissingAsset(String),
    #[error("asset {0} has missing values and was rejected")]
    IncompleteAsset(String),
    #[error("invalid series: {0}")]
    Invalid(String),
    #[error("period {period} day {day} is outside the series")]
    OutOfRange { period: usize, day: usize },
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("degenerate covariance denominator K*M - n - 1 = {0}")]
    DegenerateDenominator(i64),
}

/// Adjusted closing prices, one row per trading day and one column per asset.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    tickers: Vec<String>,
    dates: Vec<NaiveDate>,
    prices: DMatrix<f64>,
}

impl PriceSeries {
    /// Builds a series, checking shape, date order and price positivity.
    pub fn new(
        tickers: Vec<String>,
        dates: Vec<NaiveDate>,
        prices: DMatrix<f64>,
    ) -> Result<Self, DataError> {
        if prices.ncols() != tickers.len() {
            return Err(DataError::Invalid(format!(
                "{} tickers for {} price columns",
                tickers.len(),
                prices.ncols()
            )));
        }
        if prices.nrows() != dates.len() {
            return Err(DataError::Invalid(format!(
                "{} dates for {} price rows",
                dates.len(),
                prices.nrows()
            )));
        }
        if dates.is_empty() {
            return Err(DataError::Empty);
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(DataError::Invalid(format!(
                "dates not strictly ascending at {}",
                w[1]
            )));
        }
        for row in 0..prices.nrows() {
            for col in 0..prices.ncols() {
                let value = prices[(row, col)];
                if !(value > 0.0) || !value.is_finite() {
                    return Err(DataError::NonPositivePrice {
                        row,
                        asset: tickers[col].clone(),
                        value,
                    });
                }
            }
        }
        Ok(Self {
            tickers,
            dates,
            prices,
        })
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn prices(&self) -> &DMatrix<f64> {
        &self.prices
    }

    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    /// Price vector of one trading day.
    pub fn day(&self, row: usize) -> DVector<f64> {
        self.prices.row(row).transpose()
    }

    /// Number of whole periods of `k` days that follow the anchor row.
    pub fn complete_periods(&self, k: usize) -> usize {
        (self.n_days().saturating_sub(1)) / k
    }

    /// Contiguous sub-range of trading days.
    pub fn slice_days(&self, start: usize, len: usize) -> Result<Self, DataError> {
        if len == 0 || start + len > self.n_days() {
            return Err(DataError::InsufficientHistory(format!(
                "rows {start}..{} requested from a series of {} days",
                start + len,
                self.n_days()
            )));
        }
        Ok(Self {
            tickers: self.tickers.clone(),
            dates: self.dates[start..start + len].to_vec(),
            prices: self.prices.rows(start, len).into_owned(),
        })
    }

    /// Re-orders (or restricts) the asset columns.
    pub fn select_assets(&self, tickers: &[String]) -> Result<Self, DataError> {
        let mut cols = Vec::with_capacity(tickers.len());
        for t in tickers {
            let idx = self
                .tickers
                .iter()
                .position(|x| x == t)
                .ok_or_else(|| DataError::MissingAsset(t.clone()))?;
            cols.push(idx);
        }
        let prices = DMatrix::from_fn(self.n_days(), cols.len(), |r, c| self.prices[(r, cols[c])]);
        Ok(Self {
            tickers: tickers.to_vec(),
            dates: self.dates.clone(),
            prices,
        })
    }

    /// Index of the first row dated on or after `date`.
    pub fn first_on_or_after(&self, date: NaiveDate) -> Option<usize> {
        let idx = self.dates.partition_point(|d| *d < date);
        (idx < self.dates.len()).then_some(idx)
    }

    /// Index of the last row dated on or before `date`.
    pub fn last_on_or_before(&self, date: NaiveDate) -> Option<usize> {
        self.dates.partition_point(|d| *d <= date).checked_sub(1)
    }
}

/// Result of reading a price file, including the columns rejected for gaps.
#[derive(Debug, Clone)]
pub struct LoadedPrices {
    pub series: PriceSeries,
    pub dropped: Vec<String>,
}

fn is_missing(cell: &str) -> bool {
    matches!(
        cell.to_ascii_lowercase().as_str(),
        "" | "na" | "n/a" | "nan" | "null"
    )
}

fn parse_date(row: usize, raw: &str) -> Result<NaiveDate, DataError> {
    let raw = raw.trim();
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(raw.get(..10).unwrap_or(raw), "%Y-%m-%d"))
        .map_err(|_| DataError::BadDate {
            row,
            value: raw.to_string(),
        })
}

/// Writes the series in the layout [`load_prices`] reads.
pub fn write_prices<W: std::io::Write>(series: &PriceSeries, writer: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(series.tickers.iter().cloned());
    out.write_record(&header)?;
    for (row, date) in series.dates.iter().enumerate() {
        let mut record = vec![date.format("%Y-%m-%d").to_string()];
        record.extend(series.prices.row(row).iter().map(|p| p.to_string()));
        out.write_record(&record)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a `date,TICKER1,TICKER2,...` CSV, restricted to `required_assets`.
///
/// With an empty `required_assets` every complete column is kept in file
/// order. Columns with any missing cell are dropped; requesting one is an
/// error.
pub fn load_prices(path: &Path, required_assets: &[String]) -> Result<PriceSeries, DataError> {
    load_prices_report(path, required_assets).map(|l| l.series)
}

pub fn load_prices_report(
    path: &Path,
    required_assets: &[String],
) -> Result<LoadedPrices, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(DataError::Empty);
    }
    let date_col = headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case("date"))
        .ok_or(DataError::MissingDateColumn)?;
    let asset_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != date_col)
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut rows: Vec<(NaiveDate, Vec<Option<f64>>)> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let date = parse_date(row, record.get(date_col).unwrap_or(""))?;
        let mut cells = Vec::with_capacity(asset_cols.len());
        for (col, name) in &asset_cols {
            let raw = record.get(*col).unwrap_or("");
            if is_missing(raw) {
                cells.push(None);
                continue;
            }
            let value: f64 = raw.parse().map_err(|_| DataError::BadPrice {
                row,
                asset: name.clone(),
                value: raw.to_string(),
            })?;
            if !(value > 0.0) || !value.is_finite() {
                return Err(DataError::NonPositivePrice {
                    row,
                    asset: name.clone(),
                    value,
                });
            }
            cells.push(Some(value));
        }
        rows.push((date, cells));
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    rows.sort_by_key(|(d, _)| *d);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(DataError::DuplicateDate(w[0].0));
    }

    let complete: Vec<bool> = (0..asset_cols.len())
        .map(|c| rows.iter().all(|(_, cells)| cells[c].is_some()))
        .collect();
    let dropped: Vec<String> = asset_cols
        .iter()
        .zip(&complete)
        .filter(|(_, ok)| !**ok)
        .map(|((_, name), _)| name.clone())
        .collect();

    let chosen: Vec<usize> = if required_assets.is_empty() {
        (0..asset_cols.len()).filter(|&c| complete[c]).collect()
    } else {
        let mut seen = HashSet::new();
        let mut chosen = Vec::with_capacity(required_assets.len());
        for asset in required_assets {
            if !seen.insert(asset) {
                return Err(DataError::Invalid(format!("asset {asset} requested twice")));
            }
            let c = asset_cols
                .iter()
                .position(|(_, name)| name == asset)
                .ok_or_else(|| DataError::MissingAsset(asset.clone()))?;
            if !complete[c] {
                return Err(DataError::IncompleteAsset(asset.clone()));
            }
            chosen.push(c);
        }
        chosen
    };
    if chosen.is_empty() {
        return Err(DataError::Invalid("no complete asset columns".into()));
    }

    let tickers = chosen.iter().map(|&c| asset_cols[c].1.clone()).collect();
    let dates = rows.iter().map(|(d, _)| *d).collect();
    let prices = DMatrix::from_fn(rows.len(), chosen.len(), |r, c| {
        rows[r].1[chosen[c]].expect("complete column")
    });
    Ok(LoadedPrices {
        series: PriceSeries::new(tickers, dates, prices)?,
        dropped,
    })
}

/// The `K x n` matrix of daily returns inside one trading period.
#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationTensor {
    pub period: usize,
    pub values: DMatrix<f64>,
}

/// The `M` fluctuation tensors that precede a decision at period `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnWindow {
    pub period: usize,
    pub tensors: Vec<FluctuationTensor>,
}

impl ReturnWindow {
    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    /// Appends the tensors in chronological order, each row-major.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for tensor in &self.tensors {
            let v = &tensor.values;
            for r in 0..v.nrows() {
                out.extend(v.row(r).iter());
            }
        }
    }
}

/// Per-period mean return vector and pooled covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimates {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

fn day_row(t: usize, k: usize, trading_days: usize) -> usize {
    (t - 1) * trading_days + k
}

/// Daily log2 return vector on day `k` (1-based) of period `t`.
pub fn daily_return_vector(
    prices: &PriceSeries,
    t: usize,
    k: usize,
    trading_days: usize,
) -> Result<DVector<f64>, DataError> {
    if t == 0 || k == 0 || k > trading_days {
        return Err(DataError::OutOfRange { period: t, day: k });
    }
    let row = day_row(t, k, trading_days);
    if row >= prices.n_days() {
        return Err(DataError::OutOfRange { period: t, day: k });
    }
    let p = prices.prices();
    Ok(DVector::from_fn(prices.n_assets(), |i, _| {
        (p[(row, i)] / p[(row - 1, i)]).log2()
    }))
}

/// All `K` daily return vectors of period `t`, one per row.
pub fn fluctuation_tensor(
    prices: &PriceSeries,
    t: usize,
    trading_days: usize,
) -> Result<FluctuationTensor, DataError> {
    if t == 0 || day_row(t, trading_days, trading_days) >= prices.n_days() {
        return Err(DataError::InsufficientHistory(format!(
            "period {t} needs {} rows, series has {}",
            t * trading_days + 1,
            prices.n_days()
        )));
    }
    let n = prices.n_assets();
    let mut values = DMatrix::zeros(trading_days, n);
    for k in 1..=trading_days {
        let z = daily_return_vector(prices, t, k, trading_days)?;
        values.row_mut(k - 1).copy_from(&z.transpose());
    }
    Ok(FluctuationTensor { period: t, values })
}

/// Historical return tensor `[Y_{t-M}, ..., Y_{t-1}]` observed before period `t`.
pub fn return_window(
    prices: &PriceSeries,
    t: usize,
    trading_days: usize,
    window: usize,
) -> Result<ReturnWindow, DataError> {
    if window == 0 || t <= window {
        return Err(DataError::InsufficientHistory(format!(
            "window of {window} periods needs t > {window}, got t = {t}"
        )));
    }
    let tensors = (t - window..t)
        .map(|p| fluctuation_tensor(prices, p, trading_days))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ReturnWindow { period: t, tensors })
}

/// Mean of period `t`'s daily returns and the covariance pooled over
/// periods `t-M+1 ..= t`.
///
/// The covariance divides by `K*M - n - 1`.
pub fn moment_estimates(
    prices: &PriceSeries,
    t: usize,
    trading_days: usize,
    window: usize,
) -> Result<MomentEstimates, DataError> {
    let n = prices.n_assets();
    let samples = trading_days * window;
    let denom = samples as i64 - n as i64 - 1;
    if denom <= 0 {
        return Err(DataError::DegenerateDenominator(denom));
    }
    if window == 0 || t < window {
        return Err(DataError::InsufficientHistory(format!(
            "moments over {window} periods need t >= {window}, got t = {t}"
        )));
    }
    let mut pooled = DMatrix::zeros(samples, n);
    for (m, p) in (t + 1 - window..=t).enumerate() {
        let y = fluctuation_tensor(prices, p, trading_days)?;
        pooled
            .rows_mut(m * trading_days, trading_days)
            .copy_from(&y.values);
    }
    let current = pooled.rows((window - 1) * trading_days, trading_days);
    let mean = DVector::from_fn(n, |i, _| current.column(i).sum() / trading_days as f64);

    let pooled_mean: Vec<f64> = (0..n)
        .map(|i| pooled.column(i).sum() / samples as f64)
        .collect();
    let mut covariance = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for s in 0..samples {
                acc += (pooled[(s, i)] - pooled_mean[i]) * (pooled[(s, j)] - pooled_mean[j]);
            }
            let value = acc / denom as f64;
            covariance[(i, j)] = value;
            covariance[(j, i)] = value;
        }
    }
    Ok(MomentEstimates { mean, covariance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    fn dates(n: usize) -> Vec<NaiveDate> {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        (0..n).map(|i| start + chrono::Days::new(i as u64)).collect()
    }

    fn series(rows: &[&[f64]]) -> PriceSeries {
        let n = rows[0].len();
        let tickers = (0..n).map(|i| format!("A{i}")).collect();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        PriceSeries::new(tickers, dates(rows.len()), DMatrix::from_row_slice(rows.len(), n, &flat))
            .unwrap()
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_well_formed_csv() {
        let f = write_csv("date,AAA,BBB\n2021-01-04,10,20\n2021-01-05,11,21\n2021-01-06,12,22\n");
        let s = load_prices(f.path(), &[]).unwrap();
        assert_eq!(s.n_days(), 3);
        assert_eq!(s.n_assets(), 2);
        assert_eq!(s.prices()[(2, 1)], 22.0);
    }

    #[test]
    fn drops_gap_asset_and_rejects_it_when_required() {
        let f = write_csv("date,AAA,BBB\n2021-01-04,10,20\n2021-01-05,11,\n2021-01-06,12,22\n");
        let loaded = load_prices_report(f.path(), &[]).unwrap();
        assert_eq!(loaded.series.tickers(), ["AAA"]);
        assert_eq!(loaded.dropped, ["BBB"]);
        let err = load_prices(f.path(), &["AAA".into(), "BBB".into()]).unwrap_err();
        assert!(matches!(err, DataError::IncompleteAsset(a) if a == "BBB"));
    }

    #[test]
    fn unordered_rows_match_sorted_copy() {
        let sorted = write_csv("date,A,B\n2021-01-04,1,2\n2021-01-05,3,4\n2021-01-06,5,6\n");
        let shuffled = write_csv("date,A,B\n2021-01-06,5,6\n2021-01-04,1,2\n2021-01-05,3,4\n");
        assert_eq!(
            load_prices(sorted.path(), &[]).unwrap(),
            load_prices(shuffled.path(), &[]).unwrap()
        );
    }

    #[test]
    fn load_errors() {
        assert!(matches!(
            load_prices(Path::new("/nonexistent/prices.csv"), &[]),
            Err(DataError::Io { .. })
        ));
        let bad = write_csv("date,A\n2021-01-04,abc\n");
        assert!(matches!(load_prices(bad.path(), &[]), Err(DataError::BadPrice { .. })));
        let neg = write_csv("date,A\n2021-01-04,-1\n");
        assert!(matches!(
            load_prices(neg.path(), &[]),
            Err(DataError::NonPositivePrice { .. })
        ));
        let ok = write_csv("date,A\n2021-01-04,1\n");
        assert!(matches!(
            load_prices(ok.path(), &["Z".into()]),
            Err(DataError::MissingAsset(_))
        ));
        let empty = write_csv("");
        assert!(load_prices(empty.path(), &[]).is_err());
    }

    #[test]
    fn daily_returns() {
        let flat = series(&[&[5.0, 7.0], &[5.0, 7.0]]);
        assert_eq!(daily_return_vector(&flat, 1, 1, 1).unwrap().as_slice(), &[0.0, 0.0]);
        let double = series(&[&[1.0], &[2.0]]);
        assert_eq!(daily_return_vector(&double, 1, 1, 1).unwrap()[0], 1.0);
        let tenpct = series(&[&[10.0], &[11.0]]);
        assert_relative_eq!(
            daily_return_vector(&tenpct, 1, 1, 1).unwrap()[0],
            0.137_503_523_749_934_9,
            max_relative = 1e-12
        );
        assert!(matches!(
            daily_return_vector(&tenpct, 2, 1, 1),
            Err(DataError::OutOfRange { .. })
        ));
    }

    #[test]
    fn first_day_of_period_uses_previous_close() {
        // K = 2: period 2 day 1 is row 3, predecessor is row 2 (close of period 1).
        let s = series(&[&[1.0], &[2.0], &[4.0], &[2.0], &[8.0]]);
        assert_eq!(daily_return_vector(&s, 2, 1, 2).unwrap()[0], -1.0);
        assert_eq!(daily_return_vector(&s, 2, 2, 2).unwrap()[0], 2.0);
    }

    #[test]
    fn fluctuation_tensor_shapes() {
        let flat = series(&[&[3.0, 4.0][..]; 11]);
        let y = fluctuation_tensor(&flat, 2, 5).unwrap();
        assert_eq!(y.values, DMatrix::zeros(5, 2));
        let single = fluctuation_tensor(&series(&[&[1.0], &[2.0]]), 1, 1).unwrap();
        assert_eq!(single.values.shape(), (1, 1));
        assert!(fluctuation_tensor(&flat, 3, 5).is_err());
    }

    #[test]
    fn moments_of_alternating_returns() {
        // n = 1, K = 5, M = 2 with pooled returns alternating +1/-1.
        let mut rows = vec![vec![1.0]];
        for i in 0..10 {
            let last = rows.last().unwrap()[0];
            rows.push(vec![if i % 2 == 0 { last * 2.0 } else { last / 2.0 }]);
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let s = series(&refs);
        let m = moment_estimates(&s, 2, 5, 2).unwrap();
        assert_relative_eq!(m.covariance[(0, 0)], 1.25, max_relative = 1e-15);
        // period 2 holds returns [-1, 1, -1, 1, -1]
        assert_relative_eq!(m.mean[0], -0.2, max_relative = 1e-15);
    }

    #[test]
    fn constant_returns_have_zero_covariance() {
        let rows: Vec<Vec<f64>> = (0..11).map(|i| vec![2f64.powi(i), 3.0]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = moment_estimates(&series(&refs), 2, 5, 2).unwrap();
        assert_eq!(m.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(m.covariance, DMatrix::zeros(2, 2));
    }

    #[test]
    fn degenerate_denominator_rejected() {
        let s = series(&[&[1.0, 1.0, 1.0][..]; 4]);
        assert!(matches!(
            moment_estimates(&s, 3, 1, 3),
            Err(DataError::DegenerateDenominator(-1))
        ));
    }

    #[test]
    fn return_window_boundaries() {
        let rows: Vec<Vec<f64>> = (0..21).map(|i| vec![1.0 + i as f64]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let s = series(&refs);
        let w = return_window(&s, 2, 5, 1).unwrap();
        assert_eq!(w.tensors.len(), 1);
        assert_eq!(w.tensors[0], fluctuation_tensor(&s, 1, 5).unwrap());
        let first = return_window(&s, 4, 5, 3).unwrap();
        assert_eq!(first.tensors[0].period, 1);
        assert!(return_window(&s, 3, 5, 3).is_err());
    }

    #[test]
    fn flatten_is_chronological_row_major() {
        let s = series(&[&[1.0, 1.0], &[2.0, 4.0], &[4.0, 8.0], &[8.0, 8.0], &[8.0, 16.0]]);
        let w = return_window(&s, 3, 2, 2).unwrap();
        let mut flat = Vec::new();
        w.flatten_into(&mut flat);
        assert_eq!(flat, vec![1.0, 2.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(w.flat_len(), 8);
    }
}
