//! Seeded synthetic price paths on a weekday calendar.

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::market_data::{DataError, PriceSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetPath {
    pub ticker: String,
    pub start_price: f64,
    /// Mean daily log2 return.
    pub drift: f64,
    /// Standard deviation of the daily log2 return.
    pub volatility: f64,
}

impl AssetPath {
    pub fn new(ticker: &str, drift: f64, volatility: f64) -> Self {
        Self {
            ticker: ticker.to_string(),
            start_price: 100.0,
            drift,
            volatility,
        }
    }
}

/// `count` consecutive weekdays starting on or after `start`.
pub fn weekdays(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Independent log2-normal daily returns per asset.
pub fn generate(
    assets: &[AssetPath],
    start: NaiveDate,
    days: usize,
    seed: u64,
) -> Result<PriceSeries, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prices = DMatrix::zeros(days, assets.len());
    for (j, asset) in assets.iter().enumerate() {
        let mut p = asset.start_price;
        for row in 0..days {
            if row > 0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                p *= (asset.drift + asset.volatility * z).exp2();
            }
            prices[(row, j)] = p;
        }
    }
    PriceSeries::new(
        assets.iter().map(|a| a.ticker.clone()).collect(),
        weekdays(start, days),
        prices,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calendar_skips_weekends() {
        let start = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        let days = weekdays(start, 3);
        assert_eq!(days[1], NaiveDate::from_ymd_opt(2021, 1, 4).unwrap());
    }

    #[test]
    fn zero_volatility_is_exact_drift() {
        let start = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        let s = generate(&[AssetPath::new("A", 1.0, 0.0)], start, 4, 1).unwrap();
        assert_eq!(s.prices()[(3, 0)], 800.0);
        let again = generate(&[AssetPath::new("A", 0.01, 0.02)], start, 50, 9).unwrap();
        assert_eq!(again, generate(&[AssetPath::new("A", 0.01, 0.02)], start, 50, 9).unwrap());
    }
}
