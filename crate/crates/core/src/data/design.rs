use std::collections::HashMap;

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use super::ingest::format_timestamp;
use super::{DataError, HourlySeries, WeatherRecord};

/// One hourly row of a design matrix.
///
/// Calendar convention: Monday is day 0, week of year is
/// `floor((day_of_year - 1) / 7)` clamped to 51.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub timestamp: NaiveDateTime,
    pub energy: f64,
    pub year: i32,
    pub week: u32,
    pub day: u32,
    pub hour: u32,
    pub air_temp: Option<f64>,
    pub humidity: Option<f64>,
}

impl FeatureVector {
    /// Values in model order `e, y, w, d, h[, a, r]`; energy is always first.
    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![
            self.energy,
            self.year as f64,
            self.week as f64,
            self.day as f64,
            self.hour as f64,
        ];
        if let (Some(a), Some(r)) = (self.air_temp, self.humidity) {
            v.push(a);
            v.push(r);
        }
        v
    }
}

/// `(year, week, day, hour)` of a timestamp.
pub fn calendar_features(t: &NaiveDateTime) -> (i32, u32, u32, u32) {
    let week = ((t.ordinal() - 1) / 7).min(51);
    (t.year(), week, t.weekday().num_days_from_monday(), t.hour())
}

/// One feature vector per hour, joining weather by exact hour when given.
pub fn build_design_matrix(
    series: &HourlySeries,
    weather: Option<&[WeatherRecord]>,
) -> Result<Vec<FeatureVector>, DataError> {
    let lookup: Option<HashMap<NaiveDateTime, &WeatherRecord>> =
        weather.map(|w| w.iter().map(|r| (r.timestamp, r)).collect());
    let mut rows = Vec::with_capacity(series.len());
    for (i, &energy) in series.values.iter().enumerate() {
        let timestamp = series.timestamp(i);
        let (year, week, day, hour) = calendar_features(&timestamp);
        let (air_temp, humidity) = match &lookup {
            None => (None, None),
            Some(map) => {
                let rec = map
                    .get(&timestamp)
                    .ok_or_else(|| DataError::WeatherGap(format_timestamp(&timestamp)))?;
                (Some(rec.air_temp_c), Some(rec.rel_humidity_pct))
            }
        };
        rows.push(FeatureVector {
            timestamp,
            energy,
            year,
            week,
            day,
            hour,
            air_temp,
            humidity,
        });
    }
    Ok(rows)
}
