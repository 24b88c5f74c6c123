//! Synthetic household populations for desk-scale experiments.
//!
//! Each archetype is an hour-of-day load profile with a weekly modulation.
//! Households are assigned to archetypes round-robin and perturbed by a
//! per-household scale and per-reading multiplicative noise. All households
//! share one weather series, which adds a small heating load.

use std::f64::consts::PI;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, RawReading, WeatherRecord};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub name: String,
    /// Expected kWh per hour of day.
    pub hourly_profile: [f64; 24],
    /// Multiplier per day of week, Monday first.
    pub weekly: [f64; 7],
}

impl Archetype {
    pub fn peak_hour(&self) -> usize {
        let mut best = 0;
        for h in 1..24 {
            if self.hourly_profile[h] > self.hourly_profile[best] {
                best = h;
            }
        }
        best
    }
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(24.0);
    d.min(24.0 - d)
}

/// `count` archetypes with main peaks spread evenly around the clock,
/// starting at 07:00, each with a smaller secondary peak 12 hours later.
pub fn default_archetypes(count: usize) -> Vec<Archetype> {
    (0..count)
        .map(|j| {
            let peak = (7.0 + j as f64 * 24.0 / count as f64).rem_euclid(24.0);
            let mut hourly_profile = [0.0; 24];
            for (h, slot) in hourly_profile.iter_mut().enumerate() {
                let d1 = circular_distance(h as f64, peak);
                let d2 = circular_distance(h as f64, peak + 12.0);
                *slot = 0.15 + 1.2 * (-d1 * d1 / (2.0 * 1.5 * 1.5)).exp() + 0.3 * (-d2 * d2 / 8.0).exp();
            }
            let weekly = if j % 2 == 0 {
                [1.0, 1.0, 1.0, 1.0, 1.0, 1.25, 1.25]
            } else {
                [1.1, 1.0, 1.0, 1.0, 1.1, 0.9, 0.85]
            };
            Archetype {
                name: format!("peak{:02}", peak.round() as u32 % 24),
                hourly_profile,
                weekly,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub households: usize,
    pub archetypes: usize,
    /// Relative standard deviation of the multiplicative noise.
    pub noise: f64,
    pub days: usize,
    pub start: NaiveDate,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(households: usize, archetypes: usize, noise: f64, days: usize, seed: u64) -> Self {
        SyntheticSpec {
            households,
            archetypes,
            noise,
            days,
            start: NaiveDate::from_ymd_opt(2013, 1, 1).expect("valid date"),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.households == 0 {
            return Err(DataError::InvalidParameter("household count must be at least 1".into()));
        }
        if self.archetypes == 0 {
            return Err(DataError::InvalidParameter("archetype count must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(DataError::InvalidParameter(format!("noise {} not in [0, 1)", self.noise)));
        }
        if self.days == 0 {
            return Err(DataError::InvalidParameter("days must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticHousehold {
    pub household_id: String,
    /// Ground-truth archetype index.
    pub archetype: usize,
    pub readings: Vec<RawReading>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPopulation {
    pub archetypes: Vec<Archetype>,
    pub households: Vec<SyntheticHousehold>,
    pub weather: Vec<WeatherRecord>,
}

fn weather_at(t: &NaiveDateTime, jitter: f64) -> WeatherRecord {
    let doy = t.ordinal() as f64;
    let hour = t.hour() as f64;
    let air_temp_c = 9.0 + 6.0 * (2.0 * PI * (doy - 110.0) / 365.0).sin()
        + 4.0 * (2.0 * PI * (hour - 9.0) / 24.0).sin()
        + jitter;
    let rel_humidity_pct =
        (78.0 - 15.0 * (2.0 * PI * (hour - 9.0) / 24.0).sin() - 2.0 * jitter).clamp(0.0, 100.0);
    WeatherRecord {
        timestamp: *t,
        air_temp_c,
        rel_humidity_pct,
    }
}

/// Deterministic given `spec.seed`.
pub fn generate_synthetic_households(
    spec: &SyntheticSpec,
    archetypes: &[Archetype],
) -> Result<SyntheticPopulation, DataError> {
    spec.validate()?;
    if archetypes.is_empty() {
        return Err(DataError::InvalidParameter("no archetypes supplied".into()));
    }
    let start = spec.start.and_hms_opt(0, 0, 0).expect("midnight");
    let hours = spec.days * 24;

    let mut wrng = seed::rng(spec.seed, Stream::Synthetic, u64::MAX, 0);
    let weather: Vec<WeatherRecord> = (0..hours)
        .map(|h| {
            let jitter: f64 = StandardNormal.sample(&mut wrng);
            weather_at(&(start + Duration::hours(h as i64)), 0.8 * jitter)
        })
        .collect();

    let households = (0..spec.households)
        .map(|i| {
            let archetype = i % archetypes.len();
            let a = &archetypes[archetype];
            let mut rng = seed::rng(spec.seed, Stream::Synthetic, i as u64, 0);
            let z: f64 = StandardNormal.sample(&mut rng);
            let scale = (1.0 + spec.noise * z).max(0.1);
            let mut readings = Vec::with_capacity(hours * 2);
            for h in 0..hours {
                let hour_start = start + Duration::hours(h as i64);
                let heating = 0.02 * (15.0 - weather[h].air_temp_c).max(0.0);
                let dow = hour_start.weekday().num_days_from_monday() as usize;
                let expected = (a.hourly_profile[hour_start.hour() as usize] * a.weekly[dow] + heating) * scale;
                for half in 0..2 {
                    let z: f64 = if spec.noise > 0.0 {
                        rng.sample(StandardNormal)
                    } else {
                        0.0
                    };
                    let kwh = (0.5 * expected * (1.0 + spec.noise * z)).max(0.0);
                    readings.push(RawReading {
                        timestamp: hour_start + Duration::minutes(30 * half),
                        energy_kwh: kwh,
                    });
                }
            }
            SyntheticHousehold {
                household_id: format!("SYN{i:04}"),
                archetype,
                readings,
            }
        })
        .collect();

    Ok(SyntheticPopulation {
        archetypes: archetypes.to_vec(),
        households,
        weather,
    })
}
