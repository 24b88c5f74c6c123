use chrono::{Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use super::ingest::format_timestamp;
use super::{DataError, RawReading};

/// Gap-free hourly energy totals for one household.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlySeries {
    pub household_id: String,
    /// Start of the first hour.
    pub start: NaiveDateTime,
    pub values: Vec<f64>,
    /// Whether any half-hour slot in the hour was forward-filled.
    pub filled: Vec<bool>,
}

impl HourlySeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> NaiveDateTime {
        self.start + Duration::hours(index as i64)
    }

    pub fn filled_fraction(&self) -> f64 {
        if self.filled.is_empty() {
            return 0.0;
        }
        self.filled.iter().filter(|f| **f).count() as f64 / self.filled.len() as f64
    }
}

fn half_hour_slot(t: &NaiveDateTime) -> NaiveDateTime {
    let minute = if t.minute() >= 30 { 30 } else { 0 };
    t.date()
        .and_hms_opt(t.hour(), minute, 0)
        .expect("valid half-hour slot")
}

/// Drops duplicate slots (keeping the first occurrence in input order),
/// forward-fills missing half-hour slots and returns the gap-free readings
/// together with a per-slot filled flag.
///
/// The series runs from the hour of the first reading through the end of
/// the hour of the last reading. Timestamps are floored to their half-hour
/// slot.
pub fn fill_half_hourly(
    household_id: &str,
    raw: &[RawReading],
) -> Result<(Vec<RawReading>, Vec<bool>), DataError> {
    if raw.is_empty() {
        return Err(DataError::EmptyInput(household_id.to_string()));
    }
    if let Some(bad) = raw.iter().find(|r| !r.energy_kwh.is_finite() || r.energy_kwh < 0.0) {
        return Err(DataError::InvalidReading {
            household: household_id.to_string(),
            at: format_timestamp(&bad.timestamp),
        });
    }

    let mut slots: Vec<(NaiveDateTime, usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (half_hour_slot(&r.timestamp), i, r.energy_kwh))
        .collect();
    slots.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    slots.dedup_by(|later, first| later.0 == first.0);

    let first = slots[0].0;
    let start = first.date().and_hms_opt(first.hour(), 0, 0).expect("hour start");
    if first != start {
        return Err(DataError::LeadingGap {
            household: household_id.to_string(),
            at: format_timestamp(&start),
        });
    }
    let last = slots[slots.len() - 1].0;
    let end = last.date().and_hms_opt(last.hour(), 30, 0).expect("hour end slot");

    let step = Duration::minutes(30);
    let mut out = Vec::new();
    let mut filled = Vec::new();
    let mut next = slots.iter().peekable();
    let mut current = start;
    let mut carry = 0.0;
    while current <= end {
        match next.peek() {
            Some((t, _, v)) if *t == current => {
                carry = *v;
                filled.push(false);
                next.next();
            }
            _ => filled.push(true),
        }
        out.push(RawReading {
            timestamp: current,
            energy_kwh: carry,
        });
        current += step;
    }
    Ok((out, filled))
}

/// Cleans half-hourly readings into an hourly series: dedupe, forward-fill,
/// then sum the two half-hour totals of every hour.
pub fn clean_readings(household_id: &str, raw: &[RawReading]) -> Result<HourlySeries, DataError> {
    let (slots, filled) = fill_half_hourly(household_id, raw)?;
    let values = slots
        .chunks_exact(2)
        .map(|pair| pair[0].energy_kwh + pair[1].energy_kwh)
        .collect();
    let filled = filled.chunks_exact(2).map(|p| p[0] || p[1]).collect();
    Ok(HourlySeries {
        household_id: household_id.to_string(),
        start: slots[0].timestamp,
        values,
        filled,
    })
}
