//! CSV ingestion for meter and weather files.
//!
//! Meter files carry `household_id,timestamp,kwh`; weather files carry
//! `timestamp,air_temp_c,rel_humidity_pct`. Both need a header row; column
//! order is free. Unparseable rows are skipped and counted.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Energy consumed in one metering interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawReading {
    pub timestamp: NaiveDateTime,
    pub energy_kwh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    pub timestamp: NaiveDateTime,
    pub air_temp_c: f64,
    pub rel_humidity_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeterIngest {
    pub households: BTreeMap<String, Vec<RawReading>>,
    pub rows_read: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeatherIngest {
    pub records: Vec<WeatherRecord>,
    pub rows_read: usize,
    pub skipped: usize,
}

/// Parses ISO-8601-ish UTC timestamps: `2013-01-01T00:30:00Z`,
/// `2013-01-01 00:30:00.0000000`, `2013-01-01T00:30`.
pub fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let s = raw.trim();
    let s = s
        .strip_suffix('Z')
        .or_else(|| s.strip_suffix("+00:00"))
        .unwrap_or(s);
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub(crate) fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn column_map(headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>, DataError> {
    let names: Vec<String> = headers.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    wanted
        .iter()
        .map(|w| names.iter().position(|n| n == w))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| DataError::BadHeader {
            expected: wanted.join(","),
            found: names.join(","),
        })
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

pub(crate) fn read_meter<R: Read>(input: R) -> Result<MeterIngest, DataError> {
    let mut rdr = reader(input);
    let headers = rdr.headers()?.clone();
    let mut out = MeterIngest::default();
    if headers.is_empty() {
        return Ok(out);
    }
    let cols = column_map(&headers, &["household_id", "timestamp", "kwh"])?;
    for record in rdr.records() {
        out.rows_read += 1;
        let parsed = record.ok().and_then(|r| {
            let id = r.get(cols[0])?.to_string();
            let timestamp = parse_timestamp(r.get(cols[1])?)?;
            let energy_kwh: f64 = r.get(cols[2])?.parse().ok()?;
            (!id.is_empty() && energy_kwh.is_finite() && energy_kwh >= 0.0)
                .then_some((id, RawReading { timestamp, energy_kwh }))
        });
        match parsed {
            Some((id, reading)) => out.households.entry(id).or_default().push(reading),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

pub(crate) fn read_weather<R: Read>(input: R) -> Result<WeatherIngest, DataError> {
    let mut rdr = reader(input);
    let headers = rdr.headers()?.clone();
    let mut out = WeatherIngest::default();
    if headers.is_empty() {
        return Ok(out);
    }
    let cols = column_map(&headers, &["timestamp", "air_temp_c", "rel_humidity_pct"])?;
    for record in rdr.records() {
        out.rows_read += 1;
        let parsed = record.ok().and_then(|r| {
            let timestamp = parse_timestamp(r.get(cols[0])?)?;
            let air_temp_c: f64 = r.get(cols[1])?.parse().ok()?;
            let rel_humidity_pct: f64 = r.get(cols[2])?.parse().ok()?;
            (air_temp_c.is_finite() && (0.0..=100.0).contains(&rel_humidity_pct)).then_some(
                WeatherRecord {
                    timestamp,
                    air_temp_c,
                    rel_humidity_pct,
                },
            )
        });
        match parsed {
            Some(rec) => out.records.push(rec),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<std::fs::File, DataError> {
    std::fs::File::open(path).map_err(|source| DataError::Io {
        context: format!("opening {}", path.display()),
        source,
    })
}

/// Reads a meter CSV, grouping readings per household.
pub fn ingest_lcl_csv(path: &Path) -> Result<MeterIngest, DataError> {
    read_meter(open(path)?)
}

pub fn ingest_weather_csv(path: &Path) -> Result<WeatherIngest, DataError> {
    read_weather(open(path)?)
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes readings in the ingestion format, households in id order.
pub fn write_meter_csv<W: Write>(
    out: W,
    households: &BTreeMap<String, Vec<RawReading>>,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["household_id", "timestamp", "kwh"])?;
    for (id, readings) in households {
        for r in readings {
            w.write_record([id.as_str(), &format_timestamp(&r.timestamp), &fmt_f64(r.energy_kwh)])?;
        }
    }
    w.flush().map_err(|source| DataError::Io {
        context: "writing meter csv".into(),
        source,
    })
}

pub fn write_weather_csv<W: Write>(out: W, records: &[WeatherRecord]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "air_temp_c", "rel_humidity_pct"])?;
    for r in records {
        w.write_record([
            format_timestamp(&r.timestamp),
            fmt_f64(r.air_temp_c),
            fmt_f64(r.rel_humidity_pct),
        ])?;
    }
    w.flush().map_err(|source| DataError::Io {
        context: "writing weather csv".into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_empty_report() {
        let out = read_meter("".as_bytes()).unwrap();
        assert!(out.households.is_empty());
        assert_eq!((out.rows_read, out.skipped), (0, 0));
        let w = read_weather("".as_bytes()).unwrap();
        assert!(w.records.is_empty());
    }

    #[test]
    fn two_row_fixture() {
        let csv = "household_id,timestamp,kwh\nMAC001,2013-01-01T00:00:00Z,0.3\nMAC001,2013-01-01 00:30:00.0000000,0.425\n";
        let out = read_meter(csv.as_bytes()).unwrap();
        let r = &out.households["MAC001"];
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].energy_kwh, 0.3);
        assert_eq!(r[1].energy_kwh, 0.425);
        assert_eq!(r[1].timestamp, parse_timestamp("2013-01-01T00:30").unwrap());
        assert_eq!(out.skipped, 0);
    }

    #[test]
    fn malformed_rows_are_skipped_and_counted() {
        let mut csv = String::from("household_id,timestamp,kwh\n");
        for i in 0..10 {
            if i == 4 {
                csv.push_str("MAC002,not-a-time,0.1\n");
            } else {
                csv.push_str(&format!("MAC002,2013-01-01T{:02}:{:02}:00Z,0.{}\n", i / 2, (i % 2) * 30, i));
            }
        }
        let out = read_meter(csv.as_bytes()).unwrap();
        assert_eq!(out.households["MAC002"].len(), 9);
        assert_eq!(out.skipped, 1);
        assert_eq!(out.rows_read, 10);
    }

    #[test]
    fn null_and_negative_energy_skipped() {
        let csv = "timestamp,kwh,household_id\n2013-01-01T00:00:00Z,Null,A\n2013-01-01T00:30:00Z,-1,A\n2013-01-01T01:00:00Z,0.2,A\n";
        let out = read_meter(csv.as_bytes()).unwrap();
        assert_eq!(out.households["A"].len(), 1);
        assert_eq!(out.skipped, 2);
    }

    #[test]
    fn bad_header_rejected() {
        let err = read_meter("id,time,energy\nA,2013-01-01T00:00:00Z,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::BadHeader { .. }));
    }

    #[test]
    fn weather_humidity_range_enforced() {
        let csv = "timestamp,air_temp_c,rel_humidity_pct\n2013-01-01T00:00:00Z,4.5,80\n2013-01-01T01:00:00Z,4.0,120\n";
        let w = read_weather(csv.as_bytes()).unwrap();
        assert_eq!(w.records.len(), 1);
        assert_eq!(w.skipped, 1);
        assert_eq!(w.records[0].air_temp_c, 4.5);
    }

    #[test]
    fn write_then_read_roundtrip() {
        let mut hh = BTreeMap::new();
        hh.insert(
            "B".to_string(),
            vec![RawReading {
                timestamp: parse_timestamp("2013-02-03T04:30:00Z").unwrap(),
                energy_kwh: 0.1 + 0.2,
            }],
        );
        let mut buf = Vec::new();
        write_meter_csv(&mut buf, &hh).unwrap();
        let back = read_meter(buf.as_slice()).unwrap();
        assert_eq!(back.households, hh);
    }
}
