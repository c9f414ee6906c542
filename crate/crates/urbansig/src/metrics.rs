//! The two consistency metrics: the locational-bias weight regression and
//! the hourly temporal signatures.
//!
//! The regression relates, per activity class, the share of key locations
//! labeled with that class (the observed weight) to the share of city
//! surface area it occupies (the map weight). A slope of one is the
//! no-bias null. Signatures are normalized 24-hour weekday profiles of
//! event volume per class.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Datelike, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::keylocations::KeyLocation;
use crate::landuse::{JoinedEvent, NUM_CLASSES};

/// Weight of one activity class in the event data and on the map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPair {
    pub class: u8,
    pub twitter_weight: f64,
    pub map_weight: f64,
}

/// Output of the locational-bias regression for one city.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub city: String,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Number of classes entering the fit (those with positive map weight).
    pub n: usize,
    pub pairs: Vec<WeightPair>,
    /// Classes present in the event data but occupying zero map area; they
    /// are excluded from the fit and surfaced here instead.
    pub anomalies: Vec<u8>,
}

/// Share of key locations per dominant activity class. Fractions sum to one.
pub fn twitter_class_weights(locations: &[KeyLocation]) -> Result<BTreeMap<u8, f64>> {
    if locations.is_empty() {
        return Err(Error::insufficient(
            "class weights need at least one key location",
        ));
    }
    let mut counts = [0u64; NUM_CLASSES + 1];
    for loc in locations {
        counts[loc.dominant_class as usize] += 1;
    }
    let total = locations.len() as f64;
    Ok((1..=NUM_CLASSES as u8)
        .filter(|&c| counts[c as usize] > 0)
        .map(|c| (c, counts[c as usize] as f64 / total))
        .collect())
}

/// Ordinary least squares of the observed class weights (y) on the map
/// weights (x), over classes with positive map weight. Classes missing from
/// the observed side contribute `y = 0`.
pub fn locational_bias(
    city: &str,
    twitter_weights: &BTreeMap<u8, f64>,
    map_weights: &BTreeMap<u8, f64>,
) -> Result<BiasReport> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut pairs = Vec::new();
    let mut anomalies = Vec::new();

    let mut classes: Vec<u8> = map_weights
        .keys()
        .chain(twitter_weights.keys())
        .copied()
        .collect();
    classes.sort_unstable();
    classes.dedup();

    for class in classes {
        let map_w = map_weights.get(&class).copied().unwrap_or(0.0);
        let tw_w = twitter_weights.get(&class).copied().unwrap_or(0.0);
        pairs.push(WeightPair {
            class,
            twitter_weight: tw_w,
            map_weight: map_w,
        });
        if map_w > 0.0 {
            xs.push(map_w);
            ys.push(tw_w);
        } else if tw_w > 0.0 {
            anomalies.push(class);
        }
    }

    if xs.len() < 3 {
        return Err(Error::insufficient(format!(
            "regression needs at least 3 classes with positive map weight, got {}",
            xs.len()
        )));
    }
    let fit = ols(&xs, &ys)?;
    Ok(BiasReport {
        city: city.to_string(),
        slope: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        n: xs.len(),
        pairs,
        anomalies,
    })
}

pub(crate) struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub(crate) fn ols(xs: &[f64], ys: &[f64]) -> Result<OlsFit> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - x_mean) * (y - y_mean);
        sxx += (x - x_mean) * (x - x_mean);
    }
    if sxx == 0.0 {
        return Err(Error::insufficient("zero variance in map weights"));
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        ss_res += (y - (slope * x + intercept)).powi(2);
        ss_tot += (y - y_mean).powi(2);
    }
    let r_squared = if ss_tot == 0.0 {
        1.0 // all residuals vanish with constant y once slope is 0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(OlsFit {
        slope,
        intercept,
        r_squared,
    })
}

/// How a signature vector is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// Divide by the vector sum (default; vectors sum to one).
    Sum,
    /// Divide by the maximum entry.
    Max,
}

/// Normalized 24-hour weekday profile of one activity class in one city.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub city_tag: String,
    pub activity_class: u8,
    pub values: [f64; 24],
}

impl Signature {
    pub fn label(&self) -> String {
        format!("{}_{}", self.city_tag, self.activity_class)
    }
}

/// Hourly signature of one activity class: events are shifted to local time
/// by a fixed whole-hour offset, optionally restricted to local weekdays
/// (Mon–Fri), binned into the 24 local hours, and normalized.
///
/// A class with no surviving events has no defined signature and errors.
pub fn hourly_signature(
    events: &[JoinedEvent],
    activity_class: u8,
    tz_offset_hours: i32,
    weekdays_only: bool,
    norm: Normalization,
) -> Result<Signature> {
    hourly_signature_tagged(events, "", activity_class, tz_offset_hours, weekdays_only, norm)
}

/// [`hourly_signature`] with the city tag recorded on the output.
pub fn hourly_signature_tagged(
    events: &[JoinedEvent],
    city_tag: &str,
    activity_class: u8,
    tz_offset_hours: i32,
    weekdays_only: bool,
    norm: Normalization,
) -> Result<Signature> {
    if !(-12..=14).contains(&tz_offset_hours) {
        return Err(Error::config(format!(
            "tz offset must be in [-12, 14], got {tz_offset_hours}"
        )));
    }
    let mut counts = [0u64; 24];
    for e in events {
        if e.activity_class != activity_class {
            continue;
        }
        // shifting the instant and reading it as UTC yields the local
        // calendar date and hour for a fixed offset
        let local = chrono::DateTime::from_timestamp(
            e.event.timestamp + i64::from(tz_offset_hours) * 3600,
            0,
        )
        .ok_or_else(|| Error::precondition("timestamp out of range"))?;
        if weekdays_only && local.weekday().number_from_monday() > 5 {
            continue;
        }
        counts[local.hour() as usize] += 1;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::insufficient(format!(
            "no events for class {activity_class} after filtering; signature undefined"
        )));
    }
    let denom = match norm {
        Normalization::Sum => total as f64,
        Normalization::Max => *counts.iter().max().unwrap() as f64,
    };
    let mut values = [0.0f64; 24];
    for (v, c) in values.iter_mut().zip(counts) {
        *v = c as f64 / denom;
    }
    Ok(Signature {
        city_tag: city_tag.to_string(),
        activity_class,
        values,
    })
}

/// Signatures for every class in `classes` that has events, computed in
/// parallel with deterministic output order. Classes with no surviving
/// events are skipped (they have no defined signature).
pub fn signatures_for_classes(
    events: &[JoinedEvent],
    city_tag: &str,
    classes: &[u8],
    tz_offset_hours: i32,
    weekdays_only: bool,
    norm: Normalization,
) -> Vec<Signature> {
    let results = exec::map_slice(classes, |&class| {
        hourly_signature_tagged(events, city_tag, class, tz_offset_hours, weekdays_only, norm).ok()
    });
    results.into_iter().flatten().collect()
}

const BIAS_SCHEMA_NOTE: &str = "bias report";

/// Serialize a [`BiasReport`] as JSON:
/// `{city, slope, intercept, r_squared, n, pairs: [...], anomalies: [...]}`.
pub fn write_bias_json<W: Write>(mut writer: W, report: &BiasReport) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, report)
        .map_err(|e| Error::format(format!("{BIAS_SCHEMA_NOTE}: {e}")))?;
    writer.write_all(b"\n")?;
    Ok(())
}

pub fn read_bias_json<R: Read>(reader: R) -> Result<BiasReport> {
    let mut text = String::new();
    let mut reader = reader;
    reader.read_to_string(&mut text)?;
    let body: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n");
    serde_json::from_str(&body).map_err(|e| Error::format(format!("{BIAS_SCHEMA_NOTE}: {e}")))
}

/// Write signatures as CSV `city,activity_class,h0..h23`.
pub fn write_signatures_csv<W: Write>(writer: W, signatures: &[Signature]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["city".to_string(), "activity_class".to_string()];
    header.extend((0..24).map(|h| format!("h{h}")));
    wtr.write_record(&header)?;
    for s in signatures {
        let mut record = vec![s.city_tag.clone(), s.activity_class.to_string()];
        record.extend(s.values.iter().map(|v| v.to_string()));
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_signatures_csv<R: Read>(reader: R) -> Result<Vec<Signature>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() != 26 || &headers[0] != "city" || &headers[1] != "activity_class" {
        return Err(Error::format("expected signature header `city,activity_class,h0..h23`"));
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let r = record?;
        if r.len() != 26 {
            return Err(Error::format("short signature row"));
        }
        let mut values = [0.0f64; 24];
        for (i, v) in values.iter_mut().enumerate() {
            *v = r[i + 2]
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("unparseable hour value `{}`", &r[i + 2])))?;
        }
        out.push(Signature {
            city_tag: r[0].to_string(),
            activity_class: r[1]
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("unparseable class `{}`", &r[1])))?,
            values,
        });
    }
    Ok(out)
}

/// Write weight pairs as CSV `city,class,twitter_weight,map_weight`.
pub fn write_weight_pairs_csv<W: Write>(writer: W, report: &BiasReport) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["city", "class", "twitter_weight", "map_weight"])?;
    for p in &report.pairs {
        wtr.write_record([
            report.city.as_str(),
            &p.class.to_string(),
            &p.twitter_weight.to_string(),
            &p.map_weight.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
