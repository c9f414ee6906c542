//! Event-stream ingestion: CSV parsing, duplicate removal, and the
//! user-quality filters (yearly tweet rate, active days, speed percentile).
//!
//! The event CSV schema is `user_id,timestamp,lon,lat` with integer Unix
//! seconds (UTC). Lines starting with `#` are treated as comments so stage
//! outputs carrying a provenance header can be fed straight back in.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geo::{haversine_km, Point, Rect};

/// One geotagged message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoEvent {
    pub user_id: String,
    /// Unix seconds, UTC, strictly positive.
    pub timestamp: i64,
    pub lon: f64,
    pub lat: f64,
}

impl GeoEvent {
    pub fn point(&self) -> Point {
        Point::new(self.lon, self.lat)
    }

    pub fn is_valid(&self) -> bool {
        self.timestamp > 0
            && (-180.0..=180.0).contains(&self.lon)
            && (-90.0..=90.0).contains(&self.lat)
    }

    pub(crate) fn datetime(&self) -> DateTime<Utc> {
        DateTime::from_timestamp(self.timestamp, 0).expect("timestamp within chrono range")
    }
}

/// Thresholds of the user-quality filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    /// A user is kept only if at least one calendar year of activity has at
    /// least this many events.
    pub min_events_per_year: u32,
    /// Minimum number of distinct UTC dates with at least one event.
    pub min_active_days: u32,
    /// Quantile of the per-user maximum speed population; users strictly
    /// above the quantile value are removed.
    pub speed_percentile: f64,
    /// Optional lon/lat clipping rectangle applied before any other filter.
    pub bounding_box: Option<Rect>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            min_events_per_year: 10,
            min_active_days: 30,
            speed_percentile: 0.99,
            bounding_box: None,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed_percentile > 0.0 && self.speed_percentile < 1.0) {
            return Err(Error::config(format!(
                "speed_percentile must be in (0, 1), got {}",
                self.speed_percentile
            )));
        }
        Ok(())
    }
}

/// Per-user aggregates backing the filters.
#[derive(Debug, Clone, PartialEq)]
pub struct UserStats {
    pub user_id: String,
    /// Event count per calendar year (UTC).
    pub events_per_year: BTreeMap<i32, u32>,
    /// Distinct UTC dates with at least one event.
    pub active_days: u32,
    /// Maximum speed over consecutive event pairs, km/h. Zero when the user
    /// has fewer than two events; infinite for physically impossible pairs.
    pub max_speed_kmh: f64,
}

/// Outcome of [`parse_events`].
#[derive(Debug)]
pub struct ParseOutcome {
    pub events: Vec<GeoEvent>,
    pub rows_skipped: u64,
}

/// Integer counters describing what [`filter_users`] removed and why.
/// A user failing several criteria is counted under each of them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub events_in: u64,
    pub malformed_rows: u64,
    pub duplicates_removed: u64,
    pub events_outside_bbox: u64,
    pub users_total: u64,
    pub users_removed: u64,
    pub users_low_yearly_rate: u64,
    pub users_low_active_days: u64,
    pub users_over_speed: u64,
    pub events_removed: u64,
    pub events_kept: u64,
    /// Serialized as `null` when the threshold is infinite.
    pub speed_threshold_kmh: f64,
}

const EVENT_HEADER: [&str; 4] = ["user_id", "timestamp", "lon", "lat"];

/// Parse an event CSV stream. Malformed rows (wrong arity, unparseable
/// fields, out-of-range coordinates or timestamps) are counted and skipped;
/// only unreadable input or a wrong header is fatal.
pub fn parse_events<R: Read>(reader: R) -> Result<ParseOutcome> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(reader);

    let headers = rdr.headers().map_err(csv_fatal)?.clone();
    if headers.iter().collect::<Vec<_>>() != EVENT_HEADER {
        return Err(Error::format(format!(
            "expected header `user_id,timestamp,lon,lat`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut events = Vec::new();
    let mut rows_skipped = 0u64;
    for record in rdr.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    return Err(csv_fatal(e));
                }
                rows_skipped += 1;
                continue;
            }
        };
        match parse_record(&record) {
            Some(event) => events.push(event),
            None => rows_skipped += 1,
        }
    }
    Ok(ParseOutcome {
        events,
        rows_skipped,
    })
}

fn parse_record(record: &csv::StringRecord) -> Option<GeoEvent> {
    if record.len() != 4 {
        return None;
    }
    let event = GeoEvent {
        user_id: record.get(0)?.to_string(),
        timestamp: record.get(1)?.trim().parse().ok()?,
        lon: record.get(2)?.trim().parse().ok()?,
        lat: record.get(3)?.trim().parse().ok()?,
    };
    if event.user_id.is_empty() || !event.is_valid() {
        return None;
    }
    Some(event)
}

fn csv_fatal(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(format!("{other:?}")),
    }
}

/// Write events in the canonical CSV schema.
pub fn write_events_csv<W: Write>(writer: W, events: &[GeoEvent]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(EVENT_HEADER)?;
    for e in events {
        wtr.write_record([
            e.user_id.as_str(),
            &e.timestamp.to_string(),
            &e.lon.to_string(),
            &e.lat.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        csv_fatal(e)
    }
}

/// Normalize -0.0 to 0.0 so the duplicate key is a value key, then take bits.
fn coord_key(f: f64) -> u64 {
    if f == 0.0 {
        0.0f64.to_bits()
    } else {
        f.to_bits()
    }
}

/// Remove duplicate records. The duplicate key is the full positional
/// identity `(user_id, timestamp, lon, lat)`; the first occurrence wins and
/// relative order is preserved. Returns the surviving events and the number
/// of duplicates dropped.
pub fn dedupe(events: Vec<GeoEvent>) -> (Vec<GeoEvent>, u64) {
    let mut seen: HashSet<(String, i64, u64, u64)> = HashSet::with_capacity(events.len());
    let mut out = Vec::with_capacity(events.len());
    let mut removed = 0u64;
    for e in events {
        let key = (e.user_id.clone(), e.timestamp, coord_key(e.lon), coord_key(e.lat));
        if seen.insert(key) {
            out.push(e);
        } else {
            removed += 1;
        }
    }
    (out, removed)
}

/// Drop events outside `bbox`. Returns survivors and the dropped count.
pub fn clip_to_bbox(events: Vec<GeoEvent>, bbox: &Rect) -> (Vec<GeoEvent>, u64) {
    let before = events.len() as u64;
    let kept: Vec<GeoEvent> = events.into_iter().filter(|e| bbox.contains(e.point())).collect();
    let dropped = before - kept.len() as u64;
    (kept, dropped)
}

/// Speed in km/h between consecutive events of one user.
///
/// Input must be sorted by timestamp. Output has length `n - 1` (empty for
/// fewer than two events). A zero time delta maps to 0 km/h when the
/// displacement is also zero and to the infinite sentinel otherwise.
pub fn consecutive_speeds<E: Borrow<GeoEvent>>(events: &[E]) -> Result<Vec<f64>> {
    let mut speeds = Vec::with_capacity(events.len().saturating_sub(1));
    for pair in events.windows(2) {
        let (a, b) = (pair[0].borrow(), pair[1].borrow());
        if b.timestamp < a.timestamp {
            return Err(Error::precondition(
                "consecutive_speeds requires events sorted by timestamp",
            ));
        }
        let dist_km = haversine_km(a.point(), b.point());
        let dt_h = (b.timestamp - a.timestamp) as f64 / 3600.0;
        let speed = if dt_h > 0.0 {
            dist_km / dt_h
        } else if dist_km > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        speeds.push(speed);
    }
    Ok(speeds)
}

/// Aggregate per-user statistics over a deduplicated event stream.
pub fn compute_user_stats(events: &[GeoEvent]) -> BTreeMap<String, UserStats> {
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        by_user.entry(&e.user_id).or_default().push(i);
    }
    let groups: Vec<(&str, Vec<usize>)> = by_user.into_iter().collect();

    let stats = exec::map_collect(groups, |(user, mut idx)| {
        idx.sort_by_key(|&i| events[i].timestamp);
        let ordered: Vec<&GeoEvent> = idx.iter().map(|&i| &events[i]).collect();

        let mut events_per_year: BTreeMap<i32, u32> = BTreeMap::new();
        let mut days: HashSet<chrono::NaiveDate> = HashSet::new();
        for e in &ordered {
            let dt = e.datetime();
            *events_per_year.entry(dt.year()).or_insert(0) += 1;
            days.insert(dt.date_naive());
        }
        let max_speed_kmh = consecutive_speeds(&ordered)
            .expect("sorted by construction")
            .into_iter()
            .fold(0.0, f64::max);
        UserStats {
            user_id: user.to_string(),
            events_per_year,
            active_days: days.len() as u32,
            max_speed_kmh,
        }
    });

    stats.into_iter().map(|s| (s.user_id.clone(), s)).collect()
}

/// Empirical quantile by the nearest-rank method: the `ceil(q * n)`-th order
/// statistic. Infinite values sort above all finite ones.
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::insufficient("quantile of an empty population"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::config(format!("quantile must be in (0, 1), got {q}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Speed threshold for [`filter_users`]: the nearest-rank quantile of the
/// per-user maximum-speed population.
pub fn speed_threshold(stats: &BTreeMap<String, UserStats>, q: f64) -> Result<f64> {
    let speeds: Vec<f64> = stats.values().map(|s| s.max_speed_kmh).collect();
    nearest_rank_quantile(&speeds, q)
}

/// Apply the user-quality filters. A user is removed when every calendar
/// year of activity falls below `min_events_per_year`, or the count of
/// distinct active UTC dates falls below `min_active_days`, or the user's
/// maximum consecutive speed strictly exceeds the population quantile.
/// Removal is all-or-nothing per user.
///
/// Input must already be deduplicated; `policy.bounding_box` is not applied
/// here (see [`clip_to_bbox`]).
pub fn filter_users(
    events: Vec<GeoEvent>,
    policy: &FilterPolicy,
) -> Result<(Vec<GeoEvent>, RejectionReport)> {
    policy.validate()?;

    let mut report = RejectionReport {
        events_in: events.len() as u64,
        speed_threshold_kmh: f64::INFINITY,
        ..RejectionReport::default()
    };
    if events.is_empty() {
        return Ok((events, report));
    }

    let stats = compute_user_stats(&events);
    report.users_total = stats.len() as u64;
    let threshold = speed_threshold(&stats, policy.speed_percentile)?;
    report.speed_threshold_kmh = threshold;

    let mut removed: HashSet<&str> = HashSet::new();
    for (user, s) in &stats {
        let best_year = s.events_per_year.values().copied().max().unwrap_or(0);
        let low_rate = best_year < policy.min_events_per_year;
        let low_days = s.active_days < policy.min_active_days;
        let speeding = s.max_speed_kmh > threshold;
        if low_rate {
            report.users_low_yearly_rate += 1;
        }
        if low_days {
            report.users_low_active_days += 1;
        }
        if speeding {
            report.users_over_speed += 1;
        }
        if low_rate || low_days || speeding {
            removed.insert(user.as_str());
        }
    }
    report.users_removed = removed.len() as u64;

    let kept: Vec<GeoEvent> = events
        .into_iter()
        .filter(|e| !removed.contains(e.user_id.as_str()))
        .collect();
    report.events_kept = kept.len() as u64;
    report.events_removed = report.events_in - report.events_kept;
    Ok((kept, report))
}
