//! Per-user key-location extraction: DBSCAN over event coordinates, dominant
//! landuse labeling, and per-user ranking by event count.
//!
//! DBSCAN runs in raw degree space because the search window is specified in
//! degrees; the latitude anisotropy that introduces is accepted rather than
//! corrected. Border-point assignment, a classic DBSCAN ambiguity, is fixed
//! by a canonical point order — points sorted by `(lon, lat, input index)` —
//! so labels are fully deterministic.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geo::Point;
use crate::landuse::{JoinedEvent, NUM_CLASSES};

/// DBSCAN parameters: search window in degrees and minimum neighborhood
/// size (the point itself counts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        DbscanParams {
            eps: 0.00225,
            min_pts: 3,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.min_pts < 1 {
            return Err(Error::config("min_pts must be >= 1"));
        }
        Ok(())
    }
}

/// One significant location of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyLocation {
    pub user_id: String,
    /// Arithmetic mean of member coordinates.
    pub centroid_lon: f64,
    pub centroid_lat: f64,
    pub event_count: u32,
    pub dominant_class: u8,
    /// 1-based per user; rank 1 has the most events.
    pub rank: u32,
}

/// Cluster labels per input point; `None` is noise. Clusters are numbered
/// in the order their first core point appears under the canonical order.
pub fn dbscan(points: &[Point], params: &DbscanParams) -> Vec<Option<usize>> {
    let n = points.len();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    if n == 0 {
        return labels;
    }
    let eps = params.eps;
    let eps2 = eps * eps;

    let mut canonical: Vec<u32> = (0..n as u32).collect();
    canonical.sort_by(|&a, &b| {
        let (pa, pb) = (points[a as usize], points[b as usize]);
        pa.lon
            .total_cmp(&pb.lon)
            .then(pa.lat.total_cmp(&pb.lat))
            .then(a.cmp(&b))
    });

    // bucket points into eps-sized cells; a neighborhood query scans the
    // 3x3 cell block around the query point
    let cell_of = |p: Point| -> (i64, i64) { ((p.lon / eps).floor() as i64, (p.lat / eps).floor() as i64) };
    let mut grid: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell_of(*p)).or_default().push(i as u32);
    }

    let neighbors = |i: u32| -> Vec<u32> {
        let p = points[i as usize];
        let (cx, cy) = cell_of(p);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = grid.get(&(cx + dx, cy + dy)) {
                    for &j in bucket {
                        let q = points[j as usize];
                        let (dlon, dlat) = (q.lon - p.lon, q.lat - p.lat);
                        if dlon * dlon + dlat * dlat <= eps2 {
                            out.push(j);
                        }
                    }
                }
            }
        }
        out
    };

    let mut visited = vec![false; n];
    let mut next_cluster = 0usize;
    for &seed in &canonical {
        let s = seed as usize;
        if visited[s] {
            continue;
        }
        visited[s] = true;
        let seed_neighbors = neighbors(seed);
        if seed_neighbors.len() < params.min_pts {
            continue; // noise unless a later cluster claims it as border
        }
        let cluster = next_cluster;
        next_cluster += 1;
        labels[s] = Some(cluster);
        let mut queue: VecDeque<u32> = seed_neighbors.into();
        while let Some(q) = queue.pop_front() {
            let qi = q as usize;
            if labels[qi].is_none() {
                labels[qi] = Some(cluster);
            }
            if visited[qi] {
                continue;
            }
            visited[qi] = true;
            let qn = neighbors(q);
            if qn.len() >= params.min_pts {
                queue.extend(qn);
            }
        }
    }
    labels
}

/// Key locations of a single user from its joined events. Noise events
/// produce nothing; the dominant class is the modal activity class of the
/// cluster's events with ties to the lowest class index; ranks order by
/// descending event count with ties by ascending centroid.
pub fn extract_key_locations(
    user_id: &str,
    events: &[&JoinedEvent],
    params: &DbscanParams,
) -> Vec<KeyLocation> {
    let points: Vec<Point> = events.iter().map(|e| e.event.point()).collect();
    let labels = dbscan(&points, params);
    let cluster_count = labels.iter().flatten().copied().max().map_or(0, |m| m + 1);
    if cluster_count == 0 {
        return Vec::new();
    }

    struct Acc {
        count: u32,
        lon_sum: f64,
        lat_sum: f64,
        class_counts: [u32; NUM_CLASSES + 1],
    }
    let mut acc: Vec<Acc> = (0..cluster_count)
        .map(|_| Acc {
            count: 0,
            lon_sum: 0.0,
            lat_sum: 0.0,
            class_counts: [0; NUM_CLASSES + 1],
        })
        .collect();
    for (event, label) in events.iter().zip(&labels) {
        if let Some(c) = label {
            let a = &mut acc[*c];
            a.count += 1;
            a.lon_sum += event.event.lon;
            a.lat_sum += event.event.lat;
            a.class_counts[event.activity_class as usize] += 1;
        }
    }

    let mut locations: Vec<KeyLocation> = acc
        .into_iter()
        .map(|a| {
            let dominant_class = (1..=NUM_CLASSES)
                .max_by_key(|&c| (a.class_counts[c], std::cmp::Reverse(c)))
                .unwrap() as u8;
            KeyLocation {
                user_id: user_id.to_string(),
                centroid_lon: a.lon_sum / f64::from(a.count),
                centroid_lat: a.lat_sum / f64::from(a.count),
                event_count: a.count,
                dominant_class,
                rank: 0,
            }
        })
        .collect();

    locations.sort_by(|a, b| {
        b.event_count
            .cmp(&a.event_count)
            .then(a.centroid_lon.total_cmp(&b.centroid_lon))
            .then(a.centroid_lat.total_cmp(&b.centroid_lat))
    });
    for (i, loc) in locations.iter_mut().enumerate() {
        loc.rank = (i + 1) as u32;
    }
    locations
}

/// Cluster every user independently. Output is sorted by `(user_id, rank)`
/// and identical for any worker count.
pub fn extract_all_key_locations(joined: &[JoinedEvent], params: &DbscanParams) -> Vec<KeyLocation> {
    let groups = group_by_user(joined);
    let per_user = exec::map_collect(groups, |(user, events)| {
        extract_key_locations(user, &events, params)
    });
    per_user.into_iter().flatten().collect()
}

/// Sequential twin of [`extract_all_key_locations`].
pub fn extract_all_key_locations_seq(
    joined: &[JoinedEvent],
    params: &DbscanParams,
) -> Vec<KeyLocation> {
    let groups = group_by_user(joined);
    let per_user = exec::map_collect_seq(groups, |(user, events)| {
        extract_key_locations(user, &events, params)
    });
    per_user.into_iter().flatten().collect()
}

fn group_by_user(joined: &[JoinedEvent]) -> Vec<(&str, Vec<&JoinedEvent>)> {
    let mut by_user: BTreeMap<&str, Vec<&JoinedEvent>> = BTreeMap::new();
    for j in joined {
        by_user.entry(&j.event.user_id).or_default().push(j);
    }
    by_user.into_iter().collect()
}

/// Distribution over activity classes of the rank-`r` key location, for
/// every rank present in the population.
#[derive(Debug, Clone, PartialEq)]
pub struct RankComposition {
    pub rank: u32,
    pub users: u64,
    /// Fraction of rank-`r` locations per class, indexed by `class - 1`;
    /// sums to one.
    pub shares: [f64; NUM_CLASSES],
}

/// Per-rank normalized class composition over all users' key locations.
pub fn rank_composition(locations: &[KeyLocation]) -> Vec<RankComposition> {
    let mut counts: BTreeMap<u32, [u64; NUM_CLASSES]> = BTreeMap::new();
    for loc in locations {
        let entry = counts.entry(loc.rank).or_insert([0; NUM_CLASSES]);
        entry[(loc.dominant_class - 1) as usize] += 1;
    }
    counts
        .into_iter()
        .map(|(rank, class_counts)| {
            let users: u64 = class_counts.iter().sum();
            let mut shares = [0.0; NUM_CLASSES];
            for (i, &c) in class_counts.iter().enumerate() {
                shares[i] = c as f64 / users as f64;
            }
            RankComposition { rank, users, shares }
        })
        .collect()
}

const KEYLOC_HEADER: [&str; 6] = [
    "user_id",
    "rank",
    "centroid_lon",
    "centroid_lat",
    "event_count",
    "dominant_class",
];

pub fn write_keylocations_csv<W: Write>(writer: W, locations: &[KeyLocation]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(KEYLOC_HEADER)?;
    for loc in locations {
        wtr.write_record([
            loc.user_id.as_str(),
            &loc.rank.to_string(),
            &loc.centroid_lon.to_string(),
            &loc.centroid_lat.to_string(),
            &loc.event_count.to_string(),
            &loc.dominant_class.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_keylocations_csv<R: Read>(reader: R) -> Result<Vec<KeyLocation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != KEYLOC_HEADER {
        return Err(Error::format(format!(
            "expected key-location header `{}`, got `{}`",
            KEYLOC_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let r = record?;
        let field = |i: usize| {
            r.get(i)
                .ok_or_else(|| Error::format("short key-location row"))
        };
        out.push(KeyLocation {
            user_id: field(0)?.to_string(),
            rank: parse(field(1)?)?,
            centroid_lon: parse(field(2)?)?,
            centroid_lat: parse(field(3)?)?,
            event_count: parse(field(4)?)?,
            dominant_class: parse(field(5)?)?,
        });
    }
    Ok(out)
}

/// Write the per-rank composition CSV: `rank,users,share_1..share_12`.
pub fn write_rank_composition_csv<W: Write>(
    writer: W,
    composition: &[RankComposition],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["rank".to_string(), "users".to_string()];
    header.extend((1..=NUM_CLASSES).map(|c| format!("share_{c}")));
    wtr.write_record(&header)?;
    for row in composition {
        let mut record = vec![row.rank.to_string(), row.users.to_string()];
        record.extend(row.shares.iter().map(|s| s.to_string()));
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(format!("unparseable field `{s}`")))
}
