//! Parcel-level landuse maps: GeoJSON loading, the twelve-class activity
//! legend, surface areas, and the nearest-parcel event join.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::exec;
use crate::geo::{ring_area_km2, ring_centroid, LocalProjection, Point, Polygon, Rect, Ring};
use crate::index::SpatialIndex;
use crate::ingest::GeoEvent;

/// Number of activity classes in the legend.
pub const NUM_CLASSES: usize = 12;

/// One landuse polygon with its activity class and surface area.
#[derive(Debug, Clone)]
pub struct Parcel {
    pub parcel_id: String,
    pub polygon: Polygon,
    pub landuse_code: String,
    /// Activity class in 1..=12 after legend application.
    pub activity_class: u8,
    pub area_km2: f64,
    proj: LocalProjection,
    bbox: Rect,
}

impl Parcel {
    /// Build a parcel, validating rings and computing its area and local
    /// projection. Fails on open or undersized rings and degenerate areas.
    pub fn new(
        parcel_id: impl Into<String>,
        polygon: Polygon,
        landuse_code: impl Into<String>,
        activity_class: u8,
    ) -> Result<Self> {
        if !(1..=NUM_CLASSES as u8).contains(&activity_class) {
            return Err(Error::config(format!(
                "activity class must be in 1..=12, got {activity_class}"
            )));
        }
        if !polygon.rings_are_valid() {
            return Err(Error::geometry(
                "polygon ring must be closed with at least 4 vertices",
            ));
        }
        let area_km2 = polygon_area_km2(&polygon)?;
        let proj = LocalProjection::at_latitude(ring_centroid(&polygon.exterior).lat);
        let bbox = polygon.bbox();
        Ok(Parcel {
            parcel_id: parcel_id.into(),
            polygon,
            landuse_code: landuse_code.into(),
            activity_class,
            area_km2,
            proj,
            bbox,
        })
    }

    pub fn bbox(&self) -> Rect {
        self.bbox
    }

    pub fn projection(&self) -> LocalProjection {
        self.proj
    }

    /// Distance from `p` in km: zero inside or on the boundary, otherwise
    /// the minimum boundary distance under this parcel's local projection.
    pub fn distance_km(&self, p: Point) -> f64 {
        self.polygon.distance_km(p, &self.proj)
    }
}

/// Planar polygon area in km² under the local projection anchored at the
/// exterior-ring centroid latitude. Hole areas are subtracted.
pub fn polygon_area_km2(polygon: &Polygon) -> Result<f64> {
    if !polygon.rings_are_valid() {
        return Err(Error::geometry(
            "polygon ring must be closed with at least 4 vertices",
        ));
    }
    let proj = LocalProjection::at_latitude(ring_centroid(&polygon.exterior).lat);
    let mut area = ring_area_km2(&polygon.exterior, &proj);
    for hole in &polygon.holes {
        area -= ring_area_km2(hole, &proj);
    }
    if area.is_nan() || area <= 0.0 || !area.is_finite() {
        return Err(Error::geometry(format!(
            "degenerate polygon area: {area} km²"
        )));
    }
    Ok(area)
}

/// Mapping from source landuse codes to the twelve activity classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityLegend {
    pub entries: BTreeMap<String, u8>,
    pub class_names: BTreeMap<u8, String>,
}

impl ActivityLegend {
    pub fn new(entries: BTreeMap<String, u8>) -> Result<Self> {
        for (code, class) in &entries {
            if !(1..=NUM_CLASSES as u8).contains(class) {
                return Err(Error::config(format!(
                    "legend entry `{code}` maps to class {class}, outside 1..=12"
                )));
            }
        }
        Ok(ActivityLegend {
            entries,
            class_names: Self::default_class_names(),
        })
    }

    /// The five class names fixed by the legend; the remaining seven are
    /// placeholders and configurable.
    pub fn default_class_names() -> BTreeMap<u8, String> {
        let mut names: BTreeMap<u8, String> = (1..=NUM_CLASSES as u8)
            .map(|c| (c, format!("class-{c}")))
            .collect();
        names.insert(1, "residential".to_string());
        names.insert(4, "educational".to_string());
        names.insert(6, "work".to_string());
        names.insert(8, "civic".to_string());
        names.insert(9, "shopping".to_string());
        names
    }

    pub fn lookup(&self, code: &str) -> Option<u8> {
        self.entries.get(code).copied()
    }

    /// Parse a `landuse_code,activity_class` CSV.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["landuse_code", "activity_class"] {
            return Err(Error::format(format!(
                "expected legend header `landuse_code,activity_class`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries = BTreeMap::new();
        for record in rdr.records() {
            let record = record?;
            let code = record
                .get(0)
                .ok_or_else(|| Error::format("legend row missing landuse_code"))?;
            let class: u8 = record
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::format(format!("bad activity_class for `{code}`")))?;
            entries.insert(code.to_string(), class);
        }
        Self::new(entries)
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["landuse_code", "activity_class"])?;
        for (code, class) in &self.entries {
            wtr.write_record([code.as_str(), &class.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Outcome of [`load_parcels`]: the parcels plus per-reason skip counters.
#[derive(Debug)]
pub struct LoadOutcome {
    pub parcels: Vec<Parcel>,
    pub skipped_unmapped: u64,
    pub skipped_invalid: u64,
}

/// Load a GeoJSON FeatureCollection of Polygon/MultiPolygon features
/// carrying a string `landuse_code` property. Features whose code is absent
/// from the legend, or whose geometry is invalid, are counted and skipped.
/// MultiPolygon parts become independent parcels.
pub fn load_parcels<R: Read>(reader: R, legend: &ActivityLegend) -> Result<LoadOutcome> {
    let mut text = String::new();
    let mut reader = reader;
    reader.read_to_string(&mut text)?;
    // tolerate a leading provenance comment line
    let body: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n");
    let root: Value =
        serde_json::from_str(&body).map_err(|e| Error::format(format!("geojson: {e}")))?;

    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::format("geojson: missing `features` array"))?;

    let mut out = LoadOutcome {
        parcels: Vec::with_capacity(features.len()),
        skipped_unmapped: 0,
        skipped_invalid: 0,
    };

    for (fi, feature) in features.iter().enumerate() {
        let props = feature.get("properties").and_then(Value::as_object);
        let code = props
            .and_then(|p| p.get("landuse_code"))
            .and_then(Value::as_str);
        let code = match code {
            Some(c) => c,
            None => {
                out.skipped_unmapped += 1;
                continue;
            }
        };
        let class = match legend.lookup(code) {
            Some(c) => c,
            None => {
                out.skipped_unmapped += 1;
                continue;
            }
        };

        let base_id = props
            .and_then(|p| p.get("parcel_id"))
            .and_then(Value::as_str)
            .map(str::to_string)
            .or_else(|| match feature.get("id") {
                Some(Value::String(s)) => Some(s.clone()),
                Some(Value::Number(n)) => Some(n.to_string()),
                _ => None,
            })
            .unwrap_or_else(|| format!("f{fi:06}"));

        let geometry = feature.get("geometry");
        let gtype = geometry
            .and_then(|g| g.get("type"))
            .and_then(Value::as_str)
            .unwrap_or("");
        let coords = geometry.and_then(|g| g.get("coordinates"));

        let polygons: Vec<Option<Polygon>> = match (gtype, coords) {
            ("Polygon", Some(c)) => vec![parse_polygon(c)],
            ("MultiPolygon", Some(c)) => match c.as_array() {
                Some(parts) => parts.iter().map(parse_polygon).collect(),
                None => vec![None],
            },
            _ => vec![None],
        };

        let multi = polygons.len() > 1;
        for (pi, polygon) in polygons.into_iter().enumerate() {
            let id = if multi {
                format!("{base_id}#{pi}")
            } else {
                base_id.clone()
            };
            let parcel = polygon.and_then(|poly| Parcel::new(id, poly, code, class).ok());
            match parcel {
                Some(p) => out.parcels.push(p),
                None => out.skipped_invalid += 1,
            }
        }
    }
    Ok(out)
}

fn parse_ring(v: &Value) -> Option<Ring> {
    let positions = v.as_array()?;
    let mut ring = Vec::with_capacity(positions.len());
    for pos in positions {
        let coords = pos.as_array()?;
        if coords.len() < 2 {
            return None;
        }
        ring.push(Point::new(coords[0].as_f64()?, coords[1].as_f64()?));
    }
    Some(ring)
}

fn parse_polygon(v: &Value) -> Option<Polygon> {
    let rings = v.as_array()?;
    let mut iter = rings.iter();
    let exterior = parse_ring(iter.next()?)?;
    let holes: Option<Vec<Ring>> = iter.map(parse_ring).collect();
    Some(Polygon::new(exterior, holes?))
}

/// Serialize parcels as a GeoJSON FeatureCollection in the schema consumed
/// by [`load_parcels`].
pub fn write_parcels_geojson<W: Write>(mut writer: W, parcels: &[Parcel]) -> Result<()> {
    let features: Vec<Value> = parcels
        .iter()
        .map(|p| {
            let ring_json = |ring: &Ring| -> Value {
                Value::Array(ring.iter().map(|pt| json!([pt.lon, pt.lat])).collect())
            };
            let mut rings = vec![ring_json(&p.polygon.exterior)];
            rings.extend(p.polygon.holes.iter().map(ring_json));
            json!({
                "type": "Feature",
                "properties": {
                    "parcel_id": p.parcel_id,
                    "landuse_code": p.landuse_code,
                },
                "geometry": {
                    "type": "Polygon",
                    "coordinates": rings,
                }
            })
        })
        .collect();
    let doc = json!({"type": "FeatureCollection", "features": features});
    serde_json::to_writer(&mut writer, &doc).map_err(|e| Error::format(e.to_string()))?;
    writer.write_all(b"\n")?;
    Ok(())
}

/// Fraction of the total surface area occupied by each activity class.
/// Fractions sum to one.
pub fn class_area_weights(parcels: &[Parcel]) -> BTreeMap<u8, f64> {
    let mut sums = [0.0f64; NUM_CLASSES + 1];
    let mut total = 0.0f64;
    for p in parcels {
        sums[p.activity_class as usize] += p.area_km2;
        total += p.area_km2;
    }
    (1..=NUM_CLASSES as u8)
        .filter(|&c| sums[c as usize] > 0.0)
        .map(|c| (c, sums[c as usize] / total))
        .collect()
}

/// One event annotated with its nearest parcel.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedEvent {
    pub event: GeoEvent,
    pub parcel_id: String,
    pub activity_class: u8,
    pub distance_km: f64,
}

/// Assign every event to its nearest parcel. Order-preserving and safe to
/// run on any worker count.
pub fn join_events(events: &[GeoEvent], index: &SpatialIndex) -> Vec<JoinedEvent> {
    exec::map_slice(events, |e| join_one(e, index))
}

/// Sequential twin of [`join_events`].
pub fn join_events_seq(events: &[GeoEvent], index: &SpatialIndex) -> Vec<JoinedEvent> {
    exec::map_slice_seq(events, |e| join_one(e, index))
}

fn join_one(event: &GeoEvent, index: &SpatialIndex) -> JoinedEvent {
    let (parcel, distance_km) = index.nearest(event.point());
    JoinedEvent {
        event: event.clone(),
        parcel_id: parcel.parcel_id.clone(),
        activity_class: parcel.activity_class,
        distance_km,
    }
}

const JOINED_HEADER: [&str; 7] = [
    "user_id",
    "timestamp",
    "lon",
    "lat",
    "parcel_id",
    "activity_class",
    "distance_km",
];

/// Write the join output CSV:
/// `user_id,timestamp,lon,lat,parcel_id,activity_class,distance_km`.
pub fn write_joined_csv<W: Write>(writer: W, joined: &[JoinedEvent]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(JOINED_HEADER)?;
    for j in joined {
        wtr.write_record([
            j.event.user_id.as_str(),
            &j.event.timestamp.to_string(),
            &j.event.lon.to_string(),
            &j.event.lat.to_string(),
            j.parcel_id.as_str(),
            &j.activity_class.to_string(),
            &j.distance_km.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read the join output CSV produced by [`write_joined_csv`].
pub fn read_joined_csv<R: Read>(reader: R) -> Result<Vec<JoinedEvent>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != JOINED_HEADER {
        return Err(Error::format(format!(
            "expected joined-event header `{}`, got `{}`",
            JOINED_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let r = record?;
        let field = |i: usize| r.get(i).ok_or_else(|| Error::format("short joined row"));
        out.push(JoinedEvent {
            event: GeoEvent {
                user_id: field(0)?.to_string(),
                timestamp: parse_field(field(1)?)?,
                lon: parse_field(field(2)?)?,
                lat: parse_field(field(3)?)?,
            },
            parcel_id: field(4)?.to_string(),
            activity_class: parse_field(field(5)?)?,
            distance_km: parse_field(field(6)?)?,
        });
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(format!("unparseable field `{s}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::geo::KM_PER_DEG;

    pub(crate) fn square_ring(lon0: f64, lat0: f64, side: f64) -> Ring {
        vec![
            Point::new(lon0, lat0),
            Point::new(lon0 + side, lat0),
            Point::new(lon0 + side, lat0 + side),
            Point::new(lon0, lat0 + side),
            Point::new(lon0, lat0),
        ]
    }

    fn legend_r1() -> ActivityLegend {
        ActivityLegend::new(BTreeMap::from([("R1".to_string(), 1u8)])).unwrap()
    }

    #[test]
    fn area_of_unit_square_at_equator() {
        let poly = Polygon::new(square_ring(-0.5, -0.5, 1.0), vec![]);
        let area = polygon_area_km2(&poly).unwrap();
        // centroid latitude 0 → no cosine shrink
        assert_relative_eq!(area, KM_PER_DEG * KM_PER_DEG, max_relative = 1e-12);
    }

    #[test]
    fn area_shrinks_by_cosine_at_latitude_60() {
        let poly = Polygon::new(square_ring(0.0, 59.5, 1.0), vec![]);
        let area = polygon_area_km2(&poly).unwrap();
        let expect = KM_PER_DEG * KM_PER_DEG * (60.0f64).to_radians().cos();
        assert_relative_eq!(area, expect, max_relative = 1e-12);
    }

    #[test]
    fn hole_subtracts_area() {
        // concentric hole of half the side length removes a quarter
        let outer = square_ring(0.0, 0.0, 1.0);
        let hole = square_ring(0.25, 0.25, 0.5);
        let full = polygon_area_km2(&Polygon::new(outer.clone(), vec![])).unwrap();
        let holed = polygon_area_km2(&Polygon::new(outer, vec![hole])).unwrap();
        assert_relative_eq!(holed, 0.75 * full, max_relative = 1e-12);
    }

    #[test]
    fn degenerate_polygon_is_an_error() {
        let flat = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(0.0, 0.0),
        ];
        assert!(matches!(
            polygon_area_km2(&Polygon::new(flat, vec![])),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn load_single_mapped_feature() {
        let geojson = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"landuse_code":"R1","parcel_id":"a"},
             "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1],[0,0]]]}}
        ]}"#;
        let out = load_parcels(geojson.as_bytes(), &legend_r1()).unwrap();
        assert_eq!(out.parcels.len(), 1);
        assert_eq!(out.parcels[0].activity_class, 1);
        assert_eq!(out.parcels[0].parcel_id, "a");
        assert_eq!(out.skipped_unmapped, 0);
    }

    #[test]
    fn unmapped_code_is_skipped_and_counted() {
        let geojson = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"landuse_code":"ZZ"},
             "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1],[0,0]]]}}
        ]}"#;
        let out = load_parcels(geojson.as_bytes(), &legend_r1()).unwrap();
        assert!(out.parcels.is_empty());
        assert_eq!(out.skipped_unmapped, 1);
    }

    #[test]
    fn invalid_ring_is_skipped_and_counted() {
        let geojson = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"landuse_code":"R1"},
             "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1]]]}}
        ]}"#;
        let out = load_parcels(geojson.as_bytes(), &legend_r1()).unwrap();
        assert!(out.parcels.is_empty());
        assert_eq!(out.skipped_invalid, 1);
    }

    #[test]
    fn feature_with_hole_keeps_three_quarters_of_area() {
        let geojson = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"landuse_code":"R1"},
             "geometry":{"type":"Polygon","coordinates":[
                [[0,0],[1,0],[1,1],[0,1],[0,0]],
                [[0.25,0.25],[0.75,0.25],[0.75,0.75],[0.25,0.75],[0.25,0.25]]
             ]}}
        ]}"#;
        let out = load_parcels(geojson.as_bytes(), &legend_r1()).unwrap();
        let full = polygon_area_km2(&Polygon::new(square_ring(0.0, 0.0, 1.0), vec![])).unwrap();
        assert_relative_eq!(out.parcels[0].area_km2, 0.75 * full, max_relative = 1e-12);
    }

    #[test]
    fn multipolygon_parts_become_independent_parcels() {
        let geojson = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"landuse_code":"R1","parcel_id":"m"},
             "geometry":{"type":"MultiPolygon","coordinates":[
                [[[0,0],[1,0],[1,1],[0,1],[0,0]]],
                [[[5,5],[6,5],[6,6],[5,6],[5,5]]]
             ]}}
        ]}"#;
        let out = load_parcels(geojson.as_bytes(), &legend_r1()).unwrap();
        assert_eq!(out.parcels.len(), 2);
        assert_eq!(out.parcels[0].parcel_id, "m#0");
        assert_eq!(out.parcels[1].parcel_id, "m#1");
    }

    #[test]
    fn geojson_round_trip() {
        let geojson = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"landuse_code":"R1","parcel_id":"a"},
             "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1],[0,0]]]}}
        ]}"#;
        let out = load_parcels(geojson.as_bytes(), &legend_r1()).unwrap();
        let mut buf = Vec::new();
        write_parcels_geojson(&mut buf, &out.parcels).unwrap();
        let back = load_parcels(buf.as_slice(), &legend_r1()).unwrap();
        assert_eq!(back.parcels.len(), 1);
        assert_eq!(back.parcels[0].parcel_id, "a");
        assert_relative_eq!(
            back.parcels[0].area_km2,
            out.parcels[0].area_km2,
            max_relative = 1e-15
        );
    }

    #[test]
    fn weights_single_parcel() {
        let p = Parcel::new("a", Polygon::new(square_ring(0.0, 0.0, 1.0), vec![]), "R1", 1).unwrap();
        let w = class_area_weights(&[p]);
        assert_eq!(w, BTreeMap::from([(1u8, 1.0f64)]));
    }

    #[test]
    fn weights_quarter_and_three_quarters() {
        // class 1: one 1x1 square; class 6: one sqrt(3)x sqrt(3)-ish — use
        // three unit squares instead for exact arithmetic.
        let mk = |id: &str, lon0: f64, class: u8| {
            Parcel::new(
                id,
                Polygon::new(square_ring(lon0, 0.0, 1.0), vec![]),
                "X",
                class,
            )
            .unwrap()
        };
        let parcels = vec![mk("a", 0.0, 1), mk("b", 10.0, 6), mk("c", 20.0, 6), mk("d", 30.0, 6)];
        let w = class_area_weights(&parcels);
        assert_relative_eq!(w[&1], 0.25, max_relative = 1e-9);
        assert_relative_eq!(w[&6], 0.75, max_relative = 1e-9);
    }

    #[test]
    fn weights_match_independent_summation_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let parcels: Vec<Parcel> = (0..50)
            .map(|i| {
                let lon0 = rng.gen_range(-10.0..10.0);
                let lat0 = rng.gen_range(-10.0..10.0);
                let side = rng.gen_range(0.01..0.5);
                let class = rng.gen_range(1..=12u8);
                Parcel::new(
                    format!("p{i}"),
                    Polygon::new(square_ring(lon0, lat0, side), vec![]),
                    "X",
                    class,
                )
                .unwrap()
            })
            .collect();
        let w = class_area_weights(&parcels);

        // independent summation
        let total: f64 = parcels.iter().map(|p| p.area_km2).sum();
        for c in 1..=12u8 {
            let class_sum: f64 = parcels
                .iter()
                .filter(|p| p.activity_class == c)
                .map(|p| p.area_km2)
                .sum();
            if class_sum > 0.0 {
                assert_relative_eq!(w[&c], class_sum / total, max_relative = 1e-12);
            } else {
                assert!(!w.contains_key(&c));
            }
        }
        let sum: f64 = w.values().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn legend_csv_round_trip_and_default_names() {
        let legend = ActivityLegend::new(BTreeMap::from([
            ("R1".to_string(), 1u8),
            ("EDU".to_string(), 4u8),
        ]))
        .unwrap();
        let mut buf = Vec::new();
        legend.to_csv(&mut buf).unwrap();
        let back = ActivityLegend::from_csv(buf.as_slice()).unwrap();
        assert_eq!(back.entries, legend.entries);

        let names = ActivityLegend::default_class_names();
        assert_eq!(names[&1], "residential");
        assert_eq!(names[&4], "educational");
        assert_eq!(names[&6], "work");
        assert_eq!(names[&8], "civic");
        assert_eq!(names[&9], "shopping");
        assert_eq!(names.len(), 12);
    }

    #[test]
    fn legend_rejects_out_of_range_class() {
        let err = ActivityLegend::new(BTreeMap::from([("X".to_string(), 13u8)]));
        assert!(err.is_err());
    }
}
