//! Pipeline configuration: a TOML file with one `[city.TAG]` section per
//! input corpus and optional `[synth.TAG]` sections describing synthetic
//! cities. Every CLI flag overrides its config key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use urbansig::geo::Rect;
use urbansig::ingest::FilterPolicy;
use urbansig::keylocations::DbscanParams;
use urbansig::landuse::NUM_CLASSES;
use urbansig::metrics::Normalization;
use urbansig::synth::SynthConfig;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    out_dir: Option<String>,
    threads: Option<usize>,
    #[serde(default)]
    city: BTreeMap<String, RawCity>,
    #[serde(default)]
    synth: BTreeMap<String, SynthConfig>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawCity {
    events: Option<String>,
    parcels: Option<String>,
    legend: Option<String>,
    tz_offset_hours: Option<i32>,
    /// `[min_lon, min_lat, max_lon, max_lat]`
    bbox: Option<[f64; 4]>,
    min_events_per_year: Option<u32>,
    min_active_days: Option<u32>,
    speed_percentile: Option<f64>,
    eps: Option<f64>,
    min_pts: Option<usize>,
    signature_classes: Option<Vec<u8>>,
    norm: Option<String>,
}

/// Resolved per-city settings.
#[derive(Debug, Clone)]
pub struct CityConfig {
    pub city_tag: String,
    pub events_path: PathBuf,
    pub parcels_path: PathBuf,
    pub legend_path: PathBuf,
    pub tz_offset_hours: i32,
    pub filter_policy: FilterPolicy,
    pub dbscan: DbscanParams,
    pub signature_classes: Vec<u8>,
    pub norm: Normalization,
}

/// Whole-pipeline settings resolved from the config file.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    pub cities: BTreeMap<String, CityConfig>,
    pub synth: BTreeMap<String, SynthConfig>,
}

impl PipelineConfig {
    /// Parse and resolve a config file. Relative paths (including
    /// `out_dir`) are taken relative to the config file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config `{}`", path.display()))?;
        let raw: RawConfig =
            toml::from_str(&text).with_context(|| format!("bad config `{}`", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));

        let resolve = |p: &str| -> PathBuf {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                base.join(pb)
            }
        };

        let mut cities = BTreeMap::new();
        for (tag, raw_city) in raw.city {
            let need = |field: Option<String>, name: &str| -> anyhow::Result<PathBuf> {
                let value =
                    field.ok_or_else(|| anyhow::anyhow!("[city.{tag}] is missing `{name}`"))?;
                if value.is_empty() {
                    bail!("[city.{tag}] `{name}` is empty");
                }
                Ok(resolve(&value))
            };
            let tz = raw_city.tz_offset_hours.unwrap_or(0);
            if !(-12..=14).contains(&tz) {
                bail!("[city.{tag}] tz_offset_hours must be in [-12, 14], got {tz}");
            }
            let bounding_box = raw_city.bbox.map(|b| Rect {
                min_lon: b[0],
                min_lat: b[1],
                max_lon: b[2],
                max_lat: b[3],
            });
            let defaults = FilterPolicy::default();
            let filter_policy = FilterPolicy {
                min_events_per_year: raw_city.min_events_per_year.unwrap_or(defaults.min_events_per_year),
                min_active_days: raw_city.min_active_days.unwrap_or(defaults.min_active_days),
                speed_percentile: raw_city.speed_percentile.unwrap_or(defaults.speed_percentile),
                bounding_box,
            };
            let dbscan_defaults = DbscanParams::default();
            let dbscan = DbscanParams {
                eps: raw_city.eps.unwrap_or(dbscan_defaults.eps),
                min_pts: raw_city.min_pts.unwrap_or(dbscan_defaults.min_pts),
            };
            let signature_classes = match raw_city.signature_classes {
                Some(classes) => {
                    for c in &classes {
                        if !(1..=NUM_CLASSES as u8).contains(c) {
                            bail!("[city.{tag}] signature class {c} outside 1..=12");
                        }
                    }
                    classes
                }
                None => (1..=NUM_CLASSES as u8).collect(),
            };
            let norm = parse_norm(raw_city.norm.as_deref())
                .with_context(|| format!("[city.{tag}] bad `norm`"))?;

            cities.insert(
                tag.clone(),
                CityConfig {
                    city_tag: tag.clone(),
                    events_path: need(raw_city.events, "events")?,
                    parcels_path: need(raw_city.parcels, "parcels")?,
                    legend_path: need(raw_city.legend, "legend")?,
                    tz_offset_hours: tz,
                    filter_policy,
                    dbscan,
                    signature_classes,
                    norm,
                },
            );
        }

        let out_dir = resolve(raw.out_dir.as_deref().unwrap_or("out"));
        Ok(PipelineConfig {
            out_dir,
            threads: raw.threads,
            cities,
            synth: raw.synth,
        })
    }

    /// Tags to process: the requested one, or every configured city.
    pub fn select_cities(&self, requested: Option<&str>) -> anyhow::Result<Vec<&CityConfig>> {
        match requested {
            Some(tag) => {
                let city = self
                    .cities
                    .get(tag)
                    .ok_or_else(|| anyhow::anyhow!("no [city.{tag}] section in the config"))?;
                Ok(vec![city])
            }
            None => Ok(self.cities.values().collect()),
        }
    }
}

pub fn parse_norm(name: Option<&str>) -> anyhow::Result<Normalization> {
    match name {
        None | Some("sum") => Ok(Normalization::Sum),
        Some("max") => Ok(Normalization::Max),
        Some(other) => bail!("normalization must be `sum` or `max`, got `{other}`"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        std::fs::write(
            &path,
            r#"
out_dir = "work"

[city.CH]
events = "ch.csv"
parcels = "ch.geojson"
legend = "legend.csv"
tz_offset_hours = -6
"#,
        )
        .unwrap();
        let config = PipelineConfig::load(&path).unwrap();
        assert_eq!(config.out_dir, dir.path().join("work"));
        let ch = &config.cities["CH"];
        assert_eq!(ch.tz_offset_hours, -6);
        assert_eq!(ch.filter_policy.min_events_per_year, 10);
        assert_eq!(ch.filter_policy.min_active_days, 30);
        assert_eq!(ch.dbscan.eps, 0.00225);
        assert_eq!(ch.dbscan.min_pts, 3);
        assert_eq!(ch.signature_classes.len(), 12);
        assert_eq!(ch.events_path, dir.path().join("ch.csv"));
    }

    #[test]
    fn overrides_and_synth_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        std::fs::write(
            &path,
            r#"
[city.SD]
events = "sd.csv"
parcels = "sd.geojson"
legend = "legend.csv"
min_events_per_year = 5
eps = 0.001
signature_classes = [1, 4, 6, 8, 9]
norm = "max"
bbox = [-117.3, 32.5, -116.9, 33.1]

[synth.SD]
seed = 7
grid = 12
n_users = 100
"#,
        )
        .unwrap();
        let config = PipelineConfig::load(&path).unwrap();
        let sd = &config.cities["SD"];
        assert_eq!(sd.filter_policy.min_events_per_year, 5);
        assert_eq!(sd.dbscan.eps, 0.001);
        assert_eq!(sd.signature_classes, vec![1, 4, 6, 8, 9]);
        assert_eq!(sd.norm, Normalization::Max);
        assert!(sd.filter_policy.bounding_box.is_some());
        let synth = &config.synth["SD"];
        assert_eq!(synth.seed, 7);
        assert_eq!(synth.grid, 12);
        assert_eq!(synth.n_users, 100);
        // untouched fields keep library defaults
        assert_eq!(synth.cell_deg, SynthConfig::default().cell_deg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        std::fs::write(&path, "definitely_not_a_key = 1\n").unwrap();
        assert!(PipelineConfig::load(&path).is_err());
    }

    #[test]
    fn tz_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        std::fs::write(
            &path,
            r#"
[city.X]
events = "a"
parcels = "b"
legend = "c"
tz_offset_hours = 20
"#,
        )
        .unwrap();
        assert!(PipelineConfig::load(&path).is_err());
    }
}
