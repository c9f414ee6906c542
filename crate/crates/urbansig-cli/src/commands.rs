//! Pipeline subcommands. Each stage is a pure function of its input files
//! and configuration and writes its outputs under `out_dir`, so re-running
//! any stage with unchanged inputs reproduces its outputs byte for byte and
//! `run` is exactly the chain of the individual stages.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use urbansig::ingest::{self, FilterPolicy};
use urbansig::keylocations::{self, DbscanParams};
use urbansig::landuse::{self, ActivityLegend};
use urbansig::metrics::{self, Normalization};
use urbansig::similarity;
use urbansig::synth::{self, SynthConfig};

use crate::config::{CityConfig, PipelineConfig};
use crate::provenance::write_output;

pub struct Ctx {
    pub config: PipelineConfig,
    pub provenance: String,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn ensure_out_dir(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.config.out_dir).with_context(|| {
            format!("cannot create out_dir `{}`", self.config.out_dir.display())
        })
    }
}

/// Flag overrides for `filter`.
#[derive(Debug, Default, Clone)]
pub struct FilterOverrides {
    pub min_events_per_year: Option<u32>,
    pub min_active_days: Option<u32>,
    pub speed_percentile: Option<f64>,
}

/// Flag overrides for `cluster`.
#[derive(Debug, Default, Clone)]
pub struct ClusterOverrides {
    pub eps: Option<f64>,
    pub min_pts: Option<usize>,
}

/// Flag overrides for `signatures`.
#[derive(Debug, Default, Clone)]
pub struct SignatureOverrides {
    pub classes: Option<Vec<u8>>,
    pub norm: Option<Normalization>,
    pub tz_offset_hours: Option<i32>,
    pub include_weekends: bool,
}

fn effective_policy(city: &CityConfig, ov: &FilterOverrides) -> FilterPolicy {
    let mut policy = city.filter_policy.clone();
    if let Some(v) = ov.min_events_per_year {
        policy.min_events_per_year = v;
    }
    if let Some(v) = ov.min_active_days {
        policy.min_active_days = v;
    }
    if let Some(v) = ov.speed_percentile {
        policy.speed_percentile = v;
    }
    policy
}

fn effective_dbscan(city: &CityConfig, ov: &ClusterOverrides) -> DbscanParams {
    let mut params = city.dbscan;
    if let Some(v) = ov.eps {
        params.eps = v;
    }
    if let Some(v) = ov.min_pts {
        params.min_pts = v;
    }
    params
}

fn open_source(path: &Path) -> anyhow::Result<File> {
    File::open(path).with_context(|| format!("cannot open `{}`", path.display()))
}

/// Open a file produced by an earlier stage, naming that stage on failure.
fn open_stage(path: &Path, stage: &str) -> anyhow::Result<File> {
    File::open(path).map_err(|_| {
        anyhow!(
            "missing `{}` — run the `{stage}` stage first",
            path.display()
        )
    })
}

fn load_city_parcels(city: &CityConfig) -> anyhow::Result<Vec<landuse::Parcel>> {
    let legend = ActivityLegend::from_csv(open_source(&city.legend_path)?)
        .with_context(|| format!("legend `{}`", city.legend_path.display()))?;
    let outcome = landuse::load_parcels(open_source(&city.parcels_path)?, &legend)
        .with_context(|| format!("parcels `{}`", city.parcels_path.display()))?;
    if outcome.skipped_unmapped + outcome.skipped_invalid > 0 {
        eprintln!(
            "[{}] parcels: skipped {} unmapped, {} invalid",
            city.city_tag, outcome.skipped_unmapped, outcome.skipped_invalid
        );
    }
    if outcome.parcels.is_empty() {
        bail!(
            "no usable parcels in `{}`",
            city.parcels_path.display()
        );
    }
    Ok(outcome.parcels)
}

/// `filter`: dedupe + user-quality filters; writes the filtered event CSV
/// and the JSON rejection report.
pub fn cmd_filter(ctx: &Ctx, cities: &[&CityConfig], ov: &FilterOverrides) -> anyhow::Result<()> {
    ctx.ensure_out_dir()?;
    for city in cities {
        let policy = effective_policy(city, ov);
        let parsed = ingest::parse_events(open_source(&city.events_path)?)
            .with_context(|| format!("events `{}`", city.events_path.display()))?;

        let (events, outside_bbox) = match &policy.bounding_box {
            Some(bbox) => ingest::clip_to_bbox(parsed.events, bbox),
            None => (parsed.events, 0),
        };
        let (events, duplicates) = ingest::dedupe(events);
        let (kept, mut report) = ingest::filter_users(events, &policy)?;
        report.malformed_rows = parsed.rows_skipped;
        report.duplicates_removed = duplicates;
        report.events_outside_bbox = outside_bbox;
        report.events_in += duplicates + outside_bbox;
        report.events_removed = report.events_in - report.events_kept;

        write_output(&ctx.out(&format!("{}_filtered.csv", city.city_tag)), &ctx.provenance, |w| {
            ingest::write_events_csv(w, &kept)
        })?;
        write_output(&ctx.out(&format!("{}_rejections.json", city.city_tag)), &ctx.provenance, |w| {
            serde_json::to_writer_pretty(&mut *w, &report)
                .map_err(|e| urbansig::Error::Format(e.to_string()))?;
            w.write_all(b"\n")?;
            Ok(())
        })?;
        println!(
            "[{}] filter: kept {} of {} events ({} users removed)",
            city.city_tag, report.events_kept, report.events_in, report.users_removed
        );
    }
    Ok(())
}

/// `join`: assign every filtered event to its nearest parcel.
pub fn cmd_join(ctx: &Ctx, cities: &[&CityConfig]) -> anyhow::Result<()> {
    ctx.ensure_out_dir()?;
    for city in cities {
        let filtered = ctx.out(&format!("{}_filtered.csv", city.city_tag));
        let events = ingest::parse_events(open_stage(&filtered, "filter")?)?.events;
        let parcels = load_city_parcels(city)?;
        let index = urbansig::index::build_index(parcels)?;
        let joined = landuse::join_events(&events, &index);
        write_output(&ctx.out(&format!("{}_joined.csv", city.city_tag)), &ctx.provenance, |w| {
            landuse::write_joined_csv(w, &joined)
        })?;
        let inside = joined.iter().filter(|j| j.distance_km == 0.0).count();
        println!(
            "[{}] join: {} events against {} parcels ({} inside a parcel)",
            city.city_tag,
            joined.len(),
            index.len(),
            inside
        );
    }
    Ok(())
}

/// `cluster`: per-user DBSCAN key locations.
pub fn cmd_cluster(ctx: &Ctx, cities: &[&CityConfig], ov: &ClusterOverrides) -> anyhow::Result<()> {
    ctx.ensure_out_dir()?;
    for city in cities {
        let params = effective_dbscan(city, ov);
        params.validate()?;
        let joined_path = ctx.out(&format!("{}_joined.csv", city.city_tag));
        let joined = landuse::read_joined_csv(open_stage(&joined_path, "join")?)?;
        let locations = keylocations::extract_all_key_locations(&joined, &params);
        write_output(
            &ctx.out(&format!("{}_keylocations.csv", city.city_tag)),
            &ctx.provenance,
            |w| keylocations::write_keylocations_csv(w, &locations),
        )?;
        let users: std::collections::HashSet<&str> =
            locations.iter().map(|l| l.user_id.as_str()).collect();
        println!(
            "[{}] cluster: {} key locations from {} users",
            city.city_tag,
            locations.len(),
            users.len()
        );
    }
    Ok(())
}

/// `bias`: weight regression of key-location shares against map area shares.
pub fn cmd_bias(ctx: &Ctx, cities: &[&CityConfig]) -> anyhow::Result<()> {
    ctx.ensure_out_dir()?;
    for city in cities {
        let keyloc_path = ctx.out(&format!("{}_keylocations.csv", city.city_tag));
        let locations = keylocations::read_keylocations_csv(open_stage(&keyloc_path, "cluster")?)?;
        let twitter_weights = metrics::twitter_class_weights(&locations)?;
        let parcels = load_city_parcels(city)?;
        let map_weights = landuse::class_area_weights(&parcels);
        let report = metrics::locational_bias(&city.city_tag, &twitter_weights, &map_weights)?;
        write_output(&ctx.out(&format!("{}_bias.json", city.city_tag)), &ctx.provenance, |w| {
            metrics::write_bias_json(w, &report)
        })?;
        write_output(&ctx.out(&format!("{}_weights.csv", city.city_tag)), &ctx.provenance, |w| {
            metrics::write_weight_pairs_csv(w, &report)
        })?;
        println!(
            "[{}] bias: slope {:.4}, intercept {:.4}, r² {:.4} over {} classes",
            city.city_tag, report.slope, report.intercept, report.r_squared, report.n
        );
    }
    Ok(())
}

/// `signatures`: normalized hourly weekday profiles per activity class.
pub fn cmd_signatures(
    ctx: &Ctx,
    cities: &[&CityConfig],
    ov: &SignatureOverrides,
) -> anyhow::Result<()> {
    ctx.ensure_out_dir()?;
    for city in cities {
        let joined_path = ctx.out(&format!("{}_joined.csv", city.city_tag));
        let joined = landuse::read_joined_csv(open_stage(&joined_path, "join")?)?;
        let classes = ov.classes.clone().unwrap_or_else(|| city.signature_classes.clone());
        let norm = ov.norm.unwrap_or(city.norm);
        let tz = ov.tz_offset_hours.unwrap_or(city.tz_offset_hours);
        let signatures = metrics::signatures_for_classes(
            &joined,
            &city.city_tag,
            &classes,
            tz,
            !ov.include_weekends,
            norm,
        );
        if signatures.is_empty() {
            bail!(
                "[{}] no class produced a signature; nothing to write",
                city.city_tag
            );
        }
        write_output(
            &ctx.out(&format!("{}_signatures.csv", city.city_tag)),
            &ctx.provenance,
            |w| metrics::write_signatures_csv(w, &signatures),
        )?;
        println!(
            "[{}] signatures: {} classes (requested {})",
            city.city_tag,
            signatures.len(),
            classes.len()
        );
    }
    Ok(())
}

/// `rankplot`: per-rank class composition of key locations.
pub fn cmd_rankplot(ctx: &Ctx, cities: &[&CityConfig]) -> anyhow::Result<()> {
    ctx.ensure_out_dir()?;
    for city in cities {
        let keyloc_path = ctx.out(&format!("{}_keylocations.csv", city.city_tag));
        let locations = keylocations::read_keylocations_csv(open_stage(&keyloc_path, "cluster")?)?;
        let composition = keylocations::rank_composition(&locations);
        write_output(
            &ctx.out(&format!("{}_rankplot.csv", city.city_tag)),
            &ctx.provenance,
            |w| keylocations::write_rank_composition_csv(w, &composition),
        )?;
        println!(
            "[{}] rankplot: {} ranks",
            city.city_tag,
            composition.len()
        );
    }
    Ok(())
}

/// `similarity`: DTW distance matrix and UPGMA dendrogram across cities.
/// With no explicit files, reads every configured city's signatures.
pub fn cmd_similarity(
    ctx: &Ctx,
    files: &[PathBuf],
    classes: Option<&[u8]>,
    band: Option<usize>,
) -> anyhow::Result<()> {
    ctx.ensure_out_dir()?;
    let paths: Vec<PathBuf> = if files.is_empty() {
        ctx.config
            .cities
            .keys()
            .map(|tag| ctx.out(&format!("{tag}_signatures.csv")))
            .collect()
    } else {
        files.to_vec()
    };
    if paths.is_empty() {
        bail!("no signature files: pass them as arguments or configure cities");
    }

    let mut signatures = Vec::new();
    for path in &paths {
        let sigs = metrics::read_signatures_csv(open_stage(path, "signatures")?)
            .with_context(|| format!("signatures `{}`", path.display()))?;
        signatures.extend(sigs);
    }
    if let Some(subset) = classes {
        signatures.retain(|s| subset.contains(&s.activity_class));
    }
    if signatures.len() < 2 {
        bail!("similarity needs at least 2 signatures after filtering");
    }

    let matrix = similarity::distance_matrix(&signatures, band)?;
    let tree = similarity::agglomerative_cluster(&matrix)?;

    write_output(&ctx.out("distance_matrix.csv"), &ctx.provenance, |w| {
        similarity::write_distance_matrix_csv(w, &matrix)
    })?;
    write_output(&ctx.out("dendrogram.nwk"), &ctx.provenance, |w| {
        w.write_all(similarity::dendrogram_to_newick(&tree).as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    write_output(&ctx.out("dendrogram.json"), &ctx.provenance, |w| {
        similarity::write_dendrogram_json(w, &tree)
    })?;
    println!(
        "similarity: {} signatures, first merge at {:.6}",
        matrix.len(),
        tree.merges.first().map_or(0.0, |m| m.height)
    );
    Ok(())
}

/// `synth`: generate synthetic corpora for the configured synth sections.
/// The optional base seed replaces each section's seed with `base + index`
/// (sections in tag order) so multi-city runs stay distinguishable.
pub fn cmd_synth(ctx: &Ctx, tag_filter: Option<&str>, seed: Option<u64>) -> anyhow::Result<()> {
    ctx.ensure_out_dir()?;
    let sections: Vec<(&String, &SynthConfig)> = ctx
        .config
        .synth
        .iter()
        .filter(|(tag, _)| tag_filter.is_none_or(|t| t == tag.as_str()))
        .collect();
    if sections.is_empty() {
        match tag_filter {
            Some(tag) => bail!("no [synth.{tag}] section in the config"),
            None => bail!("no [synth.*] sections in the config"),
        }
    }

    for (i, (tag, section)) in sections.iter().enumerate() {
        let mut config = (*section).clone();
        if let Some(base) = seed {
            config.seed = base + i as u64;
        }
        let (parcels, legend) = synth::generate_city(&config)?;
        let (events, truth) = synth::generate_events(&config, &parcels)?;

        write_output(&ctx.out(&format!("{tag}_events.csv")), &ctx.provenance, |w| {
            ingest::write_events_csv(w, &events)
        })?;
        write_output(&ctx.out(&format!("{tag}_parcels.geojson")), &ctx.provenance, |w| {
            landuse::write_parcels_geojson(w, &parcels)
        })?;
        write_output(&ctx.out(&format!("{tag}_legend.csv")), &ctx.provenance, |w| {
            legend.to_csv(w)
        })?;
        write_output(&ctx.out(&format!("{tag}_truth.json")), &ctx.provenance, |w| {
            synth::write_ground_truth_json(w, &truth)
        })?;
        println!(
            "[{tag}] synth: {} parcels, {} users, {} events (seed {})",
            parcels.len(),
            config.n_users,
            events.len(),
            config.seed
        );
    }
    Ok(())
}

/// `run`: the full per-city chain (filter, join, cluster, bias, signatures,
/// rankplot) followed by the cross-city similarity stage.
pub fn cmd_run(ctx: &Ctx) -> anyhow::Result<()> {
    let cities: Vec<&CityConfig> = ctx.config.cities.values().collect();
    if cities.is_empty() {
        bail!("no [city.*] sections in the config");
    }
    cmd_filter(ctx, &cities, &FilterOverrides::default())?;
    cmd_join(ctx, &cities)?;
    cmd_cluster(ctx, &cities, &ClusterOverrides::default())?;
    cmd_bias(ctx, &cities)?;
    cmd_signatures(ctx, &cities, &SignatureOverrides::default())?;
    cmd_rankplot(ctx, &cities)?;
    cmd_similarity(ctx, &[], None, None)?;
    Ok(())
}
