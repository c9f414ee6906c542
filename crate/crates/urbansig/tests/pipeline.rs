//! Library-level pipeline tests: planted-fault filtering and the full
//! stage chain on a synthetic city.

use std::collections::BTreeSet;

use urbansig::index::{build_index, nearest_parcel};
use urbansig::ingest::{dedupe, filter_users, FilterPolicy, GeoEvent};
use urbansig::keylocations::{extract_all_key_locations, rank_composition, DbscanParams};
use urbansig::landuse::{class_area_weights, join_events};
use urbansig::metrics::{
    locational_bias, signatures_for_classes, twitter_class_weights, Normalization,
};
use urbansig::similarity::{agglomerative_cluster, dendrogram_to_newick, distance_matrix};
use urbansig::synth::{generate_city, generate_events, SynthConfig};

fn day_ts(day: u32, hour: u32, minute: u32) -> i64 {
    // days counted from 2013-01-01
    1_356_998_400 + i64::from(day) * 86_400 + i64::from(hour) * 3_600 + i64::from(minute) * 60
}

/// A sustained user whose consecutive displacements stay at walking speed.
fn walker(user: u16, jitter: f64) -> Vec<GeoEvent> {
    let mut events = Vec::new();
    for day in 0..40u32 {
        events.push(GeoEvent {
            user_id: format!("w{user:03}"),
            timestamp: day_ts(day * 2, 9 + (day % 3), user as u32 % 60),
            lon: -87.6 + f64::from(user) * 1e-3 + f64::from(day) * 1e-5 * jitter,
            lat: 41.8 + f64::from(user) * 1e-3,
        });
    }
    events
}

/// Same cadence, but every other hop crosses ~8 degrees in one minute.
fn teleporter(user: u16) -> Vec<GeoEvent> {
    let mut events = Vec::new();
    for day in 0..40u32 {
        let far = day % 2 == 0;
        events.push(GeoEvent {
            user_id: format!("t{user:03}"),
            timestamp: day_ts(day * 2, 9, day % 2),
            lon: if far { -87.6 } else { -79.4 },
            lat: 41.8,
        });
    }
    events
}

#[test]
fn planted_teleporters_are_exactly_the_removed_users() {
    let mut events = Vec::new();
    for u in 0..300u16 {
        events.extend(walker(u, 1.0));
    }
    for u in 0..3u16 {
        events.extend(teleporter(u));
    }
    let planted: BTreeSet<String> = (0..3u16).map(|u| format!("t{u:03}")).collect();

    let (events, _) = dedupe(events);
    let (kept, report) = filter_users(events, &FilterPolicy::default()).unwrap();

    let kept_users: BTreeSet<String> = kept.iter().map(|e| e.user_id.clone()).collect();
    let removed: BTreeSet<String> = (0..300u16)
        .map(|u| format!("w{u:03}"))
        .chain(planted.iter().cloned())
        .filter(|u| !kept_users.contains(u))
        .collect();

    assert_eq!(removed, planted, "exactly the teleporters must be removed");
    assert_eq!(report.users_over_speed, 3);
    assert_eq!(report.users_removed, 3);
    assert_eq!(report.users_low_yearly_rate, 0);
    assert_eq!(report.users_low_active_days, 0);
    assert!(report.speed_threshold_kmh.is_finite());
}

#[test]
fn teleporters_at_the_boundary_do_not_drag_walkers_out() {
    // with 303 users at q = 0.99 the nearest-rank threshold is the 300th
    // order statistic: the fastest walker, who must survive the strict
    // comparison
    let mut events = Vec::new();
    for u in 0..300u16 {
        events.extend(walker(u, f64::from(u % 7) + 1.0));
    }
    for u in 0..3u16 {
        events.extend(teleporter(u));
    }
    let (events, _) = dedupe(events);
    let (kept, report) = filter_users(events, &FilterPolicy::default()).unwrap();
    let kept_users: BTreeSet<&str> = kept.iter().map(|e| e.user_id.as_str()).collect();
    assert_eq!(kept_users.len(), 300);
    assert_eq!(report.users_over_speed, 3);
}

#[test]
fn library_pipeline_end_to_end_on_a_synthetic_city() {
    let config = SynthConfig {
        seed: 77,
        grid: 15,
        n_users: 400,
        events_per_user: 25.0,
        ..SynthConfig::default()
    };
    let (parcels, legend) = generate_city(&config).unwrap();
    assert_eq!(legend.entries.len(), 12);
    let (events, _truth) = generate_events(&config, &parcels).unwrap();

    let (events, duplicates) = dedupe(events);
    assert_eq!(duplicates, 0);
    let (kept, report) = filter_users(events, &FilterPolicy::default()).unwrap();
    assert!(report.users_removed <= 8, "only the speed tail should go");

    let index = build_index(parcels).unwrap();
    let (pid, d) = nearest_parcel(&index, urbansig::geo::Point::new(-87.85, 41.65));
    assert!(!pid.is_empty());
    assert_eq!(d, 0.0, "an interior point joins at distance zero");

    let joined = join_events(&kept, &index);
    let locations = extract_all_key_locations(&joined, &DbscanParams::default());
    assert!(!locations.is_empty());

    // per-user ranks are 1..k
    let mut last_user = "";
    let mut expected_rank = 1;
    for loc in &locations {
        if loc.user_id != last_user {
            last_user = &loc.user_id;
            expected_rank = 1;
        }
        assert_eq!(loc.rank, expected_rank);
        expected_rank += 1;
    }

    let composition = rank_composition(&locations);
    assert!(!composition.is_empty());

    let twitter = twitter_class_weights(&locations).unwrap();
    let map = class_area_weights(index.parcels());
    let bias = locational_bias("E2E", &twitter, &map).unwrap();
    assert!((bias.slope - 1.0).abs() < 0.2, "unbiased city, slope {}", bias.slope);

    let signatures = signatures_for_classes(
        &joined,
        "E2E",
        &[1, 4, 6, 8, 9],
        0,
        true,
        Normalization::Sum,
    );
    assert_eq!(signatures.len(), 5);
    let matrix = distance_matrix(&signatures, None).unwrap();
    let tree = agglomerative_cluster(&matrix).unwrap();
    let newick = dendrogram_to_newick(&tree);
    assert!(newick.starts_with('(') && newick.ends_with(';'));
    assert_eq!(tree.merges.len(), 4);
}
