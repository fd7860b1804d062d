use super::*;
use std::path::PathBuf;

pub(crate) fn data_file(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("cannot read {}: {e}", p.display()))
}

const TWO_BUS: &str = "
function mpc = two_bus
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0 0 0 0 1 1.0 0 0 1 1.1 0.9;
    2 1 10 2 0 0 1 1.0 0 0 1 1.1 0.9;
];
mpc.gen = [
    1 0 0 0 0 1.0 100 1 0 0 0 0 0 0 0 0 0 0 0 0 0;
];
mpc.branch = [
    1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
";

#[test]
fn parses_minimal_two_bus_case() {
    let case = parse_case(TWO_BUS).unwrap();
    assert_eq!(case.n(), 2);
    assert_eq!(case.branches.len(), 1);
    assert_eq!(case.gens.len(), 1);
    assert_eq!(case.buses[0].kind, BusKind::Slack);
    assert_eq!(case.buses[1].kind, BusKind::Pq);
    assert_eq!(case.branches[0].x, 0.1);
    assert_eq!(case.branches[0].tap_ratio(), 1.0);
}

#[test]
fn duplicate_bus_id_is_rejected() {
    let text = TWO_BUS.replace("2 1 10 2", "1 1 10 2");
    match parse_case(&text) {
        Err(CaseError::DuplicateBusId(1)) => {}
        other => panic!("expected DuplicateBusId(1), got {other:?}"),
    }
}

#[test]
fn missing_slack_is_rejected() {
    let text = TWO_BUS.replace("1 3 0 0", "1 2 0 0");
    assert!(matches!(parse_case(&text), Err(CaseError::MissingSlack)));
}

#[test]
fn dangling_branch_endpoint_is_rejected() {
    let text = TWO_BUS.replace("1 2 0 0.1", "1 7 0 0.1");
    assert!(matches!(
        parse_case(&text),
        Err(CaseError::DanglingReference(_))
    ));
}

#[test]
fn zero_impedance_branch_is_rejected() {
    let text = TWO_BUS.replace("1 2 0 0.1", "1 2 0 0");
    assert!(matches!(parse_case(&text), Err(CaseError::MalformedCase(_))));
}

// Independent scan: count `;`-terminated rows between a block opener and its
// closing bracket, without going through the parser's tokenizer.
fn scan_block_rows(text: &str, name: &str) -> usize {
    let open = format!("mpc.{name} = [");
    let start = text.find(&open).expect("block present") + open.len();
    let end = text[start..].find("];").expect("block closed") + start;
    text[start..end]
        .lines()
        .map(|l| l.split('%').next().unwrap_or(""))
        .filter(|l| !l.trim().is_empty())
        .count()
}

#[test]
fn ieee14_counts_match_independent_text_scan() {
    let text = data_file("case14.m");
    let case = parse_case(&text).unwrap();
    assert_eq!(case.n(), scan_block_rows(&text, "bus"));
    assert_eq!(case.branches.len(), scan_block_rows(&text, "branch"));
    assert_eq!(case.gens.len(), scan_block_rows(&text, "gen"));
    assert_eq!(case.n(), 14);
    assert_eq!(case.branches.len(), 20);
    assert_eq!(case.gens.len(), 5);
}

#[test]
fn parse_is_total_over_bundled_cases() {
    for (name, buses) in [("case14.m", 14), ("case300.m", 300), ("case5_demo.m", 5)] {
        let case = parse_case(&data_file(name)).unwrap();
        assert_eq!(case.n(), buses, "{name}");
        assert!(case.base_mva > 0.0);
    }
}

#[test]
fn case_round_trips_through_text() {
    for name in ["case14.m", "case300.m", "case5_demo.m"] {
        let case = parse_case(&data_file(name)).unwrap();
        let text = case_to_text(&case);
        let reparsed = parse_case(&text).unwrap();
        assert_eq!(case, reparsed, "{name}");
    }
}

fn profile_csv(rows: &[(&str, &str, f64)]) -> String {
    let mut s = String::from("\"Time Stamp\",\"Time Zone\",\"Name\",\"PTID\",\"Load\"\n");
    for (ts, zone, load) in rows {
        s.push_str(&format!("\"{ts}\",\"EDT\",\"{zone}\",\"61761\",\"{load}\"\n"));
    }
    s
}

#[test]
fn profile_filters_zone_and_infers_resolution() {
    let csv = profile_csv(&[
        ("07/01/2021 00:00:00", "N.Y.C.", 100.0),
        ("07/01/2021 00:00:00", "WEST", 55.0),
        ("07/01/2021 00:05:00", "N.Y.C.", 110.0),
        ("07/01/2021 00:05:00", "WEST", 56.0),
        ("07/01/2021 00:10:00", "N.Y.C.", 105.0),
        ("07/01/2021 00:10:00", "WEST", 57.0),
    ]);
    let p = parse_load_profile(&csv, &ZoneFilter::Zone("N.Y.C.".into())).unwrap();
    assert_eq!(p.resolution_min, 5);
    assert_eq!(p.values, vec![100.0, 110.0, 105.0]);

    let total = parse_load_profile(&csv, &ZoneFilter::Total).unwrap();
    assert_eq!(total.values, vec![155.0, 166.0, 162.0]);
}

#[test]
fn profile_rejects_non_uniform_spacing() {
    let csv = profile_csv(&[
        ("07/01/2021 00:00:00", "N.Y.C.", 100.0),
        ("07/01/2021 00:07:00", "N.Y.C.", 110.0),
        ("07/01/2021 00:14:00", "N.Y.C.", 120.0),
        ("07/01/2021 00:19:00", "N.Y.C.", 130.0),
    ]);
    assert!(matches!(
        parse_load_profile(&csv, &ZoneFilter::Total),
        Err(ProfileError::NonUniformSpacing { .. })
    ));
}

#[test]
fn profile_rejects_unknown_zone_and_bad_load() {
    let csv = profile_csv(&[
        ("07/01/2021 00:00:00", "N.Y.C.", 100.0),
        ("07/01/2021 00:05:00", "N.Y.C.", 110.0),
    ]);
    assert!(matches!(
        parse_load_profile(&csv, &ZoneFilter::Zone("NORTH".into())),
        Err(ProfileError::UnknownZone(_))
    ));
    let bad = csv.replace("\"110\"", "\"-3\"");
    assert!(matches!(
        parse_load_profile(&bad, &ZoneFilter::Total),
        Err(ProfileError::NonPositiveLoad { .. })
    ));
}

#[test]
fn minute_only_timestamps_parse() {
    let csv = profile_csv(&[
        ("07/01/2021 00:00", "N.Y.C.", 100.0),
        ("07/01/2021 00:05", "N.Y.C.", 110.0),
    ]);
    let p = parse_load_profile(&csv, &ZoneFilter::Total).unwrap();
    assert_eq!(p.resolution_min, 5);
}

// One synthetic month at NYISO's native resolution: 31 days * 24 h * 12
// five-minute rows = 8928, interpolating to 1 min gives (8928-1)*5+1.
#[test]
fn full_july_row_count_and_interpolation_length() {
    let mut csv = String::from("\"Time Stamp\",\"Time Zone\",\"Name\",\"PTID\",\"Load\"\n");
    for day in 1..=31 {
        for slot in 0..288 {
            let (h, m) = (slot * 5 / 60, slot * 5 % 60);
            csv.push_str(&format!(
                "\"07/{day:02}/2021 {h:02}:{m:02}:00\",\"EDT\",\"N.Y.C.\",\"61761\",\"{}\"\n",
                5000.0 + (slot as f64) * 0.5
            ));
        }
    }
    let p = parse_load_profile(&csv, &ZoneFilter::Total).unwrap();
    assert_eq!(p.values.len(), 8928);
    assert_eq!(p.values.len(), 31 * 24 * 12);
    let fine = interpolate_profile(&p, 1).unwrap();
    assert_eq!(fine.values.len(), 44636);
    assert_eq!(fine.values.len(), (8928 - 1) * 5 + 1);
}

#[test]
fn interpolation_is_linear_and_preserves_endpoints() {
    let p = LoadProfile {
        timestamps: vec![0, 5],
        values: vec![100.0, 110.0],
        resolution_min: 5,
    };
    let fine = interpolate_profile(&p, 1).unwrap();
    assert_eq!(fine.values, vec![100.0, 102.0, 104.0, 106.0, 108.0, 110.0]);
    assert_eq!(fine.timestamps, vec![0, 1, 2, 3, 4, 5]);

    let same = interpolate_profile(&p, 5).unwrap();
    assert_eq!(same, p);

    assert!(matches!(
        interpolate_profile(&p, 3),
        Err(ProfileError::BadResolution { .. })
    ));
}

#[test]
fn interpolation_preserves_min_and_max() {
    let demo = data_file("profile_demo.csv");
    let p = parse_load_profile(&demo, &ZoneFilter::Total).unwrap();
    let fine = interpolate_profile(&p, 1).unwrap();
    let minmax = |v: &[f64]| {
        (
            v.iter().cloned().fold(f64::INFINITY, f64::min),
            v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    assert_eq!(minmax(&p.values), minmax(&fine.values));
}

#[test]
fn normalized_profile_spans_unit_interval() {
    let p = LoadProfile {
        timestamps: vec![0, 5, 10],
        values: vec![100.0, 150.0, 125.0],
        resolution_min: 5,
    };
    assert_eq!(p.normalized(), vec![0.0, 1.0, 0.5]);
    let flat = LoadProfile {
        timestamps: vec![0, 5],
        values: vec![100.0, 100.0],
        resolution_min: 5,
    };
    assert_eq!(flat.normalized(), vec![0.0, 0.0]);
}
