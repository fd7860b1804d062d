//! NYISO-style load CSV parsing and resolution interpolation.

use super::{LoadProfile, ProfileError};
use chrono::NaiveDateTime;
use std::collections::BTreeMap;

/// Which zone rows to keep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ZoneFilter {
    /// Sum the load over all zones per timestamp.
    Total,
    /// Keep one zone by its `Name` value.
    Zone(String),
}

/// Parse a load CSV with header columns `Time Stamp`, `Name`, `Load`.
///
/// Rows are filtered per `zone`, sorted by time, and checked for uniform
/// spacing; the resolution is inferred from the spacing. Timestamps accept
/// both `MM/DD/YYYY HH:MM:SS` and `MM/DD/YYYY HH:MM`.
pub fn parse_load_profile(text: &str, zone: &ZoneFilter) -> Result<LoadProfile, ProfileError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| ProfileError::MalformedCsv(e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize, ProfileError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| ProfileError::MalformedCsv(format!("missing column {name:?}")))
    };
    let ts_col = col("Time Stamp")?;
    let name_col = col("Name")?;
    let load_col = col("Load")?;

    let mut zone_seen = false;
    // Accumulate by timestamp; Total sums across zones.
    let mut by_time: BTreeMap<i64, f64> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ProfileError::MalformedCsv(e.to_string()))?;
        let get = |c: usize| -> Result<&str, ProfileError> {
            record.get(c).ok_or_else(|| {
                ProfileError::MalformedCsv(format!("row {} is missing column {}", i + 2, c + 1))
            })
        };
        let name = get(name_col)?.trim();
        match zone {
            ZoneFilter::Zone(z) if name != z => continue,
            _ => {}
        }
        zone_seen = true;
        let minute = parse_timestamp(get(ts_col)?).ok_or_else(|| {
            ProfileError::MalformedCsv(format!("bad timestamp {:?} at row {}", get(ts_col), i + 2))
        })?;
        let load: f64 = get(load_col)?.trim().parse().map_err(|_| {
            ProfileError::MalformedCsv(format!("bad load {:?} at row {}", get(load_col), i + 2))
        })?;
        *by_time.entry(minute).or_insert(0.0) += load;
    }

    if !zone_seen {
        let label = match zone {
            ZoneFilter::Total => "<total>".to_string(),
            ZoneFilter::Zone(z) => z.clone(),
        };
        return Err(ProfileError::UnknownZone(label));
    }
    if by_time.len() < 2 {
        return Err(ProfileError::MalformedCsv(
            "profile needs at least two timestamps".into(),
        ));
    }

    let timestamps: Vec<i64> = by_time.keys().cloned().collect();
    let values: Vec<f64> = by_time.values().cloned().collect();
    let resolution_min = timestamps[1] - timestamps[0];
    for (i, w) in timestamps.windows(2).enumerate() {
        let gap = w[1] - w[0];
        if gap != resolution_min {
            return Err(ProfileError::NonUniformSpacing {
                expected: resolution_min,
                found: gap,
                row: i + 2,
            });
        }
    }
    for (i, &v) in values.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(ProfileError::NonPositiveLoad { value: v, row: i });
        }
    }
    Ok(LoadProfile {
        timestamps,
        values,
        resolution_min,
    })
}

/// Linearly interpolate a profile to a finer resolution. `target_min`
/// must divide the profile resolution. Endpoints are preserved; output
/// length is `(len - 1) * (resolution / target) + 1`.
pub fn interpolate_profile(p: &LoadProfile, target_min: i64) -> Result<LoadProfile, ProfileError> {
    if target_min <= 0 || p.resolution_min % target_min != 0 {
        return Err(ProfileError::BadResolution {
            target: target_min,
            have: p.resolution_min,
        });
    }
    let steps = (p.resolution_min / target_min) as usize;
    if steps == 1 {
        return Ok(p.clone());
    }
    let n_out = (p.values.len() - 1) * steps + 1;
    let mut timestamps = Vec::with_capacity(n_out);
    let mut values = Vec::with_capacity(n_out);
    for i in 0..p.values.len() - 1 {
        let (v0, v1) = (p.values[i], p.values[i + 1]);
        for s in 0..steps {
            let frac = s as f64 / steps as f64;
            timestamps.push(p.timestamps[i] + s as i64 * target_min);
            values.push(v0 + (v1 - v0) * frac);
        }
    }
    timestamps.push(*p.timestamps.last().unwrap());
    values.push(*p.values.last().unwrap());
    Ok(LoadProfile {
        timestamps,
        values,
        resolution_min: target_min,
    })
}

fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    let dt = NaiveDateTime::parse_from_str(raw, "%m/%d/%Y %H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(raw, "%m/%d/%Y %H:%M"))
        .ok()?;
    Some(dt.and_utc().timestamp() / 60)
}
