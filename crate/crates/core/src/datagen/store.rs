//! Dataset directory layout and CSV exports.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/{train,val,test}/features.bin   f32 LE, row-major (rows, n, 2)
//! <dir>/{train,val,test}/labels.bin     u8, (rows, n)
//! <dir>/{train,val,test}/kinds.bin      u8, (rows,): 0 none, 1 A_o, 2 A_d, 3 A_s, 4 A_r
//! <dir>/{train,val,test}/steps.bin      u32 LE, (rows,): source timestep
//! ```
//!
//! `manifest.json` carries a SHA-256 per data file; reads verify them.

use super::{Dataset, DatagenError, DatasetManifest, FileDigest, Sample, SampleKind, Split};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Persist the dataset; the returned manifest carries the file digests.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest, DatagenError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = ds.manifest.clone();
    manifest.files.clear();
    for name in SPLITS {
        let split = ds.split(name).expect("fixed split names");
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub)?;
        let rows = split.len();

        let mut features = Vec::with_capacity(rows * split.n_buses() * 2 * 4);
        let mut labels = Vec::with_capacity(rows * split.n_buses());
        let mut kinds = Vec::with_capacity(rows);
        let mut steps = Vec::with_capacity(rows * 4);
        for s in &split.samples {
            for v in &s.features {
                features.extend_from_slice(&v.to_le_bytes());
            }
            labels.extend_from_slice(&s.labels);
            kinds.push(s.kind.code());
            steps.extend_from_slice(&s.timestep.to_le_bytes());
        }
        for (file, bytes) in [
            ("features.bin", &features),
            ("labels.bin", &labels),
            ("kinds.bin", &kinds),
            ("steps.bin", &steps),
        ] {
            let path = sub.join(file);
            std::fs::write(&path, bytes)?;
            manifest.files.insert(
                format!("{name}/{file}"),
                FileDigest {
                    sha256: hex(&Sha256::digest(bytes)),
                    rows,
                },
            );
        }
    }
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DatagenError::SchemaMismatch(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Load a dataset directory, verifying schema, checksums and row counts.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatagenError> {
    let manifest_text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| DatagenError::SchemaMismatch(e.to_string()))?;
    if manifest.schema_version != 1 {
        return Err(DatagenError::SchemaMismatch(format!(
            "unsupported schema version {}",
            manifest.schema_version
        )));
    }
    let n = manifest.n_buses;

    let mut splits = Vec::with_capacity(3);
    for name in SPLITS {
        let sub = dir.join(name);
        let mut blobs = Vec::with_capacity(4);
        let mut rows_expected = None;
        for file in ["features.bin", "labels.bin", "kinds.bin", "steps.bin"] {
            let key = format!("{name}/{file}");
            let digest = manifest
                .files
                .get(&key)
                .ok_or_else(|| DatagenError::SchemaMismatch(format!("manifest misses {key}")))?;
            let bytes = std::fs::read(sub.join(file))?;
            if hex(&Sha256::digest(&bytes)) != digest.sha256 {
                return Err(DatagenError::ChecksumMismatch(key));
            }
            match rows_expected {
                None => rows_expected = Some(digest.rows),
                Some(r) if r != digest.rows => {
                    return Err(DatagenError::SchemaMismatch(format!(
                        "inconsistent row counts in split {name}"
                    )))
                }
                _ => {}
            }
            blobs.push(bytes);
        }
        let rows = rows_expected.unwrap_or(0);
        let (features, labels, kinds, steps) = (&blobs[0], &blobs[1], &blobs[2], &blobs[3]);
        if features.len() != rows * n * 2 * 4
            || labels.len() != rows * n
            || kinds.len() != rows
            || steps.len() != rows * 4
        {
            return Err(DatagenError::SchemaMismatch(format!(
                "split {name} sizes do not match {rows} rows of {n} buses"
            )));
        }
        let mut samples = Vec::with_capacity(rows);
        for r in 0..rows {
            let fstart = r * n * 2 * 4;
            let feat: Vec<f32> = features[fstart..fstart + n * 2 * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let kind = SampleKind::from_code(kinds[r]).ok_or_else(|| {
                DatagenError::SchemaMismatch(format!("unknown kind code {}", kinds[r]))
            })?;
            let timestep = u32::from_le_bytes(steps[r * 4..r * 4 + 4].try_into().unwrap());
            samples.push(Sample {
                features: feat,
                labels: labels[r * n..(r + 1) * n].to_vec(),
                kind,
                timestep,
            });
        }
        splits.push(Split { samples });
    }
    let mut it = splits.into_iter();
    Ok(Dataset {
        manifest,
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}

/// CSV export of the samples: one row per sample over train, val, test
/// in order; columns `timestep, kind, P_1..P_n, Q_1..Q_n, y_1..y_n`.
pub fn export_features_csv<W: Write>(ds: &Dataset, out: &mut W) -> Result<(), DatagenError> {
    let n = ds.manifest.n_buses;
    let mut header = String::from("timestep,kind");
    for i in 1..=n {
        header.push_str(&format!(",P_{i}"));
    }
    for i in 1..=n {
        header.push_str(&format!(",Q_{i}"));
    }
    for i in 1..=n {
        header.push_str(&format!(",y_{i}"));
    }
    writeln!(out, "{header}")?;
    for name in SPLITS {
        for s in &ds.split(name).expect("fixed names").samples {
            let mut row = format!("{},{}", s.timestep, s.kind.label());
            for i in 0..n {
                row.push_str(&format!(",{}", s.features[i * 2]));
            }
            for i in 0..n {
                row.push_str(&format!(",{}", s.features[i * 2 + 1]));
            }
            for i in 0..n {
                row.push_str(&format!(",{}", s.labels[i]));
            }
            writeln!(out, "{row}")?;
        }
    }
    Ok(())
}

/// CSV export of per-node embeddings: one row per (sample, bus) with the
/// embedding vector from a model hook.
pub fn export_embeddings_csv<W: Write>(
    split: &Split,
    dim: usize,
    mut embed: impl FnMut(&Sample) -> Vec<f64>,
    out: &mut W,
) -> Result<(), DatagenError> {
    let n = split.n_buses();
    let mut header = String::from("timestep,kind,bus");
    for j in 1..=dim {
        header.push_str(&format!(",e_{j}"));
    }
    writeln!(out, "{header}")?;
    for s in &split.samples {
        let rows = embed(s);
        debug_assert_eq!(rows.len(), n * dim);
        for bus in 0..n {
            let mut line = format!("{},{},{}", s.timestep, s.kind.label(), bus + 1);
            for j in 0..dim {
                line.push_str(&format!(",{}", rows[bus * dim + j]));
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
