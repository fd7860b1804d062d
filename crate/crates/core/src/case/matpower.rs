//! MATPOWER case text parsing and serialization.
//!
//! Only the columns the physics needs are read: bus `[BUS_I, TYPE, PD,
//! QD, GS, BS, VM, VA]`, gen `[GEN_BUS, PG, QG, VG]`, branch `[F_BUS,
//! T_BUS, BR_R, BR_X, BR_B, TAP, SHIFT]`. Other columns (ratings, status,
//! cost data) are ignored; all elements are assumed in service.

use super::{BranchRecord, BusKind, BusRecord, CaseError, GenRecord, GridCase};

/// Parse MATPOWER-style case text into a validated [`GridCase`].
pub fn parse_case(text: &str) -> Result<GridCase, CaseError> {
    let base_mva = parse_scalar(text, "baseMVA")?;
    let bus_rows = parse_matrix(text, "bus")?;
    let gen_rows = parse_matrix(text, "gen")?;
    let branch_rows = parse_matrix(text, "branch")?;

    let mut buses = Vec::with_capacity(bus_rows.len());
    for (i, row) in bus_rows.iter().enumerate() {
        if row.len() < 9 {
            return Err(CaseError::MalformedCase(format!(
                "bus row {} has {} columns, need at least 9",
                i + 1,
                row.len()
            )));
        }
        let kind = match row[1] as i64 {
            3 => BusKind::Slack,
            2 => BusKind::Pv,
            1 => BusKind::Pq,
            other => {
                return Err(CaseError::MalformedCase(format!(
                    "bus row {} has unknown type {}",
                    i + 1,
                    other
                )))
            }
        };
        buses.push(BusRecord {
            id: row[0] as i64,
            kind,
            p_load: row[2],
            q_load: row[3],
            gs: row[4],
            bs: row[5],
            vm_init: row[7],
            va_init: row[8],
        });
    }

    let mut gens = Vec::with_capacity(gen_rows.len());
    for (i, row) in gen_rows.iter().enumerate() {
        if row.len() < 6 {
            return Err(CaseError::MalformedCase(format!(
                "gen row {} has {} columns, need at least 6",
                i + 1,
                row.len()
            )));
        }
        gens.push(GenRecord {
            bus: row[0] as i64,
            pg: row[1],
            qg: row[2],
            vg: row[5],
        });
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for (i, row) in branch_rows.iter().enumerate() {
        if row.len() < 10 {
            return Err(CaseError::MalformedCase(format!(
                "branch row {} has {} columns, need at least 10",
                i + 1,
                row.len()
            )));
        }
        branches.push(BranchRecord {
            from: row[0] as i64,
            to: row[1] as i64,
            r: row[2],
            x: row[3],
            b_charging: row[4],
            tap: row[8],
            shift: row[9],
        });
    }

    let case = GridCase {
        base_mva,
        buses,
        branches,
        gens,
    };
    case.validate()?;
    Ok(case)
}

/// Serialize a [`GridCase`] back to case text. Columns we do not track are
/// written with neutral defaults; reparsing the output yields an equal case.
pub fn case_to_text(case: &GridCase) -> String {
    let mut out = String::new();
    out.push_str("function mpc = case\n");
    out.push_str("mpc.version = '2';\n");
    out.push_str(&format!("mpc.baseMVA = {};\n", fmt(case.base_mva)));

    out.push_str("mpc.bus = [\n");
    for b in &case.buses {
        let kind = match b.kind {
            BusKind::Slack => 3,
            BusKind::Pv => 2,
            BusKind::Pq => 1,
        };
        out.push_str(&format!(
            "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t{}\t{}\t0\t1\t1.1\t0.9;\n",
            b.id,
            kind,
            fmt(b.p_load),
            fmt(b.q_load),
            fmt(b.gs),
            fmt(b.bs),
            fmt(b.vm_init),
            fmt(b.va_init)
        ));
    }
    out.push_str("];\n");

    out.push_str("mpc.gen = [\n");
    for g in &case.gens {
        out.push_str(&format!(
            "\t{}\t{}\t{}\t0\t0\t{}\t{}\t1\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;\n",
            g.bus,
            fmt(g.pg),
            fmt(g.qg),
            fmt(g.vg),
            fmt(case.base_mva)
        ));
    }
    out.push_str("];\n");

    out.push_str("mpc.branch = [\n");
    for br in &case.branches {
        out.push_str(&format!(
            "\t{}\t{}\t{}\t{}\t{}\t0\t0\t0\t{}\t{}\t1\t-360\t360;\n",
            br.from,
            br.to,
            fmt(br.r),
            fmt(br.x),
            fmt(br.b_charging),
            fmt(br.tap),
            fmt(br.shift)
        ));
    }
    out.push_str("];\n");
    out
}

// Shortest round-trip decimal form.
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn parse_scalar(text: &str, name: &str) -> Result<f64, CaseError> {
    let needle = format!("mpc.{name}");
    for line in text.lines() {
        let line = strip_comment(line);
        if let Some(rest) = line.trim_start().strip_prefix(&needle) {
            let rest = rest.trim_start();
            if let Some(expr) = rest.strip_prefix('=') {
                let expr = expr.trim().trim_end_matches(';').trim();
                return expr.parse::<f64>().map_err(|_| {
                    CaseError::MalformedCase(format!("cannot parse {name} value {expr:?}"))
                });
            }
        }
    }
    Err(CaseError::MalformedCase(format!("missing mpc.{name}")))
}

fn parse_matrix(text: &str, name: &str) -> Result<Vec<Vec<f64>>, CaseError> {
    let needle = format!("mpc.{name}");
    let mut rows = Vec::new();
    let mut in_block = false;
    for line in text.lines() {
        let line = strip_comment(line);
        let content = if in_block {
            line
        } else {
            let trimmed = line.trim();
            let Some(rest) = trimmed.strip_prefix(&needle) else {
                continue;
            };
            let rest = rest.trim_start();
            let Some(rest) = rest.strip_prefix('=') else {
                continue;
            };
            let Some(body) = rest.trim_start().strip_prefix('[') else {
                continue;
            };
            in_block = true;
            body
        };
        // The closing bracket may share a line with the last rows.
        if let Some(pos) = content.find(']') {
            push_rows(&content[..pos], &mut rows, name)?;
            return Ok(rows);
        }
        push_rows(content, &mut rows, name)?;
    }
    if in_block {
        Err(CaseError::MalformedCase(format!(
            "unterminated mpc.{name} block"
        )))
    } else {
        Err(CaseError::MalformedCase(format!("missing mpc.{name}")))
    }
}

// A physical line may hold several `;`-terminated rows.
fn push_rows(line: &str, rows: &mut Vec<Vec<f64>>, name: &str) -> Result<(), CaseError> {
    for chunk in line.split(';') {
        let chunk = chunk.trim();
        if chunk.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in chunk.split([' ', '\t', ',']) {
            if tok.is_empty() {
                continue;
            }
            let v = tok.parse::<f64>().map_err(|_| {
                CaseError::MalformedCase(format!("bad number {tok:?} in mpc.{name}"))
            })?;
            row.push(v);
        }
        if !row.is_empty() {
            rows.push(row);
        }
    }
    Ok(())
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(pos) => &line[..pos],
        None => line,
    }
}
