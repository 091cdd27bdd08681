use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::dynamics::{DriverControl, Layout, Trajectory};
use crate::error::{HerdError, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "# herding trajectory";

/// Provenance written above the data rows.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrajectoryHeader {
    pub scenario_hash: Option<String>,
    pub seed: Option<u64>,
}

/// Column names in file order: time, state in storage order, then gains per driver.
pub fn column_names(layout: Layout) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    let agents = |prefix: &str, count: usize, suffix: [&str; 2], cols: &mut Vec<String>| {
        for i in 0..count {
            for s in suffix {
                cols.push(format!("{prefix}{i}_{s}"));
            }
        }
    };
    agents("d", layout.drivers, ["x", "y"], &mut cols);
    agents("e", layout.evaders, ["x", "y"], &mut cols);
    agents("d", layout.drivers, ["vx", "vy"], &mut cols);
    agents("e", layout.evaders, ["vx", "vy"], &mut cols);
    agents("d", layout.drivers, ["kp", "kc"], &mut cols);
    cols
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| HerdError::Io(e.error))?;
    Ok(())
}

/// CSV text of a trajectory. Floats carry 17 significant digits, so reading
/// them back reproduces every bit.
pub fn format_trajectory(traj: &Trajectory, header: &TrajectoryHeader) -> String {
    let layout = traj.layout();
    let cols = column_names(layout);
    let mut out = String::new();
    let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
    let _ = writeln!(out, "{MAGIC} v{FORMAT_VERSION}");
    let _ = writeln!(
        out,
        "# scenario_hash: {}",
        opt(header.scenario_hash.clone())
    );
    let _ = writeln!(out, "# seed: {}", opt(header.seed.map(|s| s.to_string())));
    let _ = writeln!(out, "# drivers: {}", layout.drivers);
    let _ = writeln!(out, "# evaders: {}", layout.evaders);
    let _ = writeln!(out, "# nodes: {}", traj.len());
    if !traj.is_empty() {
        let _ = writeln!(
            out,
            "# grid: t0 = {:.16e}, t_f = {:.16e}, steps = {}",
            traj.times()[0],
            traj.t_final(),
            traj.len() - 1
        );
    }
    let _ = writeln!(out, "{}", cols.join(","));
    for k in 0..traj.len() {
        let _ = write!(out, "{:.16e}", traj.times()[k]);
        for v in traj.state(k).data {
            let _ = write!(out, ",{v:.16e}");
        }
        for c in traj.controls(k) {
            let _ = write!(out, ",{:.16e},{:.16e}", c.kp, c.kc);
        }
        out.push('\n');
    }
    out
}

pub fn write_trajectory(traj: &Trajectory, header: &TrajectoryHeader, path: &Path) -> Result<()> {
    write_atomic(path, format_trajectory(traj, header).as_bytes())
}

fn header_value<'a>(lines: &[&'a str], key: &str) -> Result<&'a str> {
    let prefix = format!("# {key}: ");
    lines
        .iter()
        .find_map(|l| l.strip_prefix(prefix.as_str()))
        .ok_or_else(|| HerdError::HeaderMismatch(format!("missing header field `{key}`")))
}

fn parse_count(lines: &[&str], key: &str) -> Result<usize> {
    header_value(lines, key)?
        .trim()
        .parse()
        .map_err(|_| HerdError::HeaderMismatch(format!("header field `{key}` is not a count")))
}

pub fn parse_trajectory(text: &str) -> Result<(Trajectory, TrajectoryHeader)> {
    let lines: Vec<&str> = text.lines().collect();
    let first = lines.first().copied().unwrap_or_default();
    if first != format!("{MAGIC} v{FORMAT_VERSION}") {
        return Err(HerdError::HeaderMismatch(format!(
            "expected `{MAGIC} v{FORMAT_VERSION}`, found `{first}`"
        )));
    }
    let comments: Vec<&str> = lines
        .iter()
        .copied()
        .take_while(|l| l.starts_with('#'))
        .collect();
    let layout = Layout::new(
        parse_count(&comments, "drivers")?,
        parse_count(&comments, "evaders")?,
    );
    let nodes = parse_count(&comments, "nodes")?;
    let hash = header_value(&comments, "scenario_hash")?.trim();
    let seed = header_value(&comments, "seed")?.trim();
    let header = TrajectoryHeader {
        scenario_hash: (hash != "none").then(|| hash.to_string()),
        seed: if seed == "none" {
            None
        } else {
            Some(
                seed.parse()
                    .map_err(|_| HerdError::HeaderMismatch("seed is not an integer".into()))?,
            )
        },
    };

    let cols = column_names(layout);
    let names = lines.get(comments.len()).copied().unwrap_or_default();
    if names != cols.join(",") {
        return Err(HerdError::HeaderMismatch(
            "column names do not match the agent counts".into(),
        ));
    }
    let rows: Vec<&str> = lines[comments.len() + 1..]
        .iter()
        .copied()
        .filter(|l| !l.is_empty())
        .collect();
    if rows.len() != nodes {
        return Err(HerdError::HeaderMismatch(format!(
            "header announces {nodes} rows, file has {}",
            rows.len()
        )));
    }
    let dim = layout.dim();
    let mut traj = Trajectory::with_capacity(layout, nodes);
    let mut values = Vec::with_capacity(cols.len());
    let mut controls = vec![DriverControl::OFF; layout.drivers];
    for (r, row) in rows.iter().enumerate() {
        values.clear();
        for field in row.split(',') {
            values.push(field.trim().parse::<f64>().map_err(|_| HerdError::Parse {
                location: format!("row {}", r + 1),
                message: format!("`{field}` is not a number"),
            })?);
        }
        if values.len() != cols.len() {
            return Err(HerdError::HeaderMismatch(format!(
                "row {} has {} fields, expected {}",
                r + 1,
                values.len(),
                cols.len()
            )));
        }
        for (j, c) in controls.iter_mut().enumerate() {
            *c = DriverControl::new(values[1 + dim + 2 * j], values[2 + dim + 2 * j]);
        }
        traj.push(values[0], &values[1..1 + dim], &controls);
    }
    Ok((traj, header))
}

pub fn read_trajectory(path: &Path) -> Result<(Trajectory, TrajectoryHeader)> {
    parse_trajectory(&std::fs::read_to_string(path)?)
}
