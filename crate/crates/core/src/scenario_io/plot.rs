use std::fmt::Write as _;
use std::path::Path;

use crate::diagnostics::{energy_with, lyapunov_with, RelativeState};
use crate::dynamics::{AgentState, Model, Trajectory};
use crate::error::{HerdError, Result};

use super::trajectory_file::write_atomic;

/// Data blocks available for plotting. Each becomes one gnuplot `index`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlotSeries {
    /// Time and every agent position.
    Tracks,
    /// First and last position of every agent.
    Markers,
    /// `kappa_p`, `kappa_c` of every driver.
    Controls,
    GatheringRadius,
    /// Relative energy of a one-driver, one-evader run.
    Energy,
    /// Lyapunov function of circumvention with the given `kappa_c`.
    Lyapunov {
        kappa_c: f64,
    },
}

impl PlotSeries {
    fn title(&self) -> &'static str {
        match self {
            PlotSeries::Tracks => "tracks",
            PlotSeries::Markers => "markers",
            PlotSeries::Controls => "controls",
            PlotSeries::GatheringRadius => "gathering_radius",
            PlotSeries::Energy => "energy",
            PlotSeries::Lyapunov { .. } => "lyapunov",
        }
    }
}

/// Gnuplot text: a comment header, then the requested blocks separated by two blank lines.
pub fn format_plot_data(traj: &Trajectory, model: &Model, series: &[PlotSeries]) -> Result<String> {
    let layout = traj.layout();
    let mut out = String::new();
    let _ = writeln!(out, "# herding plot data");
    let _ = writeln!(
        out,
        "# drivers: {}, evaders: {}, nodes: {}",
        layout.drivers,
        layout.evaders,
        traj.len()
    );
    let titles: Vec<&str> = series.iter().map(PlotSeries::title).collect();
    let _ = writeln!(out, "# blocks: {}", titles.join(" "));

    for (b, s) in series.iter().enumerate() {
        if b > 0 {
            out.push_str("\n\n");
        }
        let _ = writeln!(out, "# index {b}: {}", s.title());
        match *s {
            PlotSeries::Tracks => {
                let mut cols = vec!["t".to_string()];
                cols.extend(
                    (0..layout.drivers).flat_map(|j| [format!("d{j}_x"), format!("d{j}_y")]),
                );
                cols.extend(
                    (0..layout.evaders).flat_map(|i| [format!("e{i}_x"), format!("e{i}_y")]),
                );
                let _ = writeln!(out, "# {}", cols.join(" "));
                for v in traj.states() {
                    let _ = write!(out, "{:.10e}", v.t);
                    for j in 0..layout.drivers {
                        let p = v.driver_pos(j);
                        let _ = write!(out, " {:.10e} {:.10e}", p.x, p.y);
                    }
                    for i in 0..layout.evaders {
                        let p = v.evader_pos(i);
                        let _ = write!(out, " {:.10e} {:.10e}", p.x, p.y);
                    }
                    out.push('\n');
                }
            }
            PlotSeries::Markers => {
                let _ = writeln!(out, "# agent x0 y0 x_final y_final");
                if let (Some(first), Some(last)) = (traj.states().next(), traj.states().last()) {
                    for j in 0..layout.drivers {
                        let (a, z) = (first.driver_pos(j), last.driver_pos(j));
                        let _ = writeln!(
                            out,
                            "d{j} {:.10e} {:.10e} {:.10e} {:.10e}",
                            a.x, a.y, z.x, z.y
                        );
                    }
                    for i in 0..layout.evaders {
                        let (a, z) = (first.evader_pos(i), last.evader_pos(i));
                        let _ = writeln!(
                            out,
                            "e{i} {:.10e} {:.10e} {:.10e} {:.10e}",
                            a.x, a.y, z.x, z.y
                        );
                    }
                }
            }
            PlotSeries::Controls => {
                let mut cols = vec!["t".to_string()];
                cols.extend(
                    (0..layout.drivers).flat_map(|j| [format!("d{j}_kp"), format!("d{j}_kc")]),
                );
                let _ = writeln!(out, "# {}", cols.join(" "));
                for k in 0..traj.len() {
                    let _ = write!(out, "{:.10e}", traj.times()[k]);
                    for c in traj.controls(k) {
                        let _ = write!(out, " {:.10e} {:.10e}", c.kp, c.kc);
                    }
                    out.push('\n');
                }
            }
            PlotSeries::GatheringRadius => {
                let _ = writeln!(out, "# t radius");
                for v in traj.states() {
                    let _ = writeln!(out, "{:.10e} {:.10e}", v.t, v.gathering_radius());
                }
            }
            PlotSeries::Energy | PlotSeries::Lyapunov { .. } => {
                if layout.drivers != 1 || layout.evaders != 1 {
                    return Err(HerdError::Usage(format!(
                        "{} needs one driver and one evader",
                        s.title()
                    )));
                }
                let potential = model.kernels.potential_fn()?;
                let nu = model.friction.common().ok_or(HerdError::UnequalFriction)?;
                let _ = writeln!(out, "# t {}", s.title());
                for v in traj.states() {
                    let rel = RelativeState::of(&v);
                    let value = match *s {
                        PlotSeries::Lyapunov { kappa_c } => {
                            lyapunov_with(rel, kappa_c, nu, &potential)
                        }
                        _ => energy_with(rel, &potential),
                    };
                    let _ = writeln!(out, "{:.10e} {:.10e}", v.t, value);
                }
            }
        }
    }
    Ok(out)
}

pub fn export_plot_data(
    traj: &Trajectory,
    model: &Model,
    series: &[PlotSeries],
    path: &Path,
) -> Result<()> {
    write_atomic(path, format_plot_data(traj, model, series)?.as_bytes())
}
