//! CSV, JSON and DOT writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path as FsPath;

use serde::Serialize;

use super::ExperimentError;
use crate::analysis::{detect_convergence, normalized_levels, PotentialTrace};
use crate::dynamics::{Control, Engine, Observer, StepView, SystemState};
use crate::graph::{DirectedGraph, TwoPathGraph};

/// Column names of the per-edge time series.
pub const TIMESERIES_HEADER: [&str; 9] = ["t", "edge_id", "u", "v", "p", "f", "b", "norm_fwd", "norm_bwd"];
/// Column names of the per-step summary.
pub const SUMMARY_HEADER: [&str; 5] = ["t", "r_min", "f_s(t)", "b_d(t)", "converged_path_id"];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Streams the per-edge time series and the summary table while a run
/// progresses, one block per recorded step after the initial state. I/O
/// failures stop the run and are kept in `error`.
pub struct CsvRecorder {
    series: Option<csv::Writer<BufWriter<File>>>,
    summary: csv::Writer<BufWriter<File>>,
    interval: u64,
    epsilon: f64,
    potential: Option<PotentialTrace>,
    last_written: Option<u64>,
    pub error: Option<String>,
}

impl CsvRecorder {
    pub fn create(
        series_path: Option<&FsPath>,
        summary_path: &FsPath,
        interval: u64,
        epsilon: f64,
        two_path: Option<&TwoPathGraph>,
    ) -> Result<Self, ExperimentError> {
        let series = match series_path {
            Some(p) => {
                let mut w = csv::Writer::from_writer(BufWriter::new(File::create(p)?));
                w.write_record(TIMESERIES_HEADER)?;
                Some(w)
            }
            None => None,
        };
        let mut summary = csv::Writer::from_writer(BufWriter::new(File::create(summary_path)?));
        summary.write_record(SUMMARY_HEADER)?;
        Ok(Self {
            series,
            summary,
            interval: interval.max(1),
            epsilon,
            potential: two_path.map(PotentialTrace::new),
            last_written: None,
            error: None,
        })
    }

    fn write(&mut self, state: &SystemState, g: &DirectedGraph, f_s: f64, b_d: f64) -> Result<(), ExperimentError> {
        let r_min = self.potential.as_mut().and_then(|p| p.update(state));
        if state.t % self.interval != 0 {
            return Ok(());
        }
        self.write_rows(state, g, f_s, b_d, r_min)
    }

    fn write_rows(
        &mut self,
        state: &SystemState,
        g: &DirectedGraph,
        f_s: f64,
        b_d: f64,
        r_min: Option<f64>,
    ) -> Result<(), ExperimentError> {
        if self.last_written == Some(state.t) {
            return Ok(());
        }
        self.last_written = Some(state.t);
        if let Some(w) = self.series.as_mut() {
            let lv = normalized_levels(state, g);
            for (e, &(u, v)) in g.edges().iter().enumerate() {
                w.write_record(&[
                    state.t.to_string(),
                    e.to_string(),
                    u.to_string(),
                    v.to_string(),
                    state.pheromone[e].to_string(),
                    state.f_edge[e].to_string(),
                    state.b_edge[e].to_string(),
                    opt(lv.fwd[e]),
                    opt(lv.bwd[e]),
                ])?;
            }
        }
        let path = detect_convergence(state, g, self.epsilon).map(|p| p.id()).unwrap_or_default();
        self.summary.write_record(&[state.t.to_string(), opt(r_min), f_s.to_string(), b_d.to_string(), path])?;
        Ok(())
    }

    /// Writes the final state if the interval skipped it, and flushes.
    pub fn finish(mut self, state: &SystemState, engine: &Engine<'_>) -> Result<(), ExperimentError> {
        if let Some(e) = self.error.take() {
            return Err(ExperimentError::Io(e));
        }
        let (f_s, b_d) = engine.injection(state.t);
        let r_min = self.potential.as_ref().and_then(|p| p.latest());
        self.write_rows(state, engine.graph(), f_s, b_d, r_min)?;
        if let Some(w) = self.series.as_mut() {
            w.flush()?;
        }
        self.summary.flush()?;
        Ok(())
    }
}

impl Observer for CsvRecorder {
    fn start(&mut self, state: &SystemState, _engine: &Engine<'_>) {
        if let Some(p) = self.potential.as_mut() {
            p.update(state);
        }
    }

    fn observe(&mut self, view: &StepView<'_>) -> Control {
        match self.write(view.current, view.graph(), view.injected_forward, view.injected_backward) {
            Ok(()) => Control::Continue,
            Err(e) => {
                let msg = e.to_string();
                self.error = Some(msg.clone());
                Control::Stop(format!("csv output failed: {msg}"))
            }
        }
    }
}

/// DOT rendering of a state: edge pen width grows with the total flow on the
/// edge, vertex size with survival probability.
pub fn state_to_dot(g: &DirectedGraph, state: &SystemState) -> String {
    let load: Vec<f64> = state.f_edge.iter().zip(&state.b_edge).map(|(f, b)| f + b).collect();
    let max = load.iter().copied().fold(0.0, f64::max);
    let mut out = format!("digraph state_t{} {{\n  node [shape=circle, fixedsize=true];\n", state.t);
    for v in 0..g.num_vertices() {
        let width = 0.2 + 0.6 * (1.0 - g.leakage(v));
        let extra = if v == g.source() {
            ", label=\"s\", style=filled, fillcolor=lightblue"
        } else if v == g.destination() {
            ", label=\"d\", style=filled, fillcolor=lightblue"
        } else {
            ""
        };
        out.push_str(&format!("  {v} [width={width:.3}{extra}];\n"));
    }
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        let share = if max > 0.0 { load[e] / max } else { 0.0 };
        let pen = 1.0 + 9.0 * share;
        let color = if share > 0.5 { "green" } else { "gray" };
        out.push_str(&format!("  {u} -> {v} [penwidth={pen:.3}, color={color}];\n"));
    }
    out.push_str("}\n");
    out
}

/// Pretty JSON to `path`.
pub fn write_json<T: Serialize>(path: &FsPath, value: &T) -> Result<(), ExperimentError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_text(path: &FsPath, text: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, text)?;
    Ok(())
}

/// One value per line under a single header.
pub fn write_series(path: &FsPath, header: &str, values: &[f64]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["t", header])?;
    for (t, v) in values.iter().enumerate() {
        w.write_record(&[t.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_two_path;

    #[test]
    fn dot_weights_follow_flow() {
        let tp = build_two_path(2, 2, &[0.0], &[0.5]).unwrap();
        let g = tp.graph();
        let mut st = SystemState::zeros(g);
        for e in tp.branch_edges(crate::graph::Branch::Top) {
            st.f_edge[e] = 1.0;
        }
        let dot = state_to_dot(g, &st);
        assert_eq!(dot.matches("penwidth=10.000").count(), 2);
        assert_eq!(dot.matches("penwidth=1.000").count(), 2);
        assert!(dot.contains("3 [width=0.500]"));
    }
}
