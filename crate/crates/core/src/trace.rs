//! Chrome trace event export for base and filled schedules.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{StaticSchedule, WorkItem, WorkKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceArgs {
    pub kind: String,
    pub stage: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub micro_batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub factor: Option<String>,
    pub step: usize,
}

/// One complete event (`ph = "X"`), times in integer microseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub name: String,
    pub cat: String,
    pub ph: String,
    pub ts: i64,
    pub dur: i64,
    pub pid: usize,
    pub tid: usize,
    pub args: TraceArgs,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct TraceDocument {
    trace_events: Vec<TraceEvent>,
}

/// Which devices and pipeline steps to export; `None` means all.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceWindow {
    pub devices: Option<Vec<usize>>,
    pub steps: Option<Range<usize>>,
}

impl TraceWindow {
    pub fn all() -> Self {
        TraceWindow::default()
    }

    pub fn device(mut self, device: usize) -> Self {
        self.devices = Some(vec![device]);
        self
    }

    pub fn steps(mut self, steps: Range<usize>) -> Self {
        self.steps = Some(steps);
        self
    }

    fn contains(&self, item: &WorkItem) -> bool {
        self.devices.as_ref().is_none_or(|d| d.contains(&item.device))
            && self.steps.as_ref().is_none_or(|s| s.contains(&item.step))
    }
}

fn micros(ms: f64) -> i64 {
    (ms * 1000.0).round() as i64
}

impl TraceEvent {
    pub fn from_item(item: &WorkItem, group: usize) -> Self {
        TraceEvent {
            name: item.label(),
            cat: item.kind.category().to_string(),
            ph: "X".to_string(),
            ts: micros(item.start),
            dur: micros(item.duration),
            pid: group,
            tid: item.device,
            args: TraceArgs {
                kind: item.kind.category().to_string(),
                stage: item.stage,
                micro_batch: item.micro_batch,
                layer: item.layer,
                factor: item.factor.map(|f| format!("{f:?}")),
                step: item.step,
            },
        }
    }
}

/// Events in device order, then timeline order.
pub fn trace_events(schedule: &StaticSchedule, window: &TraceWindow) -> Vec<TraceEvent> {
    schedule
        .timelines
        .iter()
        .enumerate()
        .flat_map(|(d, tl)| {
            let group = schedule.group_of(d);
            tl.iter()
                .filter(|it| window.contains(it))
                .map(move |it| TraceEvent::from_item(it, group))
        })
        .collect()
}

/// `{"traceEvents": [...]}` with a trailing newline.
pub fn trace_json(events: &[TraceEvent]) -> String {
    let doc = TraceDocument {
        trace_events: events.to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("trace events always serialize");
    s.push('\n');
    s
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>> {
    let doc: TraceDocument = serde_json::from_str(text).map_err(|e| Error::Parse(format!("trace: {e}")))?;
    Ok(doc.trace_events)
}

pub fn emit_trace(schedule: &StaticSchedule, window: &TraceWindow, path: &Path) -> Result<usize> {
    let events = trace_events(schedule, window);
    std::fs::write(path, trace_json(&events))?;
    Ok(events.len())
}

/// Event count per kind.
pub fn count_by_kind(events: &[TraceEvent]) -> Vec<(WorkKind, usize)> {
    let kinds = [
        WorkKind::Forward,
        WorkKind::Backward,
        WorkKind::Recompute,
        WorkKind::Curvature,
        WorkKind::Inversion,
        WorkKind::Precondition,
        WorkKind::SyncGrad,
        WorkKind::SyncCurvature,
    ];
    kinds
        .into_iter()
        .map(|k| (k, events.iter().filter(|e| e.cat == k.category()).count()))
        .filter(|(_, n)| *n > 0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_schedule;
    use crate::types::{CostTable, Method, PipelineConfig};

    #[test]
    fn gpipe_unit_trace_has_eight_events() {
        let cfg = PipelineConfig::new(Method::GPipe, 2, 2);
        let s = build_schedule(&cfg, &CostTable::uniform(1.0, 1.0), 1).unwrap();
        let ev = trace_events(&s, &TraceWindow::all());
        assert_eq!(ev.len(), 8);
        assert_eq!(count_by_kind(&ev), vec![(WorkKind::Forward, 4), (WorkKind::Backward, 4)]);
        let text = trace_json(&ev);
        assert_eq!(text, trace_json(&trace_events(&s, &TraceWindow::all())));
        assert_eq!(parse_trace(&text).unwrap(), ev);
        assert!(ev.iter().all(|e| e.ph == "X" && e.dur == 1000));
    }

    #[test]
    fn empty_window_gives_empty_array() {
        let cfg = PipelineConfig::new(Method::GPipe, 2, 2);
        let s = build_schedule(&cfg, &CostTable::uniform(1.0, 1.0), 1).unwrap();
        let text = trace_json(&trace_events(&s, &TraceWindow::all().steps(1..1)));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["traceEvents"], serde_json::json!([]));
    }

    #[test]
    fn rounds_to_nearest_microsecond() {
        assert_eq!(micros(0.0004), 0);
        assert_eq!(micros(0.0006), 1);
        assert_eq!(micros(2.3456), 2346);
    }

    #[test]
    fn window_filters_devices_and_steps() {
        let cfg = PipelineConfig::new(Method::OneF1B, 2, 2);
        let s = build_schedule(&cfg, &CostTable::uniform(1.0, 2.0), 3).unwrap();
        assert_eq!(trace_events(&s, &TraceWindow::all()).len(), 24);
        assert_eq!(trace_events(&s, &TraceWindow::all().device(1)).len(), 12);
        assert_eq!(trace_events(&s, &TraceWindow::all().device(1).steps(1..2)).len(), 4);
    }
}
