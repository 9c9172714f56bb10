//! Plain-text and CSV rendering of per-room energy reports.

use serde::{Deserialize, Serialize};

use crate::apps::energy::SavingsReport;
use crate::occupancy::AbsenceInterval;
use crate::types::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomReport {
    pub savings: SavingsReport,
    pub absences: Vec<AbsenceInterval>,
}

/// Up to six decimals with trailing zeros dropped, always at least one
/// decimal and never `-0.0`.
pub fn fmt_num(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0');
    let s = if s.ends_with('.') { format!("{s}0") } else { s.to_string() };
    if s == "-0.0" {
        "0.0".into()
    } else {
        s
    }
}

fn end_str(end: Option<Timestamp>) -> String {
    end.map(|t| t.to_iso()).unwrap_or_else(|| "open".into())
}

pub const REPORT_CSV_HEADER: &str = "room_id,from,to,baseline_kwh,actual_kwh,saved_kwh,setback_hours,absences";

pub fn render_csv(reports: &[RoomReport]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        let s = &r.savings;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.room_id,
            s.from.to_iso(),
            s.to.to_iso(),
            fmt_num(s.baseline_kwh),
            fmt_num(s.actual_kwh),
            fmt_num(s.saved_kwh),
            fmt_num(s.setback_hours),
            r.absences.len()
        ));
    }
    out
}

pub fn render_text(reports: &[RoomReport]) -> String {
    let mut out = String::new();
    if reports.is_empty() {
        out.push_str("no heated rooms\n");
    }
    for r in reports {
        let s = &r.savings;
        out.push_str(&format!("room {}  {} .. {}\n", s.room_id, s.from.to_iso(), s.to.to_iso()));
        out.push_str(&format!("  baseline   {} kWh\n", fmt_num(s.baseline_kwh)));
        out.push_str(&format!("  actual     {} kWh\n", fmt_num(s.actual_kwh)));
        out.push_str(&format!("  saved      {} kWh\n", fmt_num(s.saved_kwh)));
        out.push_str(&format!("  setback    {} h\n", fmt_num(s.setback_hours)));
        out.push_str(&format!("  absences   {}\n", r.absences.len()));
        for a in &r.absences {
            out.push_str(&format!("    {} .. {}\n", a.start.to_iso(), end_str(a.end)));
        }
    }
    out
}
