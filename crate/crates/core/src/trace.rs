//! Per-lap match traces and their CSV form.

use serde::{Deserialize, Serialize};

use crate::env::{LapOutcome, StepOutcome};
use crate::track::CarState;

pub const CSV_HEADER: &str =
    "lap,car,e_b,e_f,m_car,tc,tw,ta,ps,d_ef_realized,d_eb_realized,t_lap,t_race,t_gap,dt_int,clipped_flags";

/// One car after one lap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub lap: u32,
    /// 1 for car 1, 2 for car i.
    pub car: u8,
    pub state: CarState,
    pub lap_outcome: LapOutcome,
    /// Gap after the lap.
    pub t_gap: f64,
}

impl TraceRow {
    pub fn csv_line(&self) -> String {
        let s = &self.state;
        let l = &self.lap_outcome;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.lap,
            self.car,
            fmt_sig9(s.e_b),
            fmt_sig9(s.e_f),
            fmt_sig9(s.m_car),
            s.tc.code(),
            fmt_sig9(s.tw),
            s.ta,
            l.ps.code(),
            fmt_sig9(l.d_ef),
            fmt_sig9(l.d_eb),
            fmt_sig9(l.t_lap),
            fmt_sig9(s.t_race),
            fmt_sig9(self.t_gap),
            fmt_sig9(l.dt_int),
            l.clipped,
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchTrace {
    pub rows: Vec<TraceRow>,
}

impl MatchTrace {
    /// Appends both cars' rows for a completed step.
    pub fn record(&mut self, lap: u32, out: &StepOutcome, car_1: &CarState, car_i: &CarState, gap_1: f64, gap_i: f64) {
        self.rows.push(TraceRow { lap, car: 1, state: *car_1, lap_outcome: out.lap_1, t_gap: gap_1 });
        if let Some(lap_i) = out.lap_i {
            self.rows.push(TraceRow { lap, car: 2, state: *car_i, lap_outcome: lap_i, t_gap: gap_i });
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }

    pub fn car_rows(&self, car: u8) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(move |r| r.car == car)
    }
}

/// Formats like C's `%.9g`: nine significant digits, trailing zeros
/// dropped, scientific notation outside `1e-5 <= |x| < 1e9`.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), sign, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}
