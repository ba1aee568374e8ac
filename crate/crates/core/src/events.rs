//! Multi-unit event streams: ingestion, validation, truncation and splitting.
//!
//! Files are CSV with the exact header `unit_id,event_time`, one event per
//! row. The observation window is not stored in the file.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 2] = ["unit_id", "event_time"];

/// Closed time interval `[start, end]` over which events are recorded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WindowRepr", into = "WindowRepr")]
pub struct ObservationWindow {
    start: f64,
    end: f64,
}

#[derive(Serialize, Deserialize)]
struct WindowRepr {
    start: f64,
    end: f64,
}

impl TryFrom<WindowRepr> for ObservationWindow {
    type Error = Error;
    fn try_from(r: WindowRepr) -> Result<Self> {
        ObservationWindow::new(r.start, r.end)
    }
}

impl From<ObservationWindow> for WindowRepr {
    fn from(w: ObservationWindow) -> Self {
        WindowRepr {
            start: w.start,
            end: w.end,
        }
    }
}

impl ObservationWindow {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() || start >= end {
            return Err(Error::InvalidArgument(format!(
                "observation window requires finite start < end, got [{start}, {end}]"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }

    /// The time `start + alpha * length`.
    pub fn percentile_time(&self, alpha: f64) -> f64 {
        self.start + alpha * self.length()
    }

    /// `n` equally spaced points including both endpoints.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![0.5 * (self.start + self.end)],
            _ => {
                let step = self.length() / (n - 1) as f64;
                (0..n)
                    .map(|k| {
                        if k == n - 1 {
                            self.end
                        } else {
                            self.start + step * k as f64
                        }
                    })
                    .collect()
            }
        }
    }
}

impl fmt::Display for ObservationWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start, self.end)
    }
}

/// Parses `start:end`, e.g. `0:100`.
impl FromStr for ObservationWindow {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("window '{s}' must have the form start:end")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad window bound '{v}'")))
        };
        ObservationWindow::new(parse(a)?, parse(b)?)
    }
}

/// Events recorded for one unit.
///
/// `observed_until` is set when the unit was only watched up to some time
/// before the window end (a partially observed test unit). Its likelihood
/// then covers `[window.start, observed_until]` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit_id: String,
    pub event_times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_until: Option<f64>,
}

impl UnitRecord {
    pub fn new(unit_id: impl Into<String>, mut event_times: Vec<f64>) -> Self {
        event_times.sort_by(f64::total_cmp);
        Self {
            unit_id: unit_id.into(),
            event_times,
            observed_until: None,
        }
    }

    pub fn len(&self) -> usize {
        self.event_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.event_times.is_empty()
    }

    /// End of the interval over which this unit's events were recorded.
    pub fn observation_end(&self, window: &ObservationWindow) -> f64 {
        self.observed_until.unwrap_or(window.end())
    }

    /// Number of events in the half-open interval `(from, to]`.
    pub fn count_in(&self, from: f64, to: f64) -> usize {
        self.event_times.iter().filter(|&&t| t > from && t <= to).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDataset {
    units: Vec<UnitRecord>,
    window: ObservationWindow,
}

impl EventDataset {
    pub fn new(units: Vec<UnitRecord>, window: ObservationWindow) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::Validation("no units".into()));
        }
        let mut seen = HashMap::with_capacity(units.len());
        for u in &units {
            if seen.insert(u.unit_id.as_str(), ()).is_some() {
                return Err(Error::Validation(format!("duplicate unit id '{}'", u.unit_id)));
            }
            if u.event_times.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Validation(format!(
                    "unit '{}': event times are not sorted",
                    u.unit_id
                )));
            }
            let end = u.observation_end(&window);
            if let Some(t_obs) = u.observed_until {
                if !window.contains(t_obs) || t_obs <= window.start() {
                    return Err(Error::Validation(format!(
                        "unit '{}': observation end {t_obs} outside window {window}",
                        u.unit_id
                    )));
                }
            }
            for &t in &u.event_times {
                if !t.is_finite() || t < window.start() || t > end {
                    return Err(Error::OutOfWindow {
                        unit: u.unit_id.clone(),
                        time: t,
                        start: window.start(),
                        end,
                    });
                }
            }
        }
        Ok(Self { units, window })
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn window(&self) -> ObservationWindow {
        self.window
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    pub fn total_events(&self) -> usize {
        self.units.iter().map(UnitRecord::len).sum()
    }

    pub fn unit_ids(&self) -> Vec<String> {
        self.units.iter().map(|u| u.unit_id.clone()).collect()
    }

    pub fn unit_index(&self, unit_id: &str) -> Result<usize> {
        self.units
            .iter()
            .position(|u| u.unit_id == unit_id)
            .ok_or_else(|| Error::UnknownUnit {
                unit: unit_id.to_string(),
                available: self.unit_ids().join(", "),
            })
    }

    pub fn unit(&self, unit_id: &str) -> Result<&UnitRecord> {
        Ok(&self.units[self.unit_index(unit_id)?])
    }

    /// Per-unit integration regions `[window.start, observation_end]`.
    pub fn exposures(&self) -> Vec<(f64, f64)> {
        self.units
            .iter()
            .map(|u| (self.window.start(), u.observation_end(&self.window)))
            .collect()
    }

    /// Reads a dataset from CSV. With `align_zero`, each unit's times are
    /// shifted so that its first event sits at zero before validation.
    pub fn load_events(path: impl AsRef<Path>, window: ObservationWindow, align_zero: bool) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_csv_reader(file, window, align_zero)
    }

    pub fn from_csv_reader<R: Read>(reader: R, window: ObservationWindow, align_zero: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::None)
            .from_reader(reader);

        let mut order: Vec<String> = Vec::new();
        let mut grouped: HashMap<String, Vec<f64>> = HashMap::new();
        let mut saw_header = false;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::Parse {
                    line,
                    msg: e.to_string(),
                }
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if !saw_header {
                if rec.len() != 2 || rec.get(0) != Some(CSV_HEADER[0]) || rec.get(1) != Some(CSV_HEADER[1]) {
                    return Err(Error::Parse {
                        line,
                        msg: format!(
                            "expected header '{}', found '{}'",
                            CSV_HEADER.join(","),
                            rec.iter().collect::<Vec<_>>().join(",")
                        ),
                    });
                }
                saw_header = true;
                continue;
            }
            if rec.len() != 2 {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected 2 fields, found {}", rec.len()),
                });
            }
            let unit = rec.get(0).unwrap_or_default();
            if unit.is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: "empty unit_id".into(),
                });
            }
            let raw = rec.get(1).unwrap_or_default();
            let t: f64 = raw.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid event time '{raw}'"),
            })?;
            if !t.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite event time '{raw}'"),
                });
            }
            match grouped.get_mut(unit) {
                Some(v) => v.push(t),
                None => {
                    order.push(unit.to_string());
                    grouped.insert(unit.to_string(), vec![t]);
                }
            }
        }
        if !saw_header {
            return Err(Error::Parse {
                line: 1,
                msg: "missing header".into(),
            });
        }

        let units = order
            .into_iter()
            .map(|id| {
                let times = grouped.remove(&id).unwrap_or_default();
                let mut rec = UnitRecord::new(id, times);
                if align_zero {
                    if let Some(&first) = rec.event_times.first() {
                        rec.event_times.iter_mut().for_each(|t| *t -= first);
                    }
                }
                rec
            })
            .collect();
        Self::new(units, window)
    }

    /// Writes events in first-appearance unit order; units without events
    /// do not appear in the file.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for u in &self.units {
            for t in &u.event_times {
                w.write_record([u.unit_id.as_str(), &format_time(*t)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Keeps only events at or before `t* = start + alpha * length` for the
    /// named unit and records `t*` as its observation end.
    pub fn truncate_at_percentile(&self, unit_id: &str, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        let idx = self.unit_index(unit_id)?;
        let t_star = self.window.percentile_time(alpha);
        let mut out = self.clone();
        let unit = &mut out.units[idx];
        if t_star < unit.observation_end(&self.window) {
            unit.event_times.retain(|&t| t <= t_star);
            unit.observed_until = Some(t_star);
        }
        Ok(out)
    }

    /// Splits into (all other units, the test unit alone).
    pub fn holdout_split(&self, test_unit: &str) -> Result<(Self, Self)> {
        if self.units.len() < 2 {
            return Err(Error::Validation("holdout split needs at least two units".into()));
        }
        let idx = self.unit_index(test_unit)?;
        let mut train = self.units.clone();
        let test = train.remove(idx);
        Ok((
            Self {
                units: train,
                window: self.window,
            },
            Self {
                units: vec![test],
                window: self.window,
            },
        ))
    }

    /// Subset with only the named unit.
    pub fn only(&self, unit_id: &str) -> Result<Self> {
        let idx = self.unit_index(unit_id)?;
        Ok(Self {
            units: vec![self.units[idx].clone()],
            window: self.window,
        })
    }
}

/// Shortest decimal representation that round-trips.
pub fn format_time(t: f64) -> String {
    format!("{t:?}")
}
