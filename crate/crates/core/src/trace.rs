//! View-record traces.
//!
//! One record per line: `arrival_ts_s,viewing_time_s,video_duration_s`
//! with a mandatory header row. The duration column may be empty. An
//! optional fourth column `class` (`short`/`long`) pins the class of a
//! record; without it, simulation assigns classes by the Bayes rule.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::markov::FlowClass;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewRecord {
    pub arrival_ts_s: f64,
    pub viewing_time_s: f64,
    pub video_duration_s: Option<f64>,
    pub class: Option<FlowClass>,
}

fn parse_field(raw: &str, line: usize, what: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {what} from {raw:?}"),
    })
}

/// Parse records from a reader. The header row is required; column order is
/// fixed and checked by name.
pub fn parse_view_records<R: BufRead>(reader: R) -> Result<Vec<ViewRecord>> {
    let mut records = Vec::new();
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file: header row required".into(),
            })
        }
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3
        || cols[0] != "arrival_ts_s"
        || cols[1] != "viewing_time_s"
        || cols[2] != "video_duration_s"
    {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header arrival_ts_s,viewing_time_s,video_duration_s[,class], got {header:?}"
            ),
        });
    }
    let has_class = cols.len() >= 4 && cols[3] == "class";

    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected at least 3 columns, got {}", fields.len()),
            });
        }
        let arrival = parse_field(fields[0], lineno, "arrival_ts_s")?;
        let viewing = parse_field(fields[1], lineno, "viewing_time_s")?;
        if viewing <= 0.0 || !viewing.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("viewing_time_s must be positive, got {viewing}"),
            });
        }
        let duration = if fields[2].trim().is_empty() {
            None
        } else {
            let d = parse_field(fields[2], lineno, "video_duration_s")?;
            if d <= 0.0 {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("video_duration_s must be positive, got {d}"),
                });
            }
            Some(d)
        };
        let class = if has_class && fields.len() >= 4 && !fields[3].trim().is_empty() {
            Some(match fields[3].trim() {
                "short" => FlowClass::Short,
                "long" => FlowClass::Long,
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("class must be short or long, got {other:?}"),
                    })
                }
            })
        } else {
            None
        };
        records.push(ViewRecord {
            arrival_ts_s: arrival,
            viewing_time_s: viewing,
            video_duration_s: duration,
            class,
        });
    }
    Ok(records)
}

pub fn read_view_records(path: &Path) -> Result<Vec<ViewRecord>> {
    let file = std::fs::File::open(path)?;
    parse_view_records(std::io::BufReader::new(file))
}

pub fn write_view_records<W: Write>(mut w: W, records: &[ViewRecord]) -> Result<()> {
    let any_class = records.iter().any(|r| r.class.is_some());
    if any_class {
        writeln!(w, "arrival_ts_s,viewing_time_s,video_duration_s,class")?;
    } else {
        writeln!(w, "arrival_ts_s,viewing_time_s,video_duration_s")?;
    }
    for r in records {
        let duration = r
            .video_duration_s
            .map(|d| d.to_string())
            .unwrap_or_default();
        if any_class {
            let class = r.class.map(|c| c.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{}",
                r.arrival_ts_s, r.viewing_time_s, duration, class
            )?;
        } else {
            writeln!(w, "{},{},{}", r.arrival_ts_s, r.viewing_time_s, duration)?;
        }
    }
    Ok(())
}

/// Restrict a trace to arrivals inside `[from_s, to_s)`, re-zeroing time.
pub fn filter_window(records: &[ViewRecord], from_s: f64, to_s: f64) -> Vec<ViewRecord> {
    records
        .iter()
        .filter(|r| r.arrival_ts_s >= from_s && r.arrival_ts_s < to_s)
        .map(|r| ViewRecord {
            arrival_ts_s: r.arrival_ts_s - from_s,
            ..*r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_and_without_optionals() {
        let records = vec![
            ViewRecord {
                arrival_ts_s: 0.5,
                viewing_time_s: 93.25,
                video_duration_s: Some(600.0),
                class: Some(FlowClass::Short),
            },
            ViewRecord {
                arrival_ts_s: 2.25,
                viewing_time_s: 1200.0,
                video_duration_s: None,
                class: None,
            },
        ];
        let mut buf = Vec::new();
        write_view_records(&mut buf, &records).unwrap();
        let parsed = parse_view_records(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(parsed, records);
    }

    #[test]
    fn missing_header_is_line_one_error() {
        let err = parse_view_records(std::io::Cursor::new("1.0,2.0,\n")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(parse_view_records(std::io::Cursor::new("")).is_err());
    }

    #[test]
    fn bad_number_reports_line() {
        let input = "arrival_ts_s,viewing_time_s,video_duration_s\n1.0,2.0,\nopps,3.0,\n";
        let err = parse_view_records(std::io::Cursor::new(input)).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn window_filter_rezeros_time() {
        let records = vec![
            ViewRecord {
                arrival_ts_s: 10.0,
                viewing_time_s: 1.0,
                video_duration_s: None,
                class: None,
            },
            ViewRecord {
                arrival_ts_s: 110.0,
                viewing_time_s: 1.0,
                video_duration_s: None,
                class: None,
            },
        ];
        let filtered = filter_window(&records, 100.0, 200.0);
        assert_eq!(filtered.len(), 1);
        assert_eq!(filtered[0].arrival_ts_s, 10.0);
    }
}
