//! CSV (canonical, parseable) and SVG (for inspection) renderings of the
//! evaluation and analysis results.
//!
//! CSV schemas:
//! * retrieval — `direction,k,recall`, one row per direction and cutoff;
//! * attention — `position,weight` per token (1-based), followed by the
//!   footer rows `entropy,<nats>` and `mass_beyond_77,<fraction>`;
//! * relevance — `size,stride,window_index,start,end,cosine`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::analysis::{AttentionSpread, RelevanceGrid};
use super::retrieval::{Direction, RecallAtK, RetrievalReport};
use crate::error::{Error, Result};

pub const RETRIEVAL_HEADER: &str = "direction,k,recall";
pub const ATTENTION_HEADER: &str = "position,weight";
pub const RELEVANCE_HEADER: &str = "size,stride,window_index,start,end,cosine";
const ENTROPY_ROW: &str = "entropy";
const MASS_ROW: &str = "mass_beyond_77";

#[derive(Clone, Debug, PartialEq)]
pub enum Report {
    Retrieval(Vec<RetrievalReport>),
    Attention(AttentionSpread),
    Relevance(Vec<RelevanceGrid>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self {
            Report::Retrieval(reports) => {
                out.push_str(RETRIEVAL_HEADER);
                out.push('\n');
                for r in reports {
                    for RecallAtK { k, recall } in &r.recalls {
                        let _ = writeln!(out, "{},{k},{recall}", r.direction);
                    }
                }
            }
            Report::Attention(a) => {
                out.push_str(ATTENTION_HEADER);
                out.push('\n');
                for (i, w) in a.weights.iter().enumerate() {
                    let _ = writeln!(out, "{},{w}", i + 1);
                }
                let _ = writeln!(out, "{ENTROPY_ROW},{}", a.entropy);
                let _ = writeln!(out, "{MASS_ROW},{}", a.mass_beyond_window);
            }
            Report::Relevance(grids) => {
                out.push_str(RELEVANCE_HEADER);
                out.push('\n');
                for g in grids {
                    for (w, (&(s, e), c)) in g.offsets.iter().zip(&g.cosines).enumerate() {
                        let _ = writeln!(out, "{},{},{w},{s},{e},{c}", g.window_size, g.stride);
                    }
                }
            }
        }
        out
    }

    /// Parses a CSV emitted by [`Report::to_csv`]; the header selects the kind.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let rows: Vec<(usize, Vec<&str>)> = lines
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| (n, l.split(',').collect()))
            .collect();
        match header {
            RETRIEVAL_HEADER => parse_retrieval(&rows).map(Report::Retrieval),
            ATTENTION_HEADER => parse_attention(&rows).map(Report::Attention),
            RELEVANCE_HEADER => parse_relevance(&rows).map(Report::Relevance),
            other => Err(Error::Parse {
                line: 1,
                msg: format!("unrecognized header `{other}`"),
            }),
        }
    }

    pub fn to_svg(&self) -> String {
        match self {
            Report::Retrieval(reports) => retrieval_svg(reports),
            Report::Attention(a) => attention_svg(a),
            Report::Relevance(grids) => relevance_svg(grids),
        }
    }
}

/// Writes `report` to `path` in the requested format.
pub fn emit_report(report: &Report, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Svg => report.to_svg(),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn field<T: FromStr>(row: &(usize, Vec<&str>), i: usize) -> Result<T> {
    row.1
        .get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            line: row.0,
            msg: format!("bad or missing column {}", i + 1),
        })
}

fn check_width(row: &(usize, Vec<&str>), width: usize) -> Result<()> {
    if row.1.len() != width {
        return Err(Error::Parse {
            line: row.0,
            msg: format!("expected {width} columns, found {}", row.1.len()),
        });
    }
    Ok(())
}

fn parse_retrieval(rows: &[(usize, Vec<&str>)]) -> Result<Vec<RetrievalReport>> {
    let mut reports: Vec<RetrievalReport> = Vec::new();
    for row in rows {
        check_width(row, 3)?;
        let direction: Direction = row.1[0].parse().map_err(|e: Error| Error::Parse {
            line: row.0,
            msg: e.to_string(),
        })?;
        let entry = RecallAtK {
            k: field(row, 1)?,
            recall: field(row, 2)?,
        };
        match reports.last_mut() {
            Some(r) if r.direction == direction => r.recalls.push(entry),
            _ => reports.push(RetrievalReport {
                direction,
                recalls: vec![entry],
            }),
        }
    }
    Ok(reports)
}

fn parse_attention(rows: &[(usize, Vec<&str>)]) -> Result<AttentionSpread> {
    let mut weights = Vec::new();
    let (mut entropy, mut mass) = (None, None);
    for row in rows {
        check_width(row, 2)?;
        match row.1[0] {
            ENTROPY_ROW => entropy = Some(field(row, 1)?),
            MASS_ROW => mass = Some(field(row, 1)?),
            _ => {
                let pos: usize = field(row, 0)?;
                if pos != weights.len() + 1 {
                    return Err(Error::Parse {
                        line: row.0,
                        msg: format!("position {pos} out of sequence"),
                    });
                }
                weights.push(field(row, 1)?);
            }
        }
    }
    let missing = |what: &str| Error::Parse {
        line: rows.last().map_or(1, |r| r.0),
        msg: format!("missing `{what}` summary row"),
    };
    Ok(AttentionSpread {
        weights,
        entropy: entropy.ok_or_else(|| missing(ENTROPY_ROW))?,
        mass_beyond_window: mass.ok_or_else(|| missing(MASS_ROW))?,
    })
}

fn parse_relevance(rows: &[(usize, Vec<&str>)]) -> Result<Vec<RelevanceGrid>> {
    let mut grids: Vec<RelevanceGrid> = Vec::new();
    for row in rows {
        check_width(row, 6)?;
        let (size, stride): (usize, usize) = (field(row, 0)?, field(row, 1)?);
        let index: usize = field(row, 2)?;
        let offsets = (field(row, 3)?, field(row, 4)?);
        let cosine: f64 = field(row, 5)?;
        let grid = match grids.last_mut() {
            Some(g) if g.window_size == size && g.stride == stride && index == g.offsets.len() => g,
            _ => {
                grids.push(RelevanceGrid {
                    window_size: size,
                    stride,
                    offsets: Vec::new(),
                    cosines: Vec::new(),
                });
                grids.last_mut().expect("just pushed")
            }
        };
        if index != grid.offsets.len() {
            return Err(Error::Parse {
                line: row.0,
                msg: format!("window index {index} out of sequence"),
            });
        }
        grid.offsets.push(offsets);
        grid.cosines.push(cosine);
    }
    Ok(grids)
}

const WIDTH: f64 = 640.0;
const MARGIN: f64 = 40.0;

fn svg_open(height: f64, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" \
         viewBox=\"0 0 {WIDTH} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <title>{}</title>\n<rect width=\"{WIDTH}\" height=\"{height}\" fill=\"white\"/>\n",
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn retrieval_svg(reports: &[RetrievalReport]) -> String {
    let bars: Vec<(String, f64)> = reports
        .iter()
        .flat_map(|r| r.recalls.iter().map(move |x| (format!("{} R@{}", r.direction, x.k), x.recall)))
        .collect();
    let height = MARGIN * 2.0 + 22.0 * bars.len() as f64;
    let mut s = svg_open(height, "retrieval recall (%)");
    let span = WIDTH - 3.0 * MARGIN - 80.0;
    for (i, (label, recall)) in bars.iter().enumerate() {
        let y = MARGIN + 22.0 * i as f64;
        let w = span * recall / 100.0;
        let _ = writeln!(
            s,
            "<text x=\"{MARGIN}\" y=\"{:.1}\">{}</text><rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{w:.2}\" height=\"16\" fill=\"steelblue\"/><text x=\"{:.1}\" y=\"{:.1}\">{recall:.1}</text>",
            y + 12.0,
            escape(label),
            MARGIN + 80.0,
            MARGIN + 84.0 + w,
            y + 12.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn attention_svg(a: &AttentionSpread) -> String {
    let height = 240.0;
    let mut s = svg_open(height, "aggregation-token attention");
    let n = a.weights.len().max(1) as f64;
    let bar = (WIDTH - 2.0 * MARGIN) / n;
    let peak = a.weights.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let base = height - MARGIN;
    for (i, w) in a.weights.iter().enumerate() {
        let h = (base - MARGIN) * w / peak;
        let fill = if i >= crate::posenc::TEACHER_WINDOW { "darkorange" } else { "steelblue" };
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{fill}\"/>",
            MARGIN + bar * i as f64,
            base - h,
            bar.max(0.5)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{MARGIN}\" y=\"{:.1}\">entropy {:.4} nats, mass past token 77: {:.4}</text>",
        MARGIN - 12.0,
        a.entropy,
        a.mass_beyond_window
    );
    s.push_str("</svg>\n");
    s
}

fn relevance_svg(grids: &[RelevanceGrid]) -> String {
    let row_h = 28.0;
    let height = MARGIN * 2.0 + row_h * grids.len() as f64;
    let mut s = svg_open(height, "caption window relevance");
    let extent = grids
        .iter()
        .flat_map(|g| g.offsets.iter().map(|o| o.1))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let span = WIDTH - 2.0 * MARGIN - 60.0;
    for (r, g) in grids.iter().enumerate() {
        let y = MARGIN + row_h * r as f64;
        let _ = writeln!(
            s,
            "<text x=\"4\" y=\"{:.1}\">{}/{}</text>",
            y + 16.0,
            g.window_size,
            g.stride
        );
        for (&(start, end), c) in g.offsets.iter().zip(&g.cosines) {
            // Cosine −1 → blue, +1 → red; windows overlap, so draw translucent.
            let t = ((c + 1.0) / 2.0).clamp(0.0, 1.0);
            let (red, blue) = ((255.0 * t).round(), (255.0 * (1.0 - t)).round());
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{y:.1}\" width=\"{:.2}\" height=\"{:.1}\" fill=\"rgb({red},64,{blue})\" fill-opacity=\"0.35\"/>",
                MARGIN + 60.0 + span * start as f64 / extent,
                span * (end - start) as f64 / extent,
                row_h - 6.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
