//! Roofline artifacts: a CSV of roof samples plus overlaid points, and a
//! log-log SVG rendering. Output is byte-deterministic and `\n`-terminated.

use std::fmt::Write as _;
use std::io::Read;

use crate::error::{Error, Result};
use crate::roofline::{Roofline, RooflinePoint};

pub const ROOFLINE_CSV_HEADER: &str = "kind,label,ai,gflops";

const AI_MIN: f64 = 1e-2;
const AI_MAX: f64 = 1e3;
const SAMPLES_PER_DECADE: usize = 8;

/// Roof samples (`kind=roof`) followed by points (`kind=point`).
pub fn roofline_csv(roof: &Roofline, points: &[RooflinePoint]) -> Result<String> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    wtr.write_record(ROOFLINE_CSV_HEADER.split(','))?;
    for (ai, gflops) in roof.samples(AI_MIN, AI_MAX, SAMPLES_PER_DECADE) {
        wtr.write_record(["roof", "", &ai.to_string(), &gflops.to_string()])?;
    }
    for p in points {
        wtr.write_record(["point", &p.label, &p.ai.to_string(), &p.achieved.to_string()])?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::invalid("csv buffer", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Reads the `point` rows back out of a file produced by [`roofline_csv`].
pub fn read_roofline_points<R: Read>(reader: R, context: &str) -> Result<Vec<RooflinePoint>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(ROOFLINE_CSV_HEADER.split(',')) {
        return Err(Error::Parse {
            context: context.to_string(),
            line: 1,
            message: format!("expected header `{ROOFLINE_CSV_HEADER}`"),
        });
    }
    let mut out = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec?;
        let parse_err = |message: String| Error::Parse {
            context: context.to_string(),
            line,
            message,
        };
        if rec.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, got {}", rec.len())));
        }
        match &rec[0] {
            "roof" => continue,
            "point" => {}
            other => return Err(parse_err(format!("unknown row kind `{other}`"))),
        }
        let ai: f64 = rec[2].parse().map_err(|e| parse_err(format!("ai: {e}")))?;
        let achieved: f64 = rec[3].parse().map_err(|e| parse_err(format!("gflops: {e}")))?;
        out.push(RooflinePoint::new(ai, achieved, &rec[1]).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

struct LogAxis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl LogAxis {
    fn new(min: f64, max: f64, px_lo: f64, px_hi: f64) -> Self {
        LogAxis {
            lo: min.log10().floor(),
            hi: max.log10().ceil().max(min.log10().floor() + 1.0),
            px_lo,
            px_hi,
        }
    }

    fn map(&self, v: f64) -> f64 {
        let t = (v.log10() - self.lo) / (self.hi - self.lo);
        self.px_lo + t * (self.px_hi - self.px_lo)
    }

    fn decades(&self) -> impl Iterator<Item = i32> {
        (self.lo as i32)..=(self.hi as i32)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn decade_label(e: i32) -> String {
    if (-3..=4).contains(&e) {
        format!("{}", 10f64.powi(e))
    } else {
        format!("1e{e}")
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Log-log roofline with one marker colour per distinct point label.
/// Points with a non-positive coordinate cannot sit on a log axis and are skipped.
pub fn roofline_svg(roof: &Roofline, points: &[RooflinePoint], title: &str) -> String {
    const W: f64 = 800.0;
    const H: f64 = 560.0;
    const LEFT: f64 = 80.0;
    const RIGHT: f64 = 200.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 60.0;

    let visible: Vec<&RooflinePoint> = points.iter().filter(|p| p.ai > 0.0 && p.achieved > 0.0).collect();
    let roof_pts = roof.samples(AI_MIN, AI_MAX, SAMPLES_PER_DECADE);

    let ai_min = visible.iter().map(|p| p.ai).fold(AI_MIN, f64::min);
    let ai_max = visible.iter().map(|p| p.ai).fold(AI_MAX, f64::max);
    let y_min = visible
        .iter()
        .map(|p| p.achieved)
        .fold(roof.attainable(ai_min), f64::min);
    let y_max = roof.peak.max(visible.iter().map(|p| p.achieved).fold(0.0, f64::max));

    let x = LogAxis::new(ai_min, ai_max, LEFT, W - RIGHT);
    let y = LogAxis::new(y_min, y_max, H - BOTTOM, TOP);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        escape(title)
    );

    // grid and tick labels
    for e in x.decades() {
        let px = x.map(10f64.powi(e));
        let _ = writeln!(
            s,
            r##"<line x1="{px:.2}" y1="{TOP:.2}" x2="{px:.2}" y2="{:.2}" stroke="#dddddd"/>"##,
            H - BOTTOM
        );
        let _ = writeln!(
            s,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 18.0,
            decade_label(e)
        );
    }
    for e in y.decades() {
        let py = y.map(10f64.powi(e));
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#dddddd"/>"##,
            W - RIGHT
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            py + 4.0,
            decade_label(e)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        W - RIGHT - LEFT,
        H - BOTTOM - TOP
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Arithmetic intensity (FLOP/byte)</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">Performance (GFLOP/s)</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        (TOP + H - BOTTOM) / 2.0
    );

    let poly: Vec<String> = roof_pts
        .iter()
        .filter(|&&(ai, _)| ai >= 10f64.powf(x.lo) && ai <= 10f64.powf(x.hi))
        .map(|&(ai, g)| format!("{:.2},{:.2}", x.map(ai), y.map(g)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="black" stroke-width="2"/>"#,
        poly.join(" ")
    );

    let mut labels: Vec<&str> = Vec::new();
    for p in &visible {
        if !labels.contains(&p.label.as_str()) {
            labels.push(&p.label);
        }
    }
    for p in &visible {
        let colour = PALETTE[labels.iter().position(|l| *l == p.label).unwrap_or(0) % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{colour}" fill-opacity="0.8"/>"#,
            x.map(p.ai),
            y.map(p.achieved)
        );
    }
    for (i, label) in labels.iter().enumerate() {
        let ly = TOP + 16.0 + 18.0 * i as f64;
        let lx = W - RIGHT + 16.0;
        let _ = writeln!(
            s,
            r#"<circle cx="{lx:.2}" cy="{:.2}" r="4" fill="{}"/>"#,
            ly - 4.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, lx + 10.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}
