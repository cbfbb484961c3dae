//! Line charts of accuracy against inference token count, as SVG text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub regime: String,
    pub count: usize,
    pub accuracy: f64,
}

/// Reads `train_regime,infer_N,accuracy,...` rows, skipping incomplete cells.
pub fn read_matrix_csv<R: Read>(r: R) -> Result<Vec<Point>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format("matrix csv", format!("missing column `{name}`")))
    };
    let (ri, ni, ai) = (col("train_regime")?, col("infer_N")?, col("accuracy")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let acc = &rec[ai];
        if acc.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format("matrix csv", format!("bad {what} in line {:?}", rec.position().map(|p| p.line())));
        out.push(Point {
            regime: rec[ri].to_string(),
            count: rec[ni].parse().map_err(|_| bad("infer_N"))?,
            accuracy: acc.parse().map_err(|_| bad("accuracy"))?,
        });
    }
    Ok(out)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

/// One polyline per regime through its seed-averaged accuracies.
pub fn accuracy_svg(points: &[Point], title: &str) -> Result<String> {
    if points.is_empty() {
        return Err(Error::contract("no rows"));
    }
    let mut series: BTreeMap<&str, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for p in points {
        let e = series.entry(&p.regime).or_default().entry(p.count).or_default();
        e.0 += p.accuracy;
        e.1 += 1;
    }
    let xs: Vec<usize> = {
        let mut v: Vec<usize> = points.iter().map(|p| p.count).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (x0, x1) = (xs[0] as f64, *xs.last().expect("nonempty") as f64);
    let sx = |x: f64| {
        if x1 > x0 {
            PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD)
        } else {
            W / 2.0
        }
    };
    let sy = |y: f64| H - PAD - y.clamp(0.0, 1.0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for tick in 0..=5 {
        let y = tick as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.1}</text>"#,
            PAD - 6.0,
            sy(y) + 4.0
        );
    }
    for &x in &xs {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#,
            sx(x as f64),
            H - PAD + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">inference vision tokens</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">accuracy</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (i, (regime, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|(&x, &(sum, n))| format!("{:.1},{:.1}", sx(x as f64), sy(sum / n as f64)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for p in &path {
            let (cx, cy) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let ly = PAD + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#,
            W - PAD - 90.0,
            escape(regime)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
