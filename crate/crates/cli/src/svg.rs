//! Per-video trace charts.

use std::fmt::Write;

use biscc::datamodel::GtSegment;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 260.0;
const LEFT: f64 = 48.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 28.0;
const BOTTOM: f64 = 40.0;

pub struct Series<'a> {
    pub name: &'a str,
    pub color: &'a str,
    pub dashed: bool,
    pub values: &'a [f64],
}

fn x_of(t: f64, t_len: usize) -> f64 {
    LEFT + (WIDTH - LEFT - RIGHT) * t / t_len.max(1) as f64
}

fn y_of(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    TOP + (HEIGHT - TOP - BOTTOM) * (1.0 - v)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart over `[0, T)` with values in `[0, 1]`. Ground-truth
/// intervals are shaded green, co-scene intervals orange.
pub fn trace_chart(title: &str, t_len: usize, gt: &[GtSegment], co_scene: &[GtSegment], series: &[Series]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="16" font-size="13">{}</text>"#, escape(title));
    for (segs, fill) in [(co_scene, "#fdd9a8"), (gt, "#bfe6bf")] {
        for g in segs {
            let x0 = x_of(g.start as f64, t_len);
            let x1 = x_of(g.end as f64, t_len);
            let _ = writeln!(
                s,
                r#"<rect x="{x0:.2}" y="{TOP}" width="{:.2}" height="{:.2}" fill="{fill}"><title>class {}</title></rect>"#,
                x1 - x0,
                HEIGHT - TOP - BOTTOM,
                g.class
            );
        }
    }
    let bottom = HEIGHT - BOTTOM;
    let _ = writeln!(
        s,
        r##"<path d="M{LEFT} {TOP} V{bottom} H{:.2}" fill="none" stroke="#333"/>"##,
        WIDTH - RIGHT
    );
    for v in [0.0, 0.5, 1.0] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#, LEFT - 6.0, y_of(v) + 4.0);
    }
    let ticks = 8.min(t_len.max(1));
    for i in 0..=ticks {
        let t = t_len * i / ticks;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#,
            x_of(t as f64, t_len),
            bottom + 14.0
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let points: Vec<String> = ser
            .values
            .iter()
            .enumerate()
            .map(|(t, &v)| format!("{:.2},{:.2}", x_of(t as f64 + 0.5, t_len), y_of(v)))
            .collect();
        let dash = if ser.dashed { r#" stroke-dasharray="5 3""# } else { "" };
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#,
            points.join(" "),
            ser.color
        );
        let lx = LEFT + 150.0 * i as f64;
        let ly = HEIGHT - 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="2"{dash}/>"#,
            ly - 4.0,
            lx + 18.0,
            ly - 4.0,
            ser.color
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, lx + 22.0, escape(ser.name));
    }
    s.push_str("</svg>\n");
    s
}
