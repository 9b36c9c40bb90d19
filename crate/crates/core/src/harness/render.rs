//! Single-image SVG overlay of an episode.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::record::EpisodeRecord;

const CANVAS: f64 = 480.0;
const MARGIN: f64 = 16.0;

fn color(i: usize) -> String {
    // Golden-angle hues keep neighbouring indices apart.
    format!("hsl({:.0},70%,45%)", (i as f64 * 137.508) % 360.0)
}

struct Frame {
    scale: f64,
}

impl Frame {
    fn x(&self, x: f64) -> f64 {
        MARGIN + x * self.scale
    }

    /// SVG y grows downwards.
    fn y(&self, y: f64) -> f64 {
        MARGIN + (CANVAS - 2.0 * MARGIN) - y * self.scale
    }
}

/// Arena, landmarks (filled once covered), one trail per agent and dashed
/// assignment arrows at global steps.
pub fn render_svg(record: &EpisodeRecord) -> String {
    let h = &record.header;
    let f = Frame { scale: (CANVAS - 2.0 * MARGIN) / h.map_side.max(1e-9) };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS}" height="{CANVAS}" viewBox="0 0 {CANVAS} {CANVAS}">"#);
    let _ = writeln!(
        s,
        r#"<defs><marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="6" markerHeight="6" orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="context-stroke"/></marker></defs>"#
    );
    let side = h.map_side * f.scale;
    let _ = writeln!(
        s,
        r##"<rect class="arena" x="{MARGIN}" y="{MARGIN}" width="{side:.2}" height="{side:.2}" fill="#fafafa" stroke="#333"/>"##
    );
    let Some(last) = record.steps.last() else {
        s.push_str("</svg>\n");
        return s;
    };
    let r = h.cover_radius * f.scale;
    for (j, l) in h.landmarks.iter().enumerate() {
        let fill = if last.covered.get(j).copied().unwrap_or(false) { "#888" } else { "none" };
        let _ = writeln!(
            s,
            r##"<circle class="landmark" cx="{:.2}" cy="{:.2}" r="{r:.2}" fill="{fill}" stroke="#444" stroke-dasharray="3,2"/>"##,
            f.x(l[0]),
            f.y(l[1])
        );
    }
    for st in &record.steps {
        let Some(pairs) = &st.assignments else { continue };
        for &(a, g) in pairs {
            let (Some(p), Some(l)) = (st.positions.get(a), h.landmarks.get(g)) else { continue };
            let _ = writeln!(
                s,
                r#"<line class="assign" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-opacity="0.35" stroke-dasharray="4,3" marker-end="url(#arrow)"/>"#,
                f.x(p[0]),
                f.y(p[1]),
                f.x(l[0]),
                f.y(l[1]),
                color(a)
            );
        }
    }
    let slots = record.steps.iter().map(|st| st.positions.len()).max().unwrap_or(0);
    for a in 0..slots {
        let pts: Vec<String> = record
            .steps
            .iter()
            .filter(|st| st.active.get(a).copied().unwrap_or(false))
            .map(|st| format!("{:.2},{:.2}", f.x(st.positions[a][0]), f.y(st.positions[a][1])))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let c = color(a);
        let _ = writeln!(s, r#"<polyline class="trail" points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, pts.join(" "));
        let end = pts.last().expect("non-empty");
        let (ex, ey) = end.split_once(',').expect("x,y");
        let ar = h.agent_radius * f.scale;
        let _ = writeln!(s, r#"<circle class="agent" cx="{ex}" cy="{ey}" r="{ar:.2}" fill="{c}"/>"#);
    }
    let _ = writeln!(
        s,
        r##"<text x="{MARGIN}" y="{:.0}" font-size="11" fill="#333">t={} coverage={:.2}</text>"##,
        CANVAS - 3.0,
        last.t,
        last.coverage
    );
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(record: &EpisodeRecord, out: &Path) -> std::io::Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, render_svg(record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reset, EnvConfig};
    use crate::harness::record::StepRecord;

    #[test]
    fn empty_record_is_arena_only() {
        let env = EnvConfig::mpe(3);
        let w = reset(&env).unwrap();
        let r = EpisodeRecord::new(&env, &w, "none", None);
        let svg = render_svg(&r);
        assert!(svg.contains(r#"class="arena""#));
        assert!(!svg.contains("landmark") && !svg.contains("trail"));
    }

    #[test]
    fn covered_landmarks_are_filled() {
        let env = EnvConfig::mpe(2);
        let mut w = reset(&env).unwrap();
        w.covered[1] = true;
        let mut r = EpisodeRecord::new(&env, &w, "x", None);
        r.steps.push(StepRecord::observe(&w));
        let svg = render_svg(&r);
        assert_eq!(svg.matches(r##"fill="#888""##).count(), 1);
        assert_eq!(svg.matches(r#"class="trail""#).count(), 2);
    }
}
