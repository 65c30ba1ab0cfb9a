//! Static SVG of the board with one `<path>` per trajectory.

use std::fmt::Write;

use crate::envlab::{AvoidConfig, EpisodeRecord, Event};

const SIZE: f64 = 480.0;
const MARGIN: f64 = 20.0;

pub fn event_color(e: Event) -> &'static str {
    match e {
        Event::GoalTop => "#1a9850",
        Event::GoalOther => "#4575b4",
        Event::Collision => "#d73027",
        Event::Timeout => "#969696",
    }
}

fn px(p: [f64; 2]) -> (f64, f64) {
    (MARGIN + p[0] * SIZE, MARGIN + (1.0 - p[1]) * SIZE)
}

/// Renders the workspace, obstacles, goal line and trajectories colored by
/// their terminal event. Output depends only on the inputs.
pub fn render_svg(env: &AvoidConfig, episodes: &[EpisodeRecord]) -> String {
    let w = SIZE + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{w:.0}" viewBox="0 0 {w:.0} {w:.0}">"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN:.0}" y="{MARGIN:.0}" width="{SIZE:.0}" height="{SIZE:.0}" fill="#ffffff" stroke="#000000"/>"##
    );
    for c in &env.obstacles {
        let (cx, cy) = px(c.center);
        let _ = writeln!(
            s,
            r##"<circle class="obstacle" cx="{cx:.2}" cy="{cy:.2}" r="{:.2}" fill="#bdbdbd"/>"##,
            c.radius * SIZE
        );
    }
    let (gx, _) = px([env.goal_line_x, 0.0]);
    let _ = writeln!(
        s,
        r##"<line class="goal" x1="{gx:.2}" y1="{MARGIN:.0}" x2="{gx:.2}" y2="{:.0}" stroke="#000000" stroke-width="2"/>"##,
        MARGIN + SIZE
    );
    let (_, ty) = px([0.0, env.top_mode_y]);
    let _ = writeln!(
        s,
        r##"<line class="top-mode" x1="{gx:.2}" y1="{ty:.2}" x2="{:.0}" y2="{ty:.2}" stroke="#000000" stroke-dasharray="4 3"/>"##,
        MARGIN + SIZE
    );
    let (sx, sy) = px(env.start);
    let _ = writeln!(
        s,
        r##"<circle class="start" cx="{sx:.2}" cy="{sy:.2}" r="4" fill="#000000"/>"##
    );
    for ep in episodes {
        let mut d = String::new();
        for (i, p) in ep.states.iter().enumerate() {
            let (x, y) = px(*p);
            let _ = write!(d, "{}{x:.2} {y:.2}", if i == 0 { "M" } else { " L" });
        }
        let _ = writeln!(
            s,
            r#"<path data-event="{}" d="{d}" fill="none" stroke="{}" stroke-width="1.2" stroke-opacity="0.7"/>"#,
            ep.event.name(),
            event_color(ep.event)
        );
    }
    s.push_str("</svg>\n");
    s
}
