//! Intersection geometry.
//!
//! The junction is centred at the origin. Each approach road carries two
//! incoming lanes: the inner lane turns left, the outer lane goes straight.
//! Traffic keeps right. For the southern approach (travelling north) the
//! inner lane runs along `x = w/2` and the outer along `x = 3w/2`, where
//! `w` is the lane width; the junction box is the square `|x|,|y| ≤ 2w`.
//! The other approaches are rotations of the southern one by multiples of
//! 90°.
//!
//! A route is parameterized by arc length `s` from the start of its
//! approach lane: `[0, L)` is the approach, `[L, L + J)` the junction
//! segment and `[L + J, L + J + E]` the exit lane.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

pub type Point = (f64, f64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approach {
    South,
    East,
    North,
    West,
}

impl Approach {
    pub const ALL: [Approach; 4] = [
        Approach::South,
        Approach::East,
        Approach::North,
        Approach::West,
    ];

    /// Number of quarter turns (counter-clockwise) from the southern approach.
    fn quarter_turns(self) -> u32 {
        match self {
            Approach::South => 0,
            Approach::East => 1,
            Approach::North => 2,
            Approach::West => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Approach::South => "south",
            Approach::East => "east",
            Approach::North => "north",
            Approach::West => "west",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Movement {
    Left,
    Through,
}

#[derive(Clone, Debug, PartialEq)]
enum Segment {
    Line {
        start: Point,
        dir: Point,
        len: f64,
    },
    Arc {
        center: Point,
        radius: f64,
        start_angle: f64,
        len: f64,
    },
}

impl Segment {
    fn len(&self) -> f64 {
        match self {
            Segment::Line { len, .. } | Segment::Arc { len, .. } => *len,
        }
    }

    /// Point at distance `d` along the segment; lines extrapolate freely.
    fn point(&self, d: f64) -> Point {
        match *self {
            Segment::Line { start, dir, .. } => (start.0 + dir.0 * d, start.1 + dir.1 * d),
            Segment::Arc {
                center,
                radius,
                start_angle,
                ..
            } => {
                let a = start_angle + d / radius;
                (center.0 + radius * a.cos(), center.1 + radius * a.sin())
            }
        }
    }

    fn end_dir(&self) -> Point {
        match *self {
            Segment::Line { dir, .. } => dir,
            Segment::Arc {
                radius,
                start_angle,
                len,
                ..
            } => {
                let a = start_angle + len / radius;
                (-a.sin(), a.cos())
            }
        }
    }

    fn start_dir(&self) -> Point {
        match *self {
            Segment::Line { dir, .. } => dir,
            Segment::Arc { start_angle, .. } => (-start_angle.sin(), start_angle.cos()),
        }
    }

    fn is_arc(&self) -> bool {
        matches!(self, Segment::Arc { .. })
    }
}

/// An arc-length parameterized path from an approach lane to an exit lane.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub id: usize,
    pub approach: Approach,
    pub movement: Movement,
    segments: Vec<Segment>,
    /// Arc length at which the junction box is entered.
    pub box_entry: f64,
    /// Arc length at which the junction box is left.
    pub box_exit: f64,
    pub length: f64,
}

impl Route {
    /// Cartesian position at arc length `s`. Values outside `[0, length]`
    /// extrapolate along the first/last segment's tangent.
    pub fn position(&self, s: f64) -> Point {
        if s <= 0.0 {
            let first = &self.segments[0];
            let start = first.point(0.0);
            let dir = first.start_dir();
            return (start.0 + dir.0 * s, start.1 + dir.1 * s);
        }
        let mut offset = 0.0;
        for seg in &self.segments {
            if s <= offset + seg.len() {
                return seg.point(s - offset);
            }
            offset += seg.len();
        }
        let last = self.segments.last().expect("route has segments");
        let end = last.point(last.len());
        let dir = last.end_dir();
        let extra = s - offset;
        (end.0 + dir.0 * extra, end.1 + dir.1 * extra)
    }

    /// Polyline through `[s_from, s_to]`; straight parts are exact, arcs are
    /// sampled with chords of at most `max_chord` metres.
    pub fn polyline(&self, s_from: f64, s_to: f64, max_chord: f64) -> Vec<Point> {
        let mut pts = vec![self.position(s_from)];
        let mut offset = 0.0;
        let mut cuts = Vec::new();
        for seg in &self.segments {
            let (a, b) = (offset, offset + seg.len());
            if seg.is_arc() {
                let lo = s_from.max(a);
                let hi = s_to.min(b);
                if hi > lo {
                    let n = ((hi - lo) / max_chord).ceil().max(1.0) as usize;
                    for k in 1..n {
                        cuts.push(lo + (hi - lo) * k as f64 / n as f64);
                    }
                }
            }
            for edge in [a, b] {
                if edge > s_from && edge < s_to {
                    cuts.push(edge);
                }
            }
            offset = b;
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        pts.extend(cuts.into_iter().map(|s| self.position(s)));
        pts.push(self.position(s_to));
        pts
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub lane_length: f64,
    pub lane_width: f64,
    pub exit_length: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            lane_length: 100.0,
            lane_width: 3.2,
            exit_length: 10.0,
        }
    }
}

/// The four-way, two-lane junction restricted to a set of approaches.
///
/// Routes (and hence agent lanes) are indexed `2·k + {0: left, 1: through}`
/// for the `k`-th configured approach.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork {
    pub geometry: Geometry,
    pub routes: Vec<Route>,
}

fn rotate(p: Point, turns: u32) -> Point {
    match turns % 4 {
        0 => p,
        1 => (-p.1, p.0),
        2 => (-p.0, -p.1),
        _ => (p.1, -p.0),
    }
}

impl RoadNetwork {
    /// All four approaches.
    pub fn build(geometry: Geometry) -> Self {
        Self::with_approaches(geometry, &Approach::ALL)
    }

    pub fn with_approaches(geometry: Geometry, approaches: &[Approach]) -> Self {
        let mut routes = Vec::with_capacity(2 * approaches.len());
        for &approach in approaches {
            for movement in [Movement::Left, Movement::Through] {
                let id = routes.len();
                routes.push(Self::route(&geometry, id, approach, movement));
            }
        }
        RoadNetwork { geometry, routes }
    }

    fn route(g: &Geometry, id: usize, approach: Approach, movement: Movement) -> Route {
        let w = g.lane_width;
        let half = 2.0 * w;
        let turns = approach.quarter_turns();
        let rot_angle = turns as f64 * FRAC_PI_2;
        let line = |start: Point, dir: Point, len: f64| Segment::Line {
            start: rotate(start, turns),
            dir: rotate(dir, turns),
            len,
        };
        let (segments, junction_len) = match movement {
            Movement::Left => {
                let x = 0.5 * w;
                let radius = half + x;
                let arc_len = radius * FRAC_PI_2;
                (
                    vec![
                        line((x, -half - g.lane_length), (0.0, 1.0), g.lane_length),
                        Segment::Arc {
                            center: rotate((-half, -half), turns),
                            radius,
                            start_angle: rot_angle,
                            len: arc_len,
                        },
                        line((-half, x), (-1.0, 0.0), g.exit_length),
                    ],
                    arc_len,
                )
            }
            Movement::Through => {
                let x = 1.5 * w;
                (
                    vec![
                        line((x, -half - g.lane_length), (0.0, 1.0), g.lane_length),
                        line((x, -half), (0.0, 1.0), 2.0 * half),
                        line((x, half), (0.0, 1.0), g.exit_length),
                    ],
                    2.0 * half,
                )
            }
        };
        Route {
            id,
            approach,
            movement,
            segments,
            box_entry: g.lane_length,
            box_exit: g.lane_length + junction_len,
            length: g.lane_length + junction_len + g.exit_length,
        }
    }

    pub fn lanes(&self) -> usize {
        self.routes.len()
    }

    /// Half side of the junction box.
    pub fn box_half_width(&self) -> f64 {
        2.0 * self.geometry.lane_width
    }

    /// Distance from the intersection centre to the start of an approach
    /// lane; used to scale observed positions into `[-1, 1]`.
    pub fn control_extent(&self) -> f64 {
        self.geometry.lane_length + self.box_half_width()
    }

    /// Whether the junction portions of two routes cross.
    pub fn routes_conflict(&self, a: usize, b: usize) -> bool {
        if a == b {
            return false;
        }
        let (ra, rb) = (&self.routes[a], &self.routes[b]);
        let pa = ra.polyline(ra.box_entry, ra.box_exit, 0.25);
        let pb = rb.polyline(rb.box_entry, rb.box_exit, 0.25);
        polyline_distance(&pa, &pb) < 1e-9
    }
}

fn seg_point_dist(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Minimum Euclidean distance between two segments.
pub fn segment_distance(p1: Point, p2: Point, q1: Point, q2: Point) -> f64 {
    if segments_intersect(p1, p2, q1, q2) {
        return 0.0;
    }
    seg_point_dist(p1, q1, q2)
        .min(seg_point_dist(p2, q1, q2))
        .min(seg_point_dist(q1, p1, p2))
        .min(seg_point_dist(q2, p1, p2))
}

/// Minimum distance between two polylines.
pub fn polyline_distance(a: &[Point], b: &[Point]) -> f64 {
    let mut best = f64::INFINITY;
    for wa in a.windows(2) {
        for wb in b.windows(2) {
            best = best.min(segment_distance(wa[0], wa[1], wb[0], wb[1]));
        }
    }
    best
}
