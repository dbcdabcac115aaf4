//! Corner event detection on the surface of active events.
//!
//! An event is a corner when, on each of two concentric pixel circles around
//! it (radius 3 with 16 pixels, radius 4 with 20 pixels), there is a
//! contiguous arc — of length 3..=6 on the inner circle and 4..=8 on the
//! outer — whose SAE timestamps are all strictly newer than every timestamp
//! on the rest of that circle. Timestamps are read from the SAE of the
//! event's own polarity, after the event itself has been written to it.

use crate::event::{Event, EventStream, Sae};

/// Pixel offsets of the radius-3 circle, in clockwise order.
pub const CIRCLE3: [(i32, i32); 16] = [
    (0, 3),
    (1, 3),
    (2, 2),
    (3, 1),
    (3, 0),
    (3, -1),
    (2, -2),
    (1, -3),
    (0, -3),
    (-1, -3),
    (-2, -2),
    (-3, -1),
    (-3, 0),
    (-3, 1),
    (-2, 2),
    (-1, 3),
];

/// Pixel offsets of the radius-4 circle, in clockwise order.
pub const CIRCLE4: [(i32, i32); 20] = [
    (0, 4),
    (1, 4),
    (2, 3),
    (3, 2),
    (4, 1),
    (4, 0),
    (4, -1),
    (3, -2),
    (2, -3),
    (1, -4),
    (0, -4),
    (-1, -4),
    (-2, -3),
    (-3, -2),
    (-4, -1),
    (-4, 0),
    (-4, 1),
    (-3, 2),
    (-2, 3),
    (-1, 4),
];

/// Arc length bounds (min, max) for the two circles.
pub const ARC3: (usize, usize) = (3, 6);
pub const ARC4: (usize, usize) = (4, 8);

/// Events closer than this to any border cannot host both circles.
pub const BORDER_INSET: u16 = 4;

/// Gathers the SAE timestamps along a circle centered on `(x, y)`.
pub fn circle_values(sae: &Sae, p: i8, x: u16, y: u16, offsets: &[(i32, i32)]) -> Vec<f64> {
    offsets
        .iter()
        .map(|&(dx, dy)| sae.last(p, (x as i32 + dx) as u16, (y as i32 + dy) as u16))
        .collect()
}

/// True when some contiguous arc with length in `min_len..=max_len` is
/// strictly newer than the whole rest of the circle.
///
/// Any such arc must contain the circle's newest cell (otherwise the arc
/// minimum could not exceed the complement maximum), so only arcs through
/// the newest index are scanned.
fn has_dominant_arc(vals: &[f64], min_len: usize, max_len: usize) -> bool {
    let n = vals.len();
    let mut max_i = 0;
    let mut max_v = f64::NEG_INFINITY;
    for (i, &v) in vals.iter().enumerate() {
        if v > max_v {
            max_v = v;
            max_i = i;
        }
    }
    if max_v == f64::NEG_INFINITY {
        return false;
    }
    for len in min_len..=max_len {
        for offset in 0..len {
            let start = (max_i + n - offset) % n;
            let mut arc_min = f64::INFINITY;
            for j in 0..len {
                arc_min = arc_min.min(vals[(start + j) % n]);
            }
            let mut rest_max = f64::NEG_INFINITY;
            for j in len..n {
                rest_max = rest_max.max(vals[(start + j) % n]);
            }
            if arc_min > rest_max {
                return true;
            }
        }
    }
    false
}

/// Corner test for one event against the current SAE.
pub fn is_corner(sae: &Sae, e: &Event) -> bool {
    let (w, h) = (sae.width(), sae.height());
    if e.x < BORDER_INSET || e.x >= w - BORDER_INSET || e.y < BORDER_INSET || e.y >= h - BORDER_INSET
    {
        return false;
    }
    let v3 = circle_values(sae, e.p, e.x, e.y, &CIRCLE3);
    if !has_dominant_arc(&v3, ARC3.0, ARC3.1) {
        return false;
    }
    let v4 = circle_values(sae, e.p, e.x, e.y, &CIRCLE4);
    has_dominant_arc(&v4, ARC4.0, ARC4.1)
}

/// Replays the stream through a per-polarity SAE and returns the events
/// classified as corners, in stream order.
pub fn detect_corners(stream: &EventStream) -> Vec<Event> {
    let mut sae = Sae::new(stream.width, stream.height);
    let mut corners = Vec::new();
    for e in &stream.events {
        sae.update(e).expect("stream events are within bounds");
        if is_corner(&sae, e) {
            corners.push(*e);
        }
    }
    corners
}
