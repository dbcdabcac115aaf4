//! Naive reference implementations used to cross-check the production code
//! paths. These deliberately trade speed for obviousness and share no search
//! logic with the optimized versions.

use crate::event::{Event, EventStream, Sae, SAE_NEVER};
use crate::tracker::efast::{BORDER_INSET, CIRCLE3, CIRCLE4};

/// Exhaustive arc enumeration corner test: for every (start, length) pair on
/// both circles, check whether the arc's oldest timestamp is strictly newer
/// than the newest timestamp outside the arc.
fn any_arc_dominates(vals: &[f64], min_len: usize, max_len: usize) -> bool {
    let n = vals.len();
    for start in 0..n {
        for len in min_len..=max_len {
            let in_arc = |i: usize| (i + n - start) % n < len;
            let mut arc_min = f64::INFINITY;
            let mut rest_max = SAE_NEVER;
            for (i, &v) in vals.iter().enumerate() {
                if in_arc(i) {
                    arc_min = arc_min.min(v);
                } else {
                    rest_max = rest_max.max(v);
                }
            }
            if arc_min > rest_max {
                return true;
            }
        }
    }
    false
}

fn corner_bruteforce(sae: &Sae, e: &Event) -> bool {
    let (w, h) = (sae.width(), sae.height());
    if e.x < BORDER_INSET || e.x >= w - BORDER_INSET || e.y < BORDER_INSET || e.y >= h - BORDER_INSET
    {
        return false;
    }
    let gather = |offsets: &[(i32, i32)]| -> Vec<f64> {
        offsets
            .iter()
            .map(|&(dx, dy)| sae.last(e.p, (e.x as i32 + dx) as u16, (e.y as i32 + dy) as u16))
            .collect()
    };
    any_arc_dominates(&gather(&CIRCLE3), 3, 6) && any_arc_dominates(&gather(&CIRCLE4), 4, 8)
}

/// Brute-force equivalent of [`crate::tracker::detect_corners`].
pub fn detect_corners_bruteforce(stream: &EventStream) -> Vec<Event> {
    let mut sae = Sae::new(stream.width, stream.height);
    let mut corners = Vec::new();
    for e in &stream.events {
        sae.update(e).expect("stream events are within bounds");
        if corner_bruteforce(&sae, e) {
            corners.push(*e);
        }
    }
    corners
}

/// Single-linkage grouping with a hard cut distance, used as an independent
/// oracle for density-based clustering on well-separated data: points closer
/// than `cut` (in the scaled (x, y, t) metric) end up in the same group.
pub fn single_linkage_groups(points: &[[f64; 3]], cut: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let d2 = (0..3).map(|k| (points[i][k] - points[j][k]).powi(2)).sum::<f64>();
            if d2 < cut * cut {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}
