//! Event feature tracking: corner detection on the SAE, a density filter,
//! spatio-temporal clustering with head/tail cluster merging, and windowed
//! track extraction.
//!
//! All spatio-temporal distances are Euclidean in `(x, y, t * time_scale)`
//! space, so `time_scale` (pixels per second) decides how a time gap trades
//! off against a pixel gap. The default of 1000 puts milliseconds and pixels
//! on the same scale.

pub mod efast;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hdbscan::{Hdbscan, HdbscanHyperParams};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, EventStream};

pub use efast::detect_corners;

/// Tuning knobs for the tracking front-end.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Neighborhood distance for the density score.
    pub lambda: f64,
    /// Minimum cluster size for the density-based clustering.
    pub min_pts: usize,
    /// Cluster selection epsilon for the density-based clustering.
    pub epsilon: f64,
    /// Radius of the head/tail merge hemisphere.
    pub phi: f64,
    /// Number of first/last cluster events averaged into each descriptor.
    pub n_sigma: usize,
    /// Track extraction window duration in seconds.
    pub dt: f64,
    /// Pixels per second used to embed time into the clustering metric.
    pub time_scale: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            lambda: 7.0,
            min_pts: 10,
            epsilon: 5.0,
            phi: 30.0,
            n_sigma: 5,
            dt: 0.030,
            time_scale: 1000.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda > 0.0
            && self.min_pts > 0
            && self.epsilon > 0.0
            && self.phi > 0.0
            && self.n_sigma > 0
            && self.dt > 0.0
            && self.time_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(
                "tracker config fields must all be positive".into(),
            ))
        }
    }
}

/// A corner event together with its local neighborhood density score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerEvent {
    pub event: Event,
    pub density: f64,
}

/// A point in the scaled spatio-temporal metric: `t` is in
/// `seconds * time_scale` units, `x`/`y` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Descriptor {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

impl Descriptor {
    pub fn dist(&self, other: &Descriptor) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn dist2(&self, other: &Descriptor) -> f64 {
        (self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.t - other.t).powi(2)
    }
}

/// A cluster of corner events, time-ordered, with head (start) and tail
/// (end) descriptors.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub id: usize,
    /// Members ordered by timestamp.
    pub members: Vec<CornerEvent>,
    pub head: Descriptor,
    pub tail: Descriptor,
}

fn mean_descriptor(members: &[CornerEvent], time_scale: f64) -> Descriptor {
    let n = members.len() as f64;
    let (mut t, mut x, mut y) = (0.0, 0.0, 0.0);
    for m in members {
        t += m.event.t * time_scale;
        x += m.event.x as f64;
        y += m.event.y as f64;
    }
    Descriptor {
        t: t / n,
        x: x / n,
        y: y / n,
    }
}

impl Cluster {
    /// Builds a cluster from time-ordered members and computes descriptors.
    pub fn new(id: usize, members: Vec<CornerEvent>, n_sigma: usize, time_scale: f64) -> Self {
        debug_assert!(!members.is_empty());
        let k = n_sigma.min(members.len());
        let head = mean_descriptor(&members[..k], time_scale);
        let tail = mean_descriptor(&members[members.len() - k..], time_scale);
        Cluster {
            id,
            members,
            head,
            tail,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Computes the density score of each corner over the full stream: the count
/// of same-polarity events within `lambda` in the scaled metric, divided by
/// `lambda`. The event itself does not count as its own neighbor. Corners
/// below the mean score of their polarity are removed.
pub fn density_filter(
    corners: &[Event],
    stream: &EventStream,
    cfg: &TrackerConfig,
) -> Vec<CornerEvent> {
    let ts = cfg.time_scale;
    let lambda = cfg.lambda;
    let t_halfwidth = lambda / ts;
    let events = &stream.events;

    let scored: Vec<CornerEvent> = corners
        .iter()
        .map(|c| {
            let lo = events.partition_point(|e| e.t < c.t - t_halfwidth);
            let hi = events.partition_point(|e| e.t <= c.t + t_halfwidth);
            let mut count = 0usize;
            let mut self_seen = false;
            for e in &events[lo..hi] {
                if e.p != c.p {
                    continue;
                }
                if !self_seen && e == c {
                    self_seen = true;
                    continue;
                }
                let d2 = (e.x as f64 - c.x as f64).powi(2)
                    + (e.y as f64 - c.y as f64).powi(2)
                    + ((e.t - c.t) * ts).powi(2);
                if d2 <= lambda * lambda {
                    count += 1;
                }
            }
            CornerEvent {
                event: *c,
                density: count as f64 / lambda,
            }
        })
        .collect();

    let mean_of = |p: i8| -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for c in &scored {
            if c.event.p == p {
                sum += c.density;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };
    let (mu_pos, mu_neg) = (mean_of(1), mean_of(-1));

    scored
        .into_iter()
        .filter(|c| c.density >= if c.event.p > 0 { mu_pos } else { mu_neg })
        .collect()
}

/// Density-based clustering of corner events in `(x, y, t * time_scale)`
/// space, polarity ignored. Noise points are discarded. Clusters come back
/// in a canonical order (by head descriptor) with ids `0..n`.
pub fn cluster_corners(corners: &[CornerEvent], cfg: &TrackerConfig) -> Result<Vec<Cluster>> {
    if corners.len() < cfg.min_pts {
        return Ok(Vec::new());
    }
    let data: Vec<Vec<f64>> = corners
        .iter()
        .map(|c| {
            vec![
                c.event.x as f64,
                c.event.y as f64,
                c.event.t * cfg.time_scale,
            ]
        })
        .collect();
    let params = HdbscanHyperParams::builder()
        .min_cluster_size(cfg.min_pts)
        .epsilon(cfg.epsilon)
        .allow_single_cluster(true)
        .build();
    let labels = Hdbscan::new(&data, params)
        .cluster()
        .map_err(|e| Error::Validation(format!("clustering failed: {e:?}")))?;

    let max_label = labels.iter().copied().max().unwrap_or(-1);
    if max_label < 0 {
        return Ok(Vec::new());
    }
    let mut groups: Vec<Vec<CornerEvent>> = vec![Vec::new(); (max_label + 1) as usize];
    for (corner, &label) in corners.iter().zip(&labels) {
        if label >= 0 {
            groups[label as usize].push(*corner);
        }
    }
    let mut clusters: Vec<Cluster> = groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|g| Cluster::new(0, g, cfg.n_sigma, cfg.time_scale))
        .collect();
    canonicalize(&mut clusters);
    Ok(clusters)
}

/// Sorts clusters by head descriptor and reassigns sequential ids, so that
/// downstream output does not depend on clustering label order.
fn canonicalize(clusters: &mut [Cluster]) {
    clusters.sort_by(|a, b| {
        (a.head.t, a.head.x, a.head.y)
            .partial_cmp(&(b.head.t, b.head.x, b.head.y))
            .unwrap()
    });
    for (i, c) in clusters.iter_mut().enumerate() {
        c.id = i;
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }

    fn union(&mut self, i: usize, j: usize) {
        let (ri, rj) = (self.find(i), self.find(j));
        if ri != rj {
            self.parent[ri] = rj;
        }
    }
}

/// A cluster tail may connect to a cluster head only inside the
/// spatio-temporal hemisphere of radius `phi` that opens toward forward
/// time: the Euclidean descriptor distance must be below `phi` and the head
/// must be strictly later than the tail.
pub fn hemisphere_qualifies(tail: &Descriptor, head: &Descriptor, phi: f64) -> bool {
    head.t > tail.t && tail.dist2(head) < phi * phi
}

/// Joins clusters whose tail and head fall within the forward-time
/// hemisphere of radius `phi`: connect each tail to the nearest qualifying
/// head (greedily by descriptor distance, each tail connecting out once and
/// each head consumed once per pass) and repeat until no pair qualifies.
pub fn merge_clusters(
    mut clusters: Vec<Cluster>,
    phi: f64,
    n_sigma: usize,
    time_scale: f64,
) -> Vec<Cluster> {
    loop {
        let n = clusters.len();
        if n < 2 {
            break;
        }
        // (distance, tail cluster, head cluster) for every qualifying pair.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let tail = &clusters[i].tail;
                let head = &clusters[j].head;
                if hemisphere_qualifies(tail, head, phi) {
                    pairs.push((tail.dist(head), i, j));
                }
            }
        }
        if pairs.is_empty() {
            break;
        }
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());

        let mut uf = UnionFind::new(n);
        let mut tail_used = vec![false; n];
        let mut head_used = vec![false; n];
        let mut merged_any = false;
        for (_, i, j) in pairs {
            if tail_used[i] || head_used[j] || uf.find(i) == uf.find(j) {
                continue;
            }
            tail_used[i] = true;
            head_used[j] = true;
            uf.union(i, j);
            merged_any = true;
        }
        if !merged_any {
            break;
        }

        let mut grouped: std::collections::BTreeMap<usize, Vec<CornerEvent>> = Default::default();
        for (i, cluster) in clusters.iter().enumerate() {
            let root = uf.find(i);
            grouped
                .entry(root)
                .or_default()
                .extend(cluster.members.iter().copied());
        }
        clusters = grouped
            .into_values()
            .map(|mut members| {
                members.sort_by(|a, b| a.event.t.partial_cmp(&b.event.t).unwrap());
                Cluster::new(0, members, n_sigma, time_scale)
            })
            .collect();
        canonicalize(&mut clusters);
    }
    canonicalize(&mut clusters);
    clusters
}

/// One windowed position sample of a feature track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    /// Window index; the sample's nominal time is `window * dt`.
    pub window: usize,
    pub u: f64,
    pub v: f64,
}

/// A feature track: the mean pixel position of one cluster in each temporal
/// window it has events in.
#[derive(Debug, Clone)]
pub struct FeatureTrack {
    pub track_id: usize,
    pub source_cluster: usize,
    /// Samples with strictly increasing window indices.
    pub samples: Vec<TrackSample>,
}

/// Splits `[t_start, t_start + duration]` into `K = floor(duration/dt) - 1`
/// windows, window `k` covering `(k*dt, (k+1)*dt]` relative to `t_start` for
/// `k` in `1..=K`, and emits the per-window mean pixel position of each
/// cluster. Clusters sampled in fewer than two windows are dropped.
pub fn extract_tracks(
    clusters: &[Cluster],
    dt: f64,
    t_start: f64,
    duration: f64,
) -> Result<Vec<FeatureTrack>> {
    if dt <= 0.0 {
        return Err(Error::Precondition("window duration must be positive".into()));
    }
    let k_max = (duration / dt).floor() as i64 - 1;
    if k_max < 1 {
        return Err(Error::Precondition(format!(
            "stream too short: {k_max} windows of {dt} s in {duration} s"
        )));
    }
    let mut tracks = Vec::new();
    for cluster in clusters {
        let mut windows: std::collections::BTreeMap<i64, (f64, f64, usize)> = Default::default();
        for m in &cluster.members {
            let rel = m.event.t - t_start;
            if rel <= 0.0 {
                continue;
            }
            let k = (rel / dt).ceil() as i64 - 1;
            if k < 1 || k > k_max {
                continue;
            }
            let entry = windows.entry(k).or_insert((0.0, 0.0, 0));
            entry.0 += m.event.x as f64;
            entry.1 += m.event.y as f64;
            entry.2 += 1;
        }
        if windows.len() < 2 {
            continue;
        }
        let samples = windows
            .into_iter()
            .map(|(k, (sx, sy, n))| TrackSample {
                window: k as usize,
                u: sx / n as f64,
                v: sy / n as f64,
            })
            .collect();
        tracks.push(FeatureTrack {
            track_id: tracks.len(),
            source_cluster: cluster.id,
            samples,
        });
    }
    Ok(tracks)
}

/// Writes tracks as CSV with header `track_id,k,t,u,v`, `t = k * dt`.
pub fn save_tracks<P: AsRef<Path>>(tracks: &[FeatureTrack], dt: f64, path: P) -> Result<()> {
    let mut out = String::from("track_id,k,t,u,v\n");
    for track in tracks {
        for s in &track.samples {
            writeln!(
                out,
                "{},{},{},{},{}",
                track.track_id,
                s.window,
                s.window as f64 * dt,
                s.u,
                s.v
            )
            .expect("string write");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads tracks written by [`save_tracks`].
pub fn load_tracks<P: AsRef<Path>>(path: P) -> Result<Vec<FeatureTrack>> {
    let text = fs::read_to_string(path)?;
    let mut by_id: std::collections::BTreeMap<usize, Vec<TrackSample>> = Default::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if line == 1 {
            if trimmed != "track_id,k,t,u,v" {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected header 'track_id,k,t,u,v', got '{trimmed}'"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let parse_err = |what: &str| Error::Parse {
            line,
            msg: format!("bad {what}"),
        };
        let id: usize = fields[0].parse().map_err(|_| parse_err("track id"))?;
        let k: usize = fields[1].parse().map_err(|_| parse_err("window index"))?;
        let u: f64 = fields[3].parse().map_err(|_| parse_err("u"))?;
        let v: f64 = fields[4].parse().map_err(|_| parse_err("v"))?;
        by_id.entry(id).or_default().push(TrackSample { window: k, u, v });
    }
    Ok(by_id
        .into_iter()
        .map(|(track_id, samples)| FeatureTrack {
            track_id,
            source_cluster: track_id,
            samples,
        })
        .collect())
}
