//! Event stream primitives: events, sorted streams, CSV/text file I/O and the
//! per-polarity surface of active events (SAE).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A single asynchronous brightness-change sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Timestamp in seconds.
    pub t: f64,
    /// Pixel column.
    pub x: u16,
    /// Pixel row.
    pub y: u16,
    /// Polarity, +1 (brightness increase) or -1 (decrease).
    pub p: i8,
}

impl Event {
    pub fn new(t: f64, x: u16, y: u16, p: i8) -> Self {
        debug_assert!(p == 1 || p == -1);
        Event { t, x, y, p }
    }
}

/// On-disk layouts understood by [`load_events`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    /// `t,x,y,p` with a `t,x,y,p` header line. Polarity stored as 1/0.
    Csv,
    /// Whitespace-separated `t x y p`, no header. Polarity stored as 1/0.
    Text,
}

/// An event stream sorted by timestamp together with the sensor geometry it
/// was recorded on. Immutable after construction; safe to share read-only.
#[derive(Debug, Clone)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: u16,
    pub height: u16,
    /// True when the source was not time-ordered and had to be re-sorted.
    pub resorted: bool,
}

impl EventStream {
    /// Builds a stream, stably sorting by timestamp if needed so that equal
    /// timestamps keep their input order.
    pub fn new(mut events: Vec<Event>, width: u16, height: u16) -> Self {
        let sorted = events.windows(2).all(|w| w[0].t <= w[1].t);
        if !sorted {
            events.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
        }
        EventStream {
            events,
            width,
            height,
            resorted: !sorted,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn t_first(&self) -> f64 {
        self.events.first().map_or(0.0, |e| e.t)
    }

    pub fn t_last(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.t)
    }

    /// Stream duration `t_last - t_first`; zero for empty streams.
    pub fn duration(&self) -> f64 {
        self.t_last() - self.t_first()
    }
}

fn parse_record(fields: &[&str], line: usize, width: u16, height: u16) -> Result<Event> {
    if fields.len() != 4 {
        return Err(Error::Parse {
            line,
            msg: format!("expected 4 fields (t,x,y,p), got {}", fields.len()),
        });
    }
    let t: f64 = fields[0].parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad timestamp '{}'", fields[0]),
    })?;
    if !t.is_finite() || t < 0.0 {
        return Err(Error::Validation(format!(
            "line {line}: timestamp must be finite and non-negative, got {t}"
        )));
    }
    let x: u32 = fields[1].parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad x coordinate '{}'", fields[1]),
    })?;
    let y: u32 = fields[2].parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad y coordinate '{}'", fields[2]),
    })?;
    if x >= width as u32 || y >= height as u32 {
        return Err(Error::Validation(format!(
            "line {line}: pixel ({x}, {y}) outside sensor {width}x{height}"
        )));
    }
    let p = match fields[3] {
        "1" => 1,
        "0" => -1,
        other => {
            return Err(Error::Parse {
                line,
                msg: format!("bad polarity '{other}', expected 0 or 1"),
            })
        }
    };
    Ok(Event::new(t, x as u16, y as u16, p))
}

/// Loads an event file sorted by timestamp. Out-of-order input is accepted
/// and stably re-sorted; the result carries a `resorted` flag.
pub fn load_events<P: AsRef<Path>>(
    path: P,
    format: EventFormat,
    width: u16,
    height: u16,
) -> Result<EventStream> {
    let text = fs::read_to_string(path)?;
    let mut events = Vec::new();
    let mut saw_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if format == EventFormat::Csv && !saw_header {
            if trimmed != "t,x,y,p" {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected header 't,x,y,p', got '{trimmed}'"),
                });
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = match format {
            EventFormat::Csv => trimmed.split(',').collect(),
            EventFormat::Text => trimmed.split_whitespace().collect(),
        };
        events.push(parse_record(&fields, line, width, height)?);
    }
    Ok(EventStream::new(events, width, height))
}

/// Writes a stream in the CSV layout. Timestamps use the shortest decimal
/// representation that parses back to the same f64, so a load/save round
/// trip is bit-exact.
pub fn save_events<P: AsRef<Path>>(stream: &EventStream, path: P) -> Result<()> {
    let mut out = String::with_capacity(16 * stream.len() + 8);
    out.push_str("t,x,y,p\n");
    for e in &stream.events {
        let p = if e.p > 0 { 1 } else { 0 };
        writeln!(out, "{},{},{},{}", e.t, e.x, e.y, p).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Timestamp value of SAE cells that have never seen an event. Compares
/// older than every real timestamp.
pub const SAE_NEVER: f64 = f64::NEG_INFINITY;

/// Surface of active events: per polarity, the timestamp of the most recent
/// event at each pixel. Single-writer during replay.
#[derive(Debug, Clone)]
pub struct Sae {
    width: u16,
    height: u16,
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl Sae {
    pub fn new(width: u16, height: u16) -> Self {
        let n = width as usize * height as usize;
        Sae {
            width,
            height,
            pos: vec![SAE_NEVER; n],
            neg: vec![SAE_NEVER; n],
        }
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    /// Records `e` as the most recent event of its polarity at its pixel.
    pub fn update(&mut self, e: &Event) -> Result<()> {
        if e.x >= self.width || e.y >= self.height {
            return Err(Error::OutOfBounds {
                x: e.x,
                y: e.y,
                width: self.width,
                height: self.height,
            });
        }
        let idx = e.y as usize * self.width as usize + e.x as usize;
        let grid = if e.p > 0 { &mut self.pos } else { &mut self.neg };
        grid[idx] = e.t;
        Ok(())
    }

    /// Most recent timestamp of polarity `p` at `(x, y)`, or [`SAE_NEVER`].
    pub fn last(&self, p: i8, x: u16, y: u16) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        let idx = y as usize * self.width as usize + x as usize;
        if p > 0 {
            self.pos[idx]
        } else {
            self.neg[idx]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sae_single_write() {
        let mut sae = Sae::new(8, 8);
        sae.update(&Event::new(1.0, 3, 4, 1)).unwrap();
        assert_eq!(sae.last(1, 3, 4), 1.0);
        for y in 0..8 {
            for x in 0..8 {
                if (x, y) != (3, 4) {
                    assert_eq!(sae.last(1, x, y), SAE_NEVER);
                }
                assert_eq!(sae.last(-1, x, y), SAE_NEVER);
            }
        }
    }

    #[test]
    fn sae_last_writer_wins() {
        let mut sae = Sae::new(8, 8);
        sae.update(&Event::new(1.0, 2, 2, 1)).unwrap();
        sae.update(&Event::new(2.0, 2, 2, 1)).unwrap();
        assert_eq!(sae.last(1, 2, 2), 2.0);
    }

    #[test]
    fn sae_polarities_separate() {
        let mut sae = Sae::new(8, 8);
        sae.update(&Event::new(1.0, 2, 2, 1)).unwrap();
        sae.update(&Event::new(2.0, 2, 2, -1)).unwrap();
        assert_eq!(sae.last(1, 2, 2), 1.0);
        assert_eq!(sae.last(-1, 2, 2), 2.0);
    }

    #[test]
    fn sae_out_of_bounds() {
        let mut sae = Sae::new(8, 8);
        let err = sae.update(&Event::new(1.0, 8, 0, 1)).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { .. }));
    }

    #[test]
    fn load_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        let stream = load_events(&path, EventFormat::Csv, 64, 48).unwrap();
        assert_eq!(stream.len(), 0);
        assert!(!stream.resorted);
    }

    #[test]
    fn load_sorts_and_maps_polarity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "t,x,y,p\n0.001,10,20,1\n0.000,5,5,0\n").unwrap();
        let stream = load_events(&path, EventFormat::Csv, 64, 48).unwrap();
        assert_eq!(stream.len(), 2);
        assert!(stream.resorted);
        assert_eq!(stream.events[0], Event::new(0.0, 5, 5, -1));
        assert_eq!(stream.events[1], Event::new(0.001, 10, 20, 1));
    }

    #[test]
    fn load_too_few_fields_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,x,y,p\n0.001,10\n").unwrap();
        match load_events(&path, EventFormat::Csv, 64, 48) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_header_parse_error_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nohdr.csv");
        std::fs::write(&path, "0.001,10,20,1\n").unwrap();
        assert!(matches!(
            load_events(&path, EventFormat::Csv, 64, 48),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn load_rejects_out_of_sensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oob.csv");
        std::fs::write(&path, "t,x,y,p\n0.001,100,20,1\n").unwrap();
        assert!(matches!(
            load_events(&path, EventFormat::Csv, 64, 48),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn load_text_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.txt");
        std::fs::write(&path, "0.5 1 2 1\n0.75 3 4 0\n").unwrap();
        let stream = load_events(&path, EventFormat::Text, 64, 48).unwrap();
        assert_eq!(stream.len(), 2);
        assert_eq!(stream.events[1].p, -1);
    }

    fn event_strategy() -> impl Strategy<Value = Event> {
        (0.0f64..10.0, 0u16..32, 0u16..24, prop::bool::ANY)
            .prop_map(|(t, x, y, p)| Event::new(t, x, y, if p { 1 } else { -1 }))
    }

    proptest! {
        /// Replaying any prefix leaves each SAE cell at exactly the max
        /// timestamp of matching events at that pixel.
        #[test]
        fn sae_replay_matches_bruteforce(events in prop::collection::vec(event_strategy(), 0..120),
                                         prefix in 0usize..121) {
            // Streams are time-ordered; last-writer-wins equals max only then.
            let mut events = events;
            events.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
            let prefix = prefix.min(events.len());
            let mut sae = Sae::new(32, 24);
            for e in &events[..prefix] {
                sae.update(e).unwrap();
            }
            for y in 0..24u16 {
                for x in 0..32u16 {
                    for p in [1i8, -1] {
                        let expect = events[..prefix]
                            .iter()
                            .filter(|e| e.x == x && e.y == y && e.p == p)
                            .map(|e| e.t)
                            .fold(SAE_NEVER, f64::max);
                        prop_assert_eq!(sae.last(p, x, y), expect);
                    }
                }
            }
        }

        /// CSV save/load round trip preserves (t, x, y, p) bit-exactly.
        #[test]
        fn csv_round_trip(mut events in prop::collection::vec(event_strategy(), 0..200)) {
            events.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
            let stream = EventStream::new(events, 32, 24);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.csv");
            save_events(&stream, &path).unwrap();
            let back = load_events(&path, EventFormat::Csv, 32, 24).unwrap();
            prop_assert_eq!(back.len(), stream.len());
            for (a, b) in back.events.iter().zip(&stream.events) {
                prop_assert_eq!(a.t.to_bits(), b.t.to_bits());
                prop_assert_eq!((a.x, a.y, a.p), (b.x, b.y, b.p));
            }
        }
    }
}
