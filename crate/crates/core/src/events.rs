//! Event-camera streams: file formats, count-balanced slicing, integration
//! into `[T, 2, H, W]` frame clips, and a synthetic moving-bar generator.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::Reader;
use crate::tensor::Tensor;

pub const EVT_MAGIC: &[u8; 4] = b"EVT1";
pub const FRC_MAGIC: &[u8; 4] = b"FRC1";
const EVT_HEADER_LEN: usize = 4 + 4 + 4 + 8;
pub const EVT_RECORD_LEN: usize = 13;
/// x and y are stored as `u16`, so sensors are at most this wide or tall.
pub const MAX_SENSOR_DIM: u32 = 1 << 16;

/// One brightness change at pixel `(x, y)`, time `t` in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: u8,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: u8) -> Self {
        Self { x, y, t, p }
    }

    fn check(&self, index: usize, width: u32, height: u32) -> Result<()> {
        let reason = if self.p > 1 {
            format!("polarity {} not in {{0, 1}}", self.p)
        } else if u32::from(self.x) >= width || u32::from(self.y) >= height {
            format!("pixel ({}, {}) outside {width}x{height} sensor", self.x, self.y)
        } else {
            return Ok(());
        };
        Err(Error::InvalidRecord { index, reason })
    }
}

/// Time-ordered events from a `width` × `height` sensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u32,
    height: u32,
}

impl EventStream {
    /// Validates every event and stably sorts by timestamp.
    pub fn new(width: u32, height: u32, mut events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 || width > MAX_SENSOR_DIM || height > MAX_SENSOR_DIM {
            return Err(Error::validation(format!(
                "sensor size {width}x{height} outside 1..={MAX_SENSOR_DIM}"
            )));
        }
        for (i, e) in events.iter().enumerate() {
            e.check(i, width, height)?;
        }
        if events.windows(2).any(|w| w[1].t < w[0].t) {
            events.sort_by_key(|e| e.t);
        }
        Ok(Self { events, width, height })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// First and last timestamps, if any events exist.
    pub fn time_range(&self) -> Option<(u64, u64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Binary,
    Csv,
}

pub fn parse_events(bytes: &[u8], format: EventFormat) -> Result<EventStream> {
    match format {
        EventFormat::Binary => parse_binary(bytes),
        EventFormat::Csv => parse_csv(bytes),
    }
}

pub fn write_events(stream: &EventStream, format: EventFormat) -> Vec<u8> {
    match format {
        EventFormat::Binary => write_binary(stream),
        EventFormat::Csv => write_csv(stream),
    }
}

fn parse_binary(bytes: &[u8]) -> Result<EventStream> {
    let mut r = Reader::new(bytes);
    if bytes.len() < EVT_HEADER_LEN || r.take(4)? != EVT_MAGIC {
        return Err(Error::Format("missing EVT1 header".into()));
    }
    let width = r.u32()?;
    let height = r.u32()?;
    let count = r.u64()?;
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(EVT_RECORD_LEN))
        .ok_or_else(|| Error::Format(format!("record count {count} too large")))?;
    if expected != r.remaining() {
        return Err(Error::Format(format!(
            "header declares {count} records ({expected} bytes) but {} bytes follow",
            r.remaining()
        )));
    }
    let mut events = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let x = r.u16()?;
        let y = r.u16()?;
        let t = r.u64()?;
        let p = r.u8()?;
        events.push(Event { x, y, t, p });
    }
    EventStream::new(width, height, events)
}

fn write_binary(s: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(EVT_HEADER_LEN + s.len() * EVT_RECORD_LEN);
    out.extend_from_slice(EVT_MAGIC);
    out.extend_from_slice(&s.width.to_le_bytes());
    out.extend_from_slice(&s.height.to_le_bytes());
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    for e in &s.events {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p);
    }
    out
}

fn parse_csv_header(line: &str) -> Result<(u32, u32)> {
    let bad = || Error::Format(format!("expected `# width=<W> height=<H>`, got {line:?}"));
    let rest = line.trim().strip_prefix('#').ok_or_else(bad)?;
    let (mut width, mut height) = (None, None);
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(bad)?;
        let v: u32 = v.parse().map_err(|_| bad())?;
        match k {
            "width" => width = Some(v),
            "height" => height = Some(v),
            _ => return Err(bad()),
        }
    }
    Ok((width.ok_or_else(bad)?, height.ok_or_else(bad)?))
}

fn parse_csv(bytes: &[u8]) -> Result<EventStream> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Format("CSV is not UTF-8".into()))?;
    let (first, body) = text.split_once('\n').unwrap_or((text, ""));
    let (width, height) = parse_csv_header(first)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Format(format!("CSV column header: {e}")))?;
    if header.iter().map(str::trim).ne(["x", "y", "t", "p"]) {
        return Err(Error::Format(format!("expected column header `x,y,t,p`, got {header:?}")));
    }
    let mut events = Vec::new();
    for (index, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::InvalidRecord { index, reason: e.to_string() })?;
        if rec.len() != 4 {
            return Err(Error::InvalidRecord { index, reason: format!("expected 4 fields, got {}", rec.len()) });
        }
        let field = |i: usize| -> Result<u64> {
            rec[i].trim().parse().map_err(|_| Error::InvalidRecord {
                index,
                reason: format!("field {i} ({:?}) is not a non-negative integer", &rec[i]),
            })
        };
        let (x, y, t, p) = (field(0)?, field(1)?, field(2)?, field(3)?);
        if x >= u64::from(width) || y >= u64::from(height) {
            return Err(Error::InvalidRecord {
                index,
                reason: format!("pixel ({x}, {y}) outside {width}x{height} sensor"),
            });
        }
        if p > 1 {
            return Err(Error::InvalidRecord { index, reason: format!("polarity {p} not in {{0, 1}}") });
        }
        events.push(Event { x: x as u16, y: y as u16, t, p: p as u8 });
    }
    EventStream::new(width, height, events)
}

fn write_csv(s: &EventStream) -> Vec<u8> {
    let mut out = format!("# width={} height={}\n", s.width, s.height).into_bytes();
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut out);
    w.write_record(["x", "y", "t", "p"]).expect("in-memory write");
    for e in &s.events {
        w.serialize((e.x, e.y, e.t, e.p)).expect("in-memory write");
    }
    w.flush().expect("in-memory write");
    drop(w);
    out
}

/// Splits `0..n` into `parts` contiguous ranges whose sizes differ by at most
/// one; the first `n % parts` ranges get the extra element.
pub fn balanced_ranges(n: usize, parts: usize) -> Vec<Range<usize>> {
    let (base, extra) = (n / parts, n % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Event-index ranges of `t` slices holding (nearly) equal event counts.
pub fn slice_by_count(stream: &EventStream, t: usize) -> Result<Vec<Range<usize>>> {
    if t == 0 {
        return Err(Error::validation("slice count T must be positive"));
    }
    if stream.len() < t {
        return Err(Error::InsufficientEvents { available: stream.len(), required: t });
    }
    Ok(balanced_ranges(stream.len(), t))
}

/// A `[T, 2, H, W]` clip of per-pixel, per-polarity event counts.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameClip {
    data: Tensor,
}

impl FrameClip {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[1] != 2 {
            return Err(Error::shape(format!("frame clip must be [T,2,H,W], got {s:?}")));
        }
        if !data.all_finite() || data.data().iter().any(|&v| v < 0.0) {
            return Err(Error::validation("frame clip values must be finite and non-negative"));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    fn frame_len(&self) -> usize {
        2 * self.height() * self.width()
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data.data()[k * n..(k + 1) * n]
    }

    /// Sum of every entry; equals the number of integrated events.
    pub fn mass(&self) -> f64 {
        self.data.sum()
    }

    /// New clip made of the listed frames, in the listed order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::validation("cannot select zero frames"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &k in indices {
            if k >= self.frames() {
                return Err(Error::validation(format!(
                    "frame index {k} out of range for clip with {} frames",
                    self.frames()
                )));
            }
            data.extend_from_slice(self.frame(k));
        }
        Ok(Self { data: Tensor::new([indices.len(), 2, self.height(), self.width()], data)? })
    }

    /// Occupancy version of the clip: every non-zero count becomes 1.
    pub fn binarized(&self) -> Self {
        Self { data: self.data.map(|v| if v > 0.0 { 1.0 } else { 0.0 }) }
    }

    /// Serializes as `FRC1` with 32-bit float values.
    pub fn to_frc_bytes(&self) -> Vec<u8> {
        let s = self.data.shape();
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(FRC_MAGIC);
        for &d in s {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in self.data.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_frc_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if bytes.len() < 20 || r.take(4)? != FRC_MAGIC {
            return Err(Error::Format("missing FRC1 header".into()));
        }
        let t = r.u32()? as usize;
        let c = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        if c != 2 {
            return Err(Error::Format(format!("FRC1 channel count must be 2, got {c}")));
        }
        let n = t.checked_mul(2 * h).and_then(|v| v.checked_mul(w));
        if n.and_then(|n| n.checked_mul(4)) != Some(r.remaining()) {
            return Err(Error::Format(format!(
                "FRC1 header [{t},{c},{h},{w}] does not match {} payload bytes",
                r.remaining()
            )));
        }
        let mut data = Vec::with_capacity(n.unwrap_or(0));
        while r.remaining() > 0 {
            data.push(f64::from(r.f32()?));
        }
        let tensor = Tensor::new([t, c, h, w], data).map_err(|e| Error::Format(e.to_string()))?;
        Self::new(tensor).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Counts events per (slice, polarity, y, x).
pub fn integrate_frames(stream: &EventStream, slices: &[Range<usize>]) -> Result<FrameClip> {
    if slices.is_empty() {
        return Err(Error::validation("at least one slice is required"));
    }
    let (h, w) = (stream.height as usize, stream.width as usize);
    let frame = 2 * h * w;
    let mut data = vec![0.0; slices.len() * frame];
    for (k, r) in slices.iter().enumerate() {
        if r.start > r.end || r.end > stream.len() {
            return Err(Error::Internal(format!(
                "slice {k} ({r:?}) outside stream of {} events",
                stream.len()
            )));
        }
        let f = &mut data[k * frame..(k + 1) * frame];
        for e in &stream.events[r.clone()] {
            f[(usize::from(e.p) * h + usize::from(e.y)) * w + usize::from(e.x)] += 1.0;
        }
    }
    FrameClip::new(Tensor::new([slices.len(), 2, h, w], data)?)
}

/// Motion direction of the synthetic bar; also its class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Left = 0,
    Right = 1,
}

impl Direction {
    pub fn label(self) -> usize {
        self as usize
    }
}

/// Synthetic clips of a vertical bar sweeping across the sensor.
///
/// Events sit on the bar's leading and trailing edges. Even-numbered clips
/// show a bright bar (leading edge polarity 1, trailing 0); odd-numbered clips
/// a dark bar with the polarities swapped. Because of that, a single frame
/// cannot tell the directions apart: only the order of frames can. A left
/// clip is the exact mirror image of the right clip drawn with the same seed.
pub fn synth_moving_bar(
    width: u32,
    height: u32,
    n_clips: usize,
    direction: Direction,
    events_per_clip: usize,
    seed: u64,
) -> Result<Vec<(EventStream, Direction)>> {
    if width < 2 || height == 0 || width > MAX_SENSOR_DIM || height > MAX_SENSOR_DIM {
        return Err(Error::validation(format!("unsupported sensor size {width}x{height}")));
    }
    if events_per_clip < 16 {
        return Err(Error::validation("events_per_clip must be at least 16"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wf = f64::from(width);
    let mut clips = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let bright = i % 2 == 0;
        let max_bar = (width / 8).max(2).min(width - 1);
        let bar = f64::from(rng.random_range(2.min(max_bar)..=max_bar));
        let span = (wf - bar).max(0.0);
        let start = span * rng.random_range(0.0..0.25);
        let end = span * rng.random_range(0.75..1.0);
        let duration: u64 = rng.random_range(150_000..250_000);
        let step = (duration / events_per_clip as u64).max(2);
        let t0: u64 = rng.random_range(0..1_000);
        let mut events = Vec::with_capacity(events_per_clip);
        for j in 0..events_per_clip {
            let phase = j as f64 / (events_per_clip - 1) as f64;
            let pos = start + (end - start) * phase;
            let leading = rng.random_bool(0.5);
            let edge = if leading { pos + bar } else { pos };
            let mut x = (edge.floor() as u32).min(width - 1);
            if direction == Direction::Left {
                x = width - 1 - x;
            }
            let y = rng.random_range(0..height);
            let p = u8::from(leading == bright);
            let t = t0 + j as u64 * step + rng.random_range(0..step / 2);
            events.push(Event { x: x as u16, y: y as u16, t, p });
        }
        clips.push((EventStream::new(width, height, events)?, direction));
    }
    Ok(clips)
}
