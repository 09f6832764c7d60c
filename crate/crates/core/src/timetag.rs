//! Time tags, clock frames and the binary stream format.
//!
//! A stream file is a length-prefixed header followed by fixed 9-byte
//! records, all little-endian:
//!
//! ```text
//! magic            8 bytes  "ENTLTAG\0"
//! version          u16
//! header_len       u32      length of the header body that follows
//! header body:
//!   period_ps      u64
//!   divisor        u64
//!   acq_start_ns   i64      wall-clock epoch nanoseconds
//!   n_roles        u16
//!   n_roles × { channel u8, label_len u16, label utf-8 }
//! records:
//!   channel u8, timestamp_ps u64
//! ```

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"ENTLTAG\0";
pub const FORMAT_VERSION: u16 = 1;
pub const RECORD_LEN: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeTag {
    pub channel: u8,
    pub timestamp_ps: u64,
}

impl TimeTag {
    pub fn new(channel: u8, timestamp_ps: u64) -> Self {
        TimeTag { channel, timestamp_ps }
    }

    /// Total order used by every stream: time first, then channel.
    pub fn sort_key(&self) -> (u64, u8) {
        (self.timestamp_ps, self.channel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockFrame {
    pub period_ps: u64,
    pub divisor: u64,
}

impl Default for ClockFrame {
    fn default() -> Self {
        ClockFrame::GHZ
    }
}

impl ClockFrame {
    pub const GHZ: ClockFrame = ClockFrame {
        period_ps: 1000,
        divisor: 1,
    };

    pub fn new(period_ps: u64, divisor: u64) -> Result<Self> {
        let clock = ClockFrame { period_ps, divisor };
        clock.validate()?;
        Ok(clock)
    }

    pub fn validate(&self) -> Result<()> {
        if self.period_ps == 0 {
            return Err(Error::param("clock.period_ps", "must be > 0"));
        }
        if self.divisor == 0 {
            return Err(Error::param("clock.divisor", "must be >= 1"));
        }
        if self.period_ps.checked_mul(self.divisor).is_none() {
            return Err(Error::param("clock.divisor", "frame period overflows u64"));
        }
        Ok(())
    }

    pub fn frame_period_ps(&self) -> u64 {
        self.period_ps * self.divisor
    }

    pub fn with_divisor(&self, divisor: u64) -> Self {
        ClockFrame {
            period_ps: self.period_ps,
            divisor,
        }
    }
}

/// Position of a timestamp relative to a (possibly divided) clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldedTime {
    pub frame_index: u64,
    pub cycle_index: u64,
    pub phase_ps: u64,
}

impl FoldedTime {
    /// Cycle count since acquisition start, independent of the divisor.
    pub fn absolute_cycle(&self, clock: &ClockFrame) -> u64 {
        self.frame_index * clock.divisor + self.cycle_index
    }
}

pub fn fold_to_clock(tag: &TimeTag, clock: &ClockFrame) -> FoldedTime {
    fold_timestamp(tag.timestamp_ps, clock)
}

pub fn fold_timestamp(t: u64, clock: &ClockFrame) -> FoldedTime {
    let frame = clock.frame_period_ps();
    let rem = t % frame;
    FoldedTime {
        frame_index: t / frame,
        cycle_index: rem / clock.period_ps,
        phase_ps: rem % clock.period_ps,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub version: u16,
    pub clock: ClockFrame,
    pub channel_roles: BTreeMap<u8, String>,
    pub acquisition_start_ns: i64,
}

impl StreamHeader {
    pub fn new(clock: ClockFrame, channel_roles: BTreeMap<u8, String>) -> Self {
        StreamHeader {
            version: FORMAT_VERSION,
            clock,
            channel_roles,
            acquisition_start_ns: 0,
        }
    }

    fn body_bytes(&self) -> Result<Vec<u8>> {
        let mut body = Vec::with_capacity(32 + 8 * self.channel_roles.len());
        body.extend_from_slice(&self.clock.period_ps.to_le_bytes());
        body.extend_from_slice(&self.clock.divisor.to_le_bytes());
        body.extend_from_slice(&self.acquisition_start_ns.to_le_bytes());
        let n = u16::try_from(self.channel_roles.len())
            .map_err(|_| Error::Format("too many channel roles".into()))?;
        body.extend_from_slice(&n.to_le_bytes());
        for (ch, label) in &self.channel_roles {
            let len = u16::try_from(label.len())
                .map_err(|_| Error::Format(format!("role label for channel {ch} too long")))?;
            body.push(*ch);
            body.extend_from_slice(&len.to_le_bytes());
            body.extend_from_slice(label.as_bytes());
        }
        Ok(body)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", self.version)));
        }
        let body = self.body_bytes()?;
        w.write_all(&MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&(body.len() as u32).to_le_bytes())?;
        w.write_all(&body)?;
        Ok(())
    }

    /// Reads a header, returning it with the number of bytes consumed.
    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, u64)> {
        let mut fixed = [0u8; 14];
        let got = read_full(r, &mut fixed)?;
        let magic_len = got.min(MAGIC.len());
        if fixed[..magic_len] != MAGIC[..magic_len] {
            return Err(Error::Format("bad magic".into()));
        }
        if got < fixed.len() {
            return Err(Error::Truncated { offset: got as u64 });
        }
        let version = u16::from_le_bytes([fixed[8], fixed[9]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let body_len = u32::from_le_bytes([fixed[10], fixed[11], fixed[12], fixed[13]]) as usize;
        let mut body = vec![0u8; body_len];
        let got = read_full(r, &mut body)?;
        if got < body_len {
            return Err(Error::Truncated {
                offset: (fixed.len() + got) as u64,
            });
        }
        let header = Self::parse_body(version, &body, fixed.len())?;
        Ok((header, (fixed.len() + body_len) as u64))
    }

    fn parse_body(version: u16, body: &[u8], base: usize) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > body.len() {
                return Err(Error::Format(format!(
                    "header body ends early at byte offset {}",
                    base + body.len()
                )));
            }
            let s = &body[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let period_ps = u64_at(take(8)?);
        let divisor = u64_at(take(8)?);
        let acquisition_start_ns = i64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let n = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
        let mut channel_roles = BTreeMap::new();
        for _ in 0..n {
            let ch = take(1)?[0];
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let label = std::str::from_utf8(take(len)?)
                .map_err(|_| Error::Format(format!("role label for channel {ch} is not utf-8")))?;
            channel_roles.insert(ch, label.to_string());
        }
        if pos != body.len() {
            return Err(Error::Format("trailing bytes in header body".into()));
        }
        let clock = ClockFrame { period_ps, divisor };
        clock
            .validate()
            .map_err(|e| Error::Format(format!("invalid clock in header: {e}")))?;
        Ok(StreamHeader {
            version,
            clock,
            channel_roles,
            acquisition_start_ns,
        })
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

/// Incremental writer enforcing stream order and channel registration.
pub struct StreamWriter<W: Write> {
    inner: W,
    header: StreamHeader,
    last: Option<(u64, u8)>,
    written: usize,
}

impl<W: Write> StreamWriter<W> {
    pub fn new(mut inner: W, header: StreamHeader) -> Result<Self> {
        header.write_to(&mut inner)?;
        Ok(StreamWriter {
            inner,
            header,
            last: None,
            written: 0,
        })
    }

    pub fn push(&mut self, tag: &TimeTag) -> Result<()> {
        if !self.header.channel_roles.contains_key(&tag.channel) {
            return Err(Error::UnknownChannel {
                channel: tag.channel,
                position: self.written,
            });
        }
        let key = tag.sort_key();
        if self.last.is_some_and(|prev| key < prev) {
            return Err(Error::Unsorted {
                position: self.written,
            });
        }
        let mut rec = [0u8; RECORD_LEN];
        rec[0] = tag.channel;
        rec[1..].copy_from_slice(&tag.timestamp_ps.to_le_bytes());
        self.inner.write_all(&rec)?;
        self.last = Some(key);
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Streaming decoder; holds one record in memory at a time.
pub struct StreamReader<R: Read> {
    inner: R,
    header: StreamHeader,
    offset: u64,
    index: usize,
    last: Option<(u64, u8)>,
    done: bool,
}

impl<R: Read> StreamReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let (header, offset) = StreamHeader::read_from(&mut inner)?;
        Ok(StreamReader {
            inner,
            header,
            offset,
            index: 0,
            last: None,
            done: false,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    fn next_tag(&mut self) -> Result<Option<TimeTag>> {
        let mut rec = [0u8; RECORD_LEN];
        let got = read_full(&mut self.inner, &mut rec)?;
        if got == 0 {
            return Ok(None);
        }
        if got < RECORD_LEN {
            return Err(Error::Truncated {
                offset: self.offset,
            });
        }
        let tag = TimeTag {
            channel: rec[0],
            timestamp_ps: u64::from_le_bytes(rec[1..].try_into().expect("8 bytes")),
        };
        if !self.header.channel_roles.contains_key(&tag.channel) {
            return Err(Error::UnknownChannel {
                channel: tag.channel,
                position: self.index,
            });
        }
        if self.last.is_some_and(|prev| tag.sort_key() < prev) {
            return Err(Error::Unsorted {
                position: self.index,
            });
        }
        self.last = Some(tag.sort_key());
        self.offset += RECORD_LEN as u64;
        self.index += 1;
        Ok(Some(tag))
    }
}

impl<R: Read> Iterator for StreamReader<R> {
    type Item = Result<TimeTag>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_tag() {
            Ok(Some(tag)) => Some(Ok(tag)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

pub fn encode_stream(header: &StreamHeader, tags: &[TimeTag]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + tags.len() * RECORD_LEN);
    let mut w = StreamWriter::new(&mut out, header.clone())?;
    for tag in tags {
        w.push(tag)?;
    }
    w.finish()?;
    Ok(out)
}

pub fn decode_stream(bytes: &[u8]) -> Result<(StreamHeader, Vec<TimeTag>)> {
    let reader = StreamReader::new(bytes)?;
    let header = reader.header().clone();
    let tags = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, tags))
}

/// k-way merge of sorted streams ordered by `(timestamp, channel)`.
///
/// Sortedness of each input is checked as elements are consumed; the error
/// position is the index within the offending input.
pub fn merge_streams(streams: &[Vec<TimeTag>]) -> Result<Vec<TimeTag>> {
    let total = streams.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(total);
    let mut cursor = vec![0usize; streams.len()];
    let mut heap = BinaryHeap::with_capacity(streams.len());
    for (i, s) in streams.iter().enumerate() {
        if let Some(t) = s.first() {
            heap.push(Reverse((t.sort_key(), i)));
        }
    }
    while let Some(Reverse((key, i))) = heap.pop() {
        let stream = &streams[i];
        out.push(stream[cursor[i]]);
        cursor[i] += 1;
        if let Some(next) = stream.get(cursor[i]) {
            if next.sort_key() < key {
                return Err(Error::Unsorted { position: cursor[i] });
            }
            heap.push(Reverse((next.sort_key(), i)));
        }
    }
    Ok(out)
}

/// Partitions a stream by `floor(timestamp / slice_duration_ps)`.
///
/// Slices are returned for every index from 0 through the last occupied one,
/// so slice `k` always covers `[k·d, (k+1)·d)`.
pub fn slice_by_wall_time(tags: &[TimeTag], slice_duration_ps: u64) -> Result<Vec<Vec<TimeTag>>> {
    if slice_duration_ps == 0 {
        return Err(Error::param("slice_duration_ps", "must be > 0"));
    }
    let Some(last) = tags.iter().map(|t| t.timestamp_ps).max() else {
        return Ok(Vec::new());
    };
    let n = (last / slice_duration_ps) as usize + 1;
    let mut slices = vec![Vec::new(); n];
    for t in tags {
        slices[(t.timestamp_ps / slice_duration_ps) as usize].push(*t);
    }
    Ok(slices)
}

pub fn check_sorted(tags: &[TimeTag]) -> Result<()> {
    match tags.windows(2).position(|w| w[1].sort_key() < w[0].sort_key()) {
        Some(i) => Err(Error::Unsorted { position: i + 1 }),
        None => Ok(()),
    }
}
