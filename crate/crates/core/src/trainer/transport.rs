//! Messages exchanged between the master and the workers, their binary
//! encoding, and two transports: in-process channels and length-prefixed
//! frames over a byte stream.
//!
//! Frame layout: `u64` little-endian payload length, one kind-tag byte, then
//! the payload. Every payload starts with the sender id (`u32`). Matrices are
//! `u32 rows, u32 cols` followed by column-major little-endian `f64`s.
//! [`Envelope::byte_size`] is the payload length, which the in-memory
//! transport reports without serializing anything.

use std::io::{Read, Write};
use std::sync::mpsc;

use thiserror::Error;

use crate::dictupdate::{PartialBody, PartialSums, Side};
use crate::numerics::Mat;
use crate::sparse2d::{Entry, SparseCode};

/// Sender id used by the master.
pub const MASTER: u32 = u32::MAX;
/// Bytes in front of every payload on a stream: length (8) and kind tag (1).
pub const FRAME_OVERHEAD: usize = 9;
const MAX_FRAME: u64 = 1 << 34;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("peer disconnected")]
    Disconnected,
    #[error("corrupt frame: {0}")]
    FrameCorrupt(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextStep {
    CodeLeft,
    CodeRight,
    Report,
}

/// One freshly updated dictionary, with the normalization diagonal the
/// workers need to compensate their codes (general mode only).
#[derive(Debug, Clone, PartialEq)]
pub struct DictSide {
    pub atoms: Mat,
    pub scaling: Option<Vec<f64>>,
}

/// Objective values a worker measured on its shard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseStats {
    /// With the codes just computed and the current dictionaries.
    pub objective_before: f64,
    /// With the previous phase's codes (compensated) after the latest update.
    pub objective_prev_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    ShardAssign { indices: Vec<usize> },
    BroadcastDicts { left: Option<DictSide>, right: Option<DictSide>, next: NextStep },
    PartialLeft { sums: PartialSums, stats: PhaseStats },
    PartialRight { sums: PartialSums, stats: PhaseStats },
    ReplacementRequest { side: Side, count: u32 },
    Replacement { atoms: Vec<Vec<f64>> },
    FinalReport { objective: f64, codes: Vec<(usize, SparseCode)> },
    Failure { message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub sender: u32,
    pub payload: Payload,
}

impl Envelope {
    pub fn new(sender: u32, payload: Payload) -> Self {
        Envelope { sender, payload }
    }

    pub fn kind_tag(&self) -> u8 {
        match self.payload {
            Payload::ShardAssign { .. } => 1,
            Payload::BroadcastDicts { .. } => 2,
            Payload::PartialLeft { .. } => 3,
            Payload::PartialRight { .. } => 4,
            Payload::ReplacementRequest { .. } => 5,
            Payload::Replacement { .. } => 6,
            Payload::FinalReport { .. } => 7,
            Payload::Failure { .. } => 8,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.payload {
            Payload::ShardAssign { .. } => "shard-assign",
            Payload::BroadcastDicts { .. } => "broadcast-dicts",
            Payload::PartialLeft { .. } => "partial-left",
            Payload::PartialRight { .. } => "partial-right",
            Payload::ReplacementRequest { .. } => "replacement-request",
            Payload::Replacement { .. } => "replacement",
            Payload::FinalReport { .. } => "final-report",
            Payload::Failure { .. } => "failure",
        }
    }

    /// Serialized payload length in bytes.
    pub fn byte_size(&self) -> usize {
        let mut c = Counter(0);
        self.write_payload(&mut c);
        c.0
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_size());
        self.write_payload(&mut out);
        out
    }

    /// Full frame: length, tag, payload.
    pub fn encode_frame(&self) -> Vec<u8> {
        let payload = self.encode_payload();
        let mut out = Vec::with_capacity(payload.len() + FRAME_OVERHEAD);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.push(self.kind_tag());
        out.extend_from_slice(&payload);
        out
    }

    fn write_payload(&self, out: &mut impl Sink) {
        out.u32(self.sender);
        match &self.payload {
            Payload::ShardAssign { indices } => {
                out.u64(indices.len() as u64);
                indices.iter().for_each(|&i| out.u64(i as u64));
            }
            Payload::BroadcastDicts { left, right, next } => {
                out.u8(match next {
                    NextStep::CodeLeft => 0,
                    NextStep::CodeRight => 1,
                    NextStep::Report => 2,
                });
                for side in [left, right] {
                    match side {
                        None => out.u8(0),
                        Some(ds) => {
                            out.u8(1);
                            out.mat(&ds.atoms);
                            match &ds.scaling {
                                None => out.u8(0),
                                Some(w) => {
                                    out.u8(1);
                                    out.u32(w.len() as u32);
                                    w.iter().for_each(|&v| out.f64(v));
                                }
                            }
                        }
                    }
                }
            }
            Payload::PartialLeft { sums, stats } | Payload::PartialRight { sums, stats } => {
                out.u32(sums.node_id as u32);
                out.u64(sums.sample_count);
                out.u8(match sums.body {
                    PartialBody::Left { .. } => 0,
                    PartialBody::Right { .. } => 1,
                    PartialBody::LeftCross { .. } => 2,
                    PartialBody::RightCross { .. } => 3,
                });
                for m in sums.body.matrices() {
                    out.mat(m);
                }
                out.f64(stats.objective_before);
                match stats.objective_prev_after {
                    None => {
                        out.u8(0);
                        out.f64(0.0);
                    }
                    Some(v) => {
                        out.u8(1);
                        out.f64(v);
                    }
                }
            }
            Payload::ReplacementRequest { side, count } => {
                out.u8(side_tag(*side));
                out.u32(*count);
            }
            Payload::Replacement { atoms } => {
                out.u32(atoms.len() as u32);
                for a in atoms {
                    out.u32(a.len() as u32);
                    a.iter().for_each(|&v| out.f64(v));
                }
            }
            Payload::FinalReport { objective, codes } => {
                out.f64(*objective);
                out.u64(codes.len() as u64);
                for (idx, code) in codes {
                    out.u64(*idx as u64);
                    out.u32(code.n1() as u32);
                    out.u32(code.n2() as u32);
                    out.u32(code.len() as u32);
                    for e in code.triplets() {
                        out.u32(e.row as u32);
                        out.u32(e.col as u32);
                        out.f64(e.value);
                    }
                }
            }
            Payload::Failure { message } => {
                out.u32(message.len() as u32);
                out.bytes(message.as_bytes());
            }
        }
    }

    /// Decodes a payload given its kind tag.
    pub fn decode(tag: u8, payload: &[u8]) -> Result<Envelope, TransportError> {
        let mut r = Cursor { buf: payload, pos: 0 };
        let sender = r.u32()?;
        let body = match tag {
            1 => {
                let n = r.len_u64()?;
                let indices = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_, _>>()?;
                Payload::ShardAssign { indices }
            }
            2 => {
                let next = match r.u8()? {
                    0 => NextStep::CodeLeft,
                    1 => NextStep::CodeRight,
                    2 => NextStep::Report,
                    t => return Err(corrupt(format!("bad next-step tag {t}"))),
                };
                let mut sides = [None, None];
                for slot in &mut sides {
                    if r.flag()? {
                        let atoms = r.mat()?;
                        let scaling = if r.flag()? {
                            let n = r.u32()? as usize;
                            Some((0..n).map(|_| r.f64()).collect::<Result<_, _>>()?)
                        } else {
                            None
                        };
                        *slot = Some(DictSide { atoms, scaling });
                    }
                }
                let [left, right] = sides;
                Payload::BroadcastDicts { left, right, next }
            }
            3 | 4 => {
                let node_id = r.u32()? as usize;
                let sample_count = r.u64()?;
                let body = match r.u8()? {
                    0 => PartialBody::Left { p: r.mat()?, r: r.mat()? },
                    1 => PartialBody::Right { m: r.mat()?, n: r.mat()? },
                    2 => PartialBody::LeftCross { s1: r.mat()? },
                    3 => PartialBody::RightCross { s2: r.mat()? },
                    t => return Err(corrupt(format!("bad partial body tag {t}"))),
                };
                let objective_before = r.f64()?;
                let has_prev = r.flag()?;
                let prev = r.f64()?;
                let stats = PhaseStats { objective_before, objective_prev_after: has_prev.then_some(prev) };
                let sums = PartialSums { node_id, sample_count, body };
                if tag == 3 {
                    Payload::PartialLeft { sums, stats }
                } else {
                    Payload::PartialRight { sums, stats }
                }
            }
            5 => {
                let side = match r.u8()? {
                    0 => Side::Left,
                    1 => Side::Right,
                    t => return Err(corrupt(format!("bad side tag {t}"))),
                };
                Payload::ReplacementRequest { side, count: r.u32()? }
            }
            6 => {
                let n = r.u32()?;
                let mut atoms = Vec::new();
                for _ in 0..n {
                    let len = r.u32()? as usize;
                    atoms.push((0..len).map(|_| r.f64()).collect::<Result<_, _>>()?);
                }
                Payload::Replacement { atoms }
            }
            7 => {
                let objective = r.f64()?;
                let n = r.len_u64()?;
                let mut codes = Vec::new();
                for _ in 0..n {
                    let idx = r.u64()? as usize;
                    let n1 = r.u32()? as usize;
                    let n2 = r.u32()? as usize;
                    let k = r.u32()?;
                    let mut triplets = Vec::new();
                    for _ in 0..k {
                        triplets.push(Entry { row: r.u32()? as usize, col: r.u32()? as usize, value: r.f64()? });
                    }
                    let code = SparseCode::new(n1, n2, triplets).map_err(|e| corrupt(e.to_string()))?;
                    codes.push((idx, code));
                }
                Payload::FinalReport { objective, codes }
            }
            8 => {
                let n = r.u32()? as usize;
                let bytes = r.take(n)?;
                Payload::Failure { message: String::from_utf8_lossy(bytes).into_owned() }
            }
            t => return Err(corrupt(format!("unknown kind tag {t}"))),
        };
        if r.pos != payload.len() {
            return Err(corrupt(format!("{} trailing bytes", payload.len() - r.pos)));
        }
        Ok(Envelope { sender, payload: body })
    }
}

fn side_tag(side: Side) -> u8 {
    match side {
        Side::Left => 0,
        Side::Right => 1,
    }
}

fn corrupt(msg: impl Into<String>) -> TransportError {
    TransportError::FrameCorrupt(msg.into())
}

trait Sink {
    fn bytes(&mut self, b: &[u8]);
    fn u8(&mut self, v: u8) {
        self.bytes(&[v]);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn mat(&mut self, m: &Mat) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        m.as_slice().iter().for_each(|&v| self.f64(v));
    }
}

impl Sink for Vec<u8> {
    fn bytes(&mut self, b: &[u8]) {
        self.extend_from_slice(b);
    }
}

struct Counter(usize);

impl Sink for Counter {
    fn bytes(&mut self, b: &[u8]) {
        self.0 += b.len();
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt("payload truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TransportError> {
        Ok(self.take(1)?[0])
    }
    fn flag(&mut self) -> Result<bool, TransportError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            t => Err(corrupt(format!("bad flag byte {t}"))),
        }
    }
    fn u32(&mut self) -> Result<u32, TransportError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, TransportError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// Element count that must fit in the remaining bytes.
    fn len_u64(&mut self) -> Result<u64, TransportError> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(corrupt(format!("element count {n} exceeds payload")));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64, TransportError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn mat(&mut self) -> Result<Mat, TransportError> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| corrupt("matrix size overflow"))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(corrupt("matrix truncated"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Mat::from_col_major(rows, cols, data).map_err(|e| corrupt(e.to_string()))
    }
}

/// Writes one frame.
pub fn write_frame(w: &mut impl Write, env: &Envelope) -> Result<usize, TransportError> {
    let frame = env.encode_frame();
    w.write_all(&frame).map_err(io_error)?;
    w.flush().map_err(io_error)?;
    Ok(frame.len() - FRAME_OVERHEAD)
}

/// Reads one frame; a clean end of stream before the header is `Disconnected`.
pub fn read_frame(r: &mut impl Read) -> Result<Envelope, TransportError> {
    let mut header = [0u8; FRAME_OVERHEAD];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(TransportError::Disconnected),
            Ok(0) => return Err(corrupt("stream ended inside frame header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_error(e)),
        }
    }
    let len = u64::from_le_bytes(header[..8].try_into().expect("8 bytes"));
    if len > MAX_FRAME {
        return Err(corrupt(format!("frame length {len} too large")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => corrupt("stream ended inside frame payload"),
        _ => io_error(e),
    })?;
    Envelope::decode(header[8], &payload)
}

fn io_error(e: std::io::Error) -> TransportError {
    match e.kind() {
        std::io::ErrorKind::BrokenPipe | std::io::ErrorKind::ConnectionReset => TransportError::Disconnected,
        _ => TransportError::Io(e.to_string()),
    }
}

/// One end of an ordered, reliable, bidirectional connection.
pub trait Link: Send {
    /// Sends and returns the payload byte count.
    fn send(&mut self, env: Envelope) -> Result<usize, TransportError>;
    fn recv(&mut self) -> Result<Envelope, TransportError>;
}

/// `(master end, worker end)` of one worker's connection.
pub type LinkPair = (Box<dyn Link>, Box<dyn Link>);

/// Creates one [`LinkPair`] per worker.
pub trait Transport {
    fn connect(&self, nodes: usize) -> Result<Vec<LinkPair>, TransportError>;
}

/// In-process channel endpoint.
pub struct ChannelLink {
    tx: mpsc::Sender<Envelope>,
    rx: mpsc::Receiver<Envelope>,
}

impl ChannelLink {
    pub fn pair() -> (ChannelLink, ChannelLink) {
        let (atx, brx) = mpsc::channel();
        let (btx, arx) = mpsc::channel();
        (ChannelLink { tx: atx, rx: arx }, ChannelLink { tx: btx, rx: brx })
    }
}

impl Link for ChannelLink {
    fn send(&mut self, env: Envelope) -> Result<usize, TransportError> {
        let size = env.byte_size();
        self.tx.send(env).map_err(|_| TransportError::Disconnected)?;
        Ok(size)
    }

    fn recv(&mut self) -> Result<Envelope, TransportError> {
        self.rx.recv().map_err(|_| TransportError::Disconnected)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct InMemoryTransport;

impl Transport for InMemoryTransport {
    fn connect(&self, nodes: usize) -> Result<Vec<LinkPair>, TransportError> {
        Ok((0..nodes)
            .map(|_| {
                let (a, b) = ChannelLink::pair();
                (Box::new(a) as Box<dyn Link>, Box::new(b) as Box<dyn Link>)
            })
            .collect())
    }
}

/// Framed endpoint over any reliable byte stream.
pub struct StreamLink<S> {
    stream: S,
}

impl<S: Read + Write + Send> StreamLink<S> {
    pub fn new(stream: S) -> Self {
        StreamLink { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl<S: Read + Write + Send> Link for StreamLink<S> {
    fn send(&mut self, env: Envelope) -> Result<usize, TransportError> {
        write_frame(&mut self.stream, &env)
    }

    fn recv(&mut self) -> Result<Envelope, TransportError> {
        read_frame(&mut self.stream)
    }
}

/// Stream transport over connected Unix socket pairs.
#[cfg(unix)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SocketTransport;

#[cfg(unix)]
impl Transport for SocketTransport {
    fn connect(&self, nodes: usize) -> Result<Vec<LinkPair>, TransportError> {
        use std::os::unix::net::UnixStream;
        (0..nodes)
            .map(|_| {
                let (a, b) = UnixStream::pair().map_err(io_error)?;
                Ok((Box::new(StreamLink::new(a)) as Box<dyn Link>, Box::new(StreamLink::new(b)) as Box<dyn Link>))
            })
            .collect()
    }
}
