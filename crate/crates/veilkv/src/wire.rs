//! Length-prefixed binary wire protocol between proxy and storage server.
//!
//! Frame layout: `u32 LE payload length || payload`. Every payload starts
//! with `correlation id (u64 LE) || message type (u8)` followed by the
//! type-specific body; responses echo the request's correlation id. Integers
//! are little-endian throughout; variable-length fields are length-prefixed
//! with `u32`. This layout is stable; changing it is a protocol version
//! bump.
//!
//! Request types: `0x01 READ_SLOT (bucket u32, slot u16)`,
//! `0x02 WRITE_BUCKET (bucket u32, version u64, counter_tag u64, n u32,
//! n * envelope)`, `0x03 ROLLBACK (counter u64)`, `0x04 LOG_APPEND (kind u8,
//! counter u64, payload bytes)`, `0x05 LOG_READ (kind u8, counter u64)`,
//! `0x06 READ_SLOT_BATCH (n u32, n * (bucket u32, slot u16))`,
//! `0x07 WRITE_BUCKET_BATCH (n u32, n * WRITE_BUCKET body)`,
//! `0x08 GC (keep_from u64)`.
//!
//! Response types: `0x81 SLOT (version u64, envelope)`, `0x82 ACK`,
//! `0x83 LOG_RECORD (present u8, payload bytes if present)`,
//! `0x84 SLOT_BATCH (n u32, n * (version u64, envelope))`,
//! `0xFF ERROR (code u8, message bytes)`.

use crate::crypto::Envelope;
use crate::error::{Error, Result};

pub const MAX_FRAME: usize = 64 << 20;

/// Record classes stored on the recovery unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordKind {
    PathLog = 1,
    FullCheckpoint = 2,
    DeltaCheckpoint = 3,
}

impl RecordKind {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => RecordKind::PathLog,
            2 => RecordKind::FullCheckpoint,
            3 => RecordKind::DeltaCheckpoint,
            other => return Err(Error::Protocol(format!("unknown record kind {other}"))),
        })
    }
}

/// One bucket write as carried on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketWrite {
    pub bucket: u32,
    /// Logical write version: the count of logical rewrites of this bucket.
    /// Batched execution skips intermediate versions, so versions are
    /// strictly increasing but not necessarily dense.
    pub version: u64,
    /// Global access-counter value this write becomes durable at; rollback
    /// keys off this tag.
    pub counter_tag: u64,
    pub slots: Vec<Envelope>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    ReadSlot { bucket: u32, slot: u16 },
    WriteBucket(BucketWrite),
    Rollback { counter: u64 },
    LogAppend { kind: RecordKind, counter: u64, payload: Vec<u8> },
    LogRead { kind: RecordKind, counter: u64 },
    ReadSlotBatch { coords: Vec<(u32, u16)> },
    WriteBucketBatch { writes: Vec<BucketWrite> },
    Gc { keep_from: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Slot { version: u64, envelope: Envelope },
    Ack,
    LogRecord { payload: Option<Vec<u8>> },
    SlotBatch { slots: Vec<(u64, Envelope)> },
    Error { code: u8, message: String },
}

pub const ERR_PROTOCOL: u8 = 1;
pub const ERR_NOT_FOUND: u8 = 2;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Protocol("message truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        if n > MAX_FRAME {
            return Err(Error::Protocol("length field exceeds frame limit".into()));
        }
        Ok(self.take(n)?.to_vec())
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Protocol("trailing bytes in message".into()));
        }
        Ok(())
    }
}

fn write_bucket_body(w: &mut Writer, b: &BucketWrite) {
    w.u32(b.bucket);
    w.u64(b.version);
    w.u64(b.counter_tag);
    w.u32(b.slots.len() as u32);
    for slot in &b.slots {
        w.bytes(&slot.0);
    }
}

fn read_bucket_body(r: &mut Reader) -> Result<BucketWrite> {
    let bucket = r.u32()?;
    let version = r.u64()?;
    let counter_tag = r.u64()?;
    let n = r.u32()? as usize;
    if n > 1 << 20 {
        return Err(Error::Protocol("slot count implausible".into()));
    }
    let mut slots = Vec::with_capacity(n);
    for _ in 0..n {
        slots.push(Envelope(r.bytes()?));
    }
    Ok(BucketWrite { bucket, version, counter_tag, slots })
}

pub fn encode_request(correlation: u64, req: &Request) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(correlation);
    match req {
        Request::ReadSlot { bucket, slot } => {
            w.u8(0x01);
            w.u32(*bucket);
            w.u16(*slot);
        }
        Request::WriteBucket(b) => {
            w.u8(0x02);
            write_bucket_body(&mut w, b);
        }
        Request::Rollback { counter } => {
            w.u8(0x03);
            w.u64(*counter);
        }
        Request::LogAppend { kind, counter, payload } => {
            w.u8(0x04);
            w.u8(*kind as u8);
            w.u64(*counter);
            w.bytes(payload);
        }
        Request::LogRead { kind, counter } => {
            w.u8(0x05);
            w.u8(*kind as u8);
            w.u64(*counter);
        }
        Request::ReadSlotBatch { coords } => {
            w.u8(0x06);
            w.u32(coords.len() as u32);
            for (bucket, slot) in coords {
                w.u32(*bucket);
                w.u16(*slot);
            }
        }
        Request::WriteBucketBatch { writes } => {
            w.u8(0x07);
            w.u32(writes.len() as u32);
            for b in writes {
                write_bucket_body(&mut w, b);
            }
        }
        Request::Gc { keep_from } => {
            w.u8(0x08);
            w.u64(*keep_from);
        }
    }
    w.buf
}

pub fn decode_request(payload: &[u8]) -> Result<(u64, Request)> {
    let mut r = Reader::new(payload);
    let correlation = r.u64()?;
    let kind = r.u8()?;
    let req = match kind {
        0x01 => Request::ReadSlot { bucket: r.u32()?, slot: r.u16()? },
        0x02 => Request::WriteBucket(read_bucket_body(&mut r)?),
        0x03 => Request::Rollback { counter: r.u64()? },
        0x04 => Request::LogAppend {
            kind: RecordKind::from_u8(r.u8()?)?,
            counter: r.u64()?,
            payload: r.bytes()?,
        },
        0x05 => Request::LogRead { kind: RecordKind::from_u8(r.u8()?)?, counter: r.u64()? },
        0x06 => {
            let n = r.u32()? as usize;
            if n > 1 << 24 {
                return Err(Error::Protocol("batch size implausible".into()));
            }
            let mut coords = Vec::with_capacity(n);
            for _ in 0..n {
                coords.push((r.u32()?, r.u16()?));
            }
            Request::ReadSlotBatch { coords }
        }
        0x07 => {
            let n = r.u32()? as usize;
            if n > 1 << 24 {
                return Err(Error::Protocol("batch size implausible".into()));
            }
            let mut writes = Vec::with_capacity(n);
            for _ in 0..n {
                writes.push(read_bucket_body(&mut r)?);
            }
            Request::WriteBucketBatch { writes }
        }
        0x08 => Request::Gc { keep_from: r.u64()? },
        other => return Err(Error::Protocol(format!("unknown request type {other:#x}"))),
    };
    r.done()?;
    Ok((correlation, req))
}

pub fn encode_response(correlation: u64, resp: &Response) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(correlation);
    match resp {
        Response::Slot { version, envelope } => {
            w.u8(0x81);
            w.u64(*version);
            w.bytes(&envelope.0);
        }
        Response::Ack => w.u8(0x82),
        Response::LogRecord { payload } => {
            w.u8(0x83);
            match payload {
                Some(p) => {
                    w.u8(1);
                    w.bytes(p);
                }
                None => w.u8(0),
            }
        }
        Response::SlotBatch { slots } => {
            w.u8(0x84);
            w.u32(slots.len() as u32);
            for (version, env) in slots {
                w.u64(*version);
                w.bytes(&env.0);
            }
        }
        Response::Error { code, message } => {
            w.u8(0xFF);
            w.u8(*code);
            w.bytes(message.as_bytes());
        }
    }
    w.buf
}

pub fn decode_response(payload: &[u8]) -> Result<(u64, Response)> {
    let mut r = Reader::new(payload);
    let correlation = r.u64()?;
    let kind = r.u8()?;
    let resp = match kind {
        0x81 => Response::Slot { version: r.u64()?, envelope: Envelope(r.bytes()?) },
        0x82 => Response::Ack,
        0x83 => {
            let present = r.u8()?;
            Response::LogRecord { payload: if present == 1 { Some(r.bytes()?) } else { None } }
        }
        0x84 => {
            let n = r.u32()? as usize;
            if n > 1 << 24 {
                return Err(Error::Protocol("batch size implausible".into()));
            }
            let mut slots = Vec::with_capacity(n);
            for _ in 0..n {
                slots.push((r.u64()?, Envelope(r.bytes()?)));
            }
            Response::SlotBatch { slots }
        }
        0xFF => {
            let code = r.u8()?;
            let message = String::from_utf8_lossy(&r.bytes()?).into_owned();
            Response::Error { code, message }
        }
        other => return Err(Error::Protocol(format!("unknown response type {other:#x}"))),
    };
    r.done()?;
    Ok((correlation, resp))
}

/// Read one length-prefixed frame.
pub fn read_frame(stream: &mut impl std::io::Read) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    Ok(buf)
}

/// Write one length-prefixed frame.
pub fn write_frame(stream: &mut impl std::io::Write, payload: &[u8]) -> Result<()> {
    stream.write_all(&(payload.len() as u32).to_le_bytes())?;
    stream.write_all(payload)?;
    stream.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_envelope() -> impl Strategy<Value = Envelope> {
        proptest::collection::vec(any::<u8>(), 0..200).prop_map(Envelope)
    }

    fn arb_bucket_write() -> impl Strategy<Value = BucketWrite> {
        (any::<u32>(), any::<u64>(), any::<u64>(), proptest::collection::vec(arb_envelope(), 0..4))
            .prop_map(|(bucket, version, counter_tag, slots)| BucketWrite {
                bucket,
                version,
                counter_tag,
                slots,
            })
    }

    fn arb_request() -> impl Strategy<Value = Request> {
        prop_oneof![
            (any::<u32>(), any::<u16>()).prop_map(|(bucket, slot)| Request::ReadSlot { bucket, slot }),
            arb_bucket_write().prop_map(Request::WriteBucket),
            any::<u64>().prop_map(|counter| Request::Rollback { counter }),
            (0u8..3, any::<u64>(), proptest::collection::vec(any::<u8>(), 0..100)).prop_map(
                |(k, counter, payload)| Request::LogAppend {
                    kind: RecordKind::from_u8(k + 1).unwrap(),
                    counter,
                    payload,
                }
            ),
            (0u8..3, any::<u64>()).prop_map(|(k, counter)| Request::LogRead {
                kind: RecordKind::from_u8(k + 1).unwrap(),
                counter,
            }),
            proptest::collection::vec((any::<u32>(), any::<u16>()), 0..8)
                .prop_map(|coords| Request::ReadSlotBatch { coords }),
            proptest::collection::vec(arb_bucket_write(), 0..3)
                .prop_map(|writes| Request::WriteBucketBatch { writes }),
            any::<u64>().prop_map(|keep_from| Request::Gc { keep_from }),
        ]
    }

    fn arb_response() -> impl Strategy<Value = Response> {
        prop_oneof![
            (any::<u64>(), arb_envelope())
                .prop_map(|(version, envelope)| Response::Slot { version, envelope }),
            Just(Response::Ack),
            proptest::option::of(proptest::collection::vec(any::<u8>(), 0..100))
                .prop_map(|payload| Response::LogRecord { payload }),
            proptest::collection::vec((any::<u64>(), arb_envelope()), 0..5)
                .prop_map(|slots| Response::SlotBatch { slots }),
            (any::<u8>(), ".{0,40}").prop_map(|(code, message)| Response::Error { code, message }),
        ]
    }

    proptest! {
        #[test]
        fn request_round_trip(correlation in any::<u64>(), req in arb_request()) {
            let bytes = encode_request(correlation, &req);
            let (c, decoded) = decode_request(&bytes).unwrap();
            prop_assert_eq!(c, correlation);
            prop_assert_eq!(decoded, req);
        }

        #[test]
        fn response_round_trip(correlation in any::<u64>(), resp in arb_response()) {
            let bytes = encode_response(correlation, &resp);
            let (c, decoded) = decode_response(&bytes).unwrap();
            prop_assert_eq!(c, correlation);
            prop_assert_eq!(decoded, resp);
        }

        #[test]
        fn truncated_requests_never_panic(req in arb_request(), cut in 0usize..32) {
            let bytes = encode_request(7, &req);
            let cut = cut.min(bytes.len());
            let _ = decode_request(&bytes[..bytes.len() - cut]);
        }
    }

    #[test]
    fn frame_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello").unwrap();
        let mut cursor = std::io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cursor).unwrap(), b"hello");
    }

    #[test]
    fn oversized_frame_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(u32::MAX).to_le_bytes());
        let mut cursor = std::io::Cursor::new(buf);
        assert!(read_frame(&mut cursor).is_err());
    }
}
