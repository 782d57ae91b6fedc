//! Storage client abstraction and its transports: direct in-process calls
//! for deterministic tests, framed TCP for networked deployments, and a
//! latency-injecting wrapper for benchmarks.

use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::crypto::Envelope;
use crate::error::{Error, Result};
use crate::storage::StorageServer;
use crate::wire::{
    self, BucketWrite, RecordKind, Request, Response, ERR_NOT_FOUND, ERR_PROTOCOL,
};

/// Client side of the storage wire contract. Implementations must be safe
/// for concurrent use; the parallel executor issues many requests at once.
pub trait StorageClient: Send + Sync {
    fn read_slot(&self, bucket: u32, slot: u16) -> Result<(u64, Envelope)>;
    fn write_bucket(&self, write: BucketWrite) -> Result<()>;
    fn rollback_to(&self, counter: u64) -> Result<()>;
    fn gc(&self, keep_from: u64) -> Result<()>;
    fn log_append(&self, kind: RecordKind, counter: u64, payload: Vec<u8>) -> Result<()>;
    fn log_read(&self, kind: RecordKind, counter: u64) -> Result<Option<Vec<u8>>>;

    /// One round trip carrying many slot reads.
    fn read_slots(&self, coords: &[(u32, u16)]) -> Result<Vec<(u64, Envelope)>> {
        coords.iter().map(|&(b, s)| self.read_slot(b, s)).collect()
    }

    /// One round trip carrying many bucket writes.
    fn write_buckets(&self, writes: Vec<BucketWrite>) -> Result<()> {
        for w in writes {
            self.write_bucket(w)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// In-process transport
// ---------------------------------------------------------------------------

/// Direct calls into a shared server; the default for tests and single-host
/// runs.
#[derive(Clone)]
pub struct InProcess(pub Arc<StorageServer>);

impl StorageClient for InProcess {
    fn read_slot(&self, bucket: u32, slot: u16) -> Result<(u64, Envelope)> {
        self.0.read_slot(bucket, slot)
    }
    fn write_bucket(&self, write: BucketWrite) -> Result<()> {
        self.0.write_bucket(write)
    }
    fn rollback_to(&self, counter: u64) -> Result<()> {
        self.0.rollback_to(counter)
    }
    fn gc(&self, keep_from: u64) -> Result<()> {
        self.0.gc(keep_from)
    }
    fn log_append(&self, kind: RecordKind, counter: u64, payload: Vec<u8>) -> Result<()> {
        self.0.log_append(kind, counter, payload)
    }
    fn log_read(&self, kind: RecordKind, counter: u64) -> Result<Option<Vec<u8>>> {
        self.0.log_read(kind, counter)
    }
}

// ---------------------------------------------------------------------------
// Latency wrapper
// ---------------------------------------------------------------------------

/// Adds a fixed delay to every round trip, simulating storage distance.
pub struct Latency<T> {
    inner: T,
    delay: Duration,
}

impl<T> Latency<T> {
    pub fn new(inner: T, delay: Duration) -> Self {
        Latency { inner, delay }
    }

    fn pause(&self) {
        std::thread::sleep(self.delay);
    }
}

impl<T: StorageClient> StorageClient for Latency<T> {
    fn read_slot(&self, bucket: u32, slot: u16) -> Result<(u64, Envelope)> {
        self.pause();
        self.inner.read_slot(bucket, slot)
    }
    fn write_bucket(&self, write: BucketWrite) -> Result<()> {
        self.pause();
        self.inner.write_bucket(write)
    }
    fn rollback_to(&self, counter: u64) -> Result<()> {
        self.pause();
        self.inner.rollback_to(counter)
    }
    fn gc(&self, keep_from: u64) -> Result<()> {
        self.pause();
        self.inner.gc(keep_from)
    }
    fn log_append(&self, kind: RecordKind, counter: u64, payload: Vec<u8>) -> Result<()> {
        self.pause();
        self.inner.log_append(kind, counter, payload)
    }
    fn log_read(&self, kind: RecordKind, counter: u64) -> Result<Option<Vec<u8>>> {
        self.pause();
        self.inner.log_read(kind, counter)
    }
}

// ---------------------------------------------------------------------------
// TCP transport
// ---------------------------------------------------------------------------

/// TCP client with a connection pool; each request checks out a connection,
/// so concurrent callers get real pipelining across connections.
pub struct TcpClient {
    addr: String,
    pool: Mutex<Vec<TcpStream>>,
    correlation: AtomicU64,
}

impl TcpClient {
    pub fn connect(addr: &str) -> Result<Self> {
        // Validate the address eagerly.
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpClient {
            addr: addr.to_string(),
            pool: Mutex::new(vec![stream]),
            correlation: AtomicU64::new(1),
        })
    }

    fn checkout(&self) -> Result<TcpStream> {
        if let Some(stream) = self.pool.lock().unwrap().pop() {
            return Ok(stream);
        }
        let stream = TcpStream::connect(&self.addr)?;
        stream.set_nodelay(true)?;
        Ok(stream)
    }

    fn roundtrip(&self, req: &Request) -> Result<Response> {
        let correlation = self.correlation.fetch_add(1, Ordering::Relaxed);
        let mut stream = self.checkout()?;
        wire::write_frame(&mut stream, &wire::encode_request(correlation, req))?;
        let frame = wire::read_frame(&mut stream)?;
        let (echo, resp) = wire::decode_response(&frame)?;
        if echo != correlation {
            return Err(Error::Protocol(format!(
                "correlation mismatch: sent {correlation}, got {echo}"
            )));
        }
        self.pool.lock().unwrap().push(stream);
        match resp {
            Response::Error { code: ERR_NOT_FOUND, .. } => Err(Error::NotFound),
            Response::Error { code, message } => {
                Err(Error::Protocol(format!("server error {code}: {message}")))
            }
            other => Ok(other),
        }
    }
}

impl StorageClient for TcpClient {
    fn read_slot(&self, bucket: u32, slot: u16) -> Result<(u64, Envelope)> {
        match self.roundtrip(&Request::ReadSlot { bucket, slot })? {
            Response::Slot { version, envelope } => Ok((version, envelope)),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    fn write_bucket(&self, write: BucketWrite) -> Result<()> {
        match self.roundtrip(&Request::WriteBucket(write))? {
            Response::Ack => Ok(()),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    fn rollback_to(&self, counter: u64) -> Result<()> {
        match self.roundtrip(&Request::Rollback { counter })? {
            Response::Ack => Ok(()),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    fn gc(&self, keep_from: u64) -> Result<()> {
        match self.roundtrip(&Request::Gc { keep_from })? {
            Response::Ack => Ok(()),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    fn log_append(&self, kind: RecordKind, counter: u64, payload: Vec<u8>) -> Result<()> {
        match self.roundtrip(&Request::LogAppend { kind, counter, payload })? {
            Response::Ack => Ok(()),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    fn log_read(&self, kind: RecordKind, counter: u64) -> Result<Option<Vec<u8>>> {
        match self.roundtrip(&Request::LogRead { kind, counter })? {
            Response::LogRecord { payload } => Ok(payload),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    fn read_slots(&self, coords: &[(u32, u16)]) -> Result<Vec<(u64, Envelope)>> {
        match self.roundtrip(&Request::ReadSlotBatch { coords: coords.to_vec() })? {
            Response::SlotBatch { slots } => Ok(slots),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    fn write_buckets(&self, writes: Vec<BucketWrite>) -> Result<()> {
        match self.roundtrip(&Request::WriteBucketBatch { writes })? {
            Response::Ack => Ok(()),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Server loop
// ---------------------------------------------------------------------------

fn dispatch(server: &StorageServer, req: Request) -> Response {
    let to_resp = |r: Result<Response>| match r {
        Ok(resp) => resp,
        Err(Error::NotFound) => Response::Error { code: ERR_NOT_FOUND, message: "not found".into() },
        Err(e) => Response::Error { code: ERR_PROTOCOL, message: e.to_string() },
    };
    match req {
        Request::ReadSlot { bucket, slot } => to_resp(
            server.read_slot(bucket, slot).map(|(version, envelope)| Response::Slot { version, envelope }),
        ),
        Request::WriteBucket(w) => to_resp(server.write_bucket(w).map(|()| Response::Ack)),
        Request::Rollback { counter } => to_resp(server.rollback_to(counter).map(|()| Response::Ack)),
        Request::Gc { keep_from } => to_resp(server.gc(keep_from).map(|()| Response::Ack)),
        Request::LogAppend { kind, counter, payload } => {
            to_resp(server.log_append(kind, counter, payload).map(|()| Response::Ack))
        }
        Request::LogRead { kind, counter } => {
            to_resp(server.log_read(kind, counter).map(|payload| Response::LogRecord { payload }))
        }
        Request::ReadSlotBatch { coords } => to_resp(
            coords
                .iter()
                .map(|&(b, s)| server.read_slot(b, s))
                .collect::<Result<Vec<_>>>()
                .map(|slots| Response::SlotBatch { slots }),
        ),
        Request::WriteBucketBatch { writes } => to_resp(
            writes
                .into_iter()
                .try_for_each(|w| server.write_bucket(w))
                .map(|()| Response::Ack),
        ),
    }
}

/// Handle to a running storage listener.
pub struct ServerHandle {
    stop: Arc<AtomicBool>,
    pub local_addr: std::net::SocketAddr,
    join: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

/// Serve the wire protocol on `addr`. One thread per connection; returns a
/// handle whose `stop` shuts the listener down.
pub fn serve(addr: impl ToSocketAddrs, server: Arc<StorageServer>) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local_addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let join = std::thread::spawn(move || {
        while !stop_flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let server = server.clone();
                    let stop = stop_flag.clone();
                    std::thread::spawn(move || {
                        let _ = handle_connection(stream, &server, &stop);
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(_) => break,
            }
        }
    });
    Ok(ServerHandle { stop, local_addr, join: Some(join) })
}

fn handle_connection(
    mut stream: TcpStream,
    server: &StorageServer,
    stop: &AtomicBool,
) -> Result<()> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        let frame = match wire::read_frame(&mut stream) {
            Ok(frame) => frame,
            Err(Error::Io(e))
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let (correlation, resp) = match wire::decode_request(&frame) {
            Ok((correlation, req)) => (correlation, dispatch(server, req)),
            Err(e) => (0, Response::Error { code: ERR_PROTOCOL, message: e.to_string() }),
        };
        wire::write_frame(&mut stream, &wire::encode_response(correlation, &resp))?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observer::Observer;

    fn sample_write(bucket: u32, version: u64) -> BucketWrite {
        BucketWrite {
            bucket,
            version,
            counter_tag: version * 10,
            slots: vec![Envelope(vec![version as u8; 16])],
        }
    }

    #[test]
    fn tcp_round_trip_matches_in_process() {
        let server = Arc::new(StorageServer::new(Arc::new(Observer::new())));
        let handle = serve("127.0.0.1:0", server.clone()).unwrap();
        let client = TcpClient::connect(&handle.local_addr.to_string()).unwrap();

        client.write_bucket(sample_write(3, 1)).unwrap();
        let (version, env) = client.read_slot(3, 0).unwrap();
        assert_eq!(version, 1);
        assert_eq!(env.0, vec![1u8; 16]);

        client.log_append(RecordKind::PathLog, 9, vec![1, 2]).unwrap();
        assert_eq!(client.log_read(RecordKind::PathLog, 9).unwrap(), Some(vec![1, 2]));
        assert_eq!(client.log_read(RecordKind::PathLog, 10).unwrap(), None);

        client.write_bucket(sample_write(3, 2)).unwrap();
        client.rollback_to(10).unwrap();
        assert_eq!(client.read_slot(3, 0).unwrap().0, 1);

        // Batch variants.
        let slots = client.read_slots(&[(3, 0), (3, 0)]).unwrap();
        assert_eq!(slots.len(), 2);
        client.write_buckets(vec![sample_write(4, 1), sample_write(5, 1)]).unwrap();
        assert_eq!(client.read_slot(5, 0).unwrap().0, 1);

        // Error surfaces as protocol error.
        assert!(client.read_slot(99, 0).is_err());

        handle.stop();
    }

    #[test]
    fn concurrent_tcp_reads_all_served() {
        let observer = Arc::new(Observer::new());
        let server = Arc::new(StorageServer::new(observer.clone()));
        for b in 0..64u32 {
            server.write_bucket(sample_write(b, 1)).unwrap();
        }
        let handle = serve("127.0.0.1:0", server).unwrap();
        let client = Arc::new(TcpClient::connect(&handle.local_addr.to_string()).unwrap());

        std::thread::scope(|scope| {
            for t in 0..8 {
                let client = client.clone();
                scope.spawn(move || {
                    for i in 0..125u32 {
                        let bucket = (t * 125 + i) % 64;
                        client.read_slot(bucket, 0).unwrap();
                    }
                });
            }
        });
        let reads = observer
            .events()
            .iter()
            .filter(|e| e.kind == crate::observer::EventKind::SlotRead)
            .count();
        assert_eq!(reads, 1000);
        handle.stop();
    }
}
