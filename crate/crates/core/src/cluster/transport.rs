//! Frame transports: bounded in-process mailboxes and TCP streams.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError, SyncSender};
use std::thread;
use std::time::Duration;

use super::message::{Header, MsgType, HEADER_LEN};
use super::ClusterError;

/// Server end: receives frames from any worker, sends to one.
pub trait ServerTransport: Send {
    fn recv(&mut self) -> Result<Vec<u8>, ClusterError>;
    fn send(&mut self, worker: u16, frame: &[u8]) -> Result<(), ClusterError>;
}

/// Worker end: one duplex link to the server.
pub trait WorkerTransport: Send {
    fn send(&mut self, frame: &[u8]) -> Result<(), ClusterError>;
    fn recv(&mut self) -> Result<Vec<u8>, ClusterError>;
}

fn recv_from(rx: &Receiver<Vec<u8>>, timeout: Option<Duration>) -> Result<Vec<u8>, ClusterError> {
    match timeout {
        Some(t) => rx.recv_timeout(t).map_err(|e| match e {
            RecvTimeoutError::Timeout => ClusterError::Timeout(t),
            RecvTimeoutError::Disconnected => ClusterError::transport("peer disconnected"),
        }),
        None => rx.recv().map_err(|_| ClusterError::transport("peer disconnected")),
    }
}

pub struct InProcessServer {
    inbound: Receiver<Vec<u8>>,
    outbound: Vec<SyncSender<Vec<u8>>>,
    timeout: Option<Duration>,
}

pub struct InProcessWorker {
    to_server: SyncSender<Vec<u8>>,
    from_server: Receiver<Vec<u8>>,
    timeout: Option<Duration>,
}

/// Mailboxes for `workers` workers. The server inbox holds at most one
/// frame per worker and each worker inbox at most one frame, so a sender
/// blocks until the other side catches up.
pub fn in_process(workers: usize, timeout: Option<Duration>) -> (InProcessServer, Vec<InProcessWorker>) {
    let (to_server, inbound) = sync_channel(workers.max(1));
    let mut outbound = Vec::with_capacity(workers);
    let mut ends = Vec::with_capacity(workers);
    for _ in 0..workers {
        let (tx, rx) = sync_channel(1);
        outbound.push(tx);
        ends.push(InProcessWorker {
            to_server: to_server.clone(),
            from_server: rx,
            timeout,
        });
    }
    (
        InProcessServer {
            inbound,
            outbound,
            timeout,
        },
        ends,
    )
}

impl ServerTransport for InProcessServer {
    fn recv(&mut self) -> Result<Vec<u8>, ClusterError> {
        recv_from(&self.inbound, self.timeout)
    }

    fn send(&mut self, worker: u16, frame: &[u8]) -> Result<(), ClusterError> {
        self.outbound
            .get(worker as usize)
            .ok_or_else(|| ClusterError::Protocol(format!("no worker {worker}")))?
            .send(frame.to_vec())
            .map_err(|_| ClusterError::transport(format!("worker {worker} disconnected")))
    }
}

impl WorkerTransport for InProcessWorker {
    fn send(&mut self, frame: &[u8]) -> Result<(), ClusterError> {
        self.to_server
            .send(frame.to_vec())
            .map_err(|_| ClusterError::transport("server disconnected"))
    }

    fn recv(&mut self) -> Result<Vec<u8>, ClusterError> {
        recv_from(&self.from_server, self.timeout)
    }
}

/// Reads one frame: the fixed header, then exactly `payload-len` bytes.
pub fn read_frame(stream: &mut impl Read) -> Result<Vec<u8>, ClusterError> {
    let mut frame = vec![0u8; HEADER_LEN];
    stream.read_exact(&mut frame).map_err(io_err)?;
    let header = Header::parse(&frame)?;
    let len = header.payload_len as usize;
    frame.resize(HEADER_LEN + len, 0);
    stream.read_exact(&mut frame[HEADER_LEN..]).map_err(io_err)?;
    Ok(frame)
}

fn io_err(e: std::io::Error) -> ClusterError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => ClusterError::transport(format!("timed out: {e}")),
        _ => ClusterError::transport(e.to_string()),
    }
}

/// TCP server end. Each connection must open with a register frame naming
/// its worker id; a reader thread per connection forwards frames into one
/// inbox.
pub struct SocketServer {
    inbound: Receiver<Vec<u8>>,
    streams: Vec<Option<TcpStream>>,
    timeout: Option<Duration>,
}

impl SocketServer {
    /// Accepts exactly `workers` connections on `listener`.
    pub fn accept(listener: TcpListener, workers: usize, timeout: Option<Duration>) -> Result<Self, ClusterError> {
        let (tx, inbound) = sync_channel(workers.max(1) * 2);
        let mut streams: Vec<Option<TcpStream>> = (0..workers).map(|_| None).collect();
        for _ in 0..workers {
            let (mut stream, peer) = listener.accept().map_err(io_err)?;
            stream.set_nodelay(true).map_err(io_err)?;
            stream.set_read_timeout(timeout).map_err(io_err)?;
            let first = read_frame(&mut stream)?;
            let header = Header::parse(&first)?;
            if header.msg_type != MsgType::Register {
                return Err(ClusterError::Protocol(format!("{peer} did not register first")));
            }
            let id = header.worker as usize;
            match streams.get_mut(id) {
                Some(slot @ None) => *slot = Some(stream.try_clone().map_err(io_err)?),
                Some(Some(_)) => {
                    return Err(ClusterError::Protocol(format!("worker {id} connected twice")));
                }
                None => return Err(ClusterError::Protocol(format!("worker id {id} out of range"))),
            }
            stream.set_read_timeout(None).map_err(io_err)?;
            tx.send(first).map_err(|_| ClusterError::transport("server inbox closed"))?;
            let tx = tx.clone();
            thread::spawn(move || {
                while let Ok(frame) = read_frame(&mut stream) {
                    if tx.send(frame).is_err() {
                        break;
                    }
                }
            });
        }
        Ok(Self {
            inbound,
            streams,
            timeout,
        })
    }

    pub fn bind(addr: impl ToSocketAddrs, workers: usize, timeout: Option<Duration>) -> Result<Self, ClusterError> {
        let listener = TcpListener::bind(addr).map_err(io_err)?;
        Self::accept(listener, workers, timeout)
    }
}

impl ServerTransport for SocketServer {
    fn recv(&mut self) -> Result<Vec<u8>, ClusterError> {
        recv_from(&self.inbound, self.timeout)
    }

    fn send(&mut self, worker: u16, frame: &[u8]) -> Result<(), ClusterError> {
        let stream = self
            .streams
            .get_mut(worker as usize)
            .and_then(Option::as_mut)
            .ok_or_else(|| ClusterError::Protocol(format!("no connection for worker {worker}")))?;
        stream.write_all(frame).map_err(io_err)
    }
}

/// TCP worker end.
pub struct SocketWorker {
    stream: TcpStream,
}

impl SocketWorker {
    /// Connects, retrying up to `attempts` times `backoff` apart while the
    /// server is not yet listening.
    pub fn connect(addr: SocketAddr, attempts: usize, backoff: Duration, timeout: Option<Duration>) -> Result<Self, ClusterError> {
        let mut last = None;
        for _ in 0..attempts.max(1) {
            match TcpStream::connect(addr) {
                Ok(stream) => {
                    stream.set_nodelay(true).map_err(io_err)?;
                    stream.set_read_timeout(timeout).map_err(io_err)?;
                    return Ok(Self { stream });
                }
                Err(e) => {
                    last = Some(e);
                    thread::sleep(backoff);
                }
            }
        }
        Err(ClusterError::Transport {
            retryable: true,
            msg: format!("connect {addr}: {}", last.map(|e| e.to_string()).unwrap_or_default()),
        })
    }
}

impl WorkerTransport for SocketWorker {
    fn send(&mut self, frame: &[u8]) -> Result<(), ClusterError> {
        self.stream.write_all(frame).map_err(io_err)
    }

    fn recv(&mut self) -> Result<Vec<u8>, ClusterError> {
        read_frame(&mut self.stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::Message;

    #[test]
    fn in_process_mailboxes() {
        let (mut server, mut workers) = in_process(2, Some(Duration::from_secs(5)));
        workers[1].send(b"hello").unwrap();
        assert_eq!(server.recv().unwrap(), b"hello");
        server.send(0, b"x").unwrap();
        assert_eq!(workers[0].recv().unwrap(), b"x");
        assert!(server.send(7, b"x").is_err());
    }

    #[test]
    fn in_process_timeout() {
        let (mut server, _workers) = in_process(1, Some(Duration::from_millis(20)));
        assert!(matches!(server.recv(), Err(ClusterError::Timeout(_))));
    }

    #[test]
    fn frames_survive_a_stream() {
        let a = Message::Register { worker: 3 }.to_frame().unwrap();
        let b = Message::Shutdown { worker: 3, iteration: 9 }.to_frame().unwrap();
        let mut buf = a.clone();
        buf.extend_from_slice(&b);
        let mut cursor = std::io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cursor).unwrap(), a);
        assert_eq!(read_frame(&mut cursor).unwrap(), b);
        assert!(read_frame(&mut cursor).is_err());
    }

    #[test]
    fn connect_failure_is_retryable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        match SocketWorker::connect(addr, 2, Duration::from_millis(5), None) {
            Err(ClusterError::Transport { retryable, .. }) => assert!(retryable),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("connected to a closed port"),
        }
    }
}
