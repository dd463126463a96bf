//! TCP connections feeding a single control-loop inbox.

use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::error::{Result, RuntimeError};
use crate::wire::{read_frame, write_frame, Message, Role, PROTOCOL_VERSION};

pub type ConnId = u64;

static NEXT_CONN: AtomicU64 = AtomicU64::new(1);

/// What reader and acceptor threads hand to a control loop.
#[derive(Debug)]
pub enum Inbound {
    Joined { role: Role, digest: [u8; 8], conn: Conn },
    Frame(ConnId, Message),
    Closed(ConnId, String),
    /// Graceful drain requested by the owner.
    Shutdown,
    /// Abrupt stop, as if the process died.
    Kill,
}

/// Cloneable handle on one TCP connection.
#[derive(Debug, Clone)]
pub struct Conn {
    pub id: ConnId,
    pub peer: SocketAddr,
    writer: Arc<Mutex<TcpStream>>,
    last_rx: Arc<Mutex<Instant>>,
    open: Arc<AtomicBool>,
}

impl Conn {
    fn new(stream: &TcpStream) -> Result<Self> {
        Ok(Self {
            id: NEXT_CONN.fetch_add(1, Ordering::Relaxed),
            peer: stream.peer_addr()?,
            writer: Arc::new(Mutex::new(stream.try_clone()?)),
            last_rx: Arc::new(Mutex::new(Instant::now())),
            open: Arc::new(AtomicBool::new(true)),
        })
    }

    pub fn send(&self, msg: &Message) -> Result<()> {
        if !self.is_open() {
            return Err(RuntimeError::Closed(format!("connection to {} is closed", self.peer)));
        }
        let mut w = self.writer.lock().expect("writer poisoned");
        write_frame(&mut *w, msg).inspect_err(|_| self.open.store(false, Ordering::SeqCst))
    }

    /// Time since any frame last arrived.
    pub fn silence(&self) -> Duration {
        self.last_rx.lock().expect("clock poisoned").elapsed()
    }

    pub fn is_open(&self) -> bool {
        self.open.load(Ordering::SeqCst)
    }

    pub fn close(&self) {
        self.open.store(false, Ordering::SeqCst);
        if let Ok(w) = self.writer.lock() {
            let _ = w.shutdown(Shutdown::Both);
        }
    }

    fn touch(&self) {
        *self.last_rx.lock().expect("clock poisoned") = Instant::now();
    }
}

/// Starts the reader thread. Heartbeats only refresh the silence clock;
/// every other frame is forwarded.
pub fn spawn_reader(conn: &Conn, stream: TcpStream, inbox: Sender<Inbound>) -> JoinHandle<()> {
    let conn = conn.clone();
    thread::spawn(move || {
        let mut stream = stream;
        let reason = loop {
            match read_frame(&mut stream) {
                Ok(Some(msg)) => {
                    conn.touch();
                    if matches!(msg, Message::Heartbeat { .. }) {
                        continue;
                    }
                    if inbox.send(Inbound::Frame(conn.id, msg)).is_err() {
                        break "owner gone".to_string();
                    }
                }
                Ok(None) => break "end of stream".to_string(),
                Err(e) => break e.to_string(),
            }
        };
        conn.open.store(false, Ordering::SeqCst);
        let _ = inbox.send(Inbound::Closed(conn.id, reason));
    })
}

/// Sends HEARTBEAT every `interval` until the connection or `stop` closes.
pub fn spawn_heartbeats(conn: &Conn, interval: Duration, stop: Arc<AtomicBool>) -> JoinHandle<()> {
    let conn = conn.clone();
    let origin = Instant::now();
    thread::spawn(move || {
        let mut seq = 0u32;
        while conn.is_open() && !stop.load(Ordering::SeqCst) {
            let msg = Message::Heartbeat {
                seq,
                sent_us: origin.elapsed().as_micros() as u64,
            };
            if conn.send(&msg).is_err() {
                break;
            }
            seq = seq.wrapping_add(1);
            thread::sleep(interval);
        }
    })
}

pub fn bind(addr: &str) -> Result<TcpListener> {
    let listener = TcpListener::bind(addr).map_err(|source| RuntimeError::Bind {
        addr: addr.to_owned(),
        source,
    })?;
    listener.set_nonblocking(true)?;
    Ok(listener)
}

/// Accepts connections until `stop`, reads each peer's HELLO and hands the
/// connection to the inbox. Frames from the peer follow the `Joined` message.
pub fn spawn_acceptor(
    listener: TcpListener,
    inbox: Sender<Inbound>,
    stop: Arc<AtomicBool>,
    hello_timeout: Duration,
) -> JoinHandle<()> {
    thread::spawn(move || {
        while !stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let inbox = inbox.clone();
                    thread::spawn(move || {
                        let _ = admit(stream, inbox, hello_timeout);
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(_) => thread::sleep(Duration::from_millis(20)),
            }
        }
    })
}

fn admit(stream: TcpStream, inbox: Sender<Inbound>, hello_timeout: Duration) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(hello_timeout))?;
    let mut reader = stream.try_clone()?;
    let first = read_frame(&mut reader)?;
    stream.set_read_timeout(None)?;
    let Some(Message::Hello { role, version, digest }) = first else {
        let _ = write_frame(
            &mut &stream,
            &Message::error(crate::wire::ErrorCode::Protocol, "expected HELLO"),
        );
        return Err(RuntimeError::Protocol("first frame was not HELLO".into()));
    };
    if version != PROTOCOL_VERSION {
        let _ = write_frame(
            &mut &stream,
            &Message::error(
                crate::wire::ErrorCode::VersionMismatch,
                format!("protocol version {version}, expected {PROTOCOL_VERSION}"),
            ),
        );
        return Err(RuntimeError::Protocol(format!("peer protocol version {version}")));
    }
    let conn = Conn::new(&stream)?;
    inbox
        .send(Inbound::Joined { role, digest, conn: conn.clone() })
        .map_err(|_| RuntimeError::Closed("owner gone".into()))?;
    spawn_reader(&conn, reader, inbox);
    Ok(())
}

/// Connects, sends HELLO and waits for the peer's HELLO (or ERROR).
///
/// On success the reader thread is running and feeding `inbox`.
pub fn dial(
    addr: &str,
    role: Role,
    digest: [u8; 8],
    timeout: Duration,
    inbox: Sender<Inbound>,
) -> Result<(Conn, [u8; 8])> {
    let target = addr
        .to_socket_addrs()
        .map_err(|source| RuntimeError::Connect { addr: addr.to_owned(), source })?
        .next()
        .ok_or_else(|| RuntimeError::Invalid(format!("address {addr:?} resolves to nothing")))?;
    let stream = TcpStream::connect_timeout(&target, timeout)
        .map_err(|source| RuntimeError::Connect { addr: addr.to_owned(), source })?;
    stream.set_nodelay(true)?;
    write_frame(
        &mut &stream,
        &Message::Hello { role, version: PROTOCOL_VERSION, digest },
    )?;
    stream.set_read_timeout(Some(timeout))?;
    let mut reader = stream.try_clone()?;
    let reply = read_frame(&mut reader)?;
    stream.set_read_timeout(None)?;
    match reply {
        Some(Message::Hello { digest: peer, .. }) => {
            let conn = Conn::new(&stream)?;
            spawn_reader(&conn, reader, inbox);
            Ok((conn, peer))
        }
        Some(Message::Error { code, message }) => Err(RuntimeError::Remote { code, message }),
        Some(other) => Err(RuntimeError::Protocol(format!("expected HELLO, got {}", other.name()))),
        None => Err(RuntimeError::Closed(format!("{addr} closed during handshake"))),
    }
}

pub fn hex(digest: &[u8; 8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
