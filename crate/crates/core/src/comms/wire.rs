//! TCP transport.
//!
//! Every party binds one listener. Outgoing connections are opened lazily
//! on the first send to a peer and kept for the rest of the run, so each
//! directed pair of parties shares exactly one ordered byte stream.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::frame::{declared_payload_len, header_len};
use super::{decode_frame, CommError, Communicator, FrameError, Inbox, Message, PartyId, Transport};
use crate::metrics::MetricsSink;

pub const CONNECT_RETRIES: u32 = 5;
pub const RETRY_BACKOFF: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Endpoint {
            host: host.into(),
            port,
        }
    }

    fn resolve(&self) -> io::Result<SocketAddr> {
        (self.host.as_str(), self.port)
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "host resolved to no address"))
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone)]
pub struct WireConfig {
    pub me: PartyId,
    pub topology: BTreeMap<PartyId, Endpoint>,
    pub recv_timeout: Duration,
}

impl WireConfig {
    pub fn validate(&self) -> Result<(), CommError> {
        if !self.topology.contains_key(&self.me) {
            return Err(CommError::Config(format!("no address for {}", self.me)));
        }
        let mut seen: HashMap<(&str, u16), PartyId> = HashMap::new();
        for (party, ep) in &self.topology {
            if let Some(other) = seen.insert((ep.host.as_str(), ep.port), *party) {
                return Err(CommError::Config(format!(
                    "{other} and {party} share address {ep}"
                )));
            }
        }
        Ok(())
    }
}

struct WireTransport {
    topology: BTreeMap<PartyId, Endpoint>,
    conns: Mutex<HashMap<PartyId, TcpStream>>,
    stop: Arc<AtomicBool>,
    local_addr: SocketAddr,
}

/// Binds this party's listener and returns a communicator that sends over
/// TCP. The listener thread stops when the communicator is dropped.
pub fn connect(cfg: WireConfig, sink: Arc<MetricsSink>) -> Result<Communicator, CommError> {
    cfg.validate()?;
    let own = &cfg.topology[&cfg.me];
    let bind_addr = format!("{}:{}", own.host, own.port);
    let listener = TcpListener::bind(&bind_addr).map_err(|source| CommError::Bind {
        addr: bind_addr.clone(),
        source,
    })?;
    let local_addr = listener.local_addr().map_err(|source| CommError::Bind {
        addr: bind_addr,
        source,
    })?;
    let inbox = Arc::new(Inbox::new());
    let stop = Arc::new(AtomicBool::new(false));
    {
        let inbox = Arc::clone(&inbox);
        let stop = Arc::clone(&stop);
        thread::spawn(move || accept_loop(listener, inbox, stop));
    }
    let transport = WireTransport {
        topology: cfg.topology.clone(),
        conns: Mutex::default(),
        stop,
        local_addr,
    };
    Ok(Communicator::new(
        cfg.me,
        cfg.topology.keys().copied(),
        Box::new(transport),
        inbox,
        sink,
        cfg.recv_timeout,
    ))
}

fn accept_loop(listener: TcpListener, inbox: Arc<Inbox>, stop: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let inbox = Arc::clone(&inbox);
        thread::spawn(move || read_loop(stream, inbox));
    }
}

fn read_loop(mut stream: TcpStream, inbox: Arc<Inbox>) {
    let _ = stream.set_nodelay(true);
    loop {
        match read_frame(&mut stream) {
            Ok(Some(frame)) => match decode_frame(&frame) {
                Ok(msg) => inbox.push(msg, frame.len()),
                Err(e) => {
                    inbox.fail(e);
                    return;
                }
            },
            Ok(None) => return,
            Err(ReadError::Frame(e)) => {
                inbox.fail(e);
                return;
            }
            Err(ReadError::Io) => return,
        }
    }
}

enum ReadError {
    Io,
    Frame(FrameError),
}

impl From<io::Error> for ReadError {
    fn from(_: io::Error) -> Self {
        ReadError::Io
    }
}

/// Reads one whole frame. `Ok(None)` on a clean end of stream between
/// frames; a stream ending mid-frame is a truncation error.
fn read_frame(stream: &mut impl Read) -> Result<Option<Vec<u8>>, ReadError> {
    let mut prefix = [0u8; 8];
    let mut got = 0;
    while got < prefix.len() {
        let n = stream.read(&mut prefix[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(ReadError::Frame(FrameError::Truncated { needed: 8, have: got }));
        }
        got += n;
    }
    let h = header_len(&prefix).map_err(ReadError::Frame)?;
    let mut frame = prefix.to_vec();
    read_more(stream, &mut frame, h)?;
    let payload = declared_payload_len(&frame[8..]).map_err(ReadError::Frame)?;
    read_more(stream, &mut frame, payload)?;
    Ok(Some(frame))
}

fn read_more(stream: &mut impl Read, buf: &mut Vec<u8>, n: usize) -> Result<(), ReadError> {
    let start = buf.len();
    buf.resize(start + n, 0);
    let mut got = 0;
    while got < n {
        let k = stream.read(&mut buf[start + got..])?;
        if k == 0 {
            return Err(ReadError::Frame(FrameError::Truncated {
                needed: start + n,
                have: start + got,
            }));
        }
        got += k;
    }
    Ok(())
}

impl WireTransport {
    fn open(&self, peer: PartyId, ep: &Endpoint) -> Result<TcpStream, CommError> {
        let mut last_err = String::new();
        for attempt in 0..=CONNECT_RETRIES {
            if attempt > 0 {
                thread::sleep(RETRY_BACKOFF * attempt);
            }
            match ep.resolve().and_then(TcpStream::connect) {
                Ok(s) => {
                    let _ = s.set_nodelay(true);
                    return Ok(s);
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(CommError::Transport {
            peer,
            addr: ep.to_string(),
            reason: format!("connect failed after {CONNECT_RETRIES} retries: {last_err}"),
        })
    }
}

impl Transport for WireTransport {
    fn deliver(&self, msg: &Message, frame: &[u8]) -> Result<(), CommError> {
        let peer = msg.receiver;
        let ep = self.topology.get(&peer).ok_or(CommError::Addressing(peer))?;
        let mut conns = self.conns.lock().unwrap();
        if !conns.contains_key(&peer) {
            let s = self.open(peer, ep)?;
            conns.insert(peer, s);
        }
        let stream = conns.get_mut(&peer).expect("inserted above");
        if let Err(e) = stream.write_all(frame).and_then(|_| stream.flush()) {
            conns.remove(&peer);
            return Err(CommError::Transport {
                peer,
                addr: ep.to_string(),
                reason: e.to_string(),
            });
        }
        Ok(())
    }
}

impl Drop for WireTransport {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for (_, s) in self.conns.lock().unwrap().drain() {
            let _ = s.shutdown(std::net::Shutdown::Write);
        }
        // Unblock accept() so the listener thread sees the stop flag.
        let _ = TcpStream::connect_timeout(&self.local_addr, Duration::from_millis(200));
    }
}
