//! Point-to-point links between the master and one worker.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};

use crate::error::{Result, SbartError};

use super::message::{Frame, MAX_FRAME};

/// A reliable, ordered, bidirectional frame channel.
pub trait Link: Send {
    fn send(&mut self, frame: &Frame) -> Result<()>;
    fn recv(&mut self) -> Result<Frame>;
}

/// In-process link over crossbeam channels. Frames travel encoded, exactly
/// as they would over a socket.
pub struct InProcLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

/// Two connected in-process endpoints.
pub fn inproc_pair(timeout: Duration) -> (InProcLink, InProcLink) {
    let (a_tx, b_rx) = crossbeam_channel::unbounded();
    let (b_tx, a_rx) = crossbeam_channel::unbounded();
    (
        InProcLink {
            tx: a_tx,
            rx: a_rx,
            timeout,
        },
        InProcLink {
            tx: b_tx,
            rx: b_rx,
            timeout,
        },
    )
}

impl Link for InProcLink {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        self.tx
            .send(frame.encode())
            .map_err(|_| SbartError::Transport("peer hung up".into()))
    }

    fn recv(&mut self) -> Result<Frame> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(bytes) => Frame::decode(&bytes),
            Err(RecvTimeoutError::Timeout) => Err(SbartError::Transport(format!("no message within {:?}", self.timeout))),
            Err(RecvTimeoutError::Disconnected) => Err(SbartError::Transport("peer hung up".into())),
        }
    }
}

/// Length-prefixed frames over TCP.
pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpLink {
    pub fn new(stream: TcpStream, timeout: Duration) -> Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    /// Connects to `addr`, retrying until `wait` has elapsed so workers may
    /// start after the master.
    pub fn connect(addr: &str, wait: Duration, timeout: Duration) -> Result<Self> {
        let deadline = Instant::now() + wait;
        loop {
            let attempt = addr
                .to_socket_addrs()
                .map_err(|e| SbartError::Transport(format!("{addr}: {e}")))?
                .find_map(|a| TcpStream::connect_timeout(&a, Duration::from_secs(2)).ok());
            match attempt {
                Some(stream) => return Self::new(stream, timeout),
                None if Instant::now() >= deadline => {
                    return Err(SbartError::Transport(format!("could not connect to {addr}")));
                }
                None => std::thread::sleep(Duration::from_millis(50)),
            }
        }
    }

    /// Accepts exactly one connection on `listener`.
    pub fn accept(listener: &TcpListener, timeout: Duration) -> Result<Self> {
        let (stream, _) = listener.accept()?;
        Self::new(stream, timeout)
    }
}

fn io_err(e: std::io::Error) -> SbartError {
    SbartError::Transport(e.to_string())
}

impl Link for TcpLink {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        self.writer.write_all(&frame.encode()).map_err(io_err)?;
        self.writer.flush().map_err(io_err)
    }

    fn recv(&mut self) -> Result<Frame> {
        let mut len = [0u8; 4];
        self.reader.read_exact(&mut len).map_err(io_err)?;
        let len = u32::from_le_bytes(len) as usize;
        if len > MAX_FRAME {
            return Err(SbartError::Transport(format!("frame of {len} bytes exceeds the limit")));
        }
        let mut body = vec![0u8; len];
        self.reader.read_exact(&mut body).map_err(io_err)?;
        Frame::decode_body(&body)
    }
}

/// `host:port` of every rank, one per line in rank order. Blank lines and
/// `#` comments are ignored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub addrs: Vec<String>,
}

impl Topology {
    pub fn parse(text: &str) -> Result<Self> {
        let addrs: Vec<String> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if addrs.is_empty() {
            return Err(SbartError::Startup("topology lists no ranks".into()));
        }
        for a in &addrs {
            if a.rsplit_once(':').and_then(|(_, port)| port.parse::<u16>().ok()).is_none() {
                return Err(SbartError::Startup(format!("'{a}' is not host:port")));
            }
        }
        Ok(Self { addrs })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn size(&self) -> usize {
        self.addrs.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::message::Tag;

    fn frame(i: u32) -> Frame {
        Frame {
            tag: Tag::LeafParams,
            iteration: i,
            tree: 2,
            payload: vec![1, 2, 3, i as u8],
        }
    }

    #[test]
    fn inproc_in_order() {
        let (mut a, mut b) = inproc_pair(Duration::from_secs(1));
        for i in 0..5 {
            a.send(&frame(i)).unwrap();
        }
        for i in 0..5 {
            assert_eq!(b.recv().unwrap(), frame(i));
        }
        b.send(&frame(9)).unwrap();
        assert_eq!(a.recv().unwrap(), frame(9));
    }

    #[test]
    fn inproc_timeout_and_hangup() {
        let (mut a, b) = inproc_pair(Duration::from_millis(20));
        assert!(matches!(a.recv(), Err(SbartError::Transport(_))));
        drop(b);
        assert!(matches!(a.send(&frame(0)), Err(SbartError::Transport(_))));
    }

    #[test]
    fn tcp_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = std::thread::spawn(move || {
            let mut link = TcpLink::accept(&listener, Duration::from_secs(5)).unwrap();
            let f = link.recv().unwrap();
            link.send(&f).unwrap();
        });
        let mut client = TcpLink::connect(&addr, Duration::from_secs(5), Duration::from_secs(5)).unwrap();
        client.send(&frame(3)).unwrap();
        assert_eq!(client.recv().unwrap(), frame(3));
        server.join().unwrap();
    }

    #[test]
    fn topology_parsing() {
        let t = Topology::parse("# ranks\n127.0.0.1:7000\n\nhost-b:7001  # worker\n").unwrap();
        assert_eq!(t.addrs, vec!["127.0.0.1:7000", "host-b:7001"]);
        assert!(Topology::parse("").is_err());
        assert!(Topology::parse("nohost").is_err());
    }
}
