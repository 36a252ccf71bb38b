//! TCP links between level-1 servers and the level-2 server. Each level-1
//! server opens one connection and introduces itself with an `Init` frame
//! whose key is [`HELLO`] and whose sender is its machine id.

use std::io::{self, Read};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread::JoinHandle;

use crossbeam_channel::Sender;
use tessel_core::wire::{Frame, Header, MsgType, WireError, HEADER_LEN};

use super::server::{Downlink, L1Msg, L2Msg, Uplink};

const HELLO: u64 = u64::MAX;

pub(crate) struct Links {
    pub uplinks: Vec<Uplink>,
    pub downlinks: Vec<Downlink>,
    pub readers: Vec<JoinHandle<()>>,
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub(crate) fn read_frame(s: &mut impl Read) -> io::Result<Option<Frame>> {
    let mut head = [0u8; HEADER_LEN];
    match s.read_exact(&mut head) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let h = Header::decode(&head).map_err(invalid)?;
    let mut payload = vec![0u8; h.payload_len as usize];
    s.read_exact(&mut payload)?;
    Ok(Some(Frame { kind: h.kind, key: h.key, sender: h.sender, seq: h.seq, payload }))
}

fn invalid(e: WireError) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e)
}

/// Binds the level-2 listener at `addr`, connects one client per level-1
/// server and starts the reader threads that feed both sides' channels.
pub(crate) fn connect(addr: SocketAddr, l2: &Sender<L2Msg>, l1: Vec<Sender<L1Msg>>) -> io::Result<Links> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let machines = l1.len();
    let mut uplinks = Vec::with_capacity(machines);
    let mut readers = Vec::new();
    for (m, tx) in l1.into_iter().enumerate() {
        let stream = TcpStream::connect(local)?;
        stream.set_nodelay(true)?;
        let hello = Frame { kind: MsgType::Init, key: HELLO, sender: m as u64, seq: 0, payload: Vec::new() };
        io::Write::write_all(&mut &stream, &hello.encode())?;
        let mut rd = stream.try_clone()?;
        readers.push(std::thread::spawn(move || {
            while let Ok(Some(f)) = read_frame(&mut rd) {
                if tx.send(L1Msg::Upstream(f)).is_err() {
                    break;
                }
            }
        }));
        uplinks.push(Uplink::Tcp(stream));
    }
    let mut downlinks: Vec<Option<Downlink>> = (0..machines).map(|_| None).collect();
    for _ in 0..machines {
        let (mut stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        let hello = read_frame(&mut stream)?.ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "no hello"))?;
        let m = hello.sender as usize;
        if hello.kind != MsgType::Init || hello.key != HELLO || m >= machines || downlinks[m].is_some() {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad hello frame"));
        }
        let mut rd = stream.try_clone()?;
        let tx = l2.clone();
        readers.push(std::thread::spawn(move || {
            while let Ok(Some(f)) = read_frame(&mut rd) {
                if tx.send(L2Msg::Frame(m, f)).is_err() {
                    break;
                }
            }
        }));
        downlinks[m] = Some(Downlink::Tcp(stream));
    }
    Ok(Links { uplinks, downlinks: downlinks.into_iter().map(Option::unwrap).collect(), readers })
}
