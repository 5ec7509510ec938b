//! TCP side of the operator gateway.
//!
//! The simulation thread publishes snapshots and drains operator input; all
//! socket work happens on background threads. Each client gets the hello,
//! one full snapshot, then deltas against what it was last sent.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::Value;

use super::protocol::{diff, read_frame, write_frame, ClientMsg, ProtocolError, ServerMsg, Snapshot, PROTOCOL_VERSION};

/// Operator input tagged with the client it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Inbound {
    pub client: u64,
    pub msg: ClientMsg,
}

#[derive(Default)]
struct Latest {
    version: u64,
    sim_time: f64,
    value: Option<Arc<Value>>,
}

struct Shared {
    latest: Mutex<Latest>,
    cv: Condvar,
    stop: AtomicBool,
    clients: AtomicU64,
    next_client: AtomicU64,
}

pub struct GatewayServer {
    addr: SocketAddr,
    inbound: Receiver<Inbound>,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl GatewayServer {
    /// Binds and starts accepting. Use port 0 for an ephemeral port.
    pub fn bind(addr: &str) -> io::Result<GatewayServer> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let shared = Arc::new(Shared {
            latest: Mutex::new(Latest::default()),
            cv: Condvar::new(),
            stop: AtomicBool::new(false),
            clients: AtomicU64::new(0),
            next_client: AtomicU64::new(1),
        });
        let (tx, rx) = mpsc::channel();
        let sh = shared.clone();
        let accept = thread::spawn(move || accept_loop(listener, sh, tx));
        Ok(GatewayServer { addr: local, inbound: rx, shared, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn client_count(&self) -> u64 {
        self.shared.clients.load(Ordering::SeqCst)
    }

    /// Replaces the outbound snapshot; client threads pick it up.
    pub fn publish(&self, snap: &Snapshot) {
        let value = serde_json::to_value(snap).expect("serializable");
        let mut l = self.shared.latest.lock().expect("lock");
        l.version += 1;
        l.sim_time = snap.sim_time;
        l.value = Some(Arc::new(value));
        self.shared.cv.notify_all();
    }

    /// Operator input received since the last call, in arrival order.
    pub fn drain(&self) -> Vec<Inbound> {
        self.inbound.try_iter().collect()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.cv.notify_all();
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for GatewayServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, tx: Sender<Inbound>) {
    let mut workers = Vec::new();
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let id = shared.next_client.fetch_add(1, Ordering::SeqCst);
                let sh = shared.clone();
                let tx = tx.clone();
                workers.push(thread::spawn(move || serve_client(id, stream, sh, tx)));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
            Err(e) => {
                log::warn!("gateway accept failed: {e}");
                thread::sleep(Duration::from_millis(100));
            }
        }
    }
    for w in workers {
        let _ = w.join();
    }
}

fn send(stream: &Mutex<TcpStream>, msg: &str) -> Result<(), ProtocolError> {
    let mut s = stream.lock().expect("lock");
    write_frame(&mut *s, msg)
}

fn serve_client(id: u64, stream: TcpStream, shared: Arc<Shared>, tx: Sender<Inbound>) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else { return };
    let writer = Arc::new(Mutex::new(stream));
    shared.clients.fetch_add(1, Ordering::SeqCst);

    let sim_time = shared.latest.lock().expect("lock").sim_time;
    let hello = ServerMsg::Hello { protocol: PROTOCOL_VERSION, sim_time }.to_json();
    let alive = Arc::new(AtomicBool::new(send(&writer, &hello).is_ok()));

    let reader = {
        let writer = writer.clone();
        let alive = alive.clone();
        thread::spawn(move || {
            let _ = read_half.set_read_timeout(Some(Duration::from_millis(200)));
            let mut r = read_half;
            while alive.load(Ordering::SeqCst) {
                match read_frame(&mut r) {
                    Ok(Some(text)) => match ClientMsg::parse(&text) {
                        Ok(msg) => {
                            if tx.send(Inbound { client: id, msg }).is_err() {
                                break;
                            }
                        }
                        Err(e) => {
                            let reply = ServerMsg::Error { message: e.to_string() }.to_json();
                            if send(&writer, &reply).is_err() {
                                break;
                            }
                        }
                    },
                    Ok(None) => break,
                    Err(ProtocolError::Io(e))
                        if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) =>
                    {
                        continue
                    }
                    Err(ProtocolError::NotUtf8) => {
                        let reply = ServerMsg::Error { message: "frame is not UTF-8".into() }.to_json();
                        if send(&writer, &reply).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
            alive.store(false, Ordering::SeqCst);
        })
    };

    let mut sent_version = 0;
    let mut last: Option<Arc<Value>> = None;
    while alive.load(Ordering::SeqCst) && !shared.stop.load(Ordering::SeqCst) {
        let next = {
            let l = shared.latest.lock().expect("lock");
            let (l, _) = shared
                .cv
                .wait_timeout_while(l, Duration::from_millis(200), |l| {
                    l.version == sent_version && !shared.stop.load(Ordering::SeqCst)
                })
                .expect("lock");
            if l.version == sent_version {
                None
            } else {
                sent_version = l.version;
                l.value.clone().map(|v| (v, l.sim_time))
            }
        };
        let Some((value, sim_time)) = next else { continue };
        let text = match &last {
            None => {
                let mut full = (*value).clone();
                if let Some(o) = full.as_object_mut() {
                    o.insert("type".into(), Value::String("snapshot".into()));
                }
                full.to_string()
            }
            Some(prev) => ServerMsg::Delta { sim_time, changes: diff(prev, &value) }.to_json(),
        };
        if send(&writer, &text).is_err() {
            break;
        }
        last = Some(value);
    }
    alive.store(false, Ordering::SeqCst);
    let _ = writer.lock().expect("lock").shutdown(std::net::Shutdown::Both);
    let _ = reader.join();
    shared.clients.fetch_sub(1, Ordering::SeqCst);
}
