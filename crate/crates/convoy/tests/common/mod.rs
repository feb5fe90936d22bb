//! Shared helpers for the integration tests.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

/// A byte-level TCP proxy that records everything flowing in each direction.
/// Lets a test point the client at the proxy and inspect the raw transcript
/// between client and server afterwards.
pub struct RecordingProxy {
    addr: SocketAddr,
    client_to_server: Arc<Mutex<Vec<u8>>>,
    server_to_client: Arc<Mutex<Vec<u8>>>,
    shutdown: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl RecordingProxy {
    pub fn spawn(upstream: SocketAddr) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let client_to_server = Arc::new(Mutex::new(Vec::new()));
        let server_to_client = Arc::new(Mutex::new(Vec::new()));
        let shutdown = Arc::new(AtomicBool::new(false));

        let c2s = client_to_server.clone();
        let s2c = server_to_client.clone();
        let stop = shutdown.clone();
        let join = thread::spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(downstream) = conn else { continue };
                let Ok(up) = TcpStream::connect(upstream) else { continue };
                let _ = downstream.set_nodelay(true);
                let _ = up.set_nodelay(true);
                let down_clone = downstream.try_clone().expect("clone");
                let up_clone = up.try_clone().expect("clone");
                let c2s = c2s.clone();
                let s2c = s2c.clone();
                thread::spawn(move || pump(downstream, up_clone, c2s));
                thread::spawn(move || pump(up, down_clone, s2c));
            }
        });

        Ok(RecordingProxy {
            addr,
            client_to_server,
            server_to_client,
            shutdown,
            join: Some(join),
        })
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn client_to_server(&self) -> Vec<u8> {
        self.client_to_server.lock().unwrap().clone()
    }

    pub fn server_to_client(&self) -> Vec<u8> {
        self.server_to_client.lock().unwrap().clone()
    }
}

impl Drop for RecordingProxy {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

fn pump(mut from: TcpStream, mut to: TcpStream, record: Arc<Mutex<Vec<u8>>>) {
    let mut buf = [0u8; 8192];
    loop {
        match from.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                record.lock().unwrap().extend_from_slice(&buf[..n]);
                if to.write_all(&buf[..n]).is_err() {
                    break;
                }
            }
        }
    }
    let _ = to.shutdown(std::net::Shutdown::Both);
}

/// Naive byte substring search; good enough for transcript scans.
pub fn contains_subslice(haystack: &[u8], needle: &[u8]) -> bool {
    if needle.is_empty() {
        return true;
    }
    haystack
        .windows(needle.len())
        .any(|window| window == needle)
}

#[allow(dead_code)]
pub fn le_bytes_of<T: convoy::Scalar>(values: &[T]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}
