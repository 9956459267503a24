// SPDX-License-Identifier: Apache-2.0

//! One flowfile per newline-terminated line received over TCP. A trailing
//! partial line at connection close is discarded.

use std::io::{BufRead, BufReader, ErrorKind};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::{MIME_TYPE_ATTR, SOURCE_NAME_ATTR};
use crate::engine::processor::{
    parse_property, ConfigError, ProcessContext, ProcessError, Processor, ProcessorSpec, Properties, PropertyDescriptor,
};
use crate::engine::session::ProcessSession;
use crate::model::{rel, Attributes};

const MAX_PER_TRIGGER: usize = 1_000;
const POLL: Duration = Duration::from_millis(10);

pub fn spec() -> ProcessorSpec {
    ProcessorSpec {
        type_name: "ListenLines",
        relationships: vec![rel::SUCCESS],
        properties: vec![
            PropertyDescriptor::required("port"),
            PropertyDescriptor::optional("bind_address", Some("127.0.0.1")),
        ],
        dynamic_relationships: false,
        trigger_when_empty: false,
    }
}

struct Line {
    text: Vec<u8>,
    peer: String,
}

struct Listening {
    stop: Arc<AtomicBool>,
    rx: Receiver<Line>,
}

pub struct ListenLines {
    port: u16,
    bind_address: String,
    state: Mutex<Option<Listening>>,
}

pub fn build(props: &Properties) -> Result<Arc<dyn Processor>, ConfigError> {
    Ok(Arc::new(ListenLines {
        port: parse_property(props, "port")?.ok_or_else(|| ConfigError::new("port is required"))?,
        bind_address: props.get("bind_address").cloned().unwrap_or_else(|| "127.0.0.1".into()),
        state: Mutex::new(None),
    }))
}

fn read_lines(stream: TcpStream, tx: Sender<Line>, stop: Arc<AtomicBool>) {
    let peer = stream
        .peer_addr()
        .map_or_else(|_| "unknown".to_string(), |a| a.to_string());
    let _ = stream.set_read_timeout(Some(POLL * 10));
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => break,
            Ok(_) if buf.ends_with(b"\n") => {
                buf.pop();
                if buf.ends_with(b"\r") {
                    buf.pop();
                }
                let text = std::mem::take(&mut buf);
                if tx.send(Line { text, peer: peer.clone() }).is_err() {
                    break;
                }
            }
            Ok(_) => break,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => {
                log::info!("line connection from {peer} dropped: {e}");
                break;
            }
        }
    }
}

impl Processor for ListenLines {
    fn on_scheduled(&self, _ctx: &ProcessContext) -> Result<(), ProcessError> {
        let listener = TcpListener::bind((self.bind_address.as_str(), self.port))
            .map_err(|e| ProcessError::other(format!("cannot bind {}:{}: {e}", self.bind_address, self.port)))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| ProcessError::other(e.to_string()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let accept_stop = stop.clone();
        thread::spawn(move || {
            while !accept_stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nonblocking(false);
                        let (tx, stop) = (tx.clone(), accept_stop.clone());
                        thread::spawn(move || read_lines(stream, tx, stop));
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        thread::sleep(POLL);
                    }
                }
            }
        });
        *self.state.lock().unwrap() = Some(Listening { stop, rx });
        Ok(())
    }

    fn on_trigger(&self, ctx: &ProcessContext, session: &mut ProcessSession) -> Result<(), ProcessError> {
        let state = self.state.lock().unwrap();
        let Some(listening) = state.as_ref() else {
            return Ok(());
        };
        let mut n = 0;
        while n < MAX_PER_TRIGGER {
            let Ok(line) = listening.rx.try_recv() else { break };
            let mut attrs = Attributes::new();
            attrs.insert(SOURCE_NAME_ATTR.into(), format!("socket:{}", self.port));
            attrs.insert(MIME_TYPE_ATTR.into(), "text/plain".into());
            attrs.insert("remote.address".into(), line.peer.clone());
            let uri = format!("tcp://{}", line.peer);
            let ff = session.receive(attrs, &line.text, &uri)?;
            session.transfer(&ff, rel::SUCCESS)?;
            n += 1;
        }
        if n == 0 {
            ctx.idle_until(ctx.now() + POLL.as_millis() as i64);
        }
        Ok(())
    }

    fn on_stopped(&self, _ctx: &ProcessContext) {
        if let Some(l) = self.state.lock().unwrap().take() {
            l.stop.store(true, Ordering::SeqCst);
        }
    }
}
