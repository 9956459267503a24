// SPDX-License-Identifier: Apache-2.0

//! Line-oriented text protocol for external consumers. See
//! `docs/topic-protocol.md` for the grammar.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;

use super::{TopicError, TopicLog};

fn error_line(e: &TopicError) -> String {
    let code = match e {
        TopicError::TopicExists(_) => "TOPIC_EXISTS",
        TopicError::InvalidName(_) => "INVALID_NAME",
        TopicError::InvalidConfig(_) => "INVALID_CONFIG",
        TopicError::UnknownTopic(_) => "UNKNOWN_TOPIC",
        TopicError::UnknownPartition { .. } => "UNKNOWN_PARTITION",
        TopicError::OffsetTrimmed { head } => return format!("ERR OFFSET_TRIMMED {head}"),
        TopicError::UnknownGroup(_) => "UNKNOWN_GROUP",
        TopicError::Unavailable => "UNAVAILABLE",
        TopicError::StorageFull => "STORAGE_FULL",
        TopicError::Io(_) => "IO",
    };
    format!("ERR {code} {e}")
}

fn bad(msg: &str) -> String {
    format!("ERR BAD_REQUEST {msg}")
}

fn decode_b64(s: &str) -> Option<Vec<u8>> {
    B64.decode(s).ok()
}

/// Executes one request line and returns the full response (status line
/// plus payload lines, each newline-terminated).
pub fn handle_line(log: &TopicLog, line: &str) -> String {
    let parts: Vec<&str> = line.split_whitespace().collect();
    let body = match parts.as_slice() {
        ["FETCH", topic, partition, offset, max] => {
            let (Ok(p), Ok(o), Ok(m)) = (partition.parse(), offset.parse(), max.parse::<usize>()) else {
                return bad("FETCH <topic> <partition> <offset> <max>") + "\n";
            };
            match log.fetch(topic, p, o, m) {
                Ok(records) => {
                    let mut out = format!("OK {}", records.len());
                    for r in records {
                        let key = r.key.as_deref().map_or_else(|| "-".to_string(), |k| B64.encode(k));
                        out.push_str(&format!("\n{} {} {} {}", r.offset, r.timestamp, key, B64.encode(&r.value)));
                    }
                    out
                }
                Err(e) => error_line(&e),
            }
        }
        ["PRODUCE", topic, key, value] => {
            let key = match *key {
                "-" => Some(None),
                k => decode_b64(k).map(Some),
            };
            match (key, decode_b64(value)) {
                (Some(k), Some(v)) => match log.produce(topic, k.as_deref(), &v) {
                    Ok((p, o)) => format!("OK {p} {o}"),
                    Err(e) => error_line(&e),
                },
                _ => bad("key and value must be base64"),
            }
        }
        ["COMMIT", group, topic, partition, offset] => {
            let (Ok(p), Ok(o)) = (partition.parse(), offset.parse()) else {
                return bad("COMMIT <group> <topic> <partition> <offset>") + "\n";
            };
            match log.commit_offset(group, topic, p, o) {
                Ok(()) => "OK".to_string(),
                Err(e) => error_line(&e),
            }
        }
        ["OFFSET", group, topic, partition] => {
            let Ok(p) = partition.parse() else {
                return bad("OFFSET <group> <topic> <partition>") + "\n";
            };
            match log.start_offset(group, topic, p) {
                Ok(o) => format!("OK {o}"),
                Err(e) => error_line(&e),
            }
        }
        ["JOIN", group, consumer, topics] => {
            let topics: Vec<String> = topics.split(',').map(str::to_string).collect();
            match log.group_join(group, consumer, &topics) {
                Ok(assignment) => {
                    let owned = assignment.get(*consumer).cloned().unwrap_or_default();
                    let mut out = format!("OK {}", owned.len());
                    for tp in owned {
                        out.push_str(&format!("\n{} {}", tp.topic, tp.partition));
                    }
                    out
                }
                Err(e) => error_line(&e),
            }
        }
        ["LEAVE", group, consumer] => match log.group_leave(group, consumer) {
            Ok(_) => "OK".to_string(),
            Err(e) => error_line(&e),
        },
        _ => bad("unknown command"),
    };
    body + "\n"
}

fn session(log: Arc<TopicLog>, stream: TcpStream) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if line.trim() == "QUIT" {
            break;
        }
        writer.write_all(handle_line(&log, &line).as_bytes())?;
    }
    Ok(())
}

/// Accepts connections on a background thread, one thread per client.
pub fn serve(log: Arc<TopicLog>, listener: TcpListener) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let log = log.clone();
            thread::spawn(move || {
                if let Err(e) = session(log, stream) {
                    log::debug!("topic protocol session ended: {e}");
                }
            });
        }
    })
}
