//! Append-only event logs exported as JSON lines.

use std::io::{self, Write};
use std::sync::Mutex;

use serde::Serialize;

#[derive(Debug)]
pub struct EventLog<T> {
    records: Mutex<Vec<T>>,
}

impl<T> Default for EventLog<T> {
    fn default() -> Self {
        Self {
            records: Mutex::new(Vec::new()),
        }
    }
}

impl<T: Clone + Serialize> EventLog<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, record: T) {
        self.records.lock().unwrap().push(record);
    }

    pub fn records(&self) -> Vec<T> {
        self.records.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_jsonl<W: Write>(&self, out: W) -> io::Result<()> {
        write_jsonl(out, self.records.lock().unwrap().iter())
    }
}

/// Writes one compact JSON document per line.
pub fn write_jsonl<'a, W, T, I>(mut out: W, records: I) -> io::Result<()>
where
    W: Write,
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Serialize)]
    struct Rec {
        time: f64,
        event: &'static str,
    }

    #[test]
    fn one_document_per_line() {
        let log = EventLog::new();
        log.push(Rec { time: 0.0, event: "append" });
        log.push(Rec { time: 1.5, event: "swap" });
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines, vec![r#"{"time":0.0,"event":"append"}"#, r#"{"time":1.5,"event":"swap"}"#]);
    }
}
