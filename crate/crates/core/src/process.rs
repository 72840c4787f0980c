//! Line-delimited JSON conversation with a child process: one request line
//! on its stdin, one reply line on its stdout.

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

struct Pipe {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

pub(crate) struct JsonLines {
    pub command: String,
    pipe: Mutex<Pipe>,
}

impl JsonLines {
    pub fn spawn(command: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Config(format!("cannot start {command:?}: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { command: command.to_string(), pipe: Mutex::new(Pipe { child, stdin, stdout }) })
    }

    /// Sends one request and waits for its reply. Errors are plain
    /// descriptions; callers attach the record they concern.
    pub fn ask<Q: Serialize, A: DeserializeOwned>(&self, req: &Q) -> std::result::Result<A, String> {
        let line = serde_json::to_string(req).map_err(|e| e.to_string())?;
        let mut pipe = self.pipe.lock().map_err(|_| "process lock poisoned".to_string())?;
        let stdin = pipe.stdin.as_mut().ok_or("process stdin closed")?;
        writeln!(stdin, "{line}").and_then(|_| stdin.flush()).map_err(|e| format!("write to {}: {e}", self.command))?;
        let mut reply = String::new();
        let n = pipe.stdout.read_line(&mut reply).map_err(|e| format!("read from {}: {e}", self.command))?;
        if n == 0 {
            return Err(format!("{} exited", self.command));
        }
        serde_json::from_str(reply.trim()).map_err(|e| format!("bad reply {:?}: {e}", reply.trim()))
    }
}

impl Drop for JsonLines {
    fn drop(&mut self) {
        if let Ok(p) = self.pipe.get_mut() {
            drop(p.stdin.take());
            let _ = p.child.wait();
        }
    }
}

/// Splits a command line on whitespace into program and arguments.
pub fn split_command(line: &str) -> Result<(String, Vec<String>)> {
    let mut parts = line.split_whitespace().map(str::to_string);
    match parts.next() {
        Some(prog) => Ok((prog, parts.collect())),
        None => Err(Error::Config("empty command line".into())),
    }
}
