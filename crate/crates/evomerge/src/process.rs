//! Running external commands with a timeout.

use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::Duration;

use wait_timeout::ChildExt;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Output {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

fn drain<R: Read + Send + 'static>(reader: Option<R>) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut r) = reader {
            let _ = r.read_to_end(&mut buf);
        }
        buf
    })
}

fn tail(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    let text = text.trim_end();
    let start = text.len().saturating_sub(2000);
    let start = (start..=text.len())
        .find(|&i| text.is_char_boundary(i))
        .unwrap_or(0);
    text[start..].to_string()
}

/// Runs `argv` with `stdin` piped in, failing on a non-zero exit or when
/// `timeout` elapses. Errors carry the tail of stderr.
pub fn run(argv: &[String], stdin: &[u8], timeout: Duration, cwd: Option<&Path>) -> Result<Output> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| Error::config("command", "argv is empty"))?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = cwd {
        cmd.current_dir(dir);
    }
    let mut child = cmd
        .spawn()
        .map_err(|e| Error::Evaluation(format!("cannot start `{program}`: {e}")))?;
    let out = drain(child.stdout.take());
    let err = drain(child.stderr.take());
    if let Some(mut pipe) = child.stdin.take() {
        let input = stdin.to_vec();
        // a child that never reads stdin must not block us
        thread::spawn(move || {
            let _ = pipe.write_all(&input);
        });
    }
    let status = match child.wait_timeout(timeout) {
        Ok(Some(status)) => status,
        Ok(None) => {
            let _ = child.kill();
            let _ = child.wait();
            // grandchildren may still hold the pipes open, so don't join the readers
            return Err(Error::Evaluation(format!(
                "`{program}` timed out after {:.1}s",
                timeout.as_secs_f64()
            )));
        }
        Err(e) => return Err(Error::Evaluation(format!("waiting for `{program}`: {e}"))),
    };
    let stdout = out.join().unwrap_or_default();
    let stderr = err.join().unwrap_or_default();
    if !status.success() {
        return Err(Error::Evaluation(format!(
            "`{program}` exited with {status}; stderr: {}",
            tail(&stderr)
        )));
    }
    Ok(Output { stdout, stderr })
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    #[test]
    fn captures_stdout_from_stdin() {
        let out = run(&sh("tr a-z A-Z"), b"abc", Duration::from_secs(10), None).unwrap();
        assert_eq!(out.stdout, b"ABC");
    }

    #[test]
    fn failure_carries_stderr() {
        let err = run(
            &sh("echo boom >&2; exit 3"),
            b"",
            Duration::from_secs(10),
            None,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("boom"), "{msg}");
    }

    #[test]
    fn timeout_kills_child() {
        let err = run(&sh("sleep 5"), b"", Duration::from_millis(200), None).unwrap_err();
        assert!(err.to_string().contains("timed out"));
    }

    #[test]
    fn missing_program_is_an_evaluation_error() {
        let err = run(
            &["/nonexistent/tool".to_string()],
            b"",
            Duration::from_secs(1),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }
}
