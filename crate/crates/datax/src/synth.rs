//! Synthetic business logic for tests and demos, run as
//! `datax-synth <mode> [args]` by the runner.
//!
//! Modes read their knobs from the instance configuration:
//!
//! * `source`: driver. With `trigger`, waits for that file to appear, claims
//!   it, and emits as many messages as the number it contains; repeats. With
//!   `rate`, emits that many messages per second forever. With `count`, emits
//!   that many once.
//! * `map`: analytics unit. Emits `fanout` (default 1) messages per input,
//!   each tagged with `tag` = copy index, after sleeping `delay_ms`. With
//!   `db`, also stores every input under `<instance>-<n>`.
//! * `sink`: actuator. Appends `{"stream", "payload"}` lines to `record`.
//! * `stubborn`: ignores SIGTERM and idles.
//! * `silent`: never connects.
//! * `garbage`: sends `count` (default 3) malformed frames, then idles.
//! * `crash`: exits with status 3 after `after_ms`.
//! * `recorder PATH`: writes the type of every frame it receives to PATH.

use std::fs::OpenOptions;
use std::io::{BufReader, Write};
use std::os::unix::net::UnixStream;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use datax_core::client::{ClientError, Session, ENV_SOCKET};
use datax_core::frame::{read_frame, write_body};
use datax_core::value::{doc, Document, Value};
use serde_json::json;

fn int(config: &Document, key: &str) -> Option<u64> {
    config.get(key).and_then(Value::as_u64)
}

fn text<'a>(config: &'a Document, key: &str) -> Option<&'a str> {
    config.get(key).and_then(Value::as_str)
}

/// Blocks until the runner closes the connection.
fn idle(session: &mut Session) -> Result<(), ClientError> {
    loop {
        match session.next_timeout(Duration::from_secs(1)) {
            Ok(_) => {}
            Err(ClientError::ConnectionLost) => return Ok(()),
            Err(e) => return Err(e),
        }
    }
}

fn pace(started: Instant, sent: u64, rate: u64) {
    if rate == 0 {
        return;
    }
    let due = started + Duration::from_secs_f64(sent as f64 / rate as f64);
    if let Some(wait) = due.checked_duration_since(Instant::now()) {
        thread::sleep(wait);
    }
}

fn source(mut s: Session) -> Result<(), ClientError> {
    let config = s.get_configuration().clone();
    let output = s.output().unwrap_or_default().to_string();
    let rate = int(&config, "rate").unwrap_or(0);
    let mut seq = 0u64;
    let emit = |s: &mut Session, seq: &mut u64| {
        *seq += 1;
        s.emit(doc(json!({"sensor": output, "seq": *seq})))
    };

    if let Some(trigger) = text(&config, "trigger") {
        let trigger = Path::new(trigger);
        let claimed = trigger.with_extension(format!("claimed-{}", std::process::id()));
        loop {
            if std::fs::rename(trigger, &claimed).is_ok() {
                let n: u64 = std::fs::read_to_string(&claimed)
                    .ok()
                    .and_then(|t| t.trim().parse().ok())
                    .unwrap_or(0);
                let _ = std::fs::remove_file(&claimed);
                let started = Instant::now();
                for i in 0..n {
                    pace(started, i, rate);
                    emit(&mut s, &mut seq)?;
                }
            }
            match s.next_timeout(Duration::from_millis(20)) {
                Err(ClientError::ConnectionLost) => return Ok(()),
                Err(e) => return Err(e),
                Ok(_) => {}
            }
        }
    }
    if rate > 0 {
        let started = Instant::now();
        loop {
            pace(started, seq, rate);
            emit(&mut s, &mut seq)?;
        }
    }
    for _ in 0..int(&config, "count").unwrap_or(0) {
        emit(&mut s, &mut seq)?;
    }
    idle(&mut s)
}

fn map(mut s: Session) -> Result<(), ClientError> {
    let config = s.get_configuration().clone();
    let fanout = int(&config, "fanout").unwrap_or(1);
    let delay = Duration::from_millis(int(&config, "delay_ms").unwrap_or(0));
    let tag = text(&config, "tag").unwrap_or("copy").to_string();
    let db = text(&config, "db").map(str::to_string);
    let id = s.instance_id().to_string();
    let mut n = 0u64;
    loop {
        let (_stream, msg) = match s.next() {
            Ok(m) => m,
            Err(ClientError::ConnectionLost) => return Ok(()),
            Err(e) => return Err(e),
        };
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        if let Some(db) = &db {
            n += 1;
            s.db_put(db, &format!("{id}-{n:08}"), msg.clone())?;
        }
        for k in 0..fanout {
            let mut out = msg.clone();
            out.insert(tag.clone(), json!(k));
            s.emit(out)?;
        }
    }
}

fn sink(mut s: Session) -> Result<(), ClientError> {
    let config = s.get_configuration().clone();
    let delay = Duration::from_millis(int(&config, "delay_ms").unwrap_or(0));
    let mut record = match text(&config, "record") {
        Some(path) => Some(OpenOptions::new().create(true).append(true).open(path)?),
        None => None,
    };
    loop {
        let (stream, msg) = match s.next() {
            Ok(m) => m,
            Err(ClientError::ConnectionLost) => return Ok(()),
            Err(e) => return Err(e),
        };
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        if let Some(f) = record.as_mut() {
            writeln!(f, "{}", json!({"stream": stream, "payload": msg}))?;
            f.flush()?;
        }
    }
}

fn garbage(config_count: Option<u64>) -> Result<(), ClientError> {
    let socket = std::env::var(ENV_SOCKET).map_err(|_| ClientError::MissingEnv(ENV_SOCKET))?;
    let stream = UnixStream::connect(socket)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let config = read_frame(&mut reader).map_err(|e| ClientError::Protocol(e.to_string()))?;
    let count = config_count.or_else(|| int(&config.payload, "count")).unwrap_or(3);
    let mut writer = stream;
    for _ in 0..count {
        write_body(&mut writer, b"{not json")?;
    }
    // Drain until the runner hangs up.
    while read_frame(&mut reader).is_ok() {}
    Ok(())
}

fn recorder(path: &str) -> Result<(), ClientError> {
    let socket = std::env::var(ENV_SOCKET).map_err(|_| ClientError::MissingEnv(ENV_SOCKET))?;
    let stream = UnixStream::connect(socket)?;
    let mut reader = BufReader::new(stream);
    let mut out = OpenOptions::new().create(true).append(true).open(path)?;
    while let Ok(frame) = read_frame(&mut reader) {
        writeln!(out, "{}", frame.kind)?;
        out.flush()?;
    }
    Ok(())
}

/// Entry point; returns the process exit code.
pub fn main(args: &[String]) -> i32 {
    let mode = args.get(1).map(String::as_str).unwrap_or("");
    eprintln!(
        "datax-synth {mode} starting as {}",
        std::env::var(datax_core::client::ENV_INSTANCE_ID).unwrap_or_default()
    );
    let result = match mode {
        "source" => Session::from_env().and_then(source),
        "map" | "echo" => Session::from_env().and_then(map),
        "sink" => Session::from_env().and_then(sink),
        "stubborn" => {
            // SAFETY: installing SIG_IGN has no preconditions.
            unsafe {
                libc::signal(libc::SIGTERM, libc::SIG_IGN);
            }
            Session::from_env().and_then(|mut s| idle(&mut s))
        }
        "silent" => loop {
            thread::sleep(Duration::from_secs(3600));
        },
        "garbage" => garbage(args.get(2).and_then(|a| a.parse().ok())),
        "crash" => Session::from_env().map(|s| {
            let after = int(s.get_configuration(), "after_ms").unwrap_or(0);
            thread::sleep(Duration::from_millis(after));
            std::process::exit(3);
        }),
        "recorder" => match args.get(2) {
            Some(path) => recorder(path),
            None => Err(ClientError::Protocol("recorder needs a path".into())),
        },
        other => {
            eprintln!("unknown mode `{other}`");
            return 64;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("datax-synth {mode}: {e}");
            1
        }
    }
}
