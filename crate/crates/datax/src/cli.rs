//! The `datax` command line: a thin client of the HTTP API, plus `serve`.
//!
//! Exit codes: 0 success, 1 user error (bad input, refused operation,
//! unknown resource), 2 server or transport error.

use std::io::{Read, Write};
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::client::{ApiClient, ClientError};
use crate::kind::Kind;

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:7070";

#[derive(Debug, Parser)]
#[command(name = "datax", version, about = "Manage sensors, streams and analytics on a datax control plane")]
pub struct Cli {
    /// API server URL.
    #[arg(long, global = true, env = "DATAX_SERVER", default_value = DEFAULT_SERVER)]
    pub server: String,
    /// Output format.
    #[arg(short, long, global = true, value_enum, default_value_t = Format::Table)]
    pub output: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create or upgrade the resources in a manifest file (`-` for stdin).
    Apply {
        #[arg(short = 'f', long = "filename")]
        file: PathBuf,
    },
    /// List resources of a kind, or show one. Also accepts `instances`,
    /// `nodes` and `conditions`.
    Get { kind: String, name: Option<String> },
    /// Show a resource with its dependents, instances and metrics.
    Describe { name: String },
    /// Delete a resource.
    Delete { kind: String, name: String },
    /// Print the captured output of an instance.
    Logs { instance: String },
    /// Show live metrics of a stream's instances.
    Metrics { stream: String },
    /// Run the control plane and API server in the foreground.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    pub listen: SocketAddr,
    /// Persist the registry and databases here.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Runner sockets and instance logs; defaults to a temporary directory.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
    #[arg(long, default_value = "local")]
    pub node_id: String,
    /// Maximum instances on the local node.
    #[arg(long, default_value_t = 64)]
    pub capacity: u32,
    /// Also serve the message broker over TCP on this address.
    #[arg(long)]
    pub broker_listen: Option<SocketAddr>,
}

enum Failure {
    User(String),
    Server(String),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Server(e.to_string())
        }
    }
}

/// Parses `args` and runs the command, writing to `out` and `err`. Returns
/// the process exit code.
pub fn run(args: impl IntoIterator<Item = String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    if let Command::Serve(args) = &cli.command {
        return match crate::serve(args.clone()) {
            Ok(()) => 0,
            Err(e) => {
                let _ = writeln!(err, "error: {e}");
                2
            }
        };
    }
    match execute(&cli, out) {
        Ok(code) => code,
        Err(Failure::User(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
        Err(Failure::Server(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

fn parse_kind(s: &str) -> Result<Kind, Failure> {
    s.parse::<Kind>().map_err(|e| Failure::User(e.to_string()))
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32, Failure> {
    let api = ApiClient::new(&cli.server)?;
    let json = cli.output == Format::Json;
    match &cli.command {
        Command::Apply { file } => {
            let text = if file.as_os_str() == "-" {
                let mut s = String::new();
                std::io::stdin()
                    .read_to_string(&mut s)
                    .map_err(|e| Failure::User(format!("reading stdin: {e}")))?;
                s
            } else {
                std::fs::read_to_string(file).map_err(|e| Failure::User(format!("{}: {e}", file.display())))?
            };
            let report = api.post_text(&["apply"], text)?;
            if json {
                emit_json(out, &report);
            } else {
                render_apply(out, &report);
            }
            let failed = report["results"]
                .as_array()
                .is_some_and(|r| r.iter().any(|d| d["outcome"] == "error"));
            Ok(i32::from(failed))
        }
        Command::Get { kind, name } => {
            let (collection, table_kind) = match kind.as_str() {
                "instances" | "instance" => ("instances".to_string(), None),
                "nodes" | "node" => ("nodes".to_string(), None),
                "conditions" => ("conditions".to_string(), None),
                other => {
                    let k = parse_kind(other)?;
                    (k.plural(), Some(k))
                }
            };
            let value = match name {
                Some(n) => api.get(&[&collection, n])?,
                None => api.get(&[&collection])?,
            };
            if json {
                emit_json(out, &value);
            } else {
                let rows = match &value {
                    Value::Array(rows) => rows.clone(),
                    one => vec![one.clone()],
                };
                render_rows(out, &collection, table_kind, &rows);
            }
            Ok(0)
        }
        Command::Describe { name } => {
            let value = api.get(&["describe", name])?;
            if json {
                emit_json(out, &value);
            } else {
                let _ = write!(out, "{}", serde_yaml::to_string(&value).unwrap_or_default());
            }
            Ok(0)
        }
        Command::Delete { kind, name } => {
            let k = parse_kind(kind)?;
            let value = api.delete(&[&k.plural(), name])?;
            if json {
                emit_json(out, &value);
            } else {
                let _ = writeln!(out, "{} `{name}` deleted", k.as_str());
            }
            Ok(0)
        }
        Command::Logs { instance } => {
            let text = api.get_text(&["instances", instance, "logs"])?;
            let _ = write!(out, "{text}");
            Ok(0)
        }
        Command::Metrics { stream } => {
            let value = api.get(&["streams", stream, "metrics"])?;
            if json {
                emit_json(out, &value);
            } else {
                let rows: Vec<Value> = value["instances"]
                    .as_array()
                    .cloned()
                    .unwrap_or_default()
                    .into_iter()
                    .map(|i| {
                        let mut row = i["metrics"].clone();
                        row["instance_id"] = i["instance_id"].clone();
                        row["state"] = i["state"].clone();
                        row
                    })
                    .collect();
                render_rows(out, "metrics", None, &rows);
            }
            Ok(0)
        }
        Command::Serve(_) => unreachable!("handled by run"),
    }
}

fn emit_json(out: &mut dyn Write, value: &Value) {
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(value).expect("values serialize"));
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) if items.iter().all(|i| i.get("state").is_some()) && !items.is_empty() => items
            .iter()
            .map(|i| i["state"].as_str().unwrap_or("?").to_string())
            .collect::<Vec<_>>()
            .join(","),
        Value::Array(items) => {
            if items.is_empty() {
                "-".into()
            } else {
                items.iter().map(cell).collect::<Vec<_>>().join(",")
            }
        }
        other => other.to_string(),
    }
}

fn columns(collection: &str, kind: Option<Kind>) -> &'static [&'static str] {
    match kind {
        Some(Kind::Driver | Kind::AnalyticsUnit | Kind::Actuator) => &["name", "version", "executable"],
        Some(Kind::Sensor) => &["name", "driver", "node_pin", "instances"],
        Some(Kind::Stream) => &["name", "producer", "inputs", "replicas", "instances"],
        Some(Kind::Gadget) => &["name", "actuator", "inputs", "instances"],
        Some(Kind::Database) => &["name", "owner", "namespace"],
        None => match collection {
            "instances" => &["instance_id", "workload", "node", "state", "version"],
            "nodes" => &["node_id", "address", "capacity", "alive"],
            "conditions" => &["workload", "reason"],
            _ => &["instance_id", "state", "received", "dropped", "published", "buffered", "cpu_pct", "rss_bytes"],
        },
    }
}

fn render_rows(out: &mut dyn Write, collection: &str, kind: Option<Kind>, rows: &[Value]) {
    let cols = columns(collection, kind);
    let cells: Vec<Vec<String>> = rows.iter().map(|r| cols.iter().map(|c| cell(&r[*c])).collect()).collect();
    let header: Vec<String> = cols.iter().map(|c| c.to_ascii_uppercase()).collect();
    table(out, &header, &cells);
}

fn render_apply(out: &mut dyn Write, report: &Value) {
    let header: Vec<String> = ["DOC", "KIND", "NAME", "OUTCOME", "MESSAGE"].map(String::from).to_vec();
    let cells: Vec<Vec<String>> = report["results"]
        .as_array()
        .map(Vec::as_slice)
        .unwrap_or(&[])
        .iter()
        .map(|r| {
            vec![
                cell(&r["document"]),
                cell(&r["kind"]),
                cell(&r["name"]),
                cell(&r["outcome"]),
                r["message"].as_str().unwrap_or("").to_string(),
            ]
        })
        .collect();
    table(out, &header, &cells);
}

fn table(out: &mut dyn Write, header: &[String], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i + 1 == cells.len() {
                s.push_str(c);
            } else {
                s.push_str(&format!("{c:<w$}  "));
            }
        }
        s.trim_end().to_string()
    };
    let _ = writeln!(out, "{}", line(header));
    for row in rows {
        let _ = writeln!(out, "{}", line(row));
    }
}
