//! Configuration migrations run during entity upgrades.

use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::value::{Document, Value};

/// Converts an instance configuration written for the old schema into one
/// for the new schema.
pub trait ConfigMigration {
    fn migrate(&self, config: &Document) -> Result<Document, String>;
}

impl<F> ConfigMigration for F
where
    F: Fn(&Document) -> Result<Document, String>,
{
    fn migrate(&self, config: &Document) -> Result<Document, String> {
        self(config)
    }
}

/// An external program that reads the old configuration as one JSON document
/// on stdin and writes the new one on stdout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationScript {
    pub executable: String,
}

impl MigrationScript {
    pub fn new(executable: impl Into<String>) -> Self {
        MigrationScript {
            executable: executable.into(),
        }
    }
}

impl ConfigMigration for MigrationScript {
    fn migrate(&self, config: &Document) -> Result<Document, String> {
        let argv = shlex::split(&self.executable)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| format!("cannot parse command line {:?}", self.executable))?;
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawn {}: {e}", argv[0]))?;

        let input = serde_json::to_vec(config).expect("document serialization cannot fail");
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let writer = std::thread::spawn(move || stdin.write_all(&input));
        let output = child
            .wait_with_output()
            .map_err(|e| format!("wait: {e}"))?;
        // A script may exit without draining stdin; that is not an error by itself.
        let _ = writer.join();

        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(format!("exited with {}: {}", output.status, stderr.trim()));
        }
        match serde_json::from_slice::<Value>(&output.stdout) {
            Ok(Value::Object(doc)) => Ok(doc),
            Ok(other) => Err(format!("output is not a map: {other}")),
            Err(e) => Err(format!("invalid output document: {e}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::doc;
    use serde_json::json;

    #[test]
    fn closure_migration() {
        let add_mode = |c: &Document| {
            let mut c = c.clone();
            c.insert("mode".into(), json!("fast"));
            Ok(c)
        };
        let out = add_mode.migrate(&doc(json!({"fps": 1}))).unwrap();
        assert_eq!(out, doc(json!({"fps": 1, "mode": "fast"})));
    }

    #[test]
    fn script_migration() {
        let script = MigrationScript::new(
            r#"python3 -c "import json,sys; c=json.load(sys.stdin); c['mode']='fast'; print(json.dumps(c))""#,
        );
        let out = script.migrate(&doc(json!({"fps": 15}))).unwrap();
        assert_eq!(out, doc(json!({"fps": 15, "mode": "fast"})));
    }

    #[test]
    fn script_failures() {
        assert!(MigrationScript::new("false").migrate(&Document::new()).is_err());
        assert!(MigrationScript::new("echo [1]").migrate(&Document::new()).is_err());
        assert!(MigrationScript::new("/nonexistent/migrate").migrate(&Document::new()).is_err());
        assert!(MigrationScript::new("echo not-json").migrate(&Document::new()).is_err());
    }
}
