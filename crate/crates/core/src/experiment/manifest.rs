use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::ExperimentError;

pub const MANIFEST_FILE: &str = "manifest.txt";
const MAGIC: &str = "dualtask-manifest 1";
const CONFIG_BEGIN: &str = "config-begin";
const CONFIG_END: &str = "config-end";

/// A file produced by a run and its content hash.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

/// Outcome of a run: canonical config, artifacts, timings and assertions.
///
/// Text layout, one record per line:
/// ```text
/// dualtask-manifest 1
/// kind <kind>
/// status ok|failed
/// duration_ms <n>
/// failure <assertion>: <detail>
/// result <key> <value>
/// artifact <sha256> <path>
/// config-begin
/// <canonical config>
/// config-end
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub kind: String,
    pub config: String,
    pub artifacts: Vec<Artifact>,
    pub duration_ms: u128,
    /// Failed assertions, `name: detail`; empty means success.
    pub failures: Vec<String>,
    pub results: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, ExperimentError> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl RunManifest {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Process exit status: 0 on success, 1 when any assertion failed.
    pub fn exit_code(&self) -> i32 {
        i32::from(!self.passed())
    }

    pub fn result(&self, key: &str) -> Option<&str> {
        self.results.get(key).map(String::as_str)
    }

    /// Hashes `dir/rel` and records it.
    pub fn add_artifact(&mut self, dir: &Path, rel: &str) -> Result<(), ExperimentError> {
        let sha256 = sha256_file(&dir.join(rel))?;
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256,
        });
        Ok(())
    }

    pub fn record(&mut self, key: impl Into<String>, value: impl ToString) {
        self.results.insert(key.into(), value.to_string());
    }

    /// Records a failed assertion unless `ok`.
    pub fn check(&mut self, ok: bool, name: &str, detail: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(format!("{name}: {}", detail()));
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let status = if self.passed() { "ok" } else { "failed" };
        let _ = writeln!(
            s,
            "{MAGIC}\nkind {}\nstatus {status}\nduration_ms {}",
            self.kind, self.duration_ms
        );
        for f in &self.failures {
            let _ = writeln!(s, "failure {f}");
        }
        for (k, v) in &self.results {
            let _ = writeln!(s, "result {k} {v}");
        }
        for a in &self.artifacts {
            let _ = writeln!(s, "artifact {} {}", a.sha256, a.path);
        }
        let _ = writeln!(
            s,
            "{CONFIG_BEGIN}\n{}\n{CONFIG_END}",
            self.config.trim_end()
        );
        s
    }

    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let bad = |m: String| ExperimentError::Report(format!("malformed manifest: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing header".into()));
        }
        let mut m = RunManifest::default();
        let mut status = None;
        while let Some(line) = lines.next() {
            if line == CONFIG_BEGIN {
                let body: Vec<&str> = lines.by_ref().take_while(|l| *l != CONFIG_END).collect();
                m.config = body.join("\n");
                m.config.push('\n');
                break;
            }
            let (tag, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("line `{line}`")))?;
            match tag {
                "kind" => m.kind = rest.to_string(),
                "status" => status = Some(rest == "ok"),
                "duration_ms" => {
                    m.duration_ms = rest
                        .parse()
                        .map_err(|_| bad(format!("duration `{rest}`")))?
                }
                "failure" => m.failures.push(rest.to_string()),
                "result" => {
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| bad(format!("result `{rest}`")))?;
                    m.results.insert(k.to_string(), v.to_string());
                }
                "artifact" => {
                    let (h, p) = rest
                        .split_once(' ')
                        .ok_or_else(|| bad(format!("artifact `{rest}`")))?;
                    m.artifacts.push(Artifact {
                        path: p.to_string(),
                        sha256: h.to_string(),
                    });
                }
                _ => return Err(bad(format!("unknown record `{tag}`"))),
            }
        }
        match status {
            Some(ok) if ok == m.failures.is_empty() => Ok(m),
            Some(_) => Err(bad("status disagrees with failures".into())),
            None => Err(bad("missing status".into())),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, ExperimentError> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }

    /// Reads a manifest from a file or from a run directory containing one.
    pub fn read(path: &Path) -> Result<Self, ExperimentError> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file)
            .map_err(|e| ExperimentError::Report(format!("cannot read {}: {e}", file.display())))?;
        Self::parse(&text)
    }

    /// Re-hashes every artifact under `dir`; returns the mismatching paths.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>, ExperimentError> {
        let mut bad = Vec::new();
        for a in &self.artifacts {
            if sha256_file(&dir.join(&a.path))? != a.sha256 {
                bad.push(a.path.clone());
            }
        }
        Ok(bad)
    }
}
