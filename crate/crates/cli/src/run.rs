//! Run directories and discovery of upstream artifacts.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::CliError;

pub const OUTPUT_ROOT_ENV: &str = "KTD_OUTPUT_ROOT";

pub fn output_root(cfg: &RunConfig) -> PathBuf {
    if !cfg.output_root.is_empty() {
        return PathBuf::from(&cfg.output_root);
    }
    match std::env::var(OUTPUT_ROOT_ENV) {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

/// `<root>/<timestamp>-<command>-s<seed>`, with a numeric suffix on collision.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(root)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", root.display())))?;
        let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S%.3f").to_string().replace('.', "");
        let base = format!("{stamp}-{command}-s{seed}");
        let mut path = root.join(&base);
        let mut n = 2;
        // create_dir fails on an existing directory, which claims the name atomically
        loop {
            match fs::create_dir(&path) {
                Ok(()) => return Ok(RunDir { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = root.join(format!("{base}-{n}"));
                    n += 1;
                }
                Err(e) => return Err(CliError::Runtime(format!("cannot create {}: {e}", path.display()))),
            }
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.file(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }

    /// Append a line to `log.txt` and echo it to stderr.
    pub fn log(&self, line: &str) -> Result<(), CliError> {
        eprintln!("{line}");
        let mut f = OpenOptions::new().create(true).append(true).open(self.file("log.txt"))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}

/// Newest run directory of `command` under `root` that contains `artifact`.
pub fn discover(root: &Path, command: &str, artifact: &str) -> Option<PathBuf> {
    let marker = format!("-{command}-s");
    let mut found: Vec<PathBuf> = fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.contains(&marker))
                && p.join(artifact).exists()
        })
        .collect();
    found.sort();
    found.pop().map(|p| p.join(artifact))
}

/// An explicit input path, or the newest matching artifact under `root`.
pub fn locate(
    explicit: &str,
    root: &Path,
    producer: &str,
    artifact: &str,
    what: &str,
    consumer: &str,
) -> Result<PathBuf, CliError> {
    if !explicit.is_empty() {
        let p = PathBuf::from(explicit);
        return if p.exists() {
            Ok(p)
        } else {
            Err(CliError::StageOrder(format!(
                "`ktd {consumer}` needs {what} but {} does not exist; run `ktd {producer}` first",
                p.display()
            )))
        };
    }
    discover(root, producer, artifact).ok_or_else(|| {
        CliError::StageOrder(format!(
            "`ktd {consumer}` needs {what}; none found under {}, run `ktd {producer}` first",
            root.display()
        ))
    })
}
