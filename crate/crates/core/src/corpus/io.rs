//! Line-oriented UTF-8 text files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::format("UTF-8 text", format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Reads two line-aligned files.
pub fn read_parallel(source: &Path, target: &Path) -> Result<Vec<(String, String)>> {
    let s = read_lines(source)?;
    let t = read_lines(target)?;
    if s.len() != t.len() {
        return Err(Error::format(
            "parallel corpus",
            format!(
                "{} has {} lines but {} has {}",
                source.display(),
                s.len(),
                target.display(),
                t.len()
            ),
        ));
    }
    Ok(s.into_iter().zip(t).collect())
}

/// Writes bytes to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_lines_atomic<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}
