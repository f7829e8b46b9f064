//! JSON Lines output.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).map_err(|e| Error::Config(format!("cannot serialise row: {e}")))?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `rows` to `path`, creating parent directories.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = to_jsonl(rows)?;
    std::fs::File::create(path).and_then(|mut f| f.write_all(text.as_bytes())).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_object_per_line() {
        #[derive(Serialize)]
        struct Row {
            a: u32,
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.jsonl");
        write_jsonl(&path, &[Row { a: 1 }, Row { a: 2 }]).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "{\"a\":1}\n{\"a\":2}\n");
    }
}
