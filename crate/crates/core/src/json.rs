//! JSON output helpers. Everything this crate writes goes through here so keys come out sorted.

use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

/// Pretty-printed JSON with object keys in sorted order.
pub fn to_sorted_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    // `Value` maps are BTreeMaps, so a round trip through it sorts every object.
    let v = serde_json::to_value(value)?;
    serde_json::to_string_pretty(&v)
}

/// Single-line variant for JSON-lines logs.
pub fn to_sorted_line<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

pub fn write_sorted<T: Serialize + ?Sized>(path: &Path, value: &T) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let text = to_sorted_string(value).map_err(io::Error::other)?;
    fs::write(path, text + "\n")
}
