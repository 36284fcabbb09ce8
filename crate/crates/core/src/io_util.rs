use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{DbtmError, Result};

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DbtmError::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| DbtmError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| DbtmError::io(&tmp, e))?;
        f.sync_all().map_err(|e| DbtmError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| DbtmError::io(path, e))
}
