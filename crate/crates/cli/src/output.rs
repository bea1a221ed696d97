use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::Failure;

/// Fixed 17-significant-digit rendering; empty for missing values.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// CSV with a leading `# config_sha256=` line and a header row.
pub fn csv_bytes(hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, Failure> {
    let mut buf = format!("# config_sha256={hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| Failure::Compute(e.to_string()))?;
    }
    Ok(buf)
}

pub fn write_csv(dir: &Path, name: &str, hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), Failure> {
    let bytes = csv_bytes(hash, header, rows)?;
    write(dir, name, &bytes)
}

pub fn write_json(dir: &Path, name: &str, doc: &Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(doc).map_err(|e| Failure::Compute(e.to_string()))?;
    text.push('\n');
    write(dir, name, text.as_bytes())
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Compute(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Failure::Compute(format!("cannot write {}: {e}", path.display())))
}

fn io(e: csv::Error) -> Failure {
    Failure::Compute(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_keep_seventeen_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(f64::NAN), "NaN");
        assert_eq!(opt(None), "");
        let v: f64 = num(std::f64::consts::PI).parse().unwrap();
        assert_eq!(v, std::f64::consts::PI);
    }

    #[test]
    fn csv_has_hash_and_header() {
        let b = csv_bytes("abc", &["a", "b"], &[vec!["1".into(), "x, y".into()]]).unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), "# config_sha256=abc\na,b\n1,\"x, y\"\n");
    }
}
