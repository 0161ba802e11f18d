//! Byte-size arguments such as `2M`, `512k`, `2MiB` or `1048576`.
//!
//! Suffixes are binary: `k`/`K`/`KiB`/`kB` mean 1024 and `M`/`MiB`/`MB`
//! mean 1024².

pub fn parse_bytes(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(s.len());
    let (num, suffix) = s.split_at(split);
    let value: f64 = num
        .parse()
        .map_err(|_| format!("'{s}' is not a byte size (e.g. 2M, 512k, 65536)"))?;
    let unit: u64 = match suffix.trim() {
        "" | "B" => 1,
        "k" | "K" | "kB" | "KB" | "KiB" => 1024,
        "M" | "MB" | "MiB" => 1024 * 1024,
        "G" | "GB" | "GiB" => 1024 * 1024 * 1024,
        other => return Err(format!("unknown size suffix '{other}' in '{s}'")),
    };
    let bytes = value * unit as f64;
    if !bytes.is_finite() || bytes < 1.0 || bytes.fract() != 0.0 {
        return Err(format!("'{s}' must be a positive whole number of bytes"));
    }
    Ok(bytes as u64)
}

pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffixes() {
        assert_eq!(parse_bytes("2M"), Ok(2 * 1024 * 1024));
        assert_eq!(parse_bytes("512k"), Ok(512 * 1024));
        assert_eq!(parse_bytes("512KiB"), Ok(512 * 1024));
        assert_eq!(parse_bytes("1.5M"), Ok(3 * 512 * 1024));
        assert_eq!(parse_bytes("100"), Ok(100));
        assert!(parse_bytes("0").is_err());
        assert!(parse_bytes("2X").is_err());
        assert!(parse_bytes("abc").is_err());
    }
}
