//! `.lnkd` layer dumps: one file per item holding every tapped layer's token
//! states.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic        4 bytes  "LNKD"
//! version      u32      1
//! item_id      u32 length + UTF-8 bytes
//! d            u32
//! tap_stride   u32
//! n_taps       u32
//! n_original   u32
//! n_new        u32
//! n_taps × { layer_index u32, (n_original + n_new) × d f32 }
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::backbone::{LayerStates, TapState};
use crate::binio::{put_f32s, put_str, put_u32, Cursor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LNKD";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "lnkd";

/// Size in bytes of a dump with the given shape.
pub fn dump_size(item_id: &str, d: usize, n_taps: usize, n_tokens: usize) -> u64 {
    header_size(item_id) + n_taps as u64 * (4 + (n_tokens * d * 4) as u64)
}

pub fn header_size(item_id: &str) -> u64 {
    (4 + 4 + 4 + item_id.len() + 5 * 4) as u64
}

pub fn encode_dump<W: Write + ?Sized>(w: &mut W, states: &LayerStates, item_id: &str) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_str(w, item_id, "item id length")?;
    for (v, what) in [
        (states.d, "d"),
        (states.tap_stride, "tap_stride"),
        (states.taps.len(), "n_taps"),
        (states.n_original, "n_original"),
        (states.n_new, "n_new"),
    ] {
        put_u32(w, v, what)?;
    }
    for tap in &states.taps {
        put_u32(w, tap.layer_index, "layer_index")?;
        put_f32s(w, &tap.hidden)?;
    }
    Ok(())
}

/// Writes `states` atomically and returns the file size.
pub fn write_dump(states: &LayerStates, item_id: &str, path: &Path) -> Result<u64> {
    states.validate()?;
    if let Some(bad) = states
        .taps
        .iter()
        .flat_map(|t| t.hidden.iter())
        .find(|v| !v.is_finite())
    {
        return Err(Error::Corruption(format!(
            "refusing to write non-finite value {bad} for item {item_id}"
        )));
    }
    crate::atomic::write_with(path, |w| encode_dump(w, states, item_id))
}

pub fn decode_dump(bytes: &[u8]) -> Result<(String, LayerStates)> {
    let mut c = Cursor::new(bytes);
    c.magic(MAGIC)?;
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dump version {version}")));
    }
    let item_id = c.string("item id")?;
    let d = c.u32("d")? as usize;
    let tap_stride = c.u32("tap_stride")? as usize;
    let n_taps = c.u32("n_taps")? as usize;
    let n_original = c.u32("n_original")? as usize;
    let n_new = c.u32("n_new")? as usize;
    if n_taps == 0 {
        return Err(Error::Format("dump declares zero taps".into()));
    }
    let per_tap = (n_original + n_new)
        .checked_mul(d)
        .ok_or_else(|| Error::Format("token block size overflows".into()))?;
    let mut taps = Vec::with_capacity(n_taps);
    for t in 0..n_taps {
        let layer_index = c.u32("layer index")? as usize;
        let hidden = c.f32s(per_tap, &format!("tap {t}"))?;
        taps.push(TapState {
            layer_index,
            hidden,
        });
    }
    c.finish()?;
    let states = LayerStates {
        d,
        tap_stride,
        n_original,
        n_new,
        taps,
    };
    states.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok((item_id, states))
}

pub fn read_dump(path: &Path) -> Result<(String, LayerStates)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dump(&bytes)
}

pub fn dump_path(dir: &Path, item_id: &str) -> PathBuf {
    dir.join(format!("{item_id}.{EXTENSION}"))
}

/// All `.lnkd` files in `dir`, sorted by file name.
pub fn list_dumps(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == EXTENSION) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Outcome of validating a directory of dumps.
#[derive(Debug, Default)]
pub struct DirReport {
    pub valid: usize,
    pub failures: Vec<(PathBuf, String)>,
}

/// Reads every dump in `dir` and checks that all of them share one shape.
pub fn verify_dir(dir: &Path) -> Result<DirReport> {
    let mut report = DirReport::default();
    let mut shape: Option<(usize, usize, Vec<usize>, usize, usize)> = None;
    for path in list_dumps(dir)? {
        match read_dump(&path) {
            Ok((_, s)) => {
                let this = (
                    s.d,
                    s.tap_stride,
                    s.taps.iter().map(|t| t.layer_index).collect(),
                    s.n_original,
                    s.n_new,
                );
                match &shape {
                    None => {
                        shape = Some(this);
                        report.valid += 1;
                    }
                    Some(first) if *first == this => report.valid += 1,
                    Some(_) => report
                        .failures
                        .push((path, "shape differs from the first dump".into())),
                }
            }
            Err(e) => report.failures.push((path, e.to_string())),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn states(n_taps: usize, n_orig: usize, n_new: usize, d: usize) -> LayerStates {
        LayerStates {
            d,
            tap_stride: 2,
            n_original: n_orig,
            n_new,
            taps: (0..n_taps)
                .map(|t| TapState {
                    layer_index: 2 * t,
                    hidden: (0..(n_orig + n_new) * d)
                        .map(|i| (i as f32 * 0.37 + t as f32).sin())
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn file_size_matches_closed_form() {
        let dir = tempfile::tempdir().unwrap();
        let s = states(6, 12, 4, 64);
        let path = dump_path(dir.path(), "42");
        let n = write_dump(&s, "42", &path).unwrap();
        // magic + version + id length + "42" + five u32 fields
        let header = 4 + 4 + 4 + 2 + 20;
        assert_eq!(n, header + 6 * (4 + 16 * 64 * 4));
        assert_eq!(n, dump_size("42", 64, 6, 16));
        assert_eq!(std::fs::metadata(&path).unwrap().len(), n);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = states(3, 5, 2, 8);
        s.taps[1].hidden[3] = -0.0;
        s.taps[2].hidden[0] = f32::MIN_POSITIVE / 2.0;
        let path = dump_path(dir.path(), "item-7");
        write_dump(&s, "item-7", &path).unwrap();
        let (id, back) = read_dump(&path).unwrap();
        assert_eq!(id, "item-7");
        assert_eq!(back.n_original, 5);
        assert_eq!(back.n_new, 2);
        for (a, b) in s.taps.iter().zip(&back.taps) {
            assert_eq!(a.layer_index, b.layer_index);
            let ab: Vec<u32> = a.hidden.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.hidden.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn bad_magic_truncation_and_nan_are_rejected() {
        let s = states(2, 3, 1, 4);
        let mut bytes = Vec::new();
        encode_dump(&mut bytes, &s, "x").unwrap();

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"LNKX");
        assert!(matches!(decode_dump(&bad), Err(Error::Format(_))));

        let cut = bytes.len() - 10;
        match decode_dump(&bytes[..cut]) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, cut as u64),
            other => panic!("expected truncation, got {other:?}"),
        }

        let mut nan = bytes.clone();
        let at = header_size("x") as usize + 4;
        nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_dump(&nan), Err(Error::Corruption(_))));

        let mut ver = bytes;
        ver[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_dump(&ver), Err(Error::Format(_))));
    }

    #[test]
    fn interrupted_write_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dump_path(dir.path(), "9");
        let s = states(2, 3, 1, 4);
        let res = crate::atomic::write_with(&path, |w| {
            let mut full = Vec::new();
            encode_dump(&mut full, &s, "9")?;
            w.write_all(&full[..full.len() / 2])?;
            Err(std::io::Error::other("simulated interruption"))
        });
        assert!(res.is_err());
        assert!(!path.exists());
        assert!(list_dumps(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn verify_dir_flags_broken_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = states(2, 3, 1, 4);
        write_dump(&s, "0", &dump_path(dir.path(), "0")).unwrap();
        write_dump(&s, "1", &dump_path(dir.path(), "1")).unwrap();
        std::fs::write(dump_path(dir.path(), "2"), b"LNKD").unwrap();
        let r = verify_dir(dir.path()).unwrap();
        assert_eq!(r.valid, 2);
        assert_eq!(r.failures.len(), 1);
    }
}
