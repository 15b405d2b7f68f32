use std::fs;
use std::path::{Path, PathBuf};

use tencore::Tensor;

use crate::error::{Error, Result};

/// Sidecar holding the value range of a rendered map.
pub fn range_path(pgm: &Path) -> PathBuf {
    let mut s = pgm.as_os_str().to_owned();
    s.push(".range.txt");
    PathBuf::from(s)
}

/// 8-bit binary PGM of an `[H, W]` map scaled linearly from its minimum
/// (0) to its maximum (255). A constant map renders black.
pub fn encode_pgm(map: &Tensor) -> Result<(Vec<u8>, f64, f64)> {
    if map.rank() != 2 || map.numel() == 0 {
        return Err(Error::data(format!("PGM render needs a non-empty [H, W] map, got {:?}", map.shape())));
    }
    if !map.is_finite() {
        return Err(Error::data("PGM render of a map with non-finite values"));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (lo, hi) = (map.min(), map.max());
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok((out, lo, hi))
}

/// Writes the PGM and its `min`/`max` sidecar.
pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (bytes, lo, hi) = encode_pgm(map)?;
    fs::write(path, bytes).map_err(Error::io(path))?;
    let side = range_path(path);
    fs::write(&side, format!("min {lo}\nmax {hi}\n")).map_err(Error::io(&side))
}
