//! Binary PGM/PPM previews.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn plane_dims<T: Element>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.dims() {
        [r, c] => Ok((*r, *c)),
        d => Err(Error::Shape(format!("image plane must be R×C, got {d:?}"))),
    }
}

/// Encode a single plane as PGM (P5), min-max normalized to 0–255. A
/// constant plane encodes as all zeros.
pub fn encode_pgm<T: Element>(plane: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(plane)?;
    let vals = plane.to_f64_vec();
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(vals.iter().map(|v| {
        if max > min {
            ((v - min) / (max - min) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Encode a prediction/ground-truth overlay as PPM (P6): ground truth only
/// is green, prediction only red, both yellow, neither black.
pub fn encode_overlay<A: Element, B: Element>(pred: &Tensor<A>, gt: &Tensor<B>) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(pred)?;
    if gt.dims() != pred.dims() {
        return Err(Error::Shape(format!(
            "overlay masks {:?} and {:?} differ",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let rgb = match (p.to_f64() != 0.0, g.to_f64() != 0.0) {
            (true, true) => [255, 255, 0],
            (true, false) => [255, 0, 0],
            (false, true) => [0, 255, 0],
            (false, false) => [0, 0, 0],
        };
        out.extend(rgb);
    }
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn emit_pgm<T: Element>(plane: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_pgm(plane)?)
}

pub fn emit_overlay<A: Element, B: Element>(
    pred: &Tensor<A>,
    gt: &Tensor<B>,
    path: impl AsRef<Path>,
) -> Result<()> {
    write(path.as_ref(), &encode_overlay(pred, gt)?)
}

/// Header of a binary PGM/PPM file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PnmHeader {
    /// `5` for PGM, `6` for PPM.
    pub kind: u8,
    pub width: usize,
    pub height: usize,
    pub max_value: u16,
    /// Offset of the first pixel byte.
    pub data_offset: usize,
}

/// Parse the `P5`/`P6` header written by the encoders above (single
/// whitespace separators, no comments).
pub fn parse_pnm_header(bytes: &[u8]) -> Result<PnmHeader> {
    let bad = |what: &str| Error::MalformedHeader(format!("PNM: {what}"));
    let kind = match bytes.get(..2) {
        Some(b"P5") => 5,
        Some(b"P6") => 6,
        _ => return Err(bad("unknown magic")),
    };
    let mut fields = Vec::new();
    let mut pos = 2;
    for _ in 0..3 {
        if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(bad("missing separator"));
        }
        pos += 1;
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii"))?;
        fields.push(text.parse::<usize>().map_err(|_| bad("bad number"))?);
    }
    if bytes.get(pos) != Some(&b'\n') {
        return Err(bad("missing newline after max value"));
    }
    let header = PnmHeader {
        kind,
        width: fields[0],
        height: fields[1],
        max_value: u16::try_from(fields[2]).map_err(|_| bad("max value too large"))?,
        data_offset: pos + 1,
    };
    let channels = if kind == 5 { 1 } else { 3 };
    let expected = header.data_offset + header.width * header.height * channels;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_black() {
        let t = Tensor::new(vec![2, 3], vec![4.0f64; 6]).unwrap();
        let bytes = encode_pgm(&t).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert!(bytes[11..].iter().all(|&b| b == 0));
    }

    #[test]
    fn ramp_spans_full_range() {
        let t = Tensor::new(vec![1, 3], vec![-1.0f32, 0.0, 1.0]).unwrap();
        let bytes = encode_pgm(&t).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }

    #[test]
    fn overlay_colours() {
        let pred = Tensor::new(vec![2, 2], vec![1.0f32, 1.0, 0.0, 0.0]).unwrap();
        let gt = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 1.0, 0.0]).unwrap();
        let bytes = encode_overlay(&pred, &gt).unwrap();
        let h = parse_pnm_header(&bytes).unwrap();
        assert_eq!((h.kind, h.width, h.height, h.max_value), (6, 2, 2, 255));
        assert_eq!(
            &bytes[h.data_offset..],
            &[255, 255, 0, 255, 0, 0, 0, 255, 0, 0, 0, 0]
        );
    }

    #[test]
    fn emitted_file_round_trips_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let t = Tensor::new(vec![4, 5], (0..20).map(|i| i as f64).collect()).unwrap();
        emit_pgm(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let h = parse_pnm_header(&bytes).unwrap();
        assert_eq!((h.kind, h.width, h.height), (5, 5, 4));
        assert!(parse_pnm_header(&bytes[..bytes.len() - 1]).is_err());
    }
}
