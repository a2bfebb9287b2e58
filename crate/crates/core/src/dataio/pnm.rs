//! Binary netpbm: P6 colour images and P5 greyscale maps, maxval 255.

use std::fs;
use std::path::Path;

use crate::mesh::Field;

use super::DataError;

/// Raw decoded netpbm image.
#[derive(Debug, Clone, PartialEq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> DataError {
        DataError::Parse { offset: self.pos, msg: msg.into(), path: None }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, DataError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| DataError::Parse { offset: start, msg: format!("{what} out of range"), path: None })
    }
}

/// Parses a P5 or P6 buffer.
pub fn decode(bytes: &[u8]) -> Result<Pnm, DataError> {
    let mut c = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.err("magic must be P5 or P6")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    c.skip_space();
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(DataError::Parse { offset: maxval_at, msg: format!("maxval {maxval} unsupported, need 255"), path: None });
    }
    if width == 0 || height == 0 {
        return Err(c.err("empty image"));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(c.err("expected a single whitespace byte before the raster"));
    }
    c.pos += 1;
    let need = width * height * channels;
    let have = bytes.len() - c.pos;
    if have < need {
        return Err(DataError::Parse { offset: bytes.len(), msg: format!("raster truncated: {have} of {need} bytes"), path: None });
    }
    Ok(Pnm { width, height, channels, data: bytes[c.pos..c.pos + need].to_vec() })
}

pub fn encode(p: &Pnm) -> Vec<u8> {
    let magic = if p.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", p.width, p.height).into_bytes();
    out.extend_from_slice(&p.data);
    out
}

fn read(path: &Path) -> Result<Pnm, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode(&bytes).map_err(|e| e.at(path))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn plane(p: &Pnm, channel: usize) -> Field {
    let values = p.data.iter().skip(channel).step_by(p.channels).map(|&b| b as f64 / 255.0).collect();
    Field::from_vec(1, p.height, p.width, values).expect("bytes are finite")
}

/// Reads a colour image as three planes in `[0, 1]`. Greyscale files are replicated.
pub fn read_image(path: &Path) -> Result<[Field; 3], DataError> {
    let p = read(path)?;
    Ok(match p.channels {
        1 => {
            let g = plane(&p, 0);
            [g.clone(), g.clone(), g]
        }
        _ => [plane(&p, 0), plane(&p, 1), plane(&p, 2)],
    })
}

/// Reads a P5 mask, binarized at 128.
pub fn read_mask(path: &Path) -> Result<Field, DataError> {
    let p = read(path)?;
    if p.channels != 1 {
        return Err(DataError::Parse { offset: 0, msg: "masks must be P5".into(), path: None }.at(path));
    }
    let values = p.data.iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Field::from_vec(1, p.height, p.width, values).expect("binary values"))
}

/// Writes three planes as P6; values are clamped to `[0, 1]` and rounded to 1/255.
pub fn write_image(image: &[Field; 3], path: &Path) -> Result<(), DataError> {
    let (h, w) = (image[0].rows(), image[0].cols());
    if image.iter().any(|f| f.rows() != h || f.cols() != w) {
        return Err(DataError::Shape("colour planes differ in size".into()));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        data.extend(image.iter().map(|f| quantize(f.values()[i])));
    }
    fs::write(path, encode(&Pnm { width: w, height: h, channels: 3, data })).map_err(|e| DataError::io(path, e))
}

/// Writes a field in `[0, 1]` as P5.
pub fn write_gray(field: &Field, path: &Path) -> Result<(), DataError> {
    let data = field.values().iter().map(|&v| quantize(v)).collect();
    let p = Pnm { width: field.cols(), height: field.rows(), channels: 1, data };
    fs::write(path, encode(&p)).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn colour_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let planes: Vec<Field> = (0..3)
            .map(|_| Field::from_vec(1, 5, 7, (0..35).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let image: [Field; 3] = planes.try_into().unwrap();
        write_image(&image, &path).unwrap();
        let back = read_image(&path).unwrap();
        for (a, b) in image.iter().zip(&back) {
            assert_eq!((b.rows(), b.cols()), (5, 7));
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn zero_p5_is_an_empty_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        fs::write(&path, encode(&Pnm { width: 4, height: 3, channels: 1, data: vec![0; 12] })).unwrap();
        let m = read_mask(&path).unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 4));
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn greyscale_images_are_replicated_and_masks_thresholded() {
        let p = Pnm { width: 3, height: 1, channels: 1, data: vec![0, 127, 128] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        fs::write(&path, encode(&p)).unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!(img[0], img[2]);
        assert_eq!(read_mask(&path).unwrap().values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5 # made by hand\n2 # w\n1\n255\n".to_vec();
        bytes.extend([9, 200]);
        let p = decode(&bytes).unwrap();
        assert_eq!((p.width, p.height, p.data.clone()), (2, 1, vec![9, 200]));
    }

    #[test]
    fn errors_report_byte_offsets() {
        let truncated = b"P6\n2 2\n255\nabc".to_vec();
        match decode(&truncated) {
            Err(DataError::Parse { offset, msg, .. }) => {
                assert_eq!(offset, truncated.len());
                assert!(msg.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
        match decode(b"P6\n2 x\n255\n") {
            Err(DataError::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(b"P3\n1 1\n255\n1 2 3"), Err(DataError::Parse { offset: 0, .. })));
        assert!(matches!(decode(b"P5\n1 1\n65535\n\0\0"), Err(DataError::Parse { offset: 7, .. })));
    }
}
