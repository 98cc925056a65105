//! Grayscale PGM (P2/P5) input and output.
//!
//! Samples map linearly to `[0, 1]` by dividing by maxval; only maxval 255
//! and 65535 are accepted.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ddalm::{GridShape, ScalarField};
use image::codecs::pnm::{GraymapHeader, PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder, ImageEncoder};

/// Sample depth of a written file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Eight,
    Sixteen,
}

impl Depth {
    fn maxval(self) -> f64 {
        match self {
            Depth::Eight => 255.0,
            Depth::Sixteen => 65535.0,
        }
    }
}

/// Encoding options for [`save_pgm_as`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PgmFormat {
    pub depth: Depth,
    pub ascii: bool,
}

impl Default for PgmFormat {
    fn default() -> Self {
        Self {
            depth: Depth::Eight,
            ascii: false,
        }
    }
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<ScalarField> {
    let path = path.as_ref();
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .with_context(|| format!("cannot read {}", path.display()))?;
    decode_pgm(&bytes).with_context(|| format!("invalid PGM {}", path.display()))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ScalarField> {
    let decoder = PnmDecoder::new(Cursor::new(bytes))?;
    let header = decoder.header();
    if !matches!(header.subtype(), PnmSubtype::Graymap(_)) {
        bail!("expected a P2 or P5 graymap, found {:?}", header.subtype());
    }
    let maxval = header.maximal_sample();
    if maxval != 255 && maxval != 65535 {
        bail!("unsupported maxval {maxval} (expected 255 or 65535)");
    }
    let (w, h) = decoder.dimensions();
    let shape = GridShape::new(h as usize, w as usize)?;
    let mut buf = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut buf)?;
    let scale = f64::from(maxval);
    let data: Vec<f64> = if maxval == 255 {
        buf.iter().map(|&v| f64::from(v) / scale).collect()
    } else {
        buf.chunks_exact(2)
            .map(|c| f64::from(u16::from_ne_bytes([c[0], c[1]])) / scale)
            .collect()
    };
    if data.iter().any(|&v| v > 1.0) {
        bail!("sample exceeds maxval");
    }
    Ok(ScalarField::from_vec(shape, data)?)
}

/// Writes 8-bit binary P5.
pub fn save_pgm(u: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    save_pgm_as(u, path, PgmFormat::default())
}

pub fn save_pgm_as(u: &ScalarField, path: impl AsRef<Path>, format: PgmFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(u, format)?;
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Quantises with round-half-up after clamping to `[0, 1]`.
pub fn quantize(v: f64, depth: Depth) -> u16 {
    let m = depth.maxval();
    (v.clamp(0.0, 1.0) * m + 0.5).floor().min(m) as u16
}

pub fn encode_pgm(u: &ScalarField, format: PgmFormat) -> Result<Vec<u8>> {
    let shape = u.shape();
    let encoding = if format.ascii {
        SampleEncoding::Ascii
    } else {
        SampleEncoding::Binary
    };
    let (buf, color) = match format.depth {
        Depth::Eight => (
            u.as_slice()
                .iter()
                .map(|&v| quantize(v, Depth::Eight) as u8)
                .collect::<Vec<u8>>(),
            ExtendedColorType::L8,
        ),
        Depth::Sixteen => (
            u.as_slice()
                .iter()
                .flat_map(|&v| quantize(v, Depth::Sixteen).to_ne_bytes())
                .collect(),
            ExtendedColorType::L16,
        ),
    };
    let mut out = Vec::new();
    let header = GraymapHeader {
        encoding,
        height: shape.rows as u32,
        width: shape.cols as u32,
        maxwhite: format.depth.maxval() as u32,
    };
    PnmEncoder::new(&mut out)
        .with_header(header.into())
        .write_image(&buf, shape.cols as u32, shape.rows as u32, color)?;
    Ok(out)
}
