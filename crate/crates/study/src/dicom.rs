//! Minimal DICOM Part-10 codec for uncompressed grayscale radiographs.
//!
//! Reads the file meta group, then the data set in implicit or explicit VR
//! little endian. Only the image pixel module and the VOI/modality attributes
//! are interpreted; everything else is skipped, including nested sequences.

use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

pub const IMPLICIT_VR_LE: &str = "1.2.840.10008.1.2";
pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";
const DIGITAL_XRAY_SOP: &str = "1.2.840.10008.5.1.4.1.1.1.1";

#[derive(Debug, Error)]
pub enum DicomError {
    #[error("not a DICOM Part-10 file (missing DICM marker)")]
    NotDicom,
    #[error("unsupported transfer syntax {0}")]
    UnsupportedTransferSyntax(String),
    #[error("truncated data at offset {0}")]
    Truncated(usize),
    #[error("missing required attribute {0}")]
    Missing(&'static str),
    #[error("unsupported image: {0}")]
    Unsupported(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Photometric {
    #[serde(rename = "MONOCHROME1")]
    Monochrome1,
    #[serde(rename = "MONOCHROME2")]
    Monochrome2,
}

/// Decoded image with MONOCHROME2 semantics: larger stored values are brighter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DicomImage {
    pub rows: usize,
    pub columns: usize,
    pub bits_stored: u16,
    /// Photometric interpretation as found in the file.
    pub source_photometric: Photometric,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub window_center: f64,
    pub window_width: f64,
    pub pixels: Vec<u16>,
}

impl DicomImage {
    pub fn max_stored(&self) -> u16 {
        ((1u32 << self.bits_stored) - 1) as u16
    }
}

type Tag = (u16, u16);

const ROWS: Tag = (0x0028, 0x0010);
const COLUMNS: Tag = (0x0028, 0x0011);
const SAMPLES_PER_PIXEL: Tag = (0x0028, 0x0002);
const PHOTOMETRIC: Tag = (0x0028, 0x0004);
const BITS_ALLOCATED: Tag = (0x0028, 0x0100);
const BITS_STORED: Tag = (0x0028, 0x0101);
const PIXEL_REPRESENTATION: Tag = (0x0028, 0x0103);
const WINDOW_CENTER: Tag = (0x0028, 0x1050);
const WINDOW_WIDTH: Tag = (0x0028, 0x1051);
const RESCALE_INTERCEPT: Tag = (0x0028, 0x1052);
const RESCALE_SLOPE: Tag = (0x0028, 0x1053);
const PIXEL_DATA: Tag = (0x7FE0, 0x0010);
const TRANSFER_SYNTAX: Tag = (0x0002, 0x0010);
const ITEM: Tag = (0xFFFE, 0xE000);
const ITEM_END: Tag = (0xFFFE, 0xE00D);
const SEQUENCE_END: Tag = (0xFFFE, 0xE0DD);
const UNDEFINED: u32 = 0xFFFF_FFFF;

fn long_form(vr: &[u8; 2]) -> bool {
    matches!(
        vr,
        b"OB" | b"OW" | b"OF" | b"OD" | b"OL" | b"OV" | b"SQ" | b"UT" | b"UN" | b"UC" | b"UR" | b"SV" | b"UV"
    )
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DicomError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(DicomError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DicomError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, DicomError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }
}

struct Element<'a> {
    tag: Tag,
    /// `None` for undefined lengths: skipped sequences and open items.
    value: Option<&'a [u8]>,
}

fn read_element<'a>(c: &mut Cursor<'a>, explicit: bool) -> Result<Element<'a>, DicomError> {
    let tag = (c.u16()?, c.u16()?);
    if tag.0 == 0xFFFE {
        // item and delimiter tags never carry a VR
        let len = c.u32()?;
        let value = if len == UNDEFINED {
            None
        } else {
            Some(c.take(len as usize)?)
        };
        return Ok(Element { tag, value });
    }
    let len = if explicit {
        let vr: [u8; 2] = c.take(2)?.try_into().expect("2 bytes");
        if long_form(&vr) {
            c.take(2)?;
            c.u32()?
        } else {
            c.u16()? as u32
        }
    } else {
        c.u32()?
    };
    if len == UNDEFINED {
        if tag == PIXEL_DATA {
            return Err(DicomError::Unsupported("encapsulated pixel data".into()));
        }
        skip_undefined_sequence(c, explicit)?;
        return Ok(Element { tag, value: None });
    }
    Ok(Element {
        tag,
        value: Some(c.take(len as usize)?),
    })
}

fn skip_undefined_sequence(c: &mut Cursor<'_>, explicit: bool) -> Result<(), DicomError> {
    loop {
        let item = read_element(c, explicit)?;
        match item.tag {
            SEQUENCE_END => return Ok(()),
            ITEM if item.value.is_none() => {
                // undefined-length item: walk to its delimiter
                loop {
                    if c.at_end() {
                        return Err(DicomError::Truncated(c.pos));
                    }
                    let el = read_element(c, explicit)?;
                    if el.tag == ITEM_END {
                        break;
                    }
                    if el.tag == ITEM {
                        return Err(DicomError::Unsupported("malformed sequence item".into()));
                    }
                }
            }
            ITEM => {}
            _ => return Err(DicomError::Unsupported("malformed sequence".into())),
        }
    }
}

fn text(v: &[u8]) -> String {
    String::from_utf8_lossy(v)
        .trim_matches(|c: char| c == '\0' || c.is_whitespace())
        .to_string()
}

fn decimal(v: &[u8]) -> Option<f64> {
    // multi-valued strings keep the first value
    text(v).split('\\').next()?.trim().parse().ok()
}

fn us(v: &[u8]) -> Option<u16> {
    v.get(..2).map(|b| u16::from_le_bytes([b[0], b[1]]))
}

pub fn parse_dicom(bytes: &[u8]) -> Result<DicomImage, DicomError> {
    if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
        return Err(DicomError::NotDicom);
    }
    let mut c = Cursor { buf: bytes, pos: 132 };
    let mut syntax = None;
    // the meta group is always explicit VR little endian
    while !c.at_end() {
        let save = c.pos;
        let group = c.u16()?;
        c.pos = save;
        if group != 0x0002 {
            break;
        }
        let el = read_element(&mut c, true)?;
        if el.tag == TRANSFER_SYNTAX {
            syntax = el.value.map(text);
        }
    }
    let syntax = syntax.ok_or(DicomError::Missing("TransferSyntaxUID (0002,0010)"))?;
    let explicit = match syntax.as_str() {
        IMPLICIT_VR_LE => false,
        EXPLICIT_VR_LE => true,
        _ => return Err(DicomError::UnsupportedTransferSyntax(syntax)),
    };

    let mut attrs = std::collections::HashMap::new();
    let mut pixel_data = None;
    while !c.at_end() {
        let el = read_element(&mut c, explicit)?;
        if el.tag == PIXEL_DATA {
            pixel_data = el.value;
            break;
        }
        if let (Some(v), true) = (el.value, el.tag.0 == 0x0028) {
            attrs.insert(el.tag, v);
        }
    }
    let get_us = |tag, name| attrs.get(&tag).and_then(|v| us(v)).ok_or(DicomError::Missing(name));
    let rows = get_us(ROWS, "Rows (0028,0010)")? as usize;
    let columns = get_us(COLUMNS, "Columns (0028,0011)")? as usize;
    let bits_allocated = get_us(BITS_ALLOCATED, "BitsAllocated (0028,0100)")?;
    let bits_stored = attrs.get(&BITS_STORED).and_then(|v| us(v)).unwrap_or(bits_allocated);
    if attrs.get(&SAMPLES_PER_PIXEL).and_then(|v| us(v)).unwrap_or(1) != 1 {
        return Err(DicomError::Unsupported("more than one sample per pixel".into()));
    }
    if attrs.get(&PIXEL_REPRESENTATION).and_then(|v| us(v)).unwrap_or(0) != 0 {
        return Err(DicomError::Unsupported("signed pixel representation".into()));
    }
    let photometric = match attrs.get(&PHOTOMETRIC).map(|v| text(v)).as_deref() {
        Some("MONOCHROME1") => Photometric::Monochrome1,
        Some("MONOCHROME2") | None => Photometric::Monochrome2,
        Some(other) => return Err(DicomError::Unsupported(format!("photometric interpretation {other}"))),
    };
    if !(bits_allocated == 8 || bits_allocated == 16) || bits_stored == 0 || bits_stored > bits_allocated {
        return Err(DicomError::Unsupported(format!(
            "bits allocated {bits_allocated}, stored {bits_stored}"
        )));
    }
    let data = pixel_data.ok_or(DicomError::Missing("PixelData (7FE0,0010)"))?;
    let n = rows * columns;
    let bytes_per = (bits_allocated / 8) as usize;
    if data.len() < n * bytes_per {
        return Err(DicomError::Truncated(data.len()));
    }
    let mask = ((1u32 << bits_stored) - 1) as u16;
    let mut pixels: Vec<u16> = if bytes_per == 2 {
        data.chunks_exact(2)
            .take(n)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) & mask)
            .collect()
    } else {
        data[..n].iter().map(|&b| b as u16 & mask).collect()
    };

    let slope = attrs.get(&RESCALE_SLOPE).and_then(|v| decimal(v)).unwrap_or(1.0);
    let intercept = attrs.get(&RESCALE_INTERCEPT).and_then(|v| decimal(v)).unwrap_or(0.0);
    let full = (1u32 << bits_stored) as f64;
    let mut center = attrs
        .get(&WINDOW_CENTER)
        .and_then(|v| decimal(v))
        .unwrap_or(slope * full / 2.0 + intercept);
    let width = attrs
        .get(&WINDOW_WIDTH)
        .and_then(|v| decimal(v))
        .unwrap_or(slope.abs() * full);
    if photometric == Photometric::Monochrome1 {
        for p in &mut pixels {
            *p = mask - *p;
        }
        // mirror the window so that windowing the inverted values gives the
        // complement of windowing the originals
        center = slope * mask as f64 + 2.0 * intercept + 1.0 - center;
    }
    Ok(DicomImage {
        rows,
        columns,
        bits_stored,
        source_photometric: photometric,
        rescale_slope: slope,
        rescale_intercept: intercept,
        window_center: center,
        window_width: width,
        pixels,
    })
}

pub fn read_dicom(path: &Path) -> Result<DicomImage, DicomError> {
    let bytes = fs::read(path).map_err(|e| DicomError::Io(path.display().to_string(), e))?;
    parse_dicom(&bytes)
}

/// Parameters for writing a 16-bit allocated grayscale file.
#[derive(Debug, Clone, PartialEq)]
pub struct DicomWriteSpec {
    pub rows: usize,
    pub columns: usize,
    pub bits_stored: u16,
    pub photometric: Photometric,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub window: Option<(f64, f64)>,
    pub transfer_syntax: String,
}

fn pad(mut v: Vec<u8>, fill: u8) -> Vec<u8> {
    if v.len() % 2 == 1 {
        v.push(fill);
    }
    v
}

fn put(out: &mut Vec<u8>, tag: Tag, vr: &[u8; 2], value: &[u8], explicit: bool) {
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    if explicit {
        out.extend_from_slice(vr);
        if long_form(vr) {
            out.extend_from_slice(&[0, 0]);
            out.extend_from_slice(&(value.len() as u32).to_le_bytes());
        } else {
            out.extend_from_slice(&(value.len() as u16).to_le_bytes());
        }
    } else {
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    }
    out.extend_from_slice(value);
}

/// Encodes stored pixel values (row-major) as a Part-10 file. Any transfer
/// syntax UID is written verbatim, which lets tests produce files the reader
/// must reject.
pub fn encode_dicom(spec: &DicomWriteSpec, pixels: &[u16]) -> Vec<u8> {
    let mut meta = vec![];
    put(&mut meta, (0x0002, 0x0001), b"OB", &[0, 1], true);
    put(
        &mut meta,
        (0x0002, 0x0002),
        b"UI",
        &pad(DIGITAL_XRAY_SOP.as_bytes().to_vec(), 0),
        true,
    );
    put(&mut meta, (0x0002, 0x0003), b"UI", &pad(b"2.25.1".to_vec(), 0), true);
    put(
        &mut meta,
        TRANSFER_SYNTAX,
        b"UI",
        &pad(spec.transfer_syntax.as_bytes().to_vec(), 0),
        true,
    );
    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");
    put(
        &mut out,
        (0x0002, 0x0000),
        b"UL",
        &(meta.len() as u32).to_le_bytes(),
        true,
    );
    out.extend_from_slice(&meta);

    let explicit = spec.transfer_syntax != IMPLICIT_VR_LE;
    let ds = |v: f64| pad(format!("{v}").into_bytes(), b' ');
    let photometric = match spec.photometric {
        Photometric::Monochrome1 => "MONOCHROME1",
        Photometric::Monochrome2 => "MONOCHROME2",
    };
    // a defined-length sequence, to exercise skipping
    let mut item = vec![];
    put(
        &mut item,
        (0x0008, 0x0100),
        b"SH",
        &pad(b"CXR".to_vec(), b' '),
        explicit,
    );
    let mut seq = vec![];
    seq.extend_from_slice(&0xFFFEu16.to_le_bytes());
    seq.extend_from_slice(&0xE000u16.to_le_bytes());
    seq.extend_from_slice(&(item.len() as u32).to_le_bytes());
    seq.extend_from_slice(&item);
    put(&mut out, (0x0008, 0x0060), b"CS", b"DX", explicit);
    put(&mut out, (0x0008, 0x2218), b"SQ", &seq, explicit);
    put(&mut out, SAMPLES_PER_PIXEL, b"US", &1u16.to_le_bytes(), explicit);
    put(
        &mut out,
        PHOTOMETRIC,
        b"CS",
        &pad(photometric.as_bytes().to_vec(), b' '),
        explicit,
    );
    put(&mut out, ROWS, b"US", &(spec.rows as u16).to_le_bytes(), explicit);
    put(&mut out, COLUMNS, b"US", &(spec.columns as u16).to_le_bytes(), explicit);
    put(&mut out, BITS_ALLOCATED, b"US", &16u16.to_le_bytes(), explicit);
    put(&mut out, BITS_STORED, b"US", &spec.bits_stored.to_le_bytes(), explicit);
    put(
        &mut out,
        (0x0028, 0x0102),
        b"US",
        &(spec.bits_stored - 1).to_le_bytes(),
        explicit,
    );
    put(&mut out, PIXEL_REPRESENTATION, b"US", &0u16.to_le_bytes(), explicit);
    if let Some((c, w)) = spec.window {
        put(&mut out, WINDOW_CENTER, b"DS", &ds(c), explicit);
        put(&mut out, WINDOW_WIDTH, b"DS", &ds(w), explicit);
    }
    put(
        &mut out,
        RESCALE_INTERCEPT,
        b"DS",
        &ds(spec.rescale_intercept),
        explicit,
    );
    put(&mut out, RESCALE_SLOPE, b"DS", &ds(spec.rescale_slope), explicit);
    let data: Vec<u8> = pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
    put(&mut out, PIXEL_DATA, b"OW", &data, explicit);
    out
}

pub fn write_dicom(path: &Path, spec: &DicomWriteSpec, pixels: &[u16]) -> Result<(), DicomError> {
    fs::write(path, encode_dicom(spec, pixels)).map_err(|e| DicomError::Io(path.display().to_string(), e))
}

/// Linear VOI window mapping a modality value to `[0, 1]`.
pub fn voi_window(x: f64, center: f64, width: f64) -> Result<f64, DicomError> {
    if !(width >= 2.0) {
        return Err(DicomError::Unsupported(format!("window width {width} < 2")));
    }
    let lo = center - 0.5 - (width - 1.0) / 2.0;
    let hi = center - 0.5 + (width - 1.0) / 2.0;
    Ok(if x <= lo {
        0.0
    } else if x > hi {
        1.0
    } else {
        (x - (center - 0.5)) / (width - 1.0) + 0.5
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(syntax: &str, photometric: Photometric) -> DicomWriteSpec {
        DicomWriteSpec {
            rows: 2,
            columns: 3,
            bits_stored: 12,
            photometric,
            rescale_slope: 1.0,
            rescale_intercept: 0.0,
            window: Some((2048.0, 4096.0)),
            transfer_syntax: syntax.into(),
        }
    }

    #[test]
    fn both_little_endian_syntaxes_round_trip() {
        let px = [0, 1, 2, 4095, 1000, 0xF123];
        for syntax in [IMPLICIT_VR_LE, EXPLICIT_VR_LE] {
            let img = parse_dicom(&encode_dicom(&spec(syntax, Photometric::Monochrome2), &px)).unwrap();
            assert_eq!((img.rows, img.columns, img.bits_stored), (2, 3, 12));
            // high bits beyond bits_stored are masked
            assert_eq!(img.pixels, vec![0, 1, 2, 4095, 1000, 0x123]);
            assert_eq!((img.window_center, img.window_width), (2048.0, 4096.0));
        }
    }

    #[test]
    fn monochrome1_is_inverted_and_window_mirrored() {
        let px = [0, 100, 4095, 2000, 3000, 10];
        let mut s = spec(EXPLICIT_VR_LE, Photometric::Monochrome1);
        s.window = Some((1500.0, 1000.0));
        let img = parse_dicom(&encode_dicom(&s, &px)).unwrap();
        assert_eq!(img.source_photometric, Photometric::Monochrome1);
        assert_eq!(img.pixels[0], 4095);
        assert_eq!(img.pixels[2], 0);
        for (&orig, &inv) in px.iter().zip(&img.pixels) {
            let a = voi_window(orig as f64, 1500.0, 1000.0).unwrap();
            let b = voi_window(inv as f64, img.window_center, img.window_width).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12 || (a == 0.0 && b == 1.0) || (a == 1.0 && b == 0.0));
        }
    }

    #[test]
    fn other_syntaxes_are_rejected_by_uid() {
        let bytes = encode_dicom(&spec("1.2.840.10008.1.2.4.50", Photometric::Monochrome2), &[0; 6]);
        let err = parse_dicom(&bytes).unwrap_err();
        assert!(err.to_string().contains("1.2.840.10008.1.2.4.50"), "{err}");
        assert!(matches!(parse_dicom(b"not dicom"), Err(DicomError::NotDicom)));
    }

    #[test]
    fn window_examples() {
        assert_eq!(voi_window(2047.5, 2048.0, 4096.0).unwrap(), 0.5);
        assert_eq!(voi_window(-10_000.0, 2048.0, 4096.0).unwrap(), 0.0);
        assert_eq!(voi_window(10_000.0, 2048.0, 4096.0).unwrap(), 1.0);
        let v = voi_window(1024.0, 2048.0, 4096.0).unwrap();
        assert!((v - 0.25012).abs() < 1e-4);
        assert_eq!(v, (1024.0 - 2047.5) / 4095.0 + 0.5);
        assert!(voi_window(1.0, 0.0, 1.0).is_err());
    }
}
