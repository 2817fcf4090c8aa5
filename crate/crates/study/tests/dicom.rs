use cxr_study::dicom::*;
use proptest::prelude::*;

fn spec(syntax: &str) -> DicomWriteSpec {
    DicomWriteSpec {
        rows: 2,
        columns: 2,
        bits_stored: 16,
        photometric: Photometric::Monochrome2,
        rescale_slope: 2.0,
        rescale_intercept: -1024.0,
        window: Some((40.0, 400.0)),
        transfer_syntax: syntax.into(),
    }
}

fn element(tag: (u16, u16), vr: &[u8; 2], len: u32, explicit: bool) -> Vec<u8> {
    let mut out = vec![];
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    if explicit {
        out.extend_from_slice(vr);
        out.extend_from_slice(&[0, 0]);
    }
    out.extend_from_slice(&len.to_le_bytes());
    out
}

fn delimiter(tag: (u16, u16), len: u32) -> Vec<u8> {
    element(tag, b"--", len, false)
}

/// An undefined-length sequence holding one undefined-length item (which
/// itself nests an undefined-length sequence) and one defined-length item.
fn undefined_sequence(explicit: bool) -> Vec<u8> {
    let inner_value = b"ABCD";
    let mut short = vec![0x08, 0x00, 0x00, 0x01];
    if explicit {
        short.extend_from_slice(b"SH");
        short.extend_from_slice(&(inner_value.len() as u16).to_le_bytes());
    } else {
        short.extend_from_slice(&(inner_value.len() as u32).to_le_bytes());
    }
    short.extend_from_slice(inner_value);

    let mut out = element((0x0040, 0x0275), b"SQ", u32::MAX, explicit);
    out.extend(delimiter((0xFFFE, 0xE000), u32::MAX));
    out.extend(&short);
    out.extend(element((0x0040, 0x0008), b"SQ", u32::MAX, explicit));
    out.extend(delimiter((0xFFFE, 0xE000), u32::MAX));
    out.extend(&short);
    out.extend(delimiter((0xFFFE, 0xE00D), 0));
    out.extend(delimiter((0xFFFE, 0xE0DD), 0));
    out.extend(delimiter((0xFFFE, 0xE00D), 0));
    out.extend(delimiter((0xFFFE, 0xE000), short.len() as u32));
    out.extend(&short);
    out.extend(delimiter((0xFFFE, 0xE0DD), 0));
    out
}

/// Offset of the first data set element (group 0008) after the meta group.
fn meta_len(bytes: &[u8]) -> usize {
    (132..bytes.len())
        .step_by(2)
        .find(|&i| bytes[i..i + 2] == [0x08, 0x00])
        .expect("data set start")
}

fn splice_after_meta(bytes: &[u8], extra: &[u8]) -> Vec<u8> {
    let at = meta_len(bytes);
    [&bytes[..at], extra, &bytes[at..]].concat()
}

#[test]
fn undefined_length_sequences_are_skipped() {
    let px = [0u16, 1, 60000, 65535];
    for (syntax, explicit) in [(EXPLICIT_VR_LE, true), (IMPLICIT_VR_LE, false)] {
        let plain = encode_dicom(&spec(syntax), &px);
        let bytes = splice_after_meta(&plain, &undefined_sequence(explicit));
        assert_eq!(parse_dicom(&bytes).unwrap(), parse_dicom(&plain).unwrap());
    }
}

#[test]
fn unterminated_sequence_is_truncated_error() {
    let plain = encode_dicom(&spec(EXPLICIT_VR_LE), &[0; 4]);
    // the file ends inside an open item
    let mut bytes = plain[..meta_len(&plain)].to_vec();
    bytes.extend(element((0x0040, 0x0275), b"SQ", u32::MAX, true));
    bytes.extend(delimiter((0xFFFE, 0xE000), u32::MAX));
    assert!(matches!(parse_dicom(&bytes), Err(DicomError::Truncated(_))));
}

#[test]
fn modality_and_window_attributes_are_extracted() {
    let img = parse_dicom(&encode_dicom(&spec(EXPLICIT_VR_LE), &[5, 6, 7, 8])).unwrap();
    assert_eq!((img.rescale_slope, img.rescale_intercept), (2.0, -1024.0));
    assert_eq!((img.window_center, img.window_width), (40.0, 400.0));
    assert_eq!(img.pixels, vec![5, 6, 7, 8]);
}

#[test]
fn default_window_covers_the_stored_range() {
    let mut s = spec(IMPLICIT_VR_LE);
    s.window = None;
    s.bits_stored = 12;
    s.rescale_slope = 1.0;
    s.rescale_intercept = 0.0;
    let img = parse_dicom(&encode_dicom(&s, &[0, 4095, 0, 0])).unwrap();
    assert_eq!(voi_window(0.0, img.window_center, img.window_width).unwrap(), 0.0);
    assert!(voi_window(4095.0, img.window_center, img.window_width).unwrap() > 0.999);
}

#[test]
fn missing_pixel_data_and_truncation_are_errors() {
    let bytes = encode_dicom(&spec(EXPLICIT_VR_LE), &[1, 2, 3, 4]);
    assert!(parse_dicom(&bytes[..bytes.len() - 3]).is_err());
    assert!(matches!(parse_dicom(&bytes[..140]), Err(DicomError::Truncated(_))));
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.dcm");
    write_dicom(&path, &spec(EXPLICIT_VR_LE), &[9, 8, 7, 6]).unwrap();
    assert_eq!(read_dicom(&path).unwrap().pixels, vec![9, 8, 7, 6]);
    assert!(matches!(
        read_dicom(&dir.path().join("nope.dcm")),
        Err(DicomError::Io(..))
    ));
}

proptest! {
    #[test]
    fn random_images_round_trip(
        rows in 1usize..6,
        cols in 1usize..6,
        bits in 8u16..=16,
        implicit in any::<bool>(),
        seed in prop::collection::vec(any::<u16>(), 36),
    ) {
        let px: Vec<u16> = seed[..rows * cols].to_vec();
        let s = DicomWriteSpec {
            rows,
            columns: cols,
            bits_stored: bits,
            photometric: Photometric::Monochrome2,
            rescale_slope: 1.0,
            rescale_intercept: 0.0,
            window: None,
            transfer_syntax: if implicit { IMPLICIT_VR_LE } else { EXPLICIT_VR_LE }.into(),
        };
        let img = parse_dicom(&encode_dicom(&s, &px)).unwrap();
        let mask = ((1u32 << bits) - 1) as u16;
        prop_assert_eq!(img.pixels, px.iter().map(|p| p & mask).collect::<Vec<_>>());
    }

    #[test]
    fn window_is_monotone_and_bounded(c in -5000.0f64..5000.0, w in 2.0f64..10000.0, a in -1e4f64..1e4, b in -1e4f64..1e4) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (vlo, vhi) = (voi_window(lo, c, w).unwrap(), voi_window(hi, c, w).unwrap());
        prop_assert!((0.0..=1.0).contains(&vlo) && (0.0..=1.0).contains(&vhi));
        prop_assert!(vlo <= vhi);
    }
}
