//! Binary (P6) PPM with maxval 255.

use std::io::{BufRead, Cursor, Write};

use super::{DataError, RgbImage};

fn next_byte<R: BufRead>(r: &mut R) -> Result<Option<u8>, DataError> {
    let buf = r.fill_buf()?;
    if buf.is_empty() {
        return Ok(None);
    }
    let b = buf[0];
    r.consume(1);
    Ok(Some(b))
}

/// Reads one whitespace/comment-delimited header token.
fn token<R: BufRead>(r: &mut R) -> Result<String, DataError> {
    let mut tok = String::new();
    loop {
        match next_byte(r)? {
            None if tok.is_empty() => return Err(DataError::BadHeader("unexpected end of header".into())),
            None => return Ok(tok),
            Some(b'#') if tok.is_empty() => while !matches!(next_byte(r)?, None | Some(b'\n') | Some(b'\r')) {},
            Some(b) if b.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            Some(b) => tok.push(b as char),
        }
    }
}

fn number<R: BufRead>(r: &mut R, what: &str) -> Result<u32, DataError> {
    let tok = token(r)?;
    tok.parse()
        .map_err(|_| DataError::BadHeader(format!("{what} {tok:?} is not a number")))
}

/// Reads the next frame from a stream of concatenated P6 images. Returns
/// `None` at a clean end of stream (only whitespace left).
pub fn read_ppm<R: BufRead>(r: &mut R) -> Result<Option<RgbImage>, DataError> {
    let first = loop {
        match next_byte(r)? {
            None => return Ok(None),
            Some(b) if b.is_ascii_whitespace() => continue,
            Some(b) => break b,
        }
    };
    let second = next_byte(r)?;
    if first != b'P' || second != Some(b'6') {
        return Err(DataError::BadMagic);
    }
    match next_byte(r)? {
        Some(b) if b.is_ascii_whitespace() => {}
        Some(b'#') => while !matches!(next_byte(r)?, None | Some(b'\n') | Some(b'\r')) {},
        _ => return Err(DataError::BadMagic),
    }
    let width = number(r, "width")?;
    let height = number(r, "height")?;
    let maxval = number(r, "maxval")?;
    if maxval != 255 {
        return Err(DataError::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(DataError::BadHeader(format!("empty image {width}x{height}")));
    }
    // `token` consumed the single whitespace byte that ends the header.
    let expected = 3 * width as usize * height as usize;
    let mut pixels = Vec::with_capacity(expected);
    while pixels.len() < expected {
        let buf = r.fill_buf()?;
        if buf.is_empty() {
            return Err(DataError::Truncated {
                expected,
                got: pixels.len(),
            });
        }
        let n = buf.len().min(expected - pixels.len());
        pixels.extend_from_slice(&buf[..n]);
        r.consume(n);
    }
    Ok(Some(RgbImage {
        width: width as usize,
        height: height as usize,
        pixels,
    }))
}

/// Decodes a single P6 image.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, DataError> {
    read_ppm(&mut Cursor::new(bytes))?.ok_or(DataError::BadMagic)
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn write_ppm<W: Write>(w: &mut W, image: &RgbImage) -> std::io::Result<()> {
    w.write_all(&encode_ppm(image))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_red_pixel() {
        let mut bytes = b"P6 1 1 255 ".to_vec();
        bytes.extend_from_slice(&[255, 0, 0]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (1, 1));
        assert_eq!(img.pixels, [255, 0, 0]);
    }

    #[test]
    fn comments_are_ignored() {
        let mut plain = b"P6\n2 1\n255\n".to_vec();
        let mut commented = b"P6\n# made by hand\n2 # width\n1\n255\n".to_vec();
        for b in [&mut plain, &mut commented] {
            b.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        }
        assert_eq!(decode_ppm(&plain).unwrap(), decode_ppm(&commented).unwrap());
    }

    #[test]
    fn payload_may_start_with_whitespace_bytes() {
        let mut bytes = b"P6 1 1 255\n".to_vec();
        bytes.extend_from_slice(b"\n \t");
        assert_eq!(decode_ppm(&bytes).unwrap().pixels, [b'\n', b' ', b'\t']);
    }

    #[test]
    fn errors() {
        let mut short = b"P6 2 2 255\n".to_vec();
        short.extend_from_slice(&[0; 11]);
        assert!(matches!(
            decode_ppm(&short),
            Err(DataError::Truncated { expected: 12, got: 11 })
        ));
        assert!(matches!(decode_ppm(b"P3 1 1 255\n000"), Err(DataError::BadMagic)));
        assert!(matches!(
            decode_ppm(b"P6 1 1 65535\n000000"),
            Err(DataError::UnsupportedMaxval(65535))
        ));
        assert!(matches!(decode_ppm(b"P6 x 1 255\n000"), Err(DataError::BadHeader(_))));
    }

    #[test]
    fn concatenated_stream() {
        let a = RgbImage {
            width: 1,
            height: 2,
            pixels: vec![1, 2, 3, 4, 5, 6],
        };
        let b = RgbImage {
            width: 2,
            height: 1,
            pixels: vec![9, 8, 7, 6, 5, 4],
        };
        let mut bytes = encode_ppm(&a);
        bytes.extend(encode_ppm(&b));
        bytes.push(b'\n');
        let mut cur = Cursor::new(bytes);
        assert_eq!(read_ppm(&mut cur).unwrap(), Some(a));
        assert_eq!(read_ppm(&mut cur).unwrap(), Some(b));
        assert_eq!(read_ppm(&mut cur).unwrap(), None);
    }
}
