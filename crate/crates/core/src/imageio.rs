//! 8-bit RGB images with native PPM/PGM support and PNG through the `image` crate.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::IoFormatError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    /// Interleaved RGB, row-major.
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, String> {
        if data.len() != width * height * 3 {
            return Err(format!(
                "expected {} bytes for a {width}x{height} RGB image, got {}",
                width * height * 3,
                data.len()
            ));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Image { width, height, data }
    }

    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Result<Self, String> {
        if gray.len() != width * height {
            return Err(format!("expected {} gray bytes, got {}", width * height, gray.len()));
        }
        Ok(Image {
            width,
            height,
            data: gray.iter().flat_map(|&g| [g, g, g]).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// ITU-R BT.601 luma.
    pub fn to_gray(&self) -> Vec<u8> {
        self.data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32).round() as u8)
            .collect()
    }

    /// Copies the top-left `width x height` region, padding with zeros
    /// where the source is smaller.
    pub fn resized_canvas(&self, width: usize, height: usize) -> Image {
        let mut out = Image::filled(width, height, [0, 0, 0]);
        for y in 0..height.min(self.height) {
            let n = width.min(self.width) * 3;
            let src = &self.data[y * self.width * 3..][..n];
            out.data[y * width * 3..][..n].copy_from_slice(src);
        }
        out
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

struct PnmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<PnmHeader, IoFormatError> {
    let fmt = |m: &str| IoFormatError::format(path, m.to_string());
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(fmt("not a PNM file"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(fmt("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt("malformed header field"))?;
    }
    // exactly one whitespace byte separates the header from binary data
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(fmt("missing whitespace after header"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fmt("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fmt(&format!("unsupported maxval {maxval} (8-bit only)")));
    }
    Ok(PnmHeader {
        magic,
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Decodes binary (P5/P6) or ASCII (P2/P3) PGM/PPM data.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image, IoFormatError> {
    let h = parse_pnm_header(bytes, path)?;
    let channels = match &h.magic {
        b"P5" | b"P2" => 1,
        b"P6" | b"P3" => 3,
        m => {
            return Err(IoFormatError::format(
                path,
                format!("unsupported PNM type {}", String::from_utf8_lossy(m)),
            ))
        }
    };
    let count = h.width * h.height * channels;
    let raw: Vec<u8> = if h.magic == *b"P5" || h.magic == *b"P6" {
        let body = &bytes[h.data_start..];
        if body.len() < count {
            return Err(IoFormatError::format(path, format!("expected {count} pixel bytes, found {}", body.len())));
        }
        body[..count].to_vec()
    } else {
        let text = std::str::from_utf8(&bytes[h.data_start..])
            .map_err(|_| IoFormatError::format(path, "non-text ASCII PNM body"))?;
        let vals: Result<Vec<u8>, _> = text.split_ascii_whitespace().take(count).map(|t| t.parse::<u8>()).collect();
        let vals = vals.map_err(|_| IoFormatError::format(path, "malformed ASCII pixel value"))?;
        if vals.len() < count {
            return Err(IoFormatError::format(path, "truncated ASCII pixel data"));
        }
        vals
    };
    let scaled: Vec<u8> = if h.maxval == 255 {
        raw
    } else {
        raw.iter()
            .map(|&v| ((v as usize).min(h.maxval) * 255 / h.maxval) as u8)
            .collect()
    };
    let img = if channels == 1 {
        Image::from_gray(h.width, h.height, &scaled)
    } else {
        Image::new(h.width, h.height, scaled)
    };
    img.map_err(|m| IoFormatError::format(path, m))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.to_gray());
    out
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<Image, IoFormatError> {
    let dynamic = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| IoFormatError::format(path, e.to_string()))?;
    let rgb = dynamic.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Image::new(w, h, rgb.into_raw()).map_err(|m| IoFormatError::format(path, m))
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>, String> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or("image buffer size mismatch")?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).map_err(|e| e.to_string())?;
    Ok(out.into_inner())
}

/// Reads a PPM, PGM or PNG file, choosing the decoder from the file contents.
pub fn read_image(path: &Path) -> Result<Image, IoFormatError> {
    let bytes = fs::read(path).map_err(|e| IoFormatError::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes, path)
    } else if bytes.first() == Some(&b'P') {
        decode_pnm(&bytes, path)
    } else {
        Err(IoFormatError::format(path, "unrecognized image format (expected PPM, PGM or PNG)"))
    }
}

/// Writes an image atomically; the format follows the extension
/// (`.pgm`, `.png`, anything else as PPM).
pub fn write_image(path: &Path, img: &Image) -> Result<(), IoFormatError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let bytes = match ext.as_str() {
        "pgm" => encode_pgm(img),
        "png" => encode_png(img).map_err(|m| IoFormatError::format(path, m))?,
        _ => encode_ppm(img),
    };
    write_atomic(path, &bytes).map_err(|e| IoFormatError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Image {
        Image::new(3, 2, (0..18).map(|v| v as u8 * 13).collect()).unwrap()
    }

    #[test]
    fn ppm_round_trip() {
        let img = sample();
        assert_eq!(decode_pnm(&encode_ppm(&img), Path::new("x.ppm")).unwrap(), img);
    }

    #[test]
    fn pgm_and_ascii_with_comments() {
        let img = decode_pnm(b"P2\n# comment\n2 1\n# more\n15\n0 15\n", Path::new("a.pgm")).unwrap();
        assert_eq!(img.data(), &[0, 0, 0, 255, 255, 255]);
        let gray = Image::from_gray(2, 1, &[10, 200]).unwrap();
        assert_eq!(decode_pnm(&encode_pgm(&gray), Path::new("g.pgm")).unwrap(), gray);
    }

    #[test]
    fn truncated_and_bad_headers() {
        assert!(decode_pnm(b"P6\n2 2\n255\n\x00", Path::new("t.ppm")).is_err());
        assert!(decode_pnm(b"P6\n2 2\n65535\n", Path::new("t.ppm")).is_err());
        assert!(decode_pnm(b"P7\n2 2\n255\n", Path::new("t.ppm")).is_err());
    }

    #[test]
    fn png_round_trip_and_file_io() {
        let img = sample();
        let png = encode_png(&img).unwrap();
        assert_eq!(decode_png(&png, Path::new("x.png")).unwrap(), img);
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.ppm", "b.png"] {
            let p = dir.path().join(name);
            write_image(&p, &img).unwrap();
            assert_eq!(read_image(&p).unwrap(), img);
        }
        let missing = dir.path().join("missing.ppm");
        match read_image(&missing) {
            Err(IoFormatError::Io { path, .. }) => assert_eq!(path, missing),
            other => panic!("unexpected {other:?}"),
        }
    }
}
