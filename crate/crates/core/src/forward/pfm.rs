//! Portable FloatMap and 8-bit Netpbm I/O.
//!
//! PFM files are written little-endian (scale `-1.0`), bottom row first as
//! the format requires. `Pf` holds one channel, `PF` three. Pixel values are
//! stored as written; [`to_display`] / [`from_display`] convert signal-range
//! images (`[-1, 1]`) to and from the `[0, 1]` range image tools expect.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::SignalGrid;

pub fn write_pfm<W: Write>(grid: &SignalGrid, out: &mut W) -> Result<()> {
    let (h, w, nc) = grid.dims()?;
    let tag = match nc {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::shape(format!("PFM stores 1 or 3 channels, got {nc}"))),
    };
    write!(out, "{tag}\n{w} {h}\n-1.0\n")?;
    let mut buf = Vec::with_capacity(grid.len() * 4);
    for r in (0..h).rev() {
        for v in &grid.data()[r * w * nc..(r + 1) * w * nc] {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
        if tok.len() > 32 {
            return Err(Error::Format("PFM header token too long".into()));
        }
    }
    String::from_utf8(tok).map_err(|_| Error::Format("PFM header is not ASCII".into()))
}

pub fn read_pfm<R: Read>(input: R) -> Result<SignalGrid> {
    let mut r = BufReader::new(input);
    let nc = match header_token(&mut r)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::Format(format!("not a PFM file (magic {other:?})"))),
    };
    let parse = |s: String, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Format(format!("bad PFM {what} {s:?}")))
    };
    let w = parse(header_token(&mut r)?, "width")?;
    let h = parse(header_token(&mut r)?, "height")?;
    let scale: f64 = header_token(&mut r)?.parse().map_err(|_| Error::Format("bad PFM scale".into()))?;
    if w == 0 || h == 0 || w * h > 1 << 28 {
        return Err(Error::Format(format!("bad PFM size {w}x{h}")));
    }
    let little = scale < 0.0;
    let mut raw = vec![0u8; w * h * nc * 4];
    r.read_exact(&mut raw).map_err(|_| Error::Format("PFM pixel data truncated".into()))?;
    let mut data = vec![0.0; w * h * nc];
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let file_row = k / (w * nc);
        let rest = k % (w * nc);
        data[(h - 1 - file_row) * w * nc + rest] = v as f64;
    }
    let shape: Vec<usize> = if nc == 1 { vec![h, w] } else { vec![h, w, nc] };
    SignalGrid::new(&shape, data)
}

pub fn save_pfm(grid: &SignalGrid, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_pfm(grid, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<SignalGrid> {
    read_pfm(std::fs::File::open(path)?)
}

/// Saves a tilt field as `<stem>_dx.pfm` and `<stem>_dy.pfm`; returns both paths.
pub fn save_tilt(field: &SignalGrid, dir: &Path, stem: &str) -> Result<[std::path::PathBuf; 2]> {
    let dx = dir.join(format!("{stem}_dx.pfm"));
    let dy = dir.join(format!("{stem}_dy.pfm"));
    save_pfm(&field.channel(0)?, &dx)?;
    save_pfm(&field.channel(1)?, &dy)?;
    Ok([dx, dy])
}

pub fn load_tilt(dir: &Path, stem: &str) -> Result<SignalGrid> {
    let dx = load_pfm(&dir.join(format!("{stem}_dx.pfm")))?;
    let dy = load_pfm(&dir.join(format!("{stem}_dy.pfm")))?;
    SignalGrid::stack_channels(&[dx, dy])
}

/// `[-1, 1] -> [0, 1]`
pub fn to_display(x: &SignalGrid) -> SignalGrid {
    x.map(|v| (v + 1.0) / 2.0)
}

/// `[0, 1] -> [-1, 1]`
pub fn from_display(x: &SignalGrid) -> SignalGrid {
    x.map(|v| 2.0 * v - 1.0)
}

/// 8-bit PGM/PPM preview with `[-1, 1]` mapped to `[0, 255]`.
pub fn write_netpbm<W: Write>(grid: &SignalGrid, out: &mut W) -> Result<()> {
    let (h, w, nc) = grid.dims()?;
    let tag = match nc {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape(format!("netpbm stores 1 or 3 channels, got {nc}"))),
    };
    write!(out, "{tag}\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = grid.data().iter().map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8).collect();
    out.write_all(&bytes)?;
    Ok(())
}
