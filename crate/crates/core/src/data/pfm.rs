//! Portable FloatMap images.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Writes a 1x3xHxW or 1x1xHxW tensor, little-endian, rows bottom to top.
pub fn write_pfm<W: Write>(mut out: W, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let magic = match (s.n, s.c) {
        (1, 3) => "PF",
        (1, 1) => "Pf",
        _ => return Err(Error::shape("write_pfm", format!("expected 1x3xHxW or 1x1xHxW, got {s}"))),
    };
    write!(out, "{magic}\n{} {}\n-1.0\n", s.w, s.h)?;
    let mut bytes = Vec::with_capacity(s.len() * 4);
    for y in (0..s.h).rev() {
        for x in 0..s.w {
            for c in 0..s.c {
                bytes.extend_from_slice(&image.at(0, c, y, x).to_le_bytes());
            }
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

fn token<R: BufRead>(input: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if input.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated PFM header".into()));
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ASCII PFM header".into()))
}

pub fn read_pfm<R: BufRead>(mut input: R) -> Result<Tensor<f32>> {
    let channels = match token(&mut input)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        m => return Err(Error::Format(format!("bad PFM magic `{m}`"))),
    };
    let parse = |t: String| t.parse::<usize>().map_err(|_| Error::Format(format!("bad PFM extent `{t}`")));
    let w = parse(token(&mut input)?)?;
    let h = parse(token(&mut input)?)?;
    let scale: f64 = token(&mut input)?.parse().map_err(|_| Error::Format("bad PFM scale".into()))?;
    let little = scale < 0.0;
    let mut bytes = vec![0u8; w * h * channels * 4];
    input.read_exact(&mut bytes)?;
    let mut t = Tensor::zeros(Shape::new(1, channels, h, w));
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (c, px) = (i % channels, i / channels);
        let (row, x) = (px / w, px % w);
        t.set(0, c, h - 1 - row, x, v);
    }
    Ok(t)
}
