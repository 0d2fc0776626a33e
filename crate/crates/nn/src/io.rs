//! STEERTENSOR v1 on-disk format.
//!
//! One ASCII header line `STEERTENSOR 1 f32 <rank> <dim0> <dim1> ...\n`
//! followed by the raw little-endian f32 payload, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "STEERTENSOR 1 f32 {} {}", tensor.shape().len(), dims.join(" "))?;
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)
            .map_err(|_| NnError::Format(format!("{}: truncated header", path.display())))?;
        if byte[0] == b'\n' {
            break;
        }
        if header.len() > 256 {
            return Err(NnError::Format(format!("{}: header too long", path.display())));
        }
        header.push(byte[0]);
    }
    let header = String::from_utf8(header)
        .map_err(|_| NnError::Format(format!("{}: header not ASCII", path.display())))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 4 || fields[0] != "STEERTENSOR" || fields[1] != "1" || fields[2] != "f32" {
        return Err(NnError::Format(format!("{}: bad header `{header}`", path.display())));
    }
    let rank: usize = fields[3]
        .parse()
        .map_err(|_| NnError::Format(format!("{}: bad rank", path.display())))?;
    if fields.len() != 4 + rank {
        return Err(NnError::Format(format!(
            "{}: rank {rank} but {} dims",
            path.display(),
            fields.len() - 4
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for f in &fields[4..] {
        let d: usize =
            f.parse().map_err(|_| NnError::Format(format!("{}: bad dim `{f}`", path.display())))?;
        if d == 0 {
            return Err(NnError::Format(format!("{}: zero dimension", path.display())));
        }
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)
        .map_err(|_| NnError::Format(format!("{}: truncated payload", path.display())))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(NnError::Format(format!("{}: trailing bytes", path.display())));
    }
    let data: Vec<f32> =
        payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, Rng};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("stensor-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.stensor");
        let mut rng = Rng::new(1, 0);
        let t = randn(&mut rng, &[3, 4, 2]).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert!(t.bits_eq(&back));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn header_shape_is_canonical() {
        let dir = std::env::temp_dir().join(format!("stensor-hdr-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("h.stensor");
        let t = Tensor::zeros(vec![2, 3]);
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let line_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[..line_end], b"STEERTENSOR 1 f32 2 2 3");
        assert_eq!(bytes.len() - line_end - 1, 24);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = std::env::temp_dir().join(format!("stensor-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.stensor");

        std::fs::write(&path, b"NOTATENSOR 1 f32 1 4\n\0\0\0\0").unwrap();
        assert!(read_tensor(&path).is_err());

        std::fs::write(&path, b"STEERTENSOR 1 f32 1 2\n\0\0\0\0").unwrap();
        assert!(read_tensor(&path).is_err(), "truncated payload must fail");

        std::fs::remove_dir_all(&dir).unwrap();
    }
}
