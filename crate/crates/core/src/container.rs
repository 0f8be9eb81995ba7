//! The binary container shared by checkpoints and dataset files:
//! 4 magic bytes, format version (u32 LE), header length (u32 LE), the
//! header as kv text, then a blob of little-endian f32 values.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write<W: Write>(w: &mut W, magic: &[u8; 4], version: u32, header: &str, blob: &[f32]) -> Result<()> {
    let header_len = u32::try_from(header.len()).map_err(|_| Error::Format("header too long".into()))?;
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&header_len.to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    let mut bytes = Vec::with_capacity(blob.len() * 4);
    for v in blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub(crate) struct Container {
    pub version: u32,
    pub header: String,
    pub blob: Vec<f32>,
}

pub(crate) fn read<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<Container> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    r.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "blob length {} is not a multiple of 4",
            rest.len()
        )));
    }
    let blob = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Container { version, header, blob })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_bad_magic() {
        let mut buf = Vec::new();
        write(&mut buf, b"TEST", 3, "a = 1\n", &[1.5, -0.0, f32::MIN_POSITIVE]).unwrap();
        let c = read(&mut buf.as_slice(), b"TEST").unwrap();
        assert_eq!(c.version, 3);
        assert_eq!(c.header, "a = 1\n");
        assert_eq!(c.blob[1].to_bits(), (-0.0f32).to_bits());
        assert!(read(&mut buf.as_slice(), b"NOPE").is_err());
        buf.push(0);
        assert!(read(&mut buf.as_slice(), b"TEST").is_err());
    }
}
