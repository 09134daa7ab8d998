//! Binary dataset container.
//!
//! Little-endian layout: magic `SDS1`, `u32` version, `u32` count, `u16` height,
//! `u16` width, `u8` channels (3), `u8` parts (5); then per record the
//! interleaved RGB bytes, the part-major mask planes and a `u32` attribute
//! bitfield.

use std::fs;
use std::path::Path;

use super::{Attributes, Dataset, Sprite, CHANNELS, NUM_PARTS};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"SDS1";
pub const DATASET_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 2 + 1 + 1;

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let record = ds.height * ds.width * (CHANNELS + NUM_PARTS) + 4;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * record);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.height as u16).to_le_bytes());
    out.extend_from_slice(&(ds.width as u16).to_le_bytes());
    out.push(CHANNELS as u8);
    out.push(NUM_PARTS as u8);
    for s in &ds.sprites {
        out.extend_from_slice(&s.pixels);
        out.extend_from_slice(&s.masks);
        out.extend_from_slice(&s.attrs.0.to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "dataset truncated: {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let version = u32_at(4);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version} (expected {DATASET_VERSION})"
        )));
    }
    let count = u32_at(8) as usize;
    let (height, width) = (u16_at(12) as usize, u16_at(14) as usize);
    let (channels, parts) = (bytes[16] as usize, bytes[17] as usize);
    if channels != CHANNELS || parts != NUM_PARTS {
        return Err(Error::Format(format!(
            "expected {CHANNELS} channels and {NUM_PARTS} parts, found {channels} and {parts}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::Format("zero image dimensions".into()));
    }
    let (img_len, mask_len) = (height * width * CHANNELS, height * width * NUM_PARTS);
    let record = img_len + mask_len + 4;
    let expected = HEADER_LEN + count * record;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "dataset length {} does not match header ({count} records need {expected})",
            bytes.len()
        )));
    }
    let sprites = bytes[HEADER_LEN..]
        .chunks_exact(record)
        .map(|r| Sprite {
            height,
            width,
            pixels: r[..img_len].to_vec(),
            masks: r[img_len..img_len + mask_len].to_vec(),
            attrs: Attributes(u32::from_le_bytes(r[img_len + mask_len..].try_into().unwrap())),
        })
        .collect();
    Ok(Dataset {
        height,
        width,
        sprites,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
