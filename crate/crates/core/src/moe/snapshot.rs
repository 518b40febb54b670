//! Weight snapshots: one line of JSON header, then raw little-endian `f64`s.
//!
//! The header lists the variant, the layer layout and, for every matrix, its
//! name, shape and element offset into the data block that follows the
//! newline.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::params::{Expert, Layout, MoEParams};
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "moelab-weights";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the data block.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format: String,
    pub version: u32,
    pub layout: Layout,
    pub tensors: Vec<TensorEntry>,
}

fn named_tensors(params: &MoEParams) -> Vec<(String, &Tensor)> {
    let mut out = vec![("router".to_string(), &params.router)];
    if let Some(t) = &params.outer_down {
        out.push(("outer_down".into(), t));
    }
    if let Some(t) = &params.outer_up {
        out.push(("outer_up".into(), t));
    }
    for (i, e) in params.experts.iter().enumerate() {
        out.push((format!("expert.{i}.first"), &e.first));
        out.push((format!("expert.{i}.second"), &e.second));
    }
    out
}

pub fn write_snapshot<W: Write>(params: &MoEParams, mut w: W) -> Result<()> {
    let layout = params.layout()?;
    let named = named_tensors(params);
    let mut offset = 0;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            entry
        })
        .collect();
    let header = SnapshotHeader {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        layout,
        tensors,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, t) in &named {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot<R: Read>(r: R) -> Result<MoEParams> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: SnapshotHeader = serde_json::from_str(line.trim_end())?;
    if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
        return Err(Error::Snapshot(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(Error::Snapshot(format!("data block of {} bytes is not a whole number of f64", raw.len())));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();

    let take = |name: &str| -> Result<Tensor> {
        let entry = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Snapshot(format!("missing tensor {name}")))?;
        let n: usize = entry.shape.iter().product();
        let slice = values
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| Error::Snapshot(format!("tensor {name} runs past the data block")))?;
        Tensor::new(entry.shape.clone(), slice.to_vec())
    };
    let has = |name: &str| header.tensors.iter().any(|t| t.name == name);

    let experts = (0..header.layout.experts)
        .map(|i| {
            Ok(Expert {
                first: take(&format!("expert.{i}.first"))?,
                second: take(&format!("expert.{i}.second"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = MoEParams {
        variant: header.layout.variant,
        router: take("router")?,
        outer_down: if has("outer_down") { Some(take("outer_down")?) } else { None },
        outer_up: if has("outer_up") { Some(take("outer_up")?) } else { None },
        experts,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_every_variant() {
        for variant in Variant::ALL {
            let p = MoEParams::init(Layout::new(variant, 8, 2, 8), &mut ChaCha8Rng::seed_from_u64(4));
            let mut buf = Vec::new();
            write_snapshot(&p, &mut buf).unwrap();
            assert_eq!(read_snapshot(buf.as_slice()).unwrap(), p);
        }
    }

    #[test]
    fn header_is_first_line_and_data_is_le() {
        let p = MoEParams::init(Layout::new(Variant::FineGrained, 4, 2, 2), &mut ChaCha8Rng::seed_from_u64(4));
        let mut buf = Vec::new();
        write_snapshot(&p, &mut buf).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        let header: SnapshotHeader = serde_json::from_slice(&buf[..nl]).unwrap();
        assert_eq!(header.tensors[0].name, "router");
        let data = &buf[nl + 1..];
        assert_eq!(data.len(), 8 * p.param_count_constructed() as usize);
        assert_eq!(f64::from_le_bytes(data[..8].try_into().unwrap()), p.router.data()[0]);
    }

    #[test]
    fn truncated_data_is_rejected() {
        let p = MoEParams::init(Layout::new(Variant::BigMac, 4, 2, 2), &mut ChaCha8Rng::seed_from_u64(4));
        let mut buf = Vec::new();
        write_snapshot(&p, &mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(read_snapshot(buf.as_slice()).is_err());
    }
}
