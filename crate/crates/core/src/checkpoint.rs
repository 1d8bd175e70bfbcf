//! Binary checkpoints for backbones and PEFT modules.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every parameter as a little-endian `f64`. The header carries
//! a SHA-256 of the values and, optionally, the exact generator state.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::AxisName;
use crate::error::{Error, Result};
use crate::model::params::{checksum, ModelConfig, TransformerParams};
use crate::peft::{peft_layout, PeftKind, PeftParams};

const MAGIC: &[u8; 8] = b"PEFTDBCK";
pub const FORMAT_VERSION: u32 = 1;

/// Seed, stream and word position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot carry a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed generator state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Body {
    Backbone {
        config: ModelConfig,
    },
    Peft {
        peft_kind: PeftKind,
        size: usize,
        num_layers: usize,
        hidden: usize,
        lora_alpha: f64,
        sft_mask: Vec<usize>,
        axis: Option<AxisName>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    body: Body,
    num_values: usize,
    checksum: String,
    rng: Option<RngState>,
}

fn write_file(path: &Path, header: &Header, data: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<(Header, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body_start]).map_err(|e| bad(&e.to_string()))?;
    let raw = &bytes[body_start..];
    if raw.len() != header.num_values * 8 {
        return Err(bad(&format!("expected {} values, found {} bytes", header.num_values, raw.len())));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if checksum(&data) != header.checksum {
        return Err(bad("checksum mismatch"));
    }
    Ok((header, data))
}

pub fn save_backbone(path: &Path, params: &TransformerParams, rng: Option<&ChaCha8Rng>) -> Result<()> {
    let header = Header {
        body: Body::Backbone { config: params.config },
        num_values: params.data.len(),
        checksum: params.checksum(),
        rng: rng.map(RngState::capture),
    };
    write_file(path, &header, &params.data)
}

pub fn load_backbone(path: &Path) -> Result<(TransformerParams, Option<ChaCha8Rng>)> {
    let (header, data) = read_file(path)?;
    let Body::Backbone { config } = header.body else {
        return Err(Error::Checkpoint(format!("{} holds a PEFT module, not a backbone", path.display())));
    };
    let params = TransformerParams::from_data(config, data)?;
    let rng = header.rng.as_ref().map(RngState::restore).transpose()?;
    Ok((params, rng))
}

/// A trained module together with the bias axis it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct PeftCheckpoint {
    pub peft: PeftParams,
    pub axis: Option<AxisName>,
}

pub fn save_peft(path: &Path, peft: &PeftParams, axis: Option<AxisName>, rng: Option<&ChaCha8Rng>) -> Result<()> {
    let header = Header {
        body: Body::Peft {
            peft_kind: peft.kind,
            size: peft.size,
            num_layers: peft.num_layers,
            hidden: peft.hidden,
            lora_alpha: peft.lora_alpha,
            sft_mask: peft.sft_mask.clone(),
            axis,
        },
        num_values: peft.data.len(),
        checksum: checksum(&peft.data),
        rng: rng.map(RngState::capture),
    };
    write_file(path, &header, &peft.data)
}

pub fn load_peft(path: &Path) -> Result<(PeftCheckpoint, Option<ChaCha8Rng>)> {
    let (header, data) = read_file(path)?;
    let Body::Peft {
        peft_kind,
        size,
        num_layers,
        hidden,
        lora_alpha,
        sft_mask,
        axis,
    } = header.body
    else {
        return Err(Error::Checkpoint(format!("{} holds a backbone, not a PEFT module", path.display())));
    };
    let layout = peft_layout(peft_kind, num_layers, hidden, size)?;
    if layout.len() != data.len() || (peft_kind == PeftKind::Sft && sft_mask.len() != size) {
        return Err(Error::Checkpoint(format!("{}: module shape is inconsistent", path.display())));
    }
    if !sft_mask.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Checkpoint(format!("{}: sparse mask is not strictly increasing", path.display())));
    }
    let peft = PeftParams {
        kind: peft_kind,
        size,
        num_layers,
        hidden,
        lora_alpha,
        layout,
        data,
        sft_mask,
    };
    let rng = header.rng.as_ref().map(RngState::restore).transpose()?;
    Ok((PeftCheckpoint { peft, axis }, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn backbone() -> TransformerParams {
        TransformerParams::init(ModelConfig::toy(40, 3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn backbone_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        let mut p = backbone();
        p.data[3] = -0.0;
        p.data[4] = f64::MIN_POSITIVE / 4.0;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let _: u64 = rng.random();
        save_backbone(&path, &p, Some(&rng)).unwrap();
        let (q, r) = load_backbone(&path).unwrap();
        assert!(p.data.iter().zip(&q.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(q.config, p.config);
        let mut r = r.unwrap();
        assert_eq!(r.random::<u64>(), rng.random::<u64>());
        let bytes = std::fs::read(&path).unwrap();
        save_backbone(&path, &q, Some(&ChaCha8Rng::seed_from_u64(99))).unwrap();
        assert_eq!(bytes.len(), std::fs::read(&path).unwrap().len());
    }

    #[test]
    fn peft_round_trip_keeps_axis_and_mask() {
        let dir = tempfile::tempdir().unwrap();
        let b = backbone();
        for kind in [PeftKind::Adapter, PeftKind::Prompt, PeftKind::LoRA] {
            let mut p = crate::peft::init_peft(kind, &b, 0.01, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            p.data[0] = 1.0 / 3.0;
            let path = dir.path().join(format!("{kind}.ckpt"));
            save_peft(&path, &p, Some(AxisName::Gender), None).unwrap();
            let (c, rng) = load_peft(&path).unwrap();
            assert_eq!(c.peft, p);
            assert_eq!(c.axis, Some(AxisName::Gender));
            assert!(rng.is_none());
        }
        let mut sft = PeftParams::sparse(&b.config, b.num_params(), vec![9, 2, 400]).unwrap();
        sft.data = vec![0.5, -0.25, 1e-300];
        let path = dir.path().join("sft.ckpt");
        save_peft(&path, &sft, Some(AxisName::Race), None).unwrap();
        let (c, _) = load_peft(&path).unwrap();
        assert_eq!(c.peft, sft);
        assert_eq!(c.peft.sft_mask, vec![2, 9, 400]);
        assert!(load_backbone(&path).is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        save_backbone(&path, &backbone(), None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_backbone(&path).unwrap_err().to_string().contains("checksum"));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_backbone(&path).is_err());
        bytes.truncate(n - 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_backbone(&path).is_err());
    }
}
