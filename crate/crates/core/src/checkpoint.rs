//! Versioned binary checkpoint of the network, center bank and the inference
//! settings needed to reproduce the final T-CAM.
//!
//! Layout: the line `A2CLPT-CKPT v1\n`, a little-endian `u32` section count,
//! then per section a `u32` name length, the UTF-8 name, a `u32` rank, the
//! `u64` dimensions and the little-endian `f64` payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::centers::{CenterBank, CENTER_SETS};
use crate::error::{Error, Result};
use crate::model::{Architecture, ConvHead, Embedding, Fusion, Network, StreamParams};
use crate::numkit::Tensor2;

pub const CHECKPOINT_MAGIC: &str = "A2CLPT-CKPT v1";

/// Everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub bank: CenterBank,
    /// Top-k ratio `s` used for the classification scores.
    pub topk_ratio: f64,
}

struct Section {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn param_dims(name: &str, net: &Network) -> Vec<usize> {
    let d = net.dims();
    let (e, n_c) = (d.embed_dim, d.num_classes);
    if name.ends_with(".w1") {
        vec![e, d.input_dim]
    } else if name.ends_with(".w2") {
        vec![e, e]
    } else if name.ends_with(".b1") || name.ends_with(".b2") {
        vec![e]
    } else if name.ends_with(".kernel") {
        vec![n_c, e, d.kernel_size]
    } else {
        vec![n_c]
    }
}

fn center_name(i: usize) -> String {
    let (s, b) = CENTER_SETS[i];
    format!("centers.{}.{}", s.name(), b.name())
}

fn sections(ck: &Checkpoint) -> Vec<Section> {
    let mut net = ck.network.clone();
    let dims: Vec<(String, Vec<usize>)> = net
        .params_mut()
        .iter()
        .map(|p| (p.name.clone(), param_dims(&p.name, &ck.network)))
        .collect();
    let mut out: Vec<Section> = net
        .params_mut()
        .into_iter()
        .zip(dims)
        .map(|(p, (name, dims))| Section {
            name,
            dims,
            data: p.values.to_vec(),
        })
        .collect();
    let scalar = |name: &str, v: f64| Section {
        name: name.into(),
        dims: vec![1],
        data: vec![v],
    };
    out.push(scalar("fusion.omega", ck.network.fusion.omega));
    out.push(scalar("arch.adversarial", if ck.network.arch.adversarial { 1.0 } else { 0.0 }));
    out.push(scalar("arch.erase_ratio", ck.network.arch.erase_ratio));
    out.push(scalar("meta.topk_ratio", ck.topk_ratio));
    for (i, set) in ck.bank.sets().iter().enumerate() {
        out.push(Section {
            name: center_name(i),
            dims: vec![set.rows(), set.cols()],
            data: set.as_slice().to_vec(),
        });
    }
    out
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let secs = sections(ck);
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(&(secs.len() as u32).to_le_bytes());
    for s in secs {
        buf.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.name.as_bytes());
        buf.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
        for d in &s.dims {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &s.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_sections(bytes: &[u8]) -> Result<BTreeMap<String, Section>> {
    let magic = format!("{CHECKPOINT_MAGIC}\n");
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(Error::Checkpoint(format!("missing {CHECKPOINT_MAGIC:?} header")));
    }
    let mut r = Reader {
        bytes,
        pos: magic.len(),
    };
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or_else(|| Error::Checkpoint(format!("section {name:?} is too large")))?;
        let data: Vec<f64> = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("non-finite value at {i} in {name:?}")));
        }
        if out.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate section {name:?}")));
        }
        out.insert(name.clone(), Section { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

fn section<'a>(secs: &'a BTreeMap<String, Section>, name: &str) -> Result<&'a Section> {
    secs.get(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing section {name:?}")))
}

fn scalar(secs: &BTreeMap<String, Section>, name: &str) -> Result<f64> {
    let s = section(secs, name)?;
    match s.data.as_slice() {
        [v] => Ok(*v),
        _ => Err(Error::Checkpoint(format!("{name:?} must hold one value"))),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let secs = read_sections(bytes)?;
    let w1 = section(&secs, "embed.rgb.w1")?;
    let kernel = section(&secs, "head.rgb.first.kernel")?;
    let (embed_dim, input_dim, num_classes, kernel_size) = match (w1.dims.as_slice(), kernel.dims.as_slice()) {
        ([e, d], [c, e2, k]) if e == e2 => (*e, *d, *c, *k),
        _ => return Err(Error::Checkpoint("inconsistent embedding/head shapes".into())),
    };
    if kernel_size.is_multiple_of(2) || num_classes == 0 || embed_dim == 0 {
        return Err(Error::Checkpoint("invalid network dimensions".into()));
    }
    let stream = || StreamParams {
        embedding: Embedding::zeros(input_dim, embed_dim),
        first: ConvHead::zeros(num_classes, embed_dim, kernel_size),
        adversarial: ConvHead::zeros(num_classes, embed_dim, kernel_size),
    };
    let adversarial = scalar(&secs, "arch.adversarial")? != 0.0;
    let mut network = Network {
        rgb: stream(),
        flow: stream(),
        fusion: Fusion::new(num_classes, scalar(&secs, "fusion.omega")?),
        arch: Architecture {
            adversarial,
            erase_ratio: scalar(&secs, "arch.erase_ratio")?,
        },
    };
    let reference = network.clone();
    for p in network.params_mut() {
        let s = section(&secs, &p.name)?;
        if s.dims != param_dims(&p.name, &reference) || s.data.len() != p.values.len() {
            return Err(Error::Checkpoint(format!("section {:?} has shape {:?}", p.name, s.dims)));
        }
        p.values.copy_from_slice(&s.data);
    }
    let mut sets: [Tensor2; 4] = Default::default();
    for (i, set) in sets.iter_mut().enumerate() {
        let name = center_name(i);
        let s = section(&secs, &name)?;
        if s.dims != [num_classes, embed_dim] {
            return Err(Error::Checkpoint(format!("section {name:?} has shape {:?}", s.dims)));
        }
        *set = Tensor2::new(num_classes, embed_dim, s.data.clone())?;
    }
    let bank = CenterBank::from_unit_sets(sets, 1e-9).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let expected = sections(&Checkpoint {
        network: network.clone(),
        bank: bank.clone(),
        topk_ratio: 1.0,
    })
    .len();
    if secs.len() != expected {
        return Err(Error::Checkpoint(format!("expected {expected} sections, found {}", secs.len())));
    }
    Ok(Checkpoint {
        network,
        bank,
        topk_ratio: scalar(&secs, "meta.topk_ratio")?,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ck)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(adversarial: bool, kernel_size: usize) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = Dims {
            input_dim: 5,
            embed_dim: 4,
            num_classes: 3,
            kernel_size,
        };
        let arch = Architecture {
            adversarial,
            erase_ratio: 7.0,
        };
        Checkpoint {
            network: Network::init(&mut rng, dims, arch, 0.6),
            bank: CenterBank::random(&mut rng, 3, 4),
            topk_ratio: 8.0,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for (adv, k) in [(true, 1), (false, 3)] {
            let ck = sample(adv, k);
            let bytes = encode(&ck);
            assert!(bytes.starts_with(b"A2CLPT-CKPT v1\n"));
            let back = decode(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample(true, 1);
        save(&path, &ck).unwrap();
        assert_eq!(load(&path).unwrap(), ck);
        assert!(matches!(load(&dir.path().join("none")), Err(Error::Io { .. })));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&sample(true, 1));
        assert!(decode(b"nope").is_err());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode(&nan), Err(Error::Checkpoint(_))));
    }
}
