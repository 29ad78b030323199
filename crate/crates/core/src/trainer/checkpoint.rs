//! Binary checkpoint container, also used for world and dataset fixtures.
//!
//! Layout (little-endian): magic `FDTCKPT1`; format `u32`; config length
//! `u32`; config text (UTF-8); tensor records until the trailer; CRC32 of
//! every preceding byte. A tensor record is: name length `u16`, name, dtype
//! `u8` (0 = f64, 1 = f32), rank `u8`, `rank × u64` dims, raw data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Params;
use crate::numkit::tensor::Tensor;
use crate::rng::Rng;
use crate::synthworld::{ConceptWorld, ElementLabel, RawPair};
use crate::trainer::config::{StorageDtype, TrainConfig};
use crate::trainer::optim::OptimizerState;

pub const MAGIC: &[u8; 8] = b"FDTCKPT1";
pub const FORMAT_VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor<f64>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: Params<f64>,
    pub optimizer: OptimizerState<f64>,
    pub rng: Rng,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f64>, dtype: StorageDtype) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(match dtype {
        StorageDtype::F64 => 0,
        StorageDtype::F32 => 1,
    });
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            StorageDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            StorageDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
}

/// Writes the container: header with `text`, the tensor records, CRC32.
pub fn write_container(text: &str, tensors: &[(String, &Tensor<f64>, StorageDtype)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, t, dtype) in tensors {
        write_tensor(&mut out, name, t, *dtype);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let dtype = ckpt.config.checkpoint_dtype;
    let step = Tensor::scalar(ckpt.optimizer.step as f64);
    let halves: Vec<f64> = ckpt
        .rng
        .state()
        .iter()
        .flat_map(|w| [(w >> 32) as f64, (w & 0xffff_ffff) as f64])
        .collect();
    let rng = Tensor::vector(halves);
    let mut tensors = Vec::new();
    for (name, _, t) in ckpt.params.tensors() {
        tensors.push((format!("param.{name}"), t, dtype));
    }
    for (prefix, moments) in [("adam.m", &ckpt.optimizer.m), ("adam.v", &ckpt.optimizer.v)] {
        for (name, _, t) in moments.tensors() {
            tensors.push((format!("{prefix}.{name}"), t, StorageDtype::F64));
        }
    }
    tensors.push(("state.step".into(), &step, StorageDtype::F64));
    tensors.push(("state.rng".into(), &rng, StorageDtype::F64));
    write_container(&ckpt.config.to_text(), &tensors)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Verifies and parses a container into its header text and named tensors
/// (f32 records are widened to f64).
pub fn read_container(bytes: &[u8]) -> Result<(String, NamedTensors)> {
    let header = MAGIC.len() + 8;
    if bytes.len() < header + 4 {
        return Err(Error::Checkpoint(format!("truncated: {} bytes", bytes.len())));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version > FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 12 };
    let text_len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(text_len, "config")?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?
        .to_string();

    let mut tensors = NamedTensors::new();
    while r.pos < body.len() {
        let name_len = r.u16("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            0 => r
                .take(n * 8, &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            1 => r
                .take(n * 4, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => return Err(Error::Checkpoint(format!("unknown dtype {other} for `{name}`"))),
        };
        tensors.push((name, Tensor::from_parts(shape, data)?));
    }
    Ok((text, tensors))
}

/// Removes the tensor called `name`, checking its shape against `shape`.
pub fn take_tensor(tensors: &mut NamedTensors, name: &str, shape: &[usize]) -> Result<Tensor<f64>> {
    let idx = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
    let (_, t) = tensors.swap_remove(idx);
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has shape {:?}, expected {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(t)
}

/// Parses and verifies checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (text, mut tensors) = read_container(bytes)?;
    let config = TrainConfig::parse(&text)?;

    let mut take = |name: &str, like: &Tensor<f64>| take_tensor(&mut tensors, name, like.shape());
    let mut params = Params::zeros(&config.dims());
    let mut m = params.clone();
    let mut v = params.clone();
    for (prefix, target) in [("param", &mut params), ("adam.m", &mut m), ("adam.v", &mut v)] {
        for (name, _, t) in target.tensors_mut() {
            *t = take(&format!("{prefix}.{name}"), t)?;
        }
    }
    let step = take("state.step", &Tensor::zeros(&[1]))?.data()[0] as u64;
    let halves = take("state.rng", &Tensor::zeros(&[8]))?;
    let h = halves.data();
    let mut s = [0u64; 4];
    for (i, w) in s.iter_mut().enumerate() {
        *w = ((h[2 * i] as u64) << 32) | (h[2 * i + 1] as u64);
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer: OptimizerState { m, v, step },
        rng: Rng::from_state(s),
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// Header text of a world fixture.
fn world_header(world: &ConceptWorld, pairs: usize) -> String {
    format!(
        "kind = world\nk_true = {}\ninput_dim = {}\nnoise_sigma = {:?}\ndistractor_rate = {:?}\nsalience_jitter = {:?}\nrng_seed = {}\npairs = {pairs}\n",
        world.k_true, world.input_dim, world.noise_sigma, world.distractor_rate, world.salience_jitter, world.rng_seed
    )
}

fn label_tensor(labels: &[ElementLabel]) -> Tensor<f64> {
    Tensor::vector(
        labels
            .iter()
            .map(|l| match l {
                ElementLabel::Concept(c) => *c as f64,
                ElementLabel::Distractor => -1.0,
            })
            .collect(),
    )
}

fn labels_from(t: &Tensor<f64>) -> Vec<ElementLabel> {
    t.data()
        .iter()
        .map(|&v| if v < 0.0 { ElementLabel::Distractor } else { ElementLabel::Concept(v as usize) })
        .collect()
}

/// Serializes a world and optionally a sampled dataset into the checkpoint
/// container, for sharing fixtures.
pub fn encode_world(world: &ConceptWorld, pairs: &[RawPair]) -> Vec<u8> {
    let mut owned: Vec<(String, Tensor<f64>)> = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        owned.push((format!("pair.{i}.concepts"), Tensor::vector(p.concept_set.iter().map(|&c| c as f64).collect())));
        owned.push((format!("pair.{i}.saliences"), Tensor::vector(p.saliences.clone())));
        owned.push((format!("pair.{i}.patch_labels"), label_tensor(&p.patch_labels)));
        owned.push((format!("pair.{i}.token_labels"), label_tensor(&p.token_labels)));
    }
    let mut tensors = vec![
        ("world.image_emitters".to_string(), &world.image_emitters, StorageDtype::F64),
        ("world.text_emitters".to_string(), &world.text_emitters, StorageDtype::F64),
    ];
    for (i, p) in pairs.iter().enumerate() {
        tensors.push((format!("pair.{i}.patches"), &p.patch_inputs, StorageDtype::F64));
        tensors.push((format!("pair.{i}.tokens"), &p.token_inputs, StorageDtype::F64));
    }
    tensors.extend(owned.iter().map(|(n, t)| (n.clone(), t, StorageDtype::F64)));
    write_container(&world_header(world, pairs.len()), &tensors)
}

pub fn decode_world(bytes: &[u8]) -> Result<(ConceptWorld, Vec<RawPair>)> {
    let (text, mut tensors) = read_container(bytes)?;
    let field = |key: &str| -> Result<&str> {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim())
            .ok_or_else(|| Error::Checkpoint(format!("world header lacks `{key}`")))
    };
    let num = |key: &str| -> Result<f64> {
        field(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("world header field `{key}` is not a number")))
    };
    if field("kind")? != "world" {
        return Err(Error::Checkpoint("container does not hold a world".into()));
    }
    let k_true = num("k_true")? as usize;
    let input_dim = num("input_dim")? as usize;
    let rng_seed: u64 = field("rng_seed")?
        .parse()
        .map_err(|_| Error::Checkpoint("world header field `rng_seed` is not an integer".into()))?;
    let world = ConceptWorld {
        k_true,
        input_dim,
        image_emitters: take_tensor(&mut tensors, "world.image_emitters", &[k_true, input_dim])?,
        text_emitters: take_tensor(&mut tensors, "world.text_emitters", &[k_true, input_dim])?,
        noise_sigma: num("noise_sigma")?,
        distractor_rate: num("distractor_rate")?,
        salience_jitter: num("salience_jitter")?,
        rng_seed,
    };
    let count = num("pairs")? as usize;
    let mut pairs = Vec::with_capacity(count);
    let mut take_any = |name: String| -> Result<Tensor<f64>> {
        let idx = tensors
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        Ok(tensors.swap_remove(idx).1)
    };
    for i in 0..count {
        pairs.push(RawPair {
            patch_inputs: take_any(format!("pair.{i}.patches"))?,
            token_inputs: take_any(format!("pair.{i}.tokens"))?,
            concept_set: take_any(format!("pair.{i}.concepts"))?.data().iter().map(|&c| c as usize).collect(),
            saliences: take_any(format!("pair.{i}.saliences"))?.into_data(),
            patch_labels: labels_from(&take_any(format!("pair.{i}.patch_labels"))?),
            token_labels: labels_from(&take_any(format!("pair.{i}.token_labels"))?),
        });
    }
    Ok((world, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut config = TrainConfig::default();
        config.codebook_size = 4;
        config.embed_dim = 3;
        config.fdt_dim = 2;
        config.input_dim = 5;
        let mut rng = Rng::new(17);
        let params = Params::init(&config.dims(), config.tau_init, &mut rng);
        let mut optimizer = OptimizerState::new(&params);
        optimizer.step = 12;
        optimizer.m.codebook.tokens.data_mut()[1] = 0.25;
        Checkpoint { config, params, optimizer, rng }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = encode(&c);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn f32_storage_round_trips_bytes() {
        let mut c = sample();
        c.config.checkpoint_dtype = StorageDtype::F32;
        let bytes = encode(&c);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        let a = c.params.codebook.tokens.data()[0];
        let b = back.params.codebook.tokens.data()[0];
        assert_eq!(b, a as f32 as f64);
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = encode(&sample());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn newer_version_rejected() {
        let mut bytes = encode(&sample());
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Version { found: 2, supported: 1 })));
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..10]).is_err());
        let mut cut = bytes[..bytes.len() - 20].to_vec();
        let crc = crc32fast::hash(&cut);
        cut.extend_from_slice(&crc.to_le_bytes());
        let err = decode(&cut).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn world_fixture_round_trips() {
        use crate::synthworld::{generate_world, sample_dataset, SamplingRanges};
        let world = generate_world(2, 5, 9, 0.1, 0.3, 0.5).unwrap();
        let pairs = sample_dataset(&world, &SamplingRanges::default(), 7, 3).unwrap();
        let bytes = encode_world(&world, &pairs);
        let (w, p) = decode_world(&bytes).unwrap();
        assert_eq!(w, world);
        assert_eq!(p, pairs);
        assert_eq!(encode_world(&w, &p), bytes);
        assert!(decode_world(&encode(&sample())).is_err());
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..8], b"FDTCKPT1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let cfg_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let first = 16 + cfg_len;
        let name_len = u16::from_le_bytes(bytes[first..first + 2].try_into().unwrap()) as usize;
        assert_eq!(&bytes[first + 2..first + 2 + name_len], b"param.image_encoder.hidden.weight");
        assert_eq!(bytes[first + 2 + name_len], 0);
        assert_eq!(bytes[first + 3 + name_len], 2);
    }
}
