//! Self-describing parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DVMK" u32:version str:kind
//! u32:n_meta  { str:key str:value }*
//! u32:n_tensors { str:name u32:rank u64:dim* f32:value* }*
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8. Tensor names carry
//! a group prefix (`codec/`, `noise/`, `disc/`, `adam/codec/m/`, ...), so
//! one container can hold a model, a noise layer or a full training state.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dinvmark_core::disc::{DiscConfig, Discriminator};
use dinvmark_core::inn::{InitMode, InnCodec, InnConfig};
use dinvmark_core::media::{ClipShape, MessageTemplate};
use dinvmark_core::nn::ParamStore;
use dinvmark_core::noise::{NoiseConfig, NoiseLayer};
use dinvmark_core::optim::{Adam, AdamConfig};
use dinvmark_core::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DVMK";
pub const VERSION: u32 = 1;

pub const KIND_MODEL: &str = "model";
pub const KIND_NOISE: &str = "noise";
pub const KIND_TRAIN: &str = "train";

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend((self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        Self::parse(bytes).map_err(|reason| Error::BadCheckpoint {
            path: path.to_path_buf(),
            reason,
        })
    }

    fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let kind = r.str()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            meta.insert(k, r.str()?);
        }
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(format!("{name}: rank {rank} is too large"));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor too large")?;
            let raw = r.take(n.checked_mul(4).ok_or("tensor too large")?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?));
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::write(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::read(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Short content hash used as the checkpoint id in reports and sidecars.
    pub fn id(&self) -> String {
        hex::encode(&Sha256::digest(self.to_bytes())[..8])
    }

    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::BadCheckpoint {
            path: PathBuf::from(format!("<{}>", self.kind)),
            reason: reason.into(),
        }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| self.bad(format!("missing metadata `{key}`")))
    }

    pub fn get_num<N: std::str::FromStr>(&self, key: &str) -> Result<N> {
        let v = self.get(key)?;
        v.parse().map_err(|_| self.bad(format!("metadata `{key}` = `{v}` is not a number")))
    }

    pub fn push_group(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    pub fn has_group(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    /// Loads tensors `prefix/<name>` into `store`, in store order.
    pub fn load_group(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let p = format!("{prefix}/");
        let entries: Vec<(&str, &Tensor<f32>)> = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|n| (n, t)))
            .collect();
        if entries.is_empty() {
            return Err(self.bad(format!("no `{prefix}` tensors")));
        }
        store.load(entries).map_err(|e| self.bad(e.to_string()))
    }

    fn group_tensors(&self, prefix: &str) -> Vec<Tensor<f32>> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(&p))
            .map(|(_, t)| t.clone())
            .collect()
    }
}

pub fn write_codec_meta(ck: &mut Checkpoint, codec: &InnCodec<f32>) {
    let c = codec.config();
    ck.set("inn.blocks", c.blocks);
    ck.set("inn.hidden", c.hidden);
    ck.set("inn.scale_bound", c.scale_bound);
    ck.set("clip.frames", c.clip.frames);
    ck.set("clip.height", c.clip.height);
    ck.set("clip.width", c.clip.width);
    ck.set("template.bits", c.template.bit_count());
    ck.set("template.side", c.template.side());
    ck.set("template.kind", if c.template.is_square() { "square" } else { "irregular" });
}

pub fn codec_checkpoint(codec: &InnCodec<f32>) -> Checkpoint {
    let mut ck = Checkpoint::new(KIND_MODEL);
    write_codec_meta(&mut ck, codec);
    ck.push_group("codec", codec.params());
    ck
}

pub fn codec_config(ck: &Checkpoint) -> Result<InnConfig> {
    let clip = ClipShape::new(ck.get_num("clip.frames")?, ck.get_num("clip.height")?, ck.get_num("clip.width")?);
    let bits: usize = ck.get_num("template.bits")?;
    let side: usize = ck.get_num("template.side")?;
    let template = match ck.get("template.kind")? {
        "square" if side * side == bits => MessageTemplate::square(side)?,
        "irregular" => MessageTemplate::irregular(bits, side)?,
        other => return Err(ck.bad(format!("template kind `{other}` with {bits} bits on {side}x{side}"))),
    };
    let mut config = InnConfig::new(clip, template)
        .with_blocks(ck.get_num("inn.blocks")?)
        .with_hidden(ck.get_num("inn.hidden")?);
    config.scale_bound = ck.get_num("inn.scale_bound")?;
    Ok(config)
}

/// The codec stored in a model or training checkpoint.
pub fn codec_from(ck: &Checkpoint) -> Result<InnCodec<f32>> {
    let mut codec = InnCodec::new(codec_config(ck)?, InitMode::Identity, 0)?;
    ck.load_group("codec", codec.params_mut())?;
    Ok(codec)
}

pub fn noise_checkpoint(noise: &NoiseLayer<f32>) -> Checkpoint {
    let mut ck = Checkpoint::new(KIND_NOISE);
    ck.set("noise.blocks", noise.config().blocks);
    ck.set("noise.hidden", noise.config().hidden);
    ck.set("noise.frozen", noise.is_frozen());
    ck.set("noise.checksum", hex::encode(noise.checksum()));
    ck.push_group("noise", noise.params());
    ck
}

pub fn noise_from(ck: &Checkpoint) -> Result<NoiseLayer<f32>> {
    let config = NoiseConfig {
        blocks: ck.get_num("noise.blocks")?,
        hidden: ck.get_num("noise.hidden")?,
    };
    let mut noise = NoiseLayer::new(config, true, 0)?;
    ck.load_group("noise", noise.params_mut()?)?;
    if ck.get("noise.frozen")? == "true" {
        noise.freeze();
    }
    Ok(noise)
}

/// Everything needed to continue training after `step` steps.
pub struct TrainState<'a> {
    pub step: usize,
    pub codec: &'a InnCodec<f32>,
    pub disc: &'a Discriminator<f32>,
    pub codec_opt: &'a Adam<f32>,
    pub disc_opt: &'a Adam<f32>,
    pub noise_checksum: [u8; 32],
}

pub fn train_checkpoint(state: &TrainState<'_>) -> Checkpoint {
    let mut ck = Checkpoint::new(KIND_TRAIN);
    write_codec_meta(&mut ck, state.codec);
    ck.set("train.step", state.step);
    ck.set("disc.width", state.disc.config().width);
    ck.set("disc.units", state.disc.config().units);
    ck.set("adam.codec.steps", state.codec_opt.steps_taken());
    ck.set("adam.disc.steps", state.disc_opt.steps_taken());
    ck.set("noise.checksum", hex::encode(state.noise_checksum));
    ck.push_group("codec", state.codec.params());
    ck.push_group("disc", state.disc.params());
    for (group, opt) in [("codec", state.codec_opt), ("disc", state.disc_opt)] {
        let (m, v) = opt.moments();
        for (kind, moments) in [("m", m), ("v", v)] {
            for (i, t) in moments.iter().enumerate() {
                ck.tensors.push((format!("adam/{group}/{kind}/{i:05}"), t.clone()));
            }
        }
    }
    ck
}

/// Restored training state: networks plus optimizers.
pub struct Restored {
    pub step: usize,
    pub codec: InnCodec<f32>,
    pub disc: Discriminator<f32>,
    pub codec_opt: Adam<f32>,
    pub disc_opt: Adam<f32>,
}

pub fn train_from(ck: &Checkpoint, adam: AdamConfig) -> Result<Restored> {
    if ck.kind != KIND_TRAIN {
        return Err(ck.bad(format!("expected a training checkpoint, found `{}`", ck.kind)));
    }
    let codec = codec_from(ck)?;
    let dc = DiscConfig {
        width: ck.get_num("disc.width")?,
        units: ck.get_num("disc.units")?,
    };
    let mut disc = Discriminator::new(dc, codec.config().clip, 0)?;
    ck.load_group("disc", disc.params_mut())?;
    let mut codec_opt = Adam::new(adam, codec.params());
    codec_opt.restore(
        ck.get_num("adam.codec.steps")?,
        ck.group_tensors("adam/codec/m"),
        ck.group_tensors("adam/codec/v"),
    )?;
    let mut disc_opt = Adam::new(adam, disc.params());
    disc_opt.restore(
        ck.get_num("adam.disc.steps")?,
        ck.group_tensors("adam/disc/m"),
        ck.group_tensors("adam/disc/v"),
    )?;
    Ok(Restored {
        step: ck.get_num("train.step")?,
        codec,
        disc,
        codec_opt,
        disc_opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dinvmark_core::inn::InnConfig;

    fn codec() -> InnCodec<f32> {
        let cfg = InnConfig::new(ClipShape::new(2, 16, 16), MessageTemplate::for_bits(12).unwrap())
            .with_blocks(2)
            .with_hidden(3);
        InnCodec::new(cfg, InitMode::Random { gain: 0.3 }, 7).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let c = codec();
        let ck = codec_checkpoint(&c);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, ck);
        let restored = codec_from(&back).unwrap();
        assert_eq!(restored.params().checksum(), c.params().checksum());
        assert_eq!(restored.config(), c.config());
    }

    #[test]
    fn noise_round_trip_keeps_frozen_flag() {
        let mut n = NoiseLayer::<f32>::new(NoiseConfig { blocks: 2, hidden: 3 }, false, 1).unwrap();
        n.freeze();
        let back = noise_from(&noise_checkpoint(&n)).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.checksum(), n.checksum());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = codec_checkpoint(&codec()).to_bytes();
        let p = Path::new("m.ckpt");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long, p).is_err());
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/m.ckpt")),
            Err(Error::MissingCheckpoint(_))
        ));
    }

    #[test]
    fn training_state_round_trip() {
        let c = codec();
        let d = Discriminator::<f32>::new(DiscConfig { width: 2, units: 1 }, c.config().clip, 3).unwrap();
        let adam = AdamConfig::default();
        let co = Adam::new(adam, c.params());
        let dopt = Adam::new(adam, d.params());
        let ck = train_checkpoint(&TrainState {
            step: 5,
            codec: &c,
            disc: &d,
            codec_opt: &co,
            disc_opt: &dopt,
            noise_checksum: [0; 32],
        });
        let r = train_from(&ck, adam).unwrap();
        assert_eq!(r.step, 5);
        assert_eq!(r.codec_opt, co);
        assert_eq!(r.disc.params().checksum(), d.params().checksum());
        assert_eq!(codec_from(&ck).unwrap().params().checksum(), c.params().checksum());
    }
}
