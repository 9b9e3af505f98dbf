use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::codec::{self, FrameReader, FrameWriter};

use super::{DenoiserConfig, Dense, DiffusionError, ToyDenoiser, VideoShape};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"VIMI-CKP1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Block {
    name: String,
    dims: Vec<usize>,
    values: Vec<f64>,
}

/// Named parameter blocks in insertion order. Several models can share a
/// file under different name prefixes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a block.
    pub fn insert(&mut self, name: &str, dims: Vec<usize>, values: Vec<f64>) {
        assert_eq!(dims.iter().product::<usize>(), values.len(), "block {name} size");
        let block = Block {
            name: name.to_owned(),
            dims,
            values,
        };
        match self.blocks.iter_mut().find(|b| b.name == name) {
            Some(b) => *b = block,
            None => self.blocks.push(block),
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| (b.dims.as_slice(), b.values.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|b| b.name.as_str())
    }

    pub fn contains_model(&self, prefix: &str) -> bool {
        self.get(&format!("{prefix}.config")).is_some()
    }

    pub fn insert_model(&mut self, prefix: &str, model: &ToyDenoiser) {
        let c = model.config();
        let config = vec![
            c.video.frames as f64,
            c.video.height as f64,
            c.video.width as f64,
            c.video.channels as f64,
            c.aux_channels as f64,
            c.d_cond as f64,
            c.hidden as f64,
            c.sigma_data,
        ];
        self.insert(&format!("{prefix}.config"), vec![config.len()], config);
        for (i, l) in model.layers().iter().enumerate() {
            let (rows, cols) = l.weight.shape();
            // Row-major on disk.
            let w: Vec<f64> = l.weight.transpose().iter().copied().collect();
            self.insert(&format!("{prefix}.l{i}.weight"), vec![rows, cols], w);
            self.insert(&format!("{prefix}.l{i}.bias"), vec![rows], l.bias.iter().copied().collect());
        }
    }

    pub fn model(&self, prefix: &str) -> Result<ToyDenoiser, DiffusionError> {
        let missing = |name: &str| DiffusionError::Corrupt(format!("checkpoint has no block {name}"));
        let cname = format!("{prefix}.config");
        let (_, c) = self.get(&cname).ok_or_else(|| missing(&cname))?;
        if c.len() != 8 {
            return Err(DiffusionError::Corrupt(format!("{cname}: expected 8 values")));
        }
        let u = |v: f64| v as usize;
        let config = DenoiserConfig {
            video: VideoShape::new(u(c[0]), u(c[1]), u(c[2]), u(c[3])),
            aux_channels: u(c[4]),
            d_cond: u(c[5]),
            hidden: u(c[6]),
            sigma_data: c[7],
        };
        let mut layers = Vec::with_capacity(3);
        for i in 0..3 {
            let wname = format!("{prefix}.l{i}.weight");
            let bname = format!("{prefix}.l{i}.bias");
            let (wd, w) = self.get(&wname).ok_or_else(|| missing(&wname))?;
            let (_, b) = self.get(&bname).ok_or_else(|| missing(&bname))?;
            if wd.len() != 2 {
                return Err(DiffusionError::Corrupt(format!("{wname}: expected 2 dims")));
            }
            layers.push(Dense {
                weight: DMatrix::from_row_slice(wd[0], wd[1], w),
                bias: DVector::from_column_slice(b),
            });
        }
        let layers: [Dense; 3] = layers.try_into().expect("three layers");
        ToyDenoiser::from_layers(config, layers).map_err(|e| DiffusionError::Corrupt(format!("{prefix}: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = FrameWriter::new(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION).u32(self.blocks.len() as u32);
        for b in &self.blocks {
            w.str(&b.name).u32(b.dims.len() as u32);
            for &d in &b.dims {
                w.u64(d as u64);
            }
            for &v in &b.values {
                w.f64(v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, DiffusionError> {
        let mut r = FrameReader::open(data, CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(DiffusionError::Corrupt(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..n {
            let name = r.string()?;
            let ndims = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndims.min(8));
            for _ in 0..ndims {
                dims.push(r.u64()? as usize);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&len| len <= data.len() / 8)
                .ok_or_else(|| DiffusionError::Corrupt(format!("block {name}: bad dims {dims:?}")))?;
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(r.f64()?);
            }
            if ckpt.get(&name).is_some() {
                return Err(DiffusionError::Corrupt(format!("duplicate block {name}")));
            }
            ckpt.blocks.push(Block { name, dims, values });
        }
        r.finish()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        Ok(codec::write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(aux: usize) -> ToyDenoiser {
        ToyDenoiser::new(
            DenoiserConfig {
                video: VideoShape::new(2, 3, 4, 3),
                aux_channels: aux,
                d_cond: 5,
                hidden: 7,
                sigma_data: 0.5,
            },
            9,
        )
    }

    #[test]
    fn models_roundtrip_under_prefixes() {
        let (base, up) = (model(0), model(3));
        let mut ckpt = Checkpoint::new();
        ckpt.insert_model("base", &base);
        ckpt.insert_model("up", &up);
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..9], CHECKPOINT_MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.model("base").unwrap(), base);
        assert_eq!(back.model("up").unwrap(), up);
        assert!(back.contains_model("up"));
        assert!(!back.contains_model("other"));
        assert!(matches!(back.model("other"), Err(DiffusionError::Corrupt(_))));
    }

    #[test]
    fn weights_are_row_major_on_disk() {
        let m = model(0);
        let mut ckpt = Checkpoint::new();
        ckpt.insert_model("m", &m);
        let (dims, w) = ckpt.get("m.l1.weight").unwrap();
        assert_eq!(dims, &[7, 7]);
        assert_eq!(w[1], m.layers()[1].weight[(0, 1)]);
    }

    #[test]
    fn corruption_is_detected() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert_model("m", &model(0));
        let mut bytes = ckpt.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(DiffusionError::Corrupt(_))));
    }
}
