//! Named parameter storage and the binary checkpoint format.
//!
//! Parameters live in a `BTreeMap`, so iteration is always lexicographic by
//! name. Master values are f64; checkpoints store f32 little-endian, and a
//! write -> read -> write cycle is byte identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HCGCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { params: BTreeMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.params.insert(name.to_string(), Param { shape, values });
    }

    /// Lexicographic iteration (BTreeMap order).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }

    /// Weight init: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], drawn
    /// from a stream derived from (store seed, parameter name) so the
    /// values do not depend on insertion order.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, name));
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, shape.to_vec(), values);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        let n = shape.iter().product();
        self.insert(name, shape.to_vec(), vec![0.0; n]);
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) {
        let n = shape.iter().product();
        self.insert(name, shape.to_vec(), vec![1.0; n]);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for (name, p) in self.iter() {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(p.shape.len() as u64).to_le_bytes());
            for &e in &p.shape {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in &p.values {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path, seed: u64) -> Result<ParamStore> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() < 8 || &buf[..8] != CHECKPOINT_MAGIC {
            return Err(TensorError::CheckpointFormat("bad magic".into()));
        }
        let mut store = ParamStore::new(seed);
        let mut off = 8;
        let take = |off: &mut usize, n: usize| -> Result<std::ops::Range<usize>> {
            if *off + n > buf.len() {
                return Err(TensorError::CheckpointFormat("truncated".into()));
            }
            let r = *off..*off + n;
            *off += n;
            Ok(r)
        };
        while off < buf.len() {
            let r = take(&mut off, 8)?;
            let name_len = u64::from_le_bytes(buf[r].try_into().unwrap()) as usize;
            let r = take(&mut off, name_len)?;
            let name = String::from_utf8(buf[r].to_vec())
                .map_err(|_| TensorError::CheckpointFormat("bad name".into()))?;
            let r = take(&mut off, 8)?;
            let rank = u64::from_le_bytes(buf[r].try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let r = take(&mut off, 8)?;
                shape.push(u64::from_le_bytes(buf[r].try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let r = take(&mut off, 4 * n)?;
            let values = buf[r]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            store.insert(&name, shape, values);
        }
        Ok(store)
    }
}

fn mix_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded with the master seed via splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
