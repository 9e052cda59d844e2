//! Versioned binary checkpoints: a small header (kind, config echo, config
//! hash, step, seed, free-form metadata) followed by a parameter store.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::binio::*;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ECMK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex SHA-256 of a config's canonical text.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the parameters belong to, e.g. `"codec"` or `"denoiser"`.
    pub kind: String,
    pub config: String,
    pub step: u64,
    pub seed: u64,
    /// JSON object with kind-specific extras.
    pub meta: String,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(w, CHECKPOINT_VERSION)?;
        write_str(w, &self.kind)?;
        write_str(w, &self.config)?;
        write_str(w, &self.config_hash())?;
        write_u64(w, self.step)?;
        write_u64(w, self.seed)?;
        write_str(w, &self.meta)?;
        self.params.write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        expect_magic(r, CHECKPOINT_MAGIC)?;
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let kind = read_str(r)?;
        let config = read_str(r)?;
        let hash = read_str(r)?;
        if hash != config_hash(&config) {
            return Err(Error::Format("checkpoint config hash does not match its config text".into()));
        }
        let step = read_u64(r)?;
        let seed = read_u64(r)?;
        let meta = read_str(r)?;
        let params = ParamStore::read_from(r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { kind, config, step, seed, meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Loads and checks the kind tag.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != kind {
            return Err(Error::ConfigMismatch(format!("{} holds a {} checkpoint, expected {kind}", path.display(), ck.kind)));
        }
        Ok(ck)
    }
}
