//! Checkpointing: every parameter of the tagger, generator, and
//! discriminator, both optimizer states, the step counter, the RNG cursor,
//! and the full training config — enough to evaluate or run removal without
//! any sidecar file.
//!
//! The format is a little-endian length-prefixed binary stream. The config
//! travels as its canonical TOML text together with a SHA-256 digest, so a
//! corrupted or hand-edited file is rejected instead of silently producing
//! a differently-shaped model. The round-trip contract is bitwise: a saved
//! and reloaded checkpoint produces identical forward outputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::losses::DiscriminatorP;
use crate::model::{register_model, ModelP};
use crate::nn::{AdamW, ParamStore};
use crate::runner::config::TrainConfig;
use crate::textproc::{Tagger, TaggerConfig, Vocabulary};
use crate::{Result, RorError};

const MAGIC: &[u8; 8] = b"RORCKPT1";

fn ck<T>(r: std::io::Result<T>, what: &str) -> Result<T> {
    r.map_err(|e| RorError::Checkpoint(format!("{what}: {e}")))
}

struct W<'a>(BufWriter<&'a mut File>);

impl W<'_> {
    fn u64(&mut self, v: u64) -> Result<()> {
        ck(self.0.write_all(&v.to_le_bytes()), "write u64")
    }
    fn u128(&mut self, v: u128) -> Result<()> {
        ck(self.0.write_all(&v.to_le_bytes()), "write u128")
    }
    fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        self.u64(vs.len() as u64)?;
        for v in vs {
            ck(self.0.write_all(&v.to_le_bytes()), "write f64")?;
        }
        Ok(())
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u64(b.len() as u64)?;
        ck(self.0.write_all(b), "write bytes")
    }
    fn string(&mut self, s: &str) -> Result<()> {
        self.bytes(s.as_bytes())
    }
}

struct R<'a>(BufReader<&'a mut File>);

impl R<'_> {
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        ck(self.0.read_exact(&mut b), "read u64")?;
        Ok(u64::from_le_bytes(b))
    }
    fn u128(&mut self) -> Result<u128> {
        let mut b = [0u8; 16];
        ck(self.0.read_exact(&mut b), "read u128")?;
        Ok(u128::from_le_bytes(b))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let mut out = vec![0.0; n];
        for v in &mut out {
            let mut b = [0u8; 8];
            ck(self.0.read_exact(&mut b), "read f64")?;
            *v = f64::from_le_bytes(b);
        }
        Ok(out)
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        let mut b = vec![0u8; n];
        ck(self.0.read_exact(&mut b), "read bytes")?;
        Ok(b)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?)
            .map_err(|e| RorError::Checkpoint(format!("non-utf8 string: {e}")))
    }
}

fn write_store(w: &mut W, store: &ParamStore) -> Result<()> {
    w.u64(store.len() as u64)?;
    for id in store.ids() {
        w.string(store.name(id))?;
        let dims = store.dims(id);
        w.u64(dims.len() as u64)?;
        for &d in dims {
            w.u64(d as u64)?;
        }
        w.f64s(store.data(id))?;
    }
    Ok(())
}

/// Fills an already-registered store, insisting that names and shapes line
/// up entry for entry — a mismatch means the config doesn't describe the
/// stored model.
fn read_store_into(r: &mut R, store: &mut ParamStore) -> Result<()> {
    let n = r.u64()? as usize;
    if n != store.len() {
        return Err(RorError::Checkpoint(format!(
            "store has {n} tensors, expected {}",
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = r.string()?;
        if name != store.name(id) {
            return Err(RorError::Checkpoint(format!(
                "parameter order mismatch: {name} vs {}",
                store.name(id)
            )));
        }
        let rank = r.u64()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        if dims != store.dims(id) {
            return Err(RorError::Checkpoint(format!(
                "shape mismatch for {name}: {dims:?} vs {:?}",
                store.dims(id)
            )));
        }
        let data = r.f64s()?;
        if data.len() != store.data(id).len() {
            return Err(RorError::Checkpoint(format!("length mismatch for {name}")));
        }
        store.data_mut(id).copy_from_slice(&data);
    }
    Ok(())
}

fn write_adam(w: &mut W, opt: &AdamW) -> Result<()> {
    let (t, m, v) = opt.state();
    w.u64(t)?;
    w.u64(m.len() as u64)?;
    for slot in m {
        w.f64s(slot)?;
    }
    w.u64(v.len() as u64)?;
    for slot in v {
        w.f64s(slot)?;
    }
    Ok(())
}

fn read_adam(r: &mut R, opt: &mut AdamW) -> Result<()> {
    let t = r.u64()?;
    let nm = r.u64()? as usize;
    let mut m = Vec::with_capacity(nm);
    for _ in 0..nm {
        m.push(r.f64s()?);
    }
    let nv = r.u64()? as usize;
    let mut v = Vec::with_capacity(nv);
    for _ in 0..nv {
        v.push(r.f64s()?);
    }
    opt.restore(t, m, v);
    Ok(())
}

/// A complete training artifact.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub epoch: u64,
    /// Learning rate in effect when the checkpoint was written.
    pub lr: f64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub vocab: Vocabulary,
    pub tagger: Tagger,
    pub gen_store: ParamStore,
    pub model: ModelP,
    pub disc_store: ParamStore,
    pub disc: DiscriminatorP,
    pub gen_opt: AdamW,
    pub disc_opt: AdamW,
}

/// Borrowed view over everything a checkpoint stores, so the training loop
/// can write periodic checkpoints without surrendering its state.
pub struct CheckpointView<'a> {
    pub config: &'a TrainConfig,
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub vocab: &'a Vocabulary,
    pub tagger: &'a Tagger,
    pub gen_store: &'a ParamStore,
    pub disc_store: &'a ParamStore,
    pub gen_opt: &'a AdamW,
    pub disc_opt: &'a AdamW,
}

impl CheckpointView<'_> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file =
            File::create(path).map_err(|e| RorError::io(path.display().to_string(), e))?;
        let mut w = W(BufWriter::new(&mut file));
        ck(w.0.write_all(MAGIC), "write magic")?;

        let config_toml = self.config.to_toml()?;
        let digest = Sha256::digest(config_toml.as_bytes());
        w.string(&config_toml)?;
        w.bytes(&digest)?;

        w.u64(self.step)?;
        w.u64(self.epoch)?;
        w.f64s(&[self.lr])?;
        w.bytes(&self.rng_seed)?;
        w.u128(self.rng_word_pos)?;

        w.u64(self.vocab.tokens().len() as u64)?;
        for t in self.vocab.tokens() {
            w.string(t)?;
        }

        let tagger_toml = toml::to_string(&self.tagger.cfg)
            .map_err(|e| RorError::Checkpoint(format!("tagger config: {e}")))?;
        w.string(&tagger_toml)?;
        w.u64(self.tagger.vocab_size as u64)?;
        write_store(&mut w, self.tagger.store())?;

        write_store(&mut w, self.gen_store)?;
        write_store(&mut w, self.disc_store)?;
        write_adam(&mut w, self.gen_opt)?;
        write_adam(&mut w, self.disc_opt)?;
        ck(w.0.flush(), "flush")
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        CheckpointView {
            config: &self.config,
            step: self.step,
            epoch: self.epoch,
            lr: self.lr,
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng_word_pos,
            vocab: &self.vocab,
            tagger: &self.tagger,
            gen_store: &self.gen_store,
            disc_store: &self.disc_store,
            gen_opt: &self.gen_opt,
            disc_opt: &self.disc_opt,
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file =
            File::open(path).map_err(|e| RorError::io(path.display().to_string(), e))?;
        let mut r = R(BufReader::new(&mut file));
        let mut magic = [0u8; 8];
        ck(r.0.read_exact(&mut magic), "read magic")?;
        if &magic != MAGIC {
            return Err(RorError::Checkpoint("not a checkpoint file".into()));
        }

        let config_toml = r.string()?;
        let digest = r.bytes()?;
        if Sha256::digest(config_toml.as_bytes()).as_slice() != digest.as_slice() {
            return Err(RorError::Checkpoint("config digest mismatch".into()));
        }
        let config: TrainConfig = toml::from_str(&config_toml)?;
        config.validate()?;

        let step = r.u64()?;
        let epoch = r.u64()?;
        let lr = r.f64s()?;
        let lr = *lr
            .first()
            .ok_or_else(|| RorError::Checkpoint("missing lr".into()))?;
        let seed_bytes = r.bytes()?;
        let rng_seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| RorError::Checkpoint("bad rng seed length".into()))?;
        let rng_word_pos = r.u128()?;

        let n_tokens = r.u64()? as usize;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            tokens.push(r.string()?);
        }
        let vocab = Vocabulary::from_tokens(tokens);

        let tagger_cfg: TaggerConfig = toml::from_str(&r.string()?)?;
        let tagger_vocab = r.u64()? as usize;
        let mut tagger = Tagger::new(tagger_vocab, tagger_cfg, 0);
        read_store_into(&mut r, &mut tagger.store)?;

        // Registration is deterministic, so rebuilding with the stored
        // config recreates every name and shape before the data lands.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut gen_store = ParamStore::new();
        let model = register_model(&mut gen_store, &config.model, vocab.len(), &mut rng)?;
        read_store_into(&mut r, &mut gen_store)?;

        let mut disc_store = ParamStore::new();
        let disc = DiscriminatorP::register(
            &mut disc_store,
            config.disc_base,
            config.disc_preset,
            &mut rng,
        );
        read_store_into(&mut r, &mut disc_store)?;

        let mut gen_opt = AdamW::new(&gen_store, config.optim.adam());
        read_adam(&mut r, &mut gen_opt)?;
        let mut disc_opt = AdamW::new(&disc_store, config.optim.adam());
        read_adam(&mut r, &mut disc_opt)?;

        Ok(Checkpoint {
            config,
            step,
            epoch,
            lr,
            rng_seed,
            rng_word_pos,
            vocab,
            tagger,
            gen_store,
            model,
            disc_store,
            disc,
            gen_opt,
            disc_opt,
        })
    }
}
