//! Binary checkpoint files: parameters, optimizer accumulators, and the
//! loop bookkeeping needed to resume mid-run.
//!
//! The layout is little-endian throughout: magic bytes, a format
//! version, length-prefixed `key=value` metadata, the tensor records
//! sorted by name, and a trailing CRC32 over everything before it.
//! Serialization is canonical, so saving the same state twice yields
//! byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::model::{HyperParams, ModelParams, VocabSizes};
use crate::tensor::DenseTensor;

use super::{AdadeltaState, Result, TrainConfig, TrainError, TrainSession};

const MAGIC: &[u8; 8] = b"HFANCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything a resumed or evaluated run needs from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hp: HyperParams,
    pub sizes: VocabSizes,
    pub params: ModelParams,
    pub state: AdadeltaState,
    /// Next epoch to run when resuming.
    pub next_epoch: usize,
    pub seed: u64,
    pub best_f1: f64,
    pub stale: usize,
    pub freeze_word_emb: bool,
    pub zero_entity: bool,
    /// Vocabulary frequency floor used when the corpus was encoded.
    pub min_count: usize,
    /// Token budget per review used when the corpus was encoded.
    pub max_total_len: usize,
}

impl Checkpoint {
    /// Snapshots a session together with the settings that shaped it.
    /// `min_count` and `max_total_len` record how the corpus was
    /// encoded, so inference can rebuild the identical pipeline.
    pub fn from_session(
        session: &TrainSession,
        hp: &HyperParams,
        config: &TrainConfig,
        min_count: usize,
        max_total_len: usize,
    ) -> Self {
        Checkpoint {
            hp: *hp,
            sizes: session.params.sizes(),
            params: session.params.clone(),
            state: session.state.clone(),
            next_epoch: session.next_epoch,
            seed: config.seed,
            best_f1: session.best_f1,
            stale: session.stale,
            freeze_word_emb: config.freeze_word_emb,
            zero_entity: config.zero_entity,
            min_count,
            max_total_len,
        }
    }

    /// Turns the snapshot back into a runnable session.
    pub fn into_session(self) -> TrainSession {
        TrainSession {
            params: self.params,
            state: self.state,
            next_epoch: self.next_epoch,
            best_f1: self.best_f1,
            stale: self.stale,
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, tensor: &DenseTensor) {
    put_u64(buf, name.len() as u64);
    buf.extend_from_slice(name.as_bytes());
    put_u64(buf, tensor.shape().len() as u64);
    for &dim in tensor.shape() {
        put_u64(buf, dim as u64);
    }
    for &x in tensor.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Writes the checkpoint. The file is complete or absent; nothing is
/// flushed incrementally.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    let mut put = |k: &str, v: String| meta.insert(k.to_string(), v);
    put("d", ckpt.hp.d.to_string());
    put("m", ckpt.hp.m.to_string());
    put("r", ckpt.hp.r.to_string());
    put("beta", ckpt.hp.beta.to_string());
    put("l", ckpt.hp.l.to_string());
    put("t", ckpt.hp.t.to_string());
    put("n_tokens", ckpt.sizes.n_tokens.to_string());
    put("n_users", ckpt.sizes.n_users.to_string());
    put("n_products", ckpt.sizes.n_products.to_string());
    put("epoch", ckpt.next_epoch.to_string());
    put("seed", ckpt.seed.to_string());
    put("best_f1", ckpt.best_f1.to_string());
    put("stale", ckpt.stale.to_string());
    put("rho", ckpt.state.rho.to_string());
    put("eps", ckpt.state.eps.to_string());
    put("lr", ckpt.state.lr.to_string());
    put("freeze_word_emb", ckpt.freeze_word_emb.to_string());
    put("zero_entity", ckpt.zero_entity.to_string());
    put("min_count", ckpt.min_count.to_string());
    put("max_total_len", ckpt.max_total_len.to_string());

    let mut records: BTreeMap<String, &DenseTensor> = BTreeMap::new();
    for (name, tensor) in ckpt.params.tensors() {
        records.insert(format!("param.{name}"), tensor);
    }
    for (name, tensor) in ckpt.state.eg2() {
        records.insert(format!("eg2.{name}"), tensor);
    }
    for (name, tensor) in ckpt.state.edx2() {
        records.insert(format!("edx2.{name}"), tensor);
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let meta_text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_u64(&mut buf, meta_text.len() as u64);
    buf.extend_from_slice(meta_text.as_bytes());
    put_u64(&mut buf, records.len() as u64);
    for (name, tensor) in &records {
        put_tensor(&mut buf, name, tensor);
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(TrainError::Corrupt {
                reason: "unexpected end of data".to_string(),
            }),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TrainError::Corrupt {
            reason: "metadata is not valid UTF-8".to_string(),
        })
    }

    fn exhausted(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn meta_value<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key).map(String::as_str).ok_or_else(|| TrainError::Corrupt {
        reason: format!("missing metadata key {key:?}"),
    })
}

fn parse_meta<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta_value(meta, key)?.parse().map_err(|_| TrainError::Corrupt {
        reason: format!("metadata key {key:?} holds an unparsable value"),
    })
}

/// Reads and fully validates a checkpoint. The checksum is verified
/// before any field is interpreted, so a damaged file never yields a
/// partial state.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(TrainError::Corrupt {
            reason: "file is too short to be a checkpoint".to_string(),
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(TrainError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::IncompatibleVersion { found: version });
    }
    let body_end = bytes.len() - 4;
    let stored_crc = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body_end]) != stored_crc {
        return Err(TrainError::ChecksumMismatch);
    }

    let mut cur = Cursor { bytes: &bytes[12..body_end], pos: 0 };
    let meta_text = cur.string()?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| TrainError::Corrupt {
            reason: format!("malformed metadata line {line:?}"),
        })?;
        meta.insert(k.to_string(), v.to_string());
    }

    let n_records = cur.u64()? as usize;
    let mut params_map = BTreeMap::new();
    let mut eg2 = BTreeMap::new();
    let mut edx2 = BTreeMap::new();
    for _ in 0..n_records {
        let name = cur.string()?;
        let rank = cur.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cur.f64()?);
        }
        let tensor = DenseTensor::new(shape, data).map_err(|e| TrainError::Corrupt {
            reason: format!("invalid tensor record {name:?}: {e}"),
        })?;
        let dest = if let Some(rest) = name.strip_prefix("param.") {
            params_map.insert(rest.to_string(), tensor)
        } else if let Some(rest) = name.strip_prefix("eg2.") {
            eg2.insert(rest.to_string(), tensor)
        } else if let Some(rest) = name.strip_prefix("edx2.") {
            edx2.insert(rest.to_string(), tensor)
        } else {
            return Err(TrainError::Corrupt {
                reason: format!("tensor record {name:?} has an unknown prefix"),
            });
        };
        if dest.is_some() {
            return Err(TrainError::Corrupt {
                reason: format!("duplicate tensor record {name:?}"),
            });
        }
    }
    if !cur.exhausted() {
        return Err(TrainError::Corrupt {
            reason: "trailing bytes after the last tensor record".to_string(),
        });
    }

    let d: usize = parse_meta(&meta, "d")?;
    let m: usize = parse_meta(&meta, "m")?;
    let hp = HyperParams::new(
        d,
        m,
        parse_meta(&meta, "r")?,
        parse_meta(&meta, "beta")?,
        parse_meta(&meta, "l")?,
        parse_meta(&meta, "t")?,
    )?;
    let sizes = VocabSizes {
        n_tokens: parse_meta(&meta, "n_tokens")?,
        n_users: parse_meta(&meta, "n_users")?,
        n_products: parse_meta(&meta, "n_products")?,
    };
    let param_names: Vec<&String> = params_map.keys().collect();
    if eg2.keys().collect::<Vec<_>>() != param_names || edx2.keys().collect::<Vec<_>>() != param_names
    {
        return Err(TrainError::Corrupt {
            reason: "optimizer state does not cover the parameter set".to_string(),
        });
    }
    let params = ModelParams::from_tensors(params_map, d, m, sizes);
    let state = AdadeltaState::from_parts(
        eg2,
        edx2,
        parse_meta(&meta, "rho")?,
        parse_meta(&meta, "eps")?,
        parse_meta(&meta, "lr")?,
    );
    Ok(Checkpoint {
        hp,
        sizes,
        params,
        state,
        next_epoch: parse_meta(&meta, "epoch")?,
        seed: parse_meta(&meta, "seed")?,
        best_f1: parse_meta(&meta, "best_f1")?,
        stale: parse_meta(&meta, "stale")?,
        freeze_word_emb: parse_meta(&meta, "freeze_word_emb")?,
        zero_entity: parse_meta(&meta, "zero_entity")?,
        min_count: parse_meta(&meta, "min_count")?,
        max_total_len: parse_meta(&meta, "max_total_len")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode_all, generate_synthetic, EncodeLimits, SynthSpec};
    use crate::corpus::EncodedReview;

    fn small_setup() -> (Vec<EncodedReview>, VocabSizes, HyperParams, TrainConfig) {
        let spec = SynthSpec {
            n_users: 10,
            n_products: 5,
            n_reviews: 24,
            spam_rate: 0.25,
            n_templates: 4,
        };
        let reviews = generate_synthetic(31, &spec).unwrap();
        let vocab = build_vocab(&reviews, 1);
        let limits = EncodeLimits { l: 4, t: 8, max_total: 32 };
        let encoded = encode_all(&reviews, &vocab, &limits);
        let sizes = VocabSizes {
            n_tokens: vocab.n_tokens(),
            n_users: vocab.n_users(),
            n_products: vocab.n_products(),
        };
        let hp = HyperParams::new(4, 2, 1, 1.0, 4, 8).unwrap();
        let config = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
        (encoded, sizes, hp, config)
    }

    #[test]
    fn round_trip_preserves_everything() {
        let (encoded, sizes, hp, config) = small_setup();
        let mut session = TrainSession::fresh(&hp, sizes, &config).unwrap();
        session.run(&encoded, &encoded[..6], &hp, &config, |_| {}).unwrap();
        let ckpt = Checkpoint::from_session(&session, &hp, &config, 1, 32);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn serialization_is_canonical() {
        let (_, sizes, hp, config) = small_setup();
        let session = TrainSession::fresh(&hp, sizes, &config).unwrap();
        let ckpt = Checkpoint::from_session(&session, &hp, &config, 1, 32);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_checkpoint(&a, &ckpt).unwrap();
        save_checkpoint(&b, &ckpt).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn resuming_after_one_epoch_matches_a_straight_run() {
        let (encoded, sizes, hp, config) = small_setup();
        let valid = encoded[..6].to_vec();
        let train = &encoded[6..];

        let two = TrainConfig { epochs: 2, ..config.clone() };
        let mut straight = TrainSession::fresh(&hp, sizes, &two).unwrap();
        straight.run(train, &valid, &hp, &two, |_| {}).unwrap();

        let one = TrainConfig { epochs: 1, ..config.clone() };
        let mut first = TrainSession::fresh(&hp, sizes, &one).unwrap();
        first.run(train, &valid, &hp, &one, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("halfway.ckpt");
        save_checkpoint(&path, &Checkpoint::from_session(&first, &hp, &one, 1, 32)).unwrap();

        let mut resumed = load_checkpoint(&path).unwrap().into_session();
        assert_eq!(resumed.next_epoch, 1);
        resumed.run(train, &valid, &hp, &two, |_| {}).unwrap();

        assert_eq!(resumed.params, straight.params);
        assert_eq!(resumed.state, straight.state);
        assert_eq!(resumed.best_f1, straight.best_f1);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), TrainError::BadMagic));
    }

    #[test]
    fn rejects_future_version() {
        let (_, sizes, hp, config) = small_setup();
        let session = TrainSession::fresh(&hp, sizes, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.ckpt");
        save_checkpoint(&path, &Checkpoint::from_session(&session, &hp, &config, 1, 32)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        let body_end = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_end]).to_le_bytes();
        bytes[body_end..].copy_from_slice(&crc);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            TrainError::IncompatibleVersion { found: 9 }
        ));
    }

    #[test]
    fn rejects_flipped_byte_and_truncation() {
        let (_, sizes, hp, config) = small_setup();
        let session = TrainSession::fresh(&hp, sizes, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("target.ckpt");
        save_checkpoint(&path, &Checkpoint::from_session(&session, &hp, &config, 1, 32)).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            TrainError::ChecksumMismatch
        ));

        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            TrainError::ChecksumMismatch
        ));

        std::fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            TrainError::Corrupt { .. }
        ));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("absent.ckpt");
        assert!(matches!(load_checkpoint(&path).unwrap_err(), TrainError::Io(_)));
    }
}
