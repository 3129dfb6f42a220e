//! Dataset generation and the binary dataset container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header:
//!   magic        8 bytes  "MRISDSET"
//!   version      u32      (currently 1)
//!   count        u32      number of records
//!   height       u32
//!   width        u32
//!   max_len      u32      token sequence length
//!   seed         u64      generation seed
//!   vocab_len    u32
//!   vocab_len × (u16 byte length, UTF-8 word)
//! record (count times):
//!   length       u32      bytes that follow for this record
//!   split        u8       0 = train, 1 = val
//!   tags         u8       bit 0 occlusion, bit 1 relative position, bit 2 ordering
//!   image        height × width × 3 f32, row-major RGB
//!   valid_len    u16
//!   ids          max_len × u16
//!   expression   u16 byte length, UTF-8 text
//!   gt mask      ceil(height × width / 8) bytes, row-major, LSB first
//! trailer:
//!   sha256       32 bytes of everything above
//! ```
//!
//! A sidecar `<file>.manifest.txt` records the seed and scene config in
//! `key = value` form.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::scene::{generate_scene, SampleRecord, SceneConfig, Tag, Tags};
use crate::checksum::{append_digest, strip_digest};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::masking::PixelMask;
use crate::parallel::par_map;
use crate::rng::RngStream;
use crate::text::{TokenSequence, Vocabulary};

pub const DATASET_MAGIC: &[u8; 8] = b"MRISDSET";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub max_len: usize,
    pub vocab: Vocabulary,
    pub records: Vec<SampleRecord>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, which: Split) -> Vec<&SampleRecord> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(r, _)| r)
            .collect()
    }

    pub fn train(&self) -> Vec<&SampleRecord> {
        self.split(Split::Train)
    }

    pub fn val(&self) -> Vec<&SampleRecord> {
        self.split(Split::Val)
    }

    pub fn count(&self, which: Split) -> usize {
        self.splits.iter().filter(|s| **s == which).count()
    }
}

/// Val membership for index `i`: within each block of ten consecutive
/// indices, exactly one hashed slot is validation.
pub fn split_of(seed: u64, index: usize) -> Split {
    let block = (index / 10) as u64;
    let slot = RngStream::with_counter(seed, "split", block).below(10);
    if index % 10 == slot {
        Split::Val
    } else {
        Split::Train
    }
}

/// Generates `count` samples reproducibly from `(seed, cfg)`. Each index has
/// its own random stream, so the result does not depend on worker count.
pub fn generate_dataset(seed: u64, count: usize, cfg: &SceneConfig) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("dataset count must be at least 1"));
    }
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    let indices: Vec<usize> = (0..count).collect();
    let results = par_map(&indices, |&i| {
        // A failed stream is replaced by the next counter in a disjoint
        // range, keeping generation deterministic.
        let mut last = None;
        for retry in 0..8u64 {
            let mut rng = RngStream::with_counter(seed, "scene", (retry << 40) | i as u64);
            match generate_scene(cfg, &vocab, &mut rng) {
                Ok((_, rec)) => return Ok(rec),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    let splits = (0..count).map(|i| split_of(seed, i)).collect();
    Ok(Dataset {
        seed,
        height: cfg.height,
        width: cfg.width,
        max_len: cfg.max_len,
        vocab,
        records,
        splits,
    })
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u16(out, s.len() as u16);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    put_u32(&mut out, d.records.len() as u32);
    put_u32(&mut out, d.height as u32);
    put_u32(&mut out, d.width as u32);
    put_u32(&mut out, d.max_len as u32);
    out.extend_from_slice(&d.seed.to_le_bytes());
    put_u32(&mut out, d.vocab.len() as u32);
    for w in d.vocab.words() {
        put_str(&mut out, w);
    }
    let mut rec = Vec::new();
    for (r, split) in d.records.iter().zip(&d.splits) {
        rec.clear();
        rec.push(match split {
            Split::Train => 0,
            Split::Val => 1,
        });
        rec.push(r.tags.bits());
        for v in r.image.data() {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        put_u16(&mut rec, r.tokens.valid_len() as u16);
        for &id in r.tokens.ids() {
            put_u16(&mut rec, id);
        }
        put_str(&mut rec, &r.expression);
        let mut packed = vec![0u8; r.gt_mask.bits().len().div_ceil(8)];
        for (i, &b) in r.gt_mask.bits().iter().enumerate() {
            if b {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        rec.extend_from_slice(&packed);
        put_u32(&mut out, rec.len() as u32);
        out.extend_from_slice(&rec);
    }
    append_digest(&mut out);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::corrupt(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::corrupt(self.path, "invalid UTF-8"))
    }
}

pub fn decode_dataset(bytes: &[u8], path: &str) -> Result<Dataset> {
    let bytes = strip_digest(bytes, path)?;
    let mut r = Reader { buf: bytes, pos: 0, path };
    let bad = |why: &str| Error::corrupt(path, why);
    if r.take(8)? != DATASET_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let max_len = r.u32()? as usize;
    let seed = r.u64()?;
    let vocab_len = r.u32()? as usize;
    let words = (0..vocab_len).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_full_list(words).map_err(|e| bad(&e.to_string()))?;
    let pixels = height * width;
    let mut records = Vec::with_capacity(count);
    let mut splits = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let start = r.pos;
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Val,
            s => return Err(bad(&format!("bad split byte {s}"))),
        };
        let tags = Tags::from_bits(r.u8()?).map_err(|e| bad(&e.to_string()))?;
        let raw = r.take(pixels * 3 * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let image = ImageBuffer::from_raw(height, width, data).map_err(|e| bad(&e.to_string()))?;
        let valid_len = r.u16()? as usize;
        let ids = (0..max_len).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        if ids.iter().any(|&id| id as usize >= vocab.len()) {
            return Err(bad("token id outside vocabulary"));
        }
        let tokens = TokenSequence::new(ids, valid_len).map_err(|e| bad(&e.to_string()))?;
        let expression = r.string()?;
        let packed = r.take(pixels.div_ceil(8))?;
        let bits = (0..pixels).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        let gt_mask = PixelMask::from_bits(height, width, bits)?;
        if r.pos - start != len {
            return Err(bad("record length mismatch"));
        }
        records.push(SampleRecord {
            image,
            expression,
            tokens,
            gt_mask,
            tags,
        });
        splits.push(split);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Dataset {
        seed,
        height,
        width,
        max_len,
        vocab,
        records,
        splits,
    })
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

/// Human-readable sidecar describing how a dataset was produced.
pub fn dataset_manifest(d: &Dataset, cfg: &SceneConfig) -> String {
    let tagged = |t: Tag| d.records.iter().filter(|r| r.tags.contains(t)).count();
    let mut s = String::new();
    s.push_str("version = 1\n");
    s.push_str(&format!("seed = {}\n", d.seed));
    s.push_str(&format!("count = {}\n", d.len()));
    s.push_str(&format!("train = {}\n", d.count(Split::Train)));
    s.push_str(&format!("val = {}\n", d.count(Split::Val)));
    s.push_str(&cfg.kv_lines());
    for t in Tag::ALL {
        s.push_str(&format!("tagged.{} = {}\n", t.name(), tagged(t)));
    }
    s
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn write_dataset(path: &Path, d: &Dataset, cfg: &SceneConfig) -> Result<()> {
    write_atomic(path, &encode_dataset(d))?;
    write_atomic(&manifest_path(path), dataset_manifest(d, cfg).as_bytes())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    decode_dataset(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_exactly_ninety_ten() {
        let val = (0..1000).filter(|&i| split_of(5, i) == Split::Val).count();
        assert_eq!(val, 100);
    }

    #[test]
    fn small_dataset_round_trips() {
        let cfg = SceneConfig::default();
        let d = generate_dataset(3, 20, &cfg).unwrap();
        let bytes = encode_dataset(&d);
        let back = decode_dataset(&bytes, "mem").unwrap();
        assert_eq!(back, d);
        assert_eq!(encode_dataset(&back), bytes);
    }

    #[test]
    fn decode_rejects_damage() {
        let d = generate_dataset(3, 3, &SceneConfig::default()).unwrap();
        let bytes = encode_dataset(&d);
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1], "x"), Err(Error::Corrupt { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad, "x"), Err(Error::Corrupt { .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_dataset(&extra, "x").is_err());
    }

    #[test]
    fn zero_count_rejected() {
        assert!(generate_dataset(1, 0, &SceneConfig::default()).is_err());
    }
}
