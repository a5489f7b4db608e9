//! CIFAR-10 / CIFAR-100 ingestion into a local, checksummed cache.
//!
//! Layout under `<cache>/<name>/`:
//!
//! ```text
//! raw/<archive>.tar.gz     original binary-version archive
//! shards/train.bin         decoded split (header + u16 labels + u8 pixels)
//! shards/test.bin
//! manifest.json            sha256 of the archive and of every shard
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetHandle, ImageDataset, Split};
use crate::error::{Error, Result};

const SHARD_MAGIC: &[u8; 4] = b"SDSH";
const SHARD_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;
const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

impl CifarKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cifar10" => Ok(CifarKind::Cifar10),
            "cifar100" => Ok(CifarKind::Cifar100),
            _ => Err(Error::config(
                "data.dataset",
                format!("unknown dataset '{s}' (expected cifar10, cifar100 or synthetic)"),
            )),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CifarKind::Cifar10 => "cifar10",
            CifarKind::Cifar100 => "cifar100",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    pub fn url(self) -> &'static str {
        match self {
            CifarKind::Cifar10 => "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
            CifarKind::Cifar100 => "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
        }
    }

    fn archive_name(self) -> &'static str {
        match self {
            CifarKind::Cifar10 => "cifar-10-binary.tar.gz",
            CifarKind::Cifar100 => "cifar-100-binary.tar.gz",
        }
    }

    /// Label bytes preceding each record; CIFAR-100 stores (coarse, fine).
    fn label_bytes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 1,
            CifarKind::Cifar100 => 2,
        }
    }

    fn members(self, split: Split) -> Vec<String> {
        match (self, split) {
            (CifarKind::Cifar10, Split::Train) => {
                (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
            }
            (CifarKind::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
            (CifarKind::Cifar100, Split::Train) => vec!["train.bin".into()],
            (CifarKind::Cifar100, Split::Test) => vec!["test.bin".into()],
        }
    }

    fn stats(self) -> ([f32; 3], [f32; 3]) {
        match self {
            CifarKind::Cifar10 => ([0.4914, 0.4822, 0.4465], [0.2470, 0.2435, 0.2616]),
            CifarKind::Cifar100 => ([0.5071, 0.4865, 0.4409], [0.2673, 0.2564, 0.2762]),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FetchOptions {
    /// Use this archive instead of downloading.
    pub archive: Option<PathBuf>,
    /// Re-acquire and re-decode even if a valid cache exists.
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ShardEntry {
    file: String,
    num_samples: usize,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    name: String,
    num_classes: usize,
    archive: String,
    archive_sha256: String,
    train: ShardEntry,
    test: ShardEntry,
}

pub fn dataset_dir(cache_dir: &Path, kind: CifarKind) -> PathBuf {
    cache_dir.join(kind.as_str())
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn download(url: &str, dest: &Path) -> Result<()> {
    log::info!("downloading {url}");
    let resp = ureq::get(url).call().map_err(|e| {
        Error::io(
            dest,
            std::io::Error::other(format!("download of {url} failed: {e}")),
        )
    })?;
    let tmp = dest.with_extension("part");
    {
        let mut out = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
        let mut reader = resp.into_body().into_reader();
        std::io::copy(&mut reader, &mut out).map_err(|e| Error::io(&tmp, e))?;
        out.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, dest).map_err(|e| Error::io(dest, e))
}

/// Decoded records of one split: labels and raw `u8` pixels in CHW order.
struct Decoded {
    labels: Vec<u16>,
    pixels: Vec<u8>,
}

fn decode_archive(kind: CifarKind, archive: &Path) -> Result<(Decoded, Decoded)> {
    let file = File::open(archive).map_err(|e| Error::io(archive, e))?;
    let mut tar = tar::Archive::new(GzDecoder::new(BufReader::new(file)));
    let train_members = kind.members(Split::Train);
    let test_members = kind.members(Split::Test);
    let mut train_parts: Vec<Option<Vec<u8>>> = vec![None; train_members.len()];
    let mut test_parts: Vec<Option<Vec<u8>>> = vec![None; test_members.len()];
    let bad = |m: String| Error::Data {
        sample: None,
        message: m,
    };
    let entries = tar
        .entries()
        .map_err(|e| bad(format!("{}: not a tar.gz archive: {e}", archive.display())))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| bad(format!("corrupt archive entry: {e}")))?;
        let path = entry
            .path()
            .map_err(|e| bad(format!("bad entry path: {e}")))?
            .into_owned();
        let Some(fname) = path.file_name().and_then(|f| f.to_str()).map(str::to_owned) else {
            continue;
        };
        let slot = if let Some(i) = train_members.iter().position(|m| *m == fname) {
            &mut train_parts[i]
        } else if let Some(i) = test_members.iter().position(|m| *m == fname) {
            &mut test_parts[i]
        } else {
            continue;
        };
        let mut data = Vec::new();
        entry
            .read_to_end(&mut data)
            .map_err(|e| bad(format!("reading {fname}: {e}")))?;
        *slot = Some(data);
    }
    let assemble = |parts: Vec<Option<Vec<u8>>>, members: &[String]| -> Result<Decoded> {
        let mut out = Decoded {
            labels: Vec::new(),
            pixels: Vec::new(),
        };
        for (part, name) in parts.into_iter().zip(members) {
            let data = part.ok_or_else(|| bad(format!("archive is missing {name}")))?;
            decode_records(kind, &data, out.labels.len(), &mut out)?;
        }
        Ok(out)
    };
    Ok((
        assemble(train_parts, &train_members)?,
        assemble(test_parts, &test_members)?,
    ))
}

fn decode_records(kind: CifarKind, data: &[u8], offset: usize, out: &mut Decoded) -> Result<()> {
    let lb = kind.label_bytes();
    let rec = lb + PIXELS;
    if !data.len().is_multiple_of(rec) {
        return Err(Error::Data {
            sample: Some(offset + data.len() / rec),
            message: format!(
                "truncated record: {} bytes is not a multiple of {rec}",
                data.len()
            ),
        });
    }
    for (i, r) in data.chunks_exact(rec).enumerate() {
        let label = r[lb - 1] as u16;
        if label as usize >= kind.num_classes() {
            return Err(Error::Data {
                sample: Some(offset + i),
                message: format!("label {label} out of range for {}", kind.as_str()),
            });
        }
        out.labels.push(label);
        out.pixels.extend_from_slice(&r[lb..]);
    }
    Ok(())
}

fn write_shard(path: &Path, kind: CifarKind, d: &Decoded) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = [
        SHARD_VERSION,
        d.labels.len() as u32,
        3,
        SIDE as u32,
        kind.num_classes() as u32,
    ];
    w.write_all(SHARD_MAGIC).map_err(io)?;
    for h in header {
        w.write_all(&h.to_le_bytes()).map_err(io)?;
    }
    for l in &d.labels {
        w.write_all(&l.to_le_bytes()).map_err(io)?;
    }
    w.write_all(&d.pixels).map_err(io)?;
    w.flush().map_err(io)
}

fn read_shard(path: &Path) -> Result<(Vec<u32>, Vec<u8>, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |found, message: String| Error::Format {
        found,
        expected: SHARD_VERSION,
        message: format!("{}: {message}", path.display()),
    };
    if bytes.len() < 24 || &bytes[..4] != SHARD_MAGIC {
        return Err(fmt(None, "not a dataset shard".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != SHARD_VERSION {
        return Err(fmt(Some(version), "unsupported shard version".into()));
    }
    let (n, c, s, k) = (
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
    );
    if c != 3 || s != SIDE {
        return Err(fmt(
            Some(version),
            format!("unexpected image shape {c}x{s}x{s}"),
        ));
    }
    let body = &bytes[24..];
    if body.len() != n * 2 + n * PIXELS {
        return Err(fmt(
            Some(version),
            "shard length does not match header".into(),
        ));
    }
    let labels = body[..2 * n]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as u32)
        .collect();
    Ok((labels, body[2 * n..].to_vec(), k))
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        found: None,
        expected: MANIFEST_VERSION,
        message: format!("{}: {e}", path.display()),
    })?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Format {
            found: Some(m.version),
            expected: MANIFEST_VERSION,
            message: format!("{}: unsupported manifest version", path.display()),
        });
    }
    Ok(m)
}

/// Ensures the cache for `kind` is present and valid, acquiring and decoding
/// the archive if needed. Returns handles for the train and test splits.
pub fn fetch(kind: CifarKind, cache_dir: &Path, opts: &FetchOptions) -> Result<[DatasetHandle; 2]> {
    let dir = dataset_dir(cache_dir, kind);
    if !opts.force && manifest_path(&dir).exists() {
        if let Ok(h) = verify(kind, cache_dir) {
            return Ok(h);
        }
        log::warn!(
            "cache for {} failed verification, rebuilding",
            kind.as_str()
        );
    }
    let raw_dir = dir.join("raw");
    let shard_dir = dir.join("shards");
    for d in [&raw_dir, &shard_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let archive = raw_dir.join(kind.archive_name());
    match &opts.archive {
        Some(src) => {
            if src != &archive {
                fs::copy(src, &archive).map_err(|e| Error::io(src, e))?;
            }
        }
        None => {
            if opts.force || !archive.exists() {
                download(kind.url(), &archive)?;
            }
        }
    }
    let (train, test) = decode_archive(kind, &archive)?;
    let mut entries = Vec::new();
    for (split, d) in [(Split::Train, &train), (Split::Test, &test)] {
        let file = format!("{}.bin", split.as_str());
        let path = shard_dir.join(&file);
        write_shard(&path, kind, d)?;
        entries.push(ShardEntry {
            file: format!("shards/{file}"),
            num_samples: d.labels.len(),
            sha256: sha256_file(&path)?,
        });
    }
    let test_entry = entries.pop().unwrap();
    let train_entry = entries.pop().unwrap();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        name: kind.as_str().into(),
        num_classes: kind.num_classes(),
        archive: format!("raw/{}", kind.archive_name()),
        archive_sha256: sha256_file(&archive)?,
        train: train_entry,
        test: test_entry,
    };
    let path = manifest_path(&dir);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    verify(kind, cache_dir)
}

/// Recomputes every shard checksum against the manifest.
pub fn verify(kind: CifarKind, cache_dir: &Path) -> Result<[DatasetHandle; 2]> {
    let dir = dataset_dir(cache_dir, kind);
    let m = read_manifest(&dir)?;
    let handle = |split: Split, e: &ShardEntry| -> Result<DatasetHandle> {
        let path = dir.join(&e.file);
        let actual = sha256_file(&path)?;
        if actual != e.sha256 {
            return Err(Error::Data {
                sample: None,
                message: format!(
                    "checksum mismatch for {}: manifest {}, file {actual}",
                    path.display(),
                    e.sha256
                ),
            });
        }
        Ok(DatasetHandle {
            name: m.name.clone(),
            split,
            num_samples: e.num_samples,
            num_classes: m.num_classes,
            cache_path: path,
            checksum: actual,
        })
    };
    Ok([
        handle(Split::Train, &m.train)?,
        handle(Split::Test, &m.test)?,
    ])
}

/// Verified handle for one split of an existing cache.
pub fn open(kind: CifarKind, split: Split, cache_dir: &Path) -> Result<DatasetHandle> {
    let [train, test] = verify(kind, cache_dir)?;
    Ok(match split {
        Split::Train => train,
        Split::Test => test,
    })
}

/// Decodes the shard behind a verified handle into `[0, 1]` pixels.
pub fn load(handle: &DatasetHandle) -> Result<ImageDataset> {
    let kind = CifarKind::parse(&handle.name)?;
    let (labels, pixels, k) = read_shard(&handle.cache_path)?;
    if labels.len() != handle.num_samples || k != handle.num_classes {
        return Err(Error::Data {
            sample: None,
            message: format!(
                "{} does not match its manifest entry",
                handle.cache_path.display()
            ),
        });
    }
    let (mean, std) = kind.stats();
    let ds = ImageDataset {
        name: handle.name.clone(),
        split: handle.split,
        images: pixels.iter().map(|&b| b as f32 / 255.0).collect(),
        labels,
        channels: 3,
        size: SIDE,
        num_classes: k,
        mean: mean.to_vec(),
        std: std.to_vec(),
    };
    ds.check()?;
    Ok(ds)
}
