//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CFMA" | version u32 | entry count u32
//! per entry: name length u32 | UTF-8 name | rank u32 | dims u64 x rank | f64 x prod(dims)
//! ```
//!
//! Fisher entries share the container and carry a `.fisher` name suffix.
//! Provenance lives in a JSON sidecar next to the file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherDiag;
use crate::model::MlpConfig;
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"CFMA";
pub const FORMAT_VERSION: u32 = 1;
pub const FISHER_SUFFIX: &str = ".fisher";

/// Provenance stored beside the binary payload.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    #[serde(default)]
    pub task: Option<usize>,
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Architecture needed to rebuild a model from the entries.
    #[serde(default)]
    pub model: Option<MlpConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: ParamSet,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(entries: ParamSet) -> Self {
        Checkpoint {
            entries,
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                ..CheckpointMeta::default()
            },
        }
    }

    /// Parameters plus a Fisher stored under suffixed names.
    pub fn with_fisher(params: &ParamSet, fisher: &FisherDiag) -> Result<Self> {
        let mut entries = params.clone();
        for (name, t) in fisher.values() {
            entries.insert(format!("{name}{FISHER_SUFFIX}"), t.clone())?;
        }
        Ok(Checkpoint::new(entries))
    }

    /// A container holding only a Fisher.
    pub fn fisher_only(fisher: &FisherDiag) -> Result<Self> {
        Checkpoint::with_fisher(&ParamSet::new(), fisher)
    }

    /// Entries without the Fisher suffix.
    pub fn params(&self) -> ParamSet {
        self.entries.filter(|n| !n.ends_with(FISHER_SUFFIX))
    }

    /// Fisher entries with the suffix stripped, if any are present.
    pub fn fisher(&self) -> Result<Option<FisherDiag>> {
        let values: ParamSet = self
            .entries
            .iter()
            .filter_map(|(n, t)| n.strip_suffix(FISHER_SUFFIX).map(|b| (b.to_string(), t.clone())))
            .collect();
        if values.names().next().is_none() {
            return Ok(None);
        }
        FisherDiag::new(values).map(Some)
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Serialises `entries` in the container layout.
pub fn encode(entries: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + entries.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.iter().count() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::Corruption {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }
}

/// Parses a container produced by [`encode`].
pub fn decode(buf: &[u8]) -> Result<ParamSet> {
    if buf.len() < 4 {
        return Err(Error::Format("file shorter than the magic number".into()));
    }
    if &buf[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&buf[..4]))));
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut out = ParamSet::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let start = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::Corruption {
            offset: start as u64,
            msg: format!("entry {i} name is not UTF-8"),
        })?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            let d = usize::try_from(d).map_err(|_| r.corrupt("dimension overflows"))?;
            n = n.checked_mul(d).ok_or_else(|| r.corrupt("element count overflows"))?;
            shape.push(d);
        }
        let bytes = n.checked_mul(8).ok_or_else(|| r.corrupt("payload size overflows"))?;
        let payload = r.take(bytes, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| r.corrupt(e.to_string()))?;
        out.insert(name.to_string(), t).map_err(|_| Error::Corruption {
            offset: start as u64,
            msg: format!("duplicate entry `{name}`"),
        })?;
    }
    if r.pos != buf.len() {
        return Err(r.corrupt(format!("{} trailing bytes after {count} entries", buf.len() - r.pos)));
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file = path.file_name().ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Writes the container and its metadata sidecar.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(&ckpt.entries))?;
    let meta = serde_json::to_vec_pretty(&ckpt.meta).expect("serialisable");
    write_atomic(&meta_path(path), &meta)
}

/// Reads a container. A missing sidecar yields default metadata.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let entries = decode(&fs::read(path)?)?;
    let mp = meta_path(path);
    let meta = if mp.exists() {
        serde_json::from_slice(&fs::read(&mp)?)
            .map_err(|e| Error::Format(format!("{}: {e}", mp.display())))?
    } else {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            ..CheckpointMeta::default()
        }
    };
    Ok(Checkpoint { entries, meta })
}
