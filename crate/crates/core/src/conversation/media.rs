//! Content-addressed blob store: `media/<hash[0:2]>/<hash>` plus a
//! `<hash>.json` sidecar carrying the format tag and producer metadata.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::taxonomy::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaFormat {
    Wav,
    Mp3,
    Ogg,
    Webm,
    Mp4,
    Gif,
    Png,
    Jpeg,
    Binary,
}

impl MediaFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            MediaFormat::Wav => "audio/wav",
            MediaFormat::Mp3 => "audio/mpeg",
            MediaFormat::Ogg => "audio/ogg",
            MediaFormat::Webm => "video/webm",
            MediaFormat::Mp4 => "video/mp4",
            MediaFormat::Gif => "image/gif",
            MediaFormat::Png => "image/png",
            MediaFormat::Jpeg => "image/jpeg",
            MediaFormat::Binary => "application/octet-stream",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            MediaFormat::Wav => "wav",
            MediaFormat::Mp3 => "mp3",
            MediaFormat::Ogg => "ogg",
            MediaFormat::Webm => "webm",
            MediaFormat::Mp4 => "mp4",
            MediaFormat::Gif => "gif",
            MediaFormat::Png => "png",
            MediaFormat::Jpeg => "jpg",
            MediaFormat::Binary => "bin",
        }
    }

    pub fn from_content_type(content_type: &str) -> Option<Self> {
        let essence = content_type.split(';').next()?.trim().to_ascii_lowercase();
        Some(match essence.as_str() {
            "audio/wav" | "audio/x-wav" | "audio/wave" | "audio/vnd.wave" => MediaFormat::Wav,
            "audio/mpeg" | "audio/mp3" => MediaFormat::Mp3,
            "audio/ogg" | "application/ogg" => MediaFormat::Ogg,
            "video/webm" | "audio/webm" => MediaFormat::Webm,
            "video/mp4" | "audio/mp4" => MediaFormat::Mp4,
            "image/gif" => MediaFormat::Gif,
            "image/png" => MediaFormat::Png,
            "image/jpeg" | "image/jpg" => MediaFormat::Jpeg,
            "application/octet-stream" => MediaFormat::Binary,
            _ => return None,
        })
    }

    /// Identifies a blob by its magic bytes.
    pub fn sniff(bytes: &[u8]) -> Self {
        match bytes {
            [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'A', b'V', b'E', ..] => MediaFormat::Wav,
            [b'G', b'I', b'F', b'8', ..] => MediaFormat::Gif,
            [0x89, b'P', b'N', b'G', ..] => MediaFormat::Png,
            [0xFF, 0xD8, 0xFF, ..] => MediaFormat::Jpeg,
            [b'O', b'g', b'g', b'S', ..] => MediaFormat::Ogg,
            [0x1A, 0x45, 0xDF, 0xA3, ..] => MediaFormat::Webm,
            [_, _, _, _, b'f', b't', b'y', b'p', ..] => MediaFormat::Mp4,
            [b'I', b'D', b'3', ..] | [0xFF, 0xFB, ..] | [0xFF, 0xF3, ..] => MediaFormat::Mp3,
            _ => MediaFormat::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredMedia {
    pub hash: String,
    pub format: MediaFormat,
    pub size: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: MediaFormat,
    #[serde(default)]
    metadata: Option<serde_json::Value>,
}

pub fn is_valid_hash(hash: &str) -> bool {
    hash.len() == 64 && hash.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

#[derive(Debug, Clone)]
pub struct MediaStore {
    root: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().expect("media paths have a parent");
    let mut tmp = tempfile_in(dir)?;
    tmp.1.write_all(bytes)?;
    tmp.1.sync_all()?;
    fs::rename(&tmp.0, path)
}

fn tempfile_in(dir: &Path) -> io::Result<(PathBuf, fs::File)> {
    let path = dir.join(format!(".tmp-{}", uuid::Uuid::new_v4().simple()));
    let file = fs::OpenOptions::new().write(true).create_new(true).open(&path)?;
    Ok((path, file))
}

impl MediaStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// `<hash[0:2]>/<hash>`, relative to the store root.
    pub fn relative_path(&self, hash: &str) -> String {
        format!("{}/{}", &hash[..2], hash)
    }

    pub fn path_for(&self, hash: &str) -> PathBuf {
        self.root.join(&hash[..2]).join(hash)
    }

    /// Stores `bytes` once. A blob already present keeps its first sidecar.
    pub fn put(
        &self,
        bytes: &[u8],
        format: MediaFormat,
        metadata: Option<&serde_json::Value>,
    ) -> io::Result<StoredMedia> {
        let hash = sha256_hex(bytes);
        let path = self.path_for(&hash);
        if !path.exists() {
            fs::create_dir_all(path.parent().expect("has parent"))?;
            let sidecar = Sidecar {
                format,
                metadata: metadata.cloned(),
            };
            write_atomic(
                &path.with_extension("json"),
                &serde_json::to_vec_pretty(&sidecar).map_err(io::Error::other)?,
            )?;
            write_atomic(&path, bytes)?;
        }
        Ok(StoredMedia {
            hash,
            format,
            size: bytes.len() as u64,
        })
    }

    pub fn contains(&self, hash: &str) -> bool {
        is_valid_hash(hash) && self.path_for(hash).is_file()
    }

    /// Bytes and format of a stored blob; `None` for unknown or malformed hashes.
    pub fn get(&self, hash: &str) -> io::Result<Option<(Vec<u8>, MediaFormat)>> {
        if !self.contains(hash) {
            return Ok(None);
        }
        let path = self.path_for(hash);
        let bytes = fs::read(&path)?;
        let format = self
            .sidecar(hash)
            .map(|s| s.format)
            .unwrap_or_else(|| MediaFormat::sniff(&bytes));
        Ok(Some((bytes, format)))
    }

    pub fn metadata(&self, hash: &str) -> Option<serde_json::Value> {
        self.sidecar(hash).and_then(|s| s.metadata)
    }

    fn sidecar(&self, hash: &str) -> Option<Sidecar> {
        if !is_valid_hash(hash) {
            return None;
        }
        let text = fs::read(self.path_for(hash).with_extension("json")).ok()?;
        serde_json::from_slice(&text).ok()
    }
}
