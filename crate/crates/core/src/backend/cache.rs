//! Persistent response cache.
//!
//! The file is a sequence of records, each `<hex key> <byte length>\n<json>\n`.
//! Records are only ever appended; a later record for the same key wins. A
//! torn record at the tail (interrupted write) is discarded on open and the
//! file is rewritten without it.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::GenerationResponse;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub key: [u8; 32],
    pub response: GenerationResponse,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredResponse {
    text: String,
    prompt_tokens: u64,
    completion_tokens: u64,
    latency_ms: f64,
    created_at: DateTime<Utc>,
}

impl StoredResponse {
    fn from_entry(e: &CacheEntry) -> Self {
        StoredResponse {
            text: e.response.text.clone(),
            prompt_tokens: e.response.prompt_tokens,
            completion_tokens: e.response.completion_tokens,
            latency_ms: e.response.latency.as_secs_f64() * 1e3,
            created_at: e.created_at,
        }
    }

    fn into_entry(self, key: [u8; 32]) -> CacheEntry {
        CacheEntry {
            key,
            response: GenerationResponse {
                text: self.text,
                prompt_tokens: self.prompt_tokens,
                completion_tokens: self.completion_tokens,
                latency: Duration::from_secs_f64(self.latency_ms.max(0.0) / 1e3),
                cached: false,
            },
            created_at: self.created_at,
        }
    }
}

fn encode_record(e: &CacheEntry) -> Vec<u8> {
    let json = serde_json::to_vec(&StoredResponse::from_entry(e)).expect("cache record serializes");
    let mut out = format!("{} {}\n", hex::encode(e.key), json.len()).into_bytes();
    out.extend_from_slice(&json);
    out.push(b'\n');
    out
}

/// Parses records until the data ends or a record is torn. Returns the entries
/// in file order and the byte offset where parsing stopped.
fn decode_records(data: &[u8]) -> (Vec<CacheEntry>, usize) {
    let mut entries = Vec::new();
    let mut pos = 0;
    while pos < data.len() {
        let Some(entry_len) = decode_one(&data[pos..], &mut entries) else {
            break;
        };
        pos += entry_len;
    }
    (entries, pos)
}

fn decode_one(data: &[u8], out: &mut Vec<CacheEntry>) -> Option<usize> {
    let nl = data.iter().position(|&b| b == b'\n')?;
    let header = std::str::from_utf8(&data[..nl]).ok()?;
    let (key_hex, len) = header.split_once(' ')?;
    let key: [u8; 32] = hex::decode(key_hex).ok()?.try_into().ok()?;
    let len: usize = len.parse().ok()?;
    let body = data.get(nl + 1..nl + 1 + len)?;
    if data.get(nl + 1 + len) != Some(&b'\n') {
        return None;
    }
    let stored: StoredResponse = serde_json::from_slice(body).ok()?;
    out.push(stored.into_entry(key));
    Some(nl + len + 2)
}

#[derive(Debug)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<[u8; 32], CacheEntry>>,
    writer: Mutex<Option<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            path: None,
            entries: RwLock::default(),
            writer: Mutex::new(None),
        }
    }

    /// Opens (creating if needed) a cache file and loads its records.
    pub fn open(path: &Path) -> io::Result<Self> {
        let data = match fs::read(path) {
            Ok(d) => d,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let (records, consumed) = decode_records(&data);
        let mut entries = HashMap::new();
        for r in records {
            entries.insert(r.key, r);
        }
        if consumed < data.len() {
            write_compacted(path, &entries)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ResponseCache {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &[u8; 32]) -> Option<GenerationResponse> {
        self.entries.read().unwrap().get(key).map(|e| e.response.clone())
    }

    pub fn insert(&self, key: [u8; 32], response: &GenerationResponse) -> io::Result<()> {
        let entry = CacheEntry {
            key,
            response: GenerationResponse {
                cached: false,
                ..response.clone()
            },
            created_at: Utc::now(),
        };
        {
            let mut writer = self.writer.lock().unwrap();
            if let Some(f) = writer.as_mut() {
                f.write_all(&encode_record(&entry))?;
                f.flush()?;
            }
        }
        self.entries.write().unwrap().insert(key, entry);
        Ok(())
    }
}

fn write_compacted(path: &Path, entries: &HashMap<[u8; 32], CacheEntry>) -> io::Result<()> {
    let mut sorted: Vec<_> = entries.values().collect();
    sorted.sort_by_key(|e| e.key);
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(".tmp");
    let tmp = PathBuf::from(tmp_name);
    {
        let mut f = File::create(&tmp)?;
        for e in sorted {
            f.write_all(&encode_record(e))?;
        }
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Rewrites a cache file keeping only the last record per key.
/// Returns `(records_before, records_after)`.
pub fn compact(path: &Path) -> io::Result<(usize, usize)> {
    let data = fs::read(path)?;
    let (records, _) = decode_records(&data);
    let before = records.len();
    let entries: HashMap<_, _> = records.into_iter().map(|r| (r.key, r)).collect();
    let after = entries.len();
    write_compacted(path, &entries)?;
    Ok((before, after))
}
