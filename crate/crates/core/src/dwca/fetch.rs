use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{DwcaError, MediaRecord, MediaVerdict};
use crate::fsutil::{ensure_writable_dir, write_atomic, write_json_atomic};
use crate::hashing::ContentHash;

const MAX_BODY_BYTES: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum FetchError {
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("transport: {0}")]
    Transport(String),
}

/// Something that can turn a URL into bytes.
pub trait MediaSource: Sync {
    fn get(&self, url: &str) -> Result<Vec<u8>, FetchError>;
}

pub struct HttpSource {
    agent: ureq::Agent,
}

impl HttpSource {
    pub fn new(timeout: Duration) -> Self {
        HttpSource { agent: ureq::AgentBuilder::new().timeout(timeout).build() }
    }
}

impl Default for HttpSource {
    fn default() -> Self {
        Self::new(Duration::from_secs(30))
    }
}

impl MediaSource for HttpSource {
    fn get(&self, url: &str) -> Result<Vec<u8>, FetchError> {
        match self.agent.get(url).call() {
            Ok(resp) => {
                let mut buf = Vec::new();
                resp.into_reader()
                    .take(MAX_BODY_BYTES)
                    .read_to_end(&mut buf)
                    .map_err(|e| FetchError::Transport(e.to_string()))?;
                Ok(buf)
            }
            Err(ureq::Error::Status(code, _)) => Err(FetchError::Status(code)),
            Err(e) => Err(FetchError::Transport(e.to_string())),
        }
    }
}

/// Entry remembered for each fetched URL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct UrlEntry {
    content_hash: ContentHash,
    width: u32,
    height: u32,
}

/// Content-addressed image cache.
///
/// Layout: `objects/<2 hex>/<64 hex>` holds bytes, `urls/<sha256(url)>.json`
/// remembers which object a URL resolved to.
#[derive(Debug, Clone)]
pub struct MediaCache {
    root: PathBuf,
}

impl MediaCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        MediaCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, hash: &ContentHash) -> PathBuf {
        let hex = hash.to_hex();
        self.root.join("objects").join(&hex[..2]).join(hex)
    }

    fn url_path(&self, url: &str) -> PathBuf {
        self.root.join("urls").join(format!("{}.json", ContentHash::of_bytes(url.as_bytes()).to_hex()))
    }

    fn lookup(&self, url: &str) -> Option<UrlEntry> {
        let text = std::fs::read_to_string(self.url_path(url)).ok()?;
        let entry: UrlEntry = serde_json::from_str(&text).ok()?;
        self.object_path(&entry.content_hash).exists().then_some(entry)
    }

    fn store(&self, url: &str, bytes: &[u8]) -> Result<Result<UrlEntry, String>, DwcaError> {
        let img = match image::load_from_memory(bytes) {
            Ok(img) => img,
            Err(e) => return Ok(Err(format!("decode failed: {e}"))),
        };
        let hash = ContentHash::of_bytes(bytes);
        let path = self.object_path(&hash);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        let entry = UrlEntry { content_hash: hash, width: img.width(), height: img.height() };
        write_json_atomic(&self.url_path(url), &entry)?;
        Ok(Ok(entry))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FetchOptions {
    pub concurrency: usize,
    /// Additional attempts after the first failure.
    pub retries: u32,
    /// Re-attempt records previously marked `fetch_failed`.
    pub retry_failed: bool,
    pub backoff: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        FetchOptions { concurrency: 8, retries: 2, retry_failed: false, backoff: Duration::from_millis(200) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchReport {
    /// Number of network requests made (including retries).
    pub requests: usize,
    pub downloaded: usize,
    pub from_cache: usize,
    pub failed: usize,
    pub skipped: usize,
}

fn apply(rec: &mut MediaRecord, entry: UrlEntry) {
    rec.content_hash = Some(entry.content_hash);
    rec.width = Some(entry.width);
    rec.height = Some(entry.height);
}

/// Downloads every record's image into the cache and fills in hash and
/// dimensions. Already-populated or cached records cost no request; each
/// distinct URL is requested at most once per call. Per-URL failures mark the
/// record `fetch_failed`; only an unusable cache directory is fatal.
pub fn fetch_media(
    records: &mut [MediaRecord],
    cache: &MediaCache,
    source: &dyn MediaSource,
    opts: FetchOptions,
) -> Result<FetchReport, DwcaError> {
    ensure_writable_dir(cache.root())
        .map_err(|source| DwcaError::CacheUnwritable { path: cache.root().display().to_string(), source })?;

    let mut report = FetchReport::default();
    let mut pending: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, rec) in records.iter_mut().enumerate() {
        if rec.verdict == MediaVerdict::FetchFailed {
            if !opts.retry_failed {
                report.skipped += 1;
                continue;
            }
            rec.verdict = MediaVerdict::Unreviewed;
            rec.note = None;
        }
        let populated = rec.content_hash.is_some_and(|h| cache.object_path(&h).exists())
            && rec.width.is_some()
            && rec.height.is_some();
        if populated {
            report.skipped += 1;
            continue;
        }
        if let Some(entry) = cache.lookup(&rec.url) {
            apply(rec, entry);
            report.from_cache += 1;
            continue;
        }
        pending.entry(rec.url.clone()).or_default().push(i);
    }

    let urls: Vec<&String> = pending.keys().collect();
    let results: Vec<Mutex<Option<Result<UrlEntry, String>>>> = urls.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let requests = AtomicUsize::new(0);
    let fatal: Mutex<Option<DwcaError>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..opts.concurrency.max(1).min(urls.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(url) = urls.get(i) else { break };
                let mut attempt = 0;
                let outcome = loop {
                    requests.fetch_add(1, Ordering::Relaxed);
                    match source.get(url) {
                        Ok(bytes) => match cache.store(url, &bytes) {
                            Ok(r) => break r,
                            Err(e) => {
                                *fatal.lock().unwrap() = Some(e);
                                return;
                            }
                        },
                        Err(e) if attempt < opts.retries => {
                            attempt += 1;
                            log::debug!("retrying {url} after {e}");
                            std::thread::sleep(opts.backoff * attempt);
                        }
                        Err(e) => break Err(format!("{e} after {} attempt(s)", attempt + 1)),
                    }
                };
                *results[i].lock().unwrap() = Some(outcome);
            });
        }
    });
    if let Some(e) = fatal.into_inner().unwrap() {
        return Err(e);
    }
    report.requests = requests.into_inner();

    for (url, slot) in urls.iter().zip(results) {
        let outcome = slot.into_inner().unwrap().unwrap_or_else(|| Err("not attempted".into()));
        for &i in &pending[*url] {
            let rec = &mut records[i];
            match &outcome {
                Ok(entry) => {
                    apply(rec, *entry);
                    report.downloaded += 1;
                }
                Err(msg) => {
                    rec.verdict = MediaVerdict::FetchFailed;
                    rec.note = Some(msg.clone());
                    rec.content_hash = None;
                    rec.width = None;
                    rec.height = None;
                    report.failed += 1;
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    pub(crate) fn png_bytes(w: u32, h: u32, shade: u8) -> Vec<u8> {
        let img = image::RgbImage::from_pixel(w, h, image::Rgb([shade, shade, shade]));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    struct MapSource {
        bodies: HashMap<String, Result<Vec<u8>, FetchError>>,
        calls: AtomicUsize,
        flaky_first: Mutex<Vec<String>>,
    }

    impl MediaSource for MapSource {
        fn get(&self, url: &str) -> Result<Vec<u8>, FetchError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let mut flaky = self.flaky_first.lock().unwrap();
            if let Some(pos) = flaky.iter().position(|u| u == url) {
                flaky.remove(pos);
                return Err(FetchError::Status(503));
            }
            self.bodies.get(url).cloned().unwrap_or(Err(FetchError::Status(404)))
        }
    }

    fn source() -> MapSource {
        let mut bodies = HashMap::new();
        bodies.insert("u/a".to_string(), Ok(png_bytes(200, 150, 10)));
        bodies.insert("u/a-mirror".to_string(), Ok(png_bytes(200, 150, 10)));
        bodies.insert("u/text".to_string(), Ok(b"<html>nope</html>".to_vec()));
        bodies.insert("u/flaky".to_string(), Ok(png_bytes(30, 40, 99)));
        MapSource { bodies, calls: AtomicUsize::new(0), flaky_first: Mutex::new(vec!["u/flaky".into()]) }
    }

    fn fast() -> FetchOptions {
        FetchOptions { concurrency: 3, retries: 2, retry_failed: false, backoff: Duration::from_millis(1) }
    }

    #[test]
    fn fetch_populates_dedups_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cache = MediaCache::new(dir.path());
        let src = source();
        let mut recs = vec![
            MediaRecord::new("1", "u/a"),
            MediaRecord::new("2", "u/a-mirror"),
            MediaRecord::new("3", "u/a"),
            MediaRecord::new("4", "u/text"),
            MediaRecord::new("5", "u/missing"),
            MediaRecord::new("6", "u/flaky"),
        ];
        let report = fetch_media(&mut recs, &cache, &src, fast()).unwrap();
        assert_eq!(report.downloaded, 4);
        assert_eq!(report.failed, 2);
        // 5 distinct URLs, "u/missing" tried 3 times, "u/flaky" twice
        assert_eq!(src.calls.load(Ordering::SeqCst), 5 + 2 + 1);

        assert_eq!(recs[0].content_hash, recs[1].content_hash);
        assert_eq!(recs[0].content_hash, recs[2].content_hash);
        assert_eq!((recs[0].width, recs[0].height), (Some(200), Some(150)));
        assert_eq!(recs[3].verdict, MediaVerdict::FetchFailed);
        assert!(recs[3].note.as_deref().unwrap().contains("decode"));
        assert_eq!(recs[4].verdict, MediaVerdict::FetchFailed);
        assert_eq!(recs[5].width, Some(30));
        let objects: usize = std::fs::read_dir(dir.path().join("objects"))
            .unwrap()
            .map(|d| std::fs::read_dir(d.unwrap().path()).unwrap().count())
            .sum();
        assert_eq!(objects, 2);

        let snapshot = recs.clone();
        let before = src.calls.load(Ordering::SeqCst);
        let second = fetch_media(&mut recs, &cache, &src, fast()).unwrap();
        assert_eq!(src.calls.load(Ordering::SeqCst), before);
        assert_eq!(second.requests, 0);
        assert_eq!(recs, snapshot);
    }

    #[test]
    fn fresh_records_are_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = MediaCache::new(dir.path());
        let src = source();
        let mut first = vec![MediaRecord::new("1", "u/a")];
        fetch_media(&mut first, &cache, &src, fast()).unwrap();
        let calls = src.calls.load(Ordering::SeqCst);

        let mut again = vec![MediaRecord::new("9", "u/a")];
        let report = fetch_media(&mut again, &cache, &src, fast()).unwrap();
        assert_eq!(report.from_cache, 1);
        assert_eq!(src.calls.load(Ordering::SeqCst), calls);
        assert_eq!(again[0].content_hash, first[0].content_hash);
    }

    #[test]
    fn unwritable_cache_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain-file");
        std::fs::write(&file, b"x").unwrap();
        let cache = MediaCache::new(file.join("sub"));
        let err = fetch_media(&mut [MediaRecord::new("1", "u/a")], &cache, &source(), fast()).unwrap_err();
        assert!(matches!(err, DwcaError::CacheUnwritable { .. }));
    }
}
