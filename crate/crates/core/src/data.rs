//! Dataset manifests, image ingestion and batching.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IoContext, Result};
use crate::nn::Tensor;
use crate::taxonomy::{Authenticity, HierLabel, OneHotLabel};

/// Side length every ingested image is resized to.
pub const IMAGE_SIZE: usize = 224;
/// Interpolation used when resizing on load; recorded in manifest headers.
pub const RESIZE_METHOD: &str = "bilinear";
/// Environment variable naming a directory for decoded-image caching.
pub const CACHE_ENV: &str = "MFCLIP_CACHE";

#[derive(Clone, Debug)]
pub struct ImageSample {
    /// `3 x 224 x 224`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: HierLabel,
    pub source_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: HierLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
    pub protocol: String,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, split: Split, protocol: impl Into<String>) -> Self {
        Self {
            entries,
            split,
            protocol: protocol.into(),
        }
    }

    /// Reads a manifest file. Relative image paths resolve against the
    /// manifest's directory, and every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base, &path.display().to_string())?;
        for e in &m.entries {
            if !e.path.is_file() {
                return Err(Error::Io {
                    path: e.path.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "manifest entry does not exist"),
                });
            }
        }
        Ok(m)
    }

    /// Parses manifest text: `# key=value` header lines, then one
    /// tab-separated `path authenticity type family generator` record per line.
    pub fn parse(text: &str, base: &Path, origin: &str) -> Result<Self> {
        let mut split = Split::Train;
        let mut protocol = String::new();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            let perr = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("split", "train")) => split = Split::Train,
                        Some(("split", "test")) => split = Split::Test,
                        Some(("split", other)) => return Err(perr(format!("unknown split {other:?}"))),
                        Some(("protocol", p)) => protocol = p.to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(perr(format!("expected 5 tab-separated fields, found {}", cols.len())));
            }
            let label = HierLabel::from_fields([cols[1], cols[2], cols[3], cols[4]]).map_err(|msg| Error::Label {
                entry: format!("{}:{} ({})", origin, i + 1, cols[0]),
                msg,
            })?;
            let p = Path::new(cols[0]);
            let path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            entries.push(ManifestEntry { path, label });
        }
        Ok(Self { entries, split, protocol })
    }

    /// Serializes with paths written relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut out = format!(
            "# split={} protocol={} resize={RESIZE_METHOD}\n",
            self.split,
            if self.protocol.is_empty() { "-" } else { &self.protocol }
        );
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            let f = e.label.to_fields();
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", p.display(), f[0], f[1], f[2], f[3]));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        fs::write(path, self.to_text(base)).at(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, a: Authenticity) -> usize {
        self.entries.iter().filter(|e| e.label.authenticity() == a).count()
    }

    /// Training manifests need both classes.
    pub fn check_trainable(&self) -> Result<()> {
        if self.count(Authenticity::Real) == 0 || self.count(Authenticity::Fake) == 0 {
            return Err(Error::Config(format!(
                "training manifest needs real and fake entries (real={}, fake={})",
                self.count(Authenticity::Real),
                self.count(Authenticity::Fake)
            )));
        }
        Ok(())
    }

    pub fn load_sample(&self, i: usize) -> Result<ImageSample> {
        let e = &self.entries[i];
        Ok(ImageSample {
            pixels: load_image(&e.path)?,
            label: e.label.clone(),
            source_id: e.path.display().to_string(),
        })
    }

    /// Deterministic split into two manifests; `fraction` of each class goes
    /// to the first.
    pub fn split_stratified(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut first = Vec::new();
        let mut second = Vec::new();
        for a in [Authenticity::Real, Authenticity::Fake] {
            let mut idx: Vec<usize> = (0..self.entries.len())
                .filter(|&i| self.entries[i].label.authenticity() == a)
                .collect();
            idx.shuffle(&mut rng);
            let k = (idx.len() as f64 * fraction).round() as usize;
            first.extend(idx[..k].iter().map(|&i| self.entries[i].clone()));
            second.extend(idx[k..].iter().map(|&i| self.entries[i].clone()));
        }
        (
            Self::new(first, Split::Train, self.protocol.clone()),
            Self::new(second, Split::Test, self.protocol.clone()),
        )
    }
}

/// Decodes an image, resizes it to 224 x 224 and returns `3 x 224 x 224`
/// values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let cached = cache_path(path);
    if let Some(c) = &cached {
        if let Ok(bytes) = fs::read(c) {
            if bytes.len() == 3 * IMAGE_SIZE * IMAGE_SIZE {
                let img = RgbImage::from_raw(IMAGE_SIZE as u32, IMAGE_SIZE as u32, bytes).unwrap();
                return Ok(rgb_to_tensor(&img));
            }
        }
    }
    let img = image::open(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let img = resize_to_input(img);
    if let Some(c) = cached {
        // A failed cache write only costs a re-decode next time.
        let _ = fs::create_dir_all(c.parent().unwrap()).and_then(|_| fs::write(&c, img.as_raw()));
    }
    Ok(rgb_to_tensor(&img))
}

fn resize_to_input(img: RgbImage) -> RgbImage {
    if img.width() as usize == IMAGE_SIZE && img.height() as usize == IMAGE_SIZE {
        img
    } else {
        image::imageops::resize(&img, IMAGE_SIZE as u32, IMAGE_SIZE as u32, FilterType::Triangle)
    }
}

fn cache_path(path: &Path) -> Option<PathBuf> {
    let dir = std::env::var_os(CACHE_ENV)?;
    let meta = fs::metadata(path).ok()?;
    let mut h = DefaultHasher::new();
    path.canonicalize().ok()?.hash(&mut h);
    meta.len().hash(&mut h);
    meta.modified().ok()?.hash(&mut h);
    Some(PathBuf::from(dir).join(format!("img-{:016x}.rgb", h.finish())))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).unwrap()
}

/// `3 x h x w` values in `[0, 1]` to 8-bit RGB (rounded, clamped).
pub fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_rgb(t).save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Shuffled, partial final batch dropped.
    Train,
    /// Manifest order, partial final batch kept.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodePolicy {
    Abort,
    /// Skip undecodable images, remembering their paths.
    Skip,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<ImageSample>,
    pub labels: Vec<OneHotLabel>,
}

impl Batch {
    pub fn from_samples(samples: Vec<ImageSample>) -> Self {
        let labels = samples.iter().map(|s| s.label.one_hot()).collect();
        Self { samples, labels }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn source_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.source_id.clone()).collect()
    }
}

pub struct BatchIter<'m> {
    manifest: &'m DatasetManifest,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    mode: Mode,
    policy: DecodePolicy,
    skipped: Vec<PathBuf>,
}

impl<'m> BatchIter<'m> {
    pub fn new(manifest: &'m DatasetManifest, batch_size: usize, seed: u64, mode: Mode) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Config("cannot batch an empty manifest".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..manifest.len()).collect();
        if mode == Mode::Train {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(Self {
            manifest,
            order,
            pos: 0,
            batch_size,
            mode,
            policy: DecodePolicy::Abort,
            skipped: Vec::new(),
        })
    }

    pub fn with_policy(mut self, policy: DecodePolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Manifest indices in iteration order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn skipped(&self) -> &[PathBuf] {
        &self.skipped
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut samples = Vec::with_capacity(self.batch_size);
        while samples.len() < self.batch_size && self.pos < self.order.len() {
            let i = self.order[self.pos];
            self.pos += 1;
            match self.manifest.load_sample(i) {
                Ok(s) => samples.push(s),
                Err(e @ Error::Decode { .. }) if self.policy == DecodePolicy::Skip => {
                    if let Error::Decode { path, .. } = e {
                        self.skipped.push(path);
                    }
                }
                Err(e) => return Some(Err(e)),
            }
        }
        let full = samples.len() == self.batch_size;
        if samples.is_empty() || (!full && self.mode == Mode::Train) {
            return None;
        }
        Some(Ok(Batch::from_samples(samples)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FOUR: &str = "# split=train protocol=demo\n\
        a.png\treal\t-\t-\t-\n\
        b.png\tfake\tFS\tdiffusion\tDiffFace\n\
        c.png\tfake\tAM\tGAN\tIAFaces\n\
        d.png\tfake\tEFS\t-\t-\n";

    #[test]
    fn parses_four_entries() {
        let m = DatasetManifest::parse(FOUR, Path::new("/data"), "m.tsv").unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.protocol, "demo");
        assert_eq!(m.entries[0].path, Path::new("/data/a.png"));
        assert_eq!(m.count(Authenticity::Fake), 3);
        let back = DatasetManifest::parse(&m.to_text(Path::new("/data")), Path::new("/data"), "x").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn nesting_violation_names_entry() {
        let text = "x.png\treal\t-\t-\t-\nbad.png\tfake\tFS\t-\tDiffFace\n";
        let err = DatasetManifest::parse(text, Path::new("."), "m.tsv").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.png") && msg.contains("m.tsv:2"), "{msg}");
    }

    #[test]
    fn parse_error_reports_line() {
        let err = DatasetManifest::parse("a.png\treal\n", Path::new("."), "m.tsv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn class_counts_match_text_scan() {
        let mut text = String::new();
        for i in 0..100 {
            if (i * 7 + 3) % 5 < 2 {
                text.push_str(&format!("r{i}.png\treal\t-\t-\t-\n"));
            } else {
                text.push_str(&format!("f{i}.png\tfake\tEFS\tdiffusion\tDDPM\n"));
            }
        }
        let oracle_real = text.lines().filter(|l| l.split('\t').nth(1) == Some("real")).count();
        let m = DatasetManifest::parse(&text, Path::new("."), "m").unwrap();
        assert_eq!(m.count(Authenticity::Real), oracle_real);
        assert_eq!(m.count(Authenticity::Fake), 100 - oracle_real);
    }

    #[test]
    fn tensor_rgb_round_trip() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| (i % 256) as f64 / 255.0);
        assert_eq!(rgb_to_tensor(&tensor_to_rgb(&t)), t);
    }
}
