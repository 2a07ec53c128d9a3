//! Corpus loading, character vocabulary, train/validation split and batch
//! sampling.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::DataError;

/// Canonical public copy of the Tiny Shakespeare corpus.
pub const DEFAULT_CORPUS_URL: &str =
    "https://raw.githubusercontent.com/karpathy/char-rnn/master/data/tinyshakespeare/input.txt";

/// Environment variable that overrides the download cache directory.
pub const DATA_DIR_ENV: &str = "JOFORMER_DATA_DIR";

/// Cache directory for downloaded corpora: `$JOFORMER_DATA_DIR`, or `data`.
pub fn default_cache_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Text loaded by [`load_or_fetch`].
#[derive(Debug, Clone)]
pub struct LoadedText {
    pub text: String,
    /// Where the text lives on disk (the cache file for downloads).
    pub path: PathBuf,
    /// True when a download was answered from the cache.
    pub cache_hit: bool,
}

fn is_url(source: &str) -> bool {
    source.starts_with("http://") || source.starts_with("https://")
}

/// Cache file name for a URL: its last path segment, or `corpus.txt`.
pub fn cache_path_for(url: &str, cache_dir: &Path) -> PathBuf {
    let name = url
        .rsplit('/')
        .next()
        .filter(|s| !s.is_empty() && !s.contains(':'))
        .unwrap_or("corpus.txt");
    cache_dir.join(name)
}

/// Reads a local file, or downloads a URL into `cache_dir` (reusing a cached
/// copy when present). Downloads are written to a temporary file and renamed
/// into place, so a failed fetch leaves nothing behind.
pub fn load_or_fetch(source: &str, cache_dir: &Path) -> Result<LoadedText, DataError> {
    if !is_url(source) {
        let path = PathBuf::from(source);
        let text = read_text(&path)?;
        return Ok(LoadedText {
            text,
            path,
            cache_hit: false,
        });
    }
    let path = cache_path_for(source, cache_dir);
    if path.is_file() {
        let text = read_text(&path)?;
        return Ok(LoadedText {
            text,
            path,
            cache_hit: true,
        });
    }
    let text = download(source)?;
    if text.is_empty() {
        return Err(DataError::Empty(source.to_string()));
    }
    fs::create_dir_all(cache_dir).map_err(|source| DataError::Write {
        path: cache_dir.to_path_buf(),
        source,
    })?;
    let partial = path.with_extension("partial");
    let write_err = |source| DataError::Write {
        path: path.clone(),
        source,
    };
    fs::write(&partial, &text).map_err(write_err)?;
    fs::rename(&partial, &path).map_err(write_err)?;
    Ok(LoadedText {
        text,
        path,
        cache_hit: false,
    })
}

fn read_text(path: &Path) -> Result<String, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    if text.is_empty() {
        return Err(DataError::Empty(path.display().to_string()));
    }
    Ok(text)
}

const FETCH_TIMEOUT: std::time::Duration = std::time::Duration::from_secs(60);

fn download(url: &str) -> Result<String, DataError> {
    let fetch_err = |message: String| DataError::Fetch {
        url: url.to_string(),
        message,
    };
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(FETCH_TIMEOUT))
        .build()
        .into();
    let response = agent.get(url).call().map_err(|e| fetch_err(e.to_string()))?;
    let mut body = String::new();
    response
        .into_body()
        .into_reader()
        .read_to_string(&mut body)
        .map_err(|e| fetch_err(e.to_string()))?;
    Ok(body)
}

/// Bijection between the characters of a corpus and dense ids, ordered by
/// ascending code point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    ids: [Option<u8>; 128],
}

impl Vocabulary {
    /// Collects the distinct characters of an ASCII text.
    pub fn build(text: &str) -> Result<Self, DataError> {
        if let Some((offset, ch)) = text.char_indices().find(|(_, c)| !c.is_ascii()) {
            return Err(DataError::NonAscii { ch, offset });
        }
        let set: BTreeSet<char> = text.chars().collect();
        Ok(Self::from_chars(set.into_iter().collect()))
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let mut ids = [None; 128];
        for (i, &c) in chars.iter().enumerate() {
            ids[c as usize] = Some(i as u8);
        }
        Vocabulary { chars, ids }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, ch: char) -> Option<usize> {
        self.ids.get(ch as usize).copied().flatten().map(usize::from)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, DataError> {
        text.char_indices()
            .map(|(offset, ch)| self.id(ch).ok_or(DataError::UnknownChar { ch, offset }))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, DataError> {
        ids.iter()
            .enumerate()
            .map(|(offset, &id)| self.chars.get(id).copied().ok_or(DataError::UnknownId { id, offset }))
            .collect()
    }
}

/// Contiguous split: the first 90% of the ids train, the rest validate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl CorpusSplit {
    pub fn new(mut ids: Vec<usize>) -> Self {
        let boundary = ids.len() * 9 / 10;
        let val = ids.split_off(boundary);
        CorpusSplit { train: ids, val }
    }
}

/// Encoded corpus ready for training.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub split: CorpusSplit,
}

impl Dataset {
    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let vocab = Vocabulary::build(text)?;
        let ids = vocab.encode(text)?;
        Ok(Dataset {
            vocab,
            split: CorpusSplit::new(ids),
        })
    }
}

/// `batch × seq` token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Self {
        assert_eq!(ids.len(), batch * seq, "token batch size");
        TokenBatch { batch, seq, ids }
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Inputs and next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: TokenBatch,
    pub targets: Vec<usize>,
}

/// Draws `batch` windows with start offsets uniform on `[0, len − seq − 1]`;
/// targets are the inputs shifted by one position.
pub fn sample_batch<R: Rng + ?Sized>(split: &[usize], batch: usize, seq: usize, rng: &mut R) -> Result<Batch, DataError> {
    if seq == 0 || split.len() <= seq {
        return Err(DataError::TooShort {
            len: split.len(),
            seq_len: seq,
        });
    }
    let max_start = split.len() - seq - 1;
    let mut inputs = Vec::with_capacity(batch * seq);
    let mut targets = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let start = rng.random_range(0..=max_start);
        inputs.extend_from_slice(&split[start..start + seq]);
        targets.extend_from_slice(&split[start + 1..start + seq + 1]);
    }
    Ok(Batch {
        inputs: TokenBatch::new(batch, seq, inputs),
        targets,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn vocab_of_aba() {
        let v = Vocabulary::build("aba").unwrap();
        assert_eq!(v.chars(), &['a', 'b']);
        assert_eq!(v.encode("aba").unwrap(), vec![0, 1, 0]);
        assert_eq!(v.decode(&[1, 0]).unwrap(), "ba");
    }

    #[test]
    fn vocab_is_code_point_ordered_and_pure() {
        let text = "zebra, Apple!\n";
        let a = Vocabulary::build(text).unwrap();
        assert_eq!(a, Vocabulary::build(text).unwrap());
        assert!(a.chars().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.decode(&a.encode(text).unwrap()).unwrap(), text);
    }

    #[test]
    fn unknown_and_non_ascii_characters() {
        let v = Vocabulary::build("abc").unwrap();
        assert!(matches!(v.encode("abd"), Err(DataError::UnknownChar { ch: 'd', offset: 2 })));
        assert!(matches!(v.decode(&[0, 7]), Err(DataError::UnknownId { id: 7, offset: 1 })));
        assert!(matches!(Vocabulary::build("ab\u{e9}"), Err(DataError::NonAscii { offset: 2, .. })));
    }

    #[test]
    fn split_is_contiguous_ninety_ten() {
        let ids: Vec<usize> = (0..1003).collect();
        let split = CorpusSplit::new(ids.clone());
        assert_eq!(split.train.len(), 902);
        let mut joined = split.train.clone();
        joined.extend(&split.val);
        assert_eq!(joined, ids);
    }

    #[test]
    fn local_file_is_read_and_missing_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.txt");
        fs::write(&path, "abc").unwrap();
        let loaded = load_or_fetch(path.to_str().unwrap(), dir.path()).unwrap();
        assert_eq!(loaded.text, "abc");

        let missing = dir.path().join("nope.txt");
        let err = load_or_fetch(missing.to_str().unwrap(), dir.path()).unwrap_err();
        assert!(matches!(err, DataError::Read { .. }));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);

        fs::write(dir.path().join("empty.txt"), "").unwrap();
        let empty = dir.path().join("empty.txt");
        assert!(matches!(load_or_fetch(empty.to_str().unwrap(), dir.path()), Err(DataError::Empty(_))));
    }

    #[test]
    fn cached_download_is_reused() {
        let dir = tempfile::tempdir().unwrap();
        let url = "https://example.invalid/corpus/input.txt";
        fs::write(dir.path().join("input.txt"), "cached text").unwrap();
        let loaded = load_or_fetch(url, dir.path()).unwrap();
        assert!(loaded.cache_hit);
        assert_eq!(loaded.text, "cached text");
    }

    #[test]
    fn unreachable_url_leaves_no_partial_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_or_fetch("http://127.0.0.1:9/input.txt", dir.path()).unwrap_err();
        assert!(matches!(err, DataError::Fetch { .. }));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn targets_are_shifted_inputs() {
        let split: Vec<usize> = (0..50).map(|i| i % 7).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_batch(&split, 8, 5, &mut rng).unwrap();
        for b in 0..8 {
            let row = batch.inputs.row(b);
            let start = (0..split.len() - 5).find(|&s| split[s..s + 5] == *row).unwrap();
            for t in 0..5 {
                assert_eq!(batch.targets[b * 5 + t], split[start + t + 1]);
            }
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let split: Vec<usize> = (0..200).collect();
        let draw = |seed| sample_batch(&split, 4, 10, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn too_short_split_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_batch(&[1, 2, 3], 1, 3, &mut rng),
            Err(DataError::TooShort { len: 3, seq_len: 3 })
        ));
    }

    #[test]
    fn start_offsets_are_uniform() {
        // With split[i] = i the first input of each window is its start offset.
        let seq = 4;
        let split: Vec<usize> = (0..24).collect();
        let bins = split.len() - seq; // offsets 0..=19
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = vec![0usize; bins];
        let batch = sample_batch(&split, draws, seq, &mut rng).unwrap();
        for b in 0..draws {
            counts[batch.inputs.row(b)[0]] += 1;
        }
        let expected = draws as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 19 degrees of freedom: mean 19, sd sqrt(38); accept within 3 sd
        let dof = (bins - 1) as f64;
        assert!(chi2 < dof + 3.0 * (2.0 * dof).sqrt(), "chi2 = {chi2}");
        assert!(counts.iter().all(|&c| c > 0));
    }
}
