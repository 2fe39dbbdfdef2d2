//! JSON-lines dataset loading and the vocabulary file.

use super::tensor_file::read_tensor_file;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

/// Token-string to index mapping. Index = line number in the vocabulary
/// file; line 0 is the padding token, line 1 the unknown token.
#[derive(Debug, Clone)]
pub struct Vocab {
    map: HashMap<String, u32>,
    tokens: Vec<String>,
    checksum: String,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Config(
                "vocabulary needs at least the pad and unknown tokens".into(),
            ));
        }
        let mut map = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if map.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token: {t}")));
            }
        }
        let mut hasher = Sha256::new();
        for t in &tokens {
            hasher.update(t.as_bytes());
            hasher.update([b'\n']);
        }
        let checksum: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(Vocab {
            map,
            tokens,
            checksum,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// SHA-256 over the token list, recorded in checkpoints so a model is
    /// never silently rejoined with a different vocabulary.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn index_of(&self, token: &str) -> u32 {
        self.map.get(token).copied().unwrap_or(UNK)
    }

    /// Whitespace tokenization, unknown tokens mapped to index 1.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.index_of(t)).collect()
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }
}

/// Load a vocabulary file (one token per line).
pub fn load_vocab<P: AsRef<Path>>(path: P) -> Result<Vocab> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| {
        Error::Config(format!("cannot read vocabulary {}: {e}", path.as_ref().display()))
    })?;
    Vocab::from_tokens(text.lines().map(str::to_string).collect())
}

/// One five-way multiple-choice item with optional feature streams.
#[derive(Debug, Clone)]
pub struct QAItem {
    pub qid: String,
    pub question: Vec<u32>,
    pub answers: [Vec<u32>; 5],
    pub correct: usize,
    pub subtitle: Vec<u32>,
    pub video: Option<Tensor<f32>>,
    pub audio: Option<Tensor<f32>>,
}

/// What to do with items whose audio stream is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingAudioPolicy {
    /// Drop the item (the default; matches studying only clips with audio).
    Skip,
    /// Keep the item with a single all-zero feature row of the given width.
    ZeroFill { dim: usize },
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub missing_audio: MissingAudioPolicy,
    /// When set, audio features are read from `{dir}/{qid}.audio.tnsr`
    /// instead of the per-item path — used to swap feature variants.
    pub audio_override: Option<PathBuf>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            missing_audio: MissingAudioPolicy::Skip,
            audio_override: None,
        }
    }
}

#[derive(Deserialize)]
struct RawItem {
    qid: String,
    question: String,
    answers: Vec<String>,
    correct: usize,
    subtitle: String,
    #[serde(default)]
    video_features: Option<String>,
    #[serde(default)]
    audio_features: Option<String>,
}

fn data_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Data {
        line,
        msg: msg.into(),
    }
}

fn load_features(base: &Path, rel: &str, line: usize) -> Result<Tensor<f32>> {
    let path = base.join(rel);
    if !path.exists() {
        return Err(data_err(line, format!("feature file not found: {}", path.display())));
    }
    let (t, _) = read_tensor_file(&path)?;
    if t.rank() != 2 {
        return Err(data_err(
            line,
            format!("feature file {} has rank {}, expected 2", path.display(), t.rank()),
        ));
    }
    Ok(t)
}

/// Load a JSONL dataset. Paths inside the file are resolved relative to the
/// dataset file's directory.
pub fn load_dataset<P: AsRef<Path>>(path: P, vocab: &Vocab, opts: &LoadOptions) -> Result<Vec<QAItem>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read dataset {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawItem = serde_json::from_str(line)
            .map_err(|e| data_err(lineno, format!("invalid JSON: {e}")))?;
        if raw.answers.len() != 5 {
            return Err(data_err(
                lineno,
                format!("expected 5 answers, got {}", raw.answers.len()),
            ));
        }
        if raw.correct >= 5 {
            return Err(data_err(lineno, format!("correct index {} out of range", raw.correct)));
        }
        let question = vocab.tokenize(&raw.question);
        if question.is_empty() {
            return Err(data_err(lineno, "empty question"));
        }
        let answers: Vec<Vec<u32>> = raw.answers.iter().map(|a| vocab.tokenize(a)).collect();
        if answers.iter().any(|a| a.is_empty()) {
            return Err(data_err(lineno, "empty answer option"));
        }
        let video = match &raw.video_features {
            Some(rel) => Some(load_features(&base, rel, lineno)?),
            None => None,
        };
        let audio = if let Some(dir) = &opts.audio_override {
            let p = dir.join(format!("{}.audio.tnsr", raw.qid));
            if !p.exists() {
                return Err(data_err(
                    lineno,
                    format!("override feature file not found: {}", p.display()),
                ));
            }
            let (t, _) = read_tensor_file(&p)?;
            Some(t)
        } else {
            match &raw.audio_features {
                Some(rel) => Some(load_features(&base, rel, lineno)?),
                None => match opts.missing_audio {
                    MissingAudioPolicy::Skip => continue,
                    MissingAudioPolicy::ZeroFill { dim } => Some(Tensor::zeros(&[1, dim])),
                },
            }
        };
        items.push(QAItem {
            qid: raw.qid,
            question,
            answers: answers.try_into().expect("checked length 5"),
            correct: raw.correct,
            subtitle: vocab.tokenize(&raw.subtitle),
            video,
            audio,
        });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tensor_file::write_tensor_file;
    use serde_json::json;

    fn test_vocab() -> Vocab {
        Vocab::from_tokens(
            ["<pad>", "<unk>", "what", "is", "this", "event_0", "event_1"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }

    fn write_line(dir: &Path, lines: &[serde_json::Value]) -> PathBuf {
        let path = dir.join("data.jsonl");
        let text: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        fs::write(&path, text.join("\n")).unwrap();
        path
    }

    fn item_json(qid: &str, audio: Option<&str>) -> serde_json::Value {
        json!({
            "qid": qid,
            "question": "what is this",
            "answers": ["event_0", "event_1", "event_0", "event_1", "event_0"],
            "correct": 2,
            "subtitle": "what what",
            "video_features": "v.tnsr",
            "audio_features": audio,
        })
    }

    fn prepare(dir: &Path) {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        write_tensor_file(dir.join("v.tnsr"), &t, &json!({})).unwrap();
        write_tensor_file(dir.join("a.tnsr"), &t, &json!({})).unwrap();
    }

    #[test]
    fn well_formed_lines_load() {
        let dir = tempfile::tempdir().unwrap();
        prepare(dir.path());
        let path = write_line(
            dir.path(),
            &[item_json("q1", Some("a.tnsr")), item_json("q2", Some("a.tnsr"))],
        );
        let items = load_dataset(&path, &test_vocab(), &LoadOptions::default()).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].question, vec![2, 3, 4]);
        assert_eq!(items[0].correct, 2);
        assert_eq!(items[0].video.as_ref().unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn four_answers_cite_the_line_number() {
        let dir = tempfile::tempdir().unwrap();
        prepare(dir.path());
        let mut bad = item_json("q1", Some("a.tnsr"));
        bad["answers"] = json!(["a", "b", "c", "d"]);
        let path = write_line(dir.path(), &[bad]);
        match load_dataset(&path, &test_vocab(), &LoadOptions::default()) {
            Err(Error::Data { line, msg }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("5 answers"), "{msg}");
            }
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_tokens_map_to_index_one() {
        let v = test_vocab();
        assert_eq!(v.tokenize("what zzz this"), vec![2, UNK, 4]);
    }

    #[test]
    fn missing_audio_skips_by_default() {
        let dir = tempfile::tempdir().unwrap();
        prepare(dir.path());
        let path = write_line(
            dir.path(),
            &[item_json("q1", None), item_json("q2", Some("a.tnsr"))],
        );
        let items = load_dataset(&path, &test_vocab(), &LoadOptions::default()).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].qid, "q2");
    }

    #[test]
    fn missing_audio_zero_fill_keeps_the_item() {
        let dir = tempfile::tempdir().unwrap();
        prepare(dir.path());
        let path = write_line(dir.path(), &[item_json("q1", None)]);
        let opts = LoadOptions {
            missing_audio: MissingAudioPolicy::ZeroFill { dim: 7 },
            ..Default::default()
        };
        let items = load_dataset(&path, &test_vocab(), &opts).unwrap();
        assert_eq!(items.len(), 1);
        let a = items[0].audio.as_ref().unwrap();
        assert_eq!(a.shape(), &[1, 7]);
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unresolvable_feature_path_is_a_line_error() {
        let dir = tempfile::tempdir().unwrap();
        prepare(dir.path());
        let path = write_line(dir.path(), &[item_json("q1", Some("nope.tnsr"))]);
        match load_dataset(&path, &test_vocab(), &LoadOptions::default()) {
            Err(Error::Data { line, msg }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("nope.tnsr"), "{msg}");
            }
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn correct_index_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        prepare(dir.path());
        let mut bad = item_json("q1", Some("a.tnsr"));
        bad["correct"] = json!(5);
        let path = write_line(dir.path(), &[bad]);
        assert!(matches!(
            load_dataset(&path, &test_vocab(), &LoadOptions::default()),
            Err(Error::Data { line: 1, .. })
        ));
    }

    #[test]
    fn audio_override_swaps_feature_files() {
        let dir = tempfile::tempdir().unwrap();
        prepare(dir.path());
        let alt = dir.path().join("alt");
        fs::create_dir(&alt).unwrap();
        let special = Tensor::new(vec![1, 4], vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        write_tensor_file(alt.join("q1.audio.tnsr"), &special, &json!({})).unwrap();
        let path = write_line(dir.path(), &[item_json("q1", Some("a.tnsr"))]);
        let opts = LoadOptions {
            audio_override: Some(alt),
            ..Default::default()
        };
        let items = load_dataset(&path, &test_vocab(), &opts).unwrap();
        assert_eq!(items[0].audio.as_ref().unwrap().data(), &[9.0; 4]);
    }

    #[test]
    fn vocab_checksum_tracks_content() {
        let a = test_vocab();
        let b = Vocab::from_tokens(
            ["<pad>", "<unk>", "other"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum().len(), 64);
    }

    #[test]
    fn vocab_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = test_vocab();
        v.save(&path).unwrap();
        let back = load_vocab(&path).unwrap();
        assert_eq!(back.size(), v.size());
        assert_eq!(back.checksum(), v.checksum());
        assert_eq!(back.index_of("event_1"), v.index_of("event_1"));
    }
}
