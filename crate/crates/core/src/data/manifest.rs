use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{load_features, save_features};
use super::corpus::{Corpus, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// Relative to the manifest's directory.
    pub feat_path: PathBuf,
    pub tokens: Vec<usize>,
}

/// Tab-separated `utt_id`, feature path and space-joined tokens, one utterance per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub fn parse_tokens(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| format!("bad token {t:?}")))
        .collect()
}

pub fn format_tokens(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

impl Manifest {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(line, format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            let utt_id = fields[0].trim().to_string();
            if utt_id.is_empty() {
                return Err(err(line, "empty utt_id".into()));
            }
            if !seen.insert(utt_id.clone()) {
                return Err(err(line, format!("duplicate utt_id {utt_id}")));
            }
            let tokens = parse_tokens(fields[2]).map_err(|m| err(line, m))?;
            if tokens.is_empty() {
                return Err(err(line, "empty transcript".into()));
            }
            entries.push(ManifestEntry {
                utt_id,
                feat_path: PathBuf::from(fields[1].trim()),
                tokens,
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.utt_id, e.feat_path.display(), format_tokens(&e.tokens)))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Reads every feature file, resolving paths against `base`.
    pub fn load_utterances(&self, base: &Path, n_chars: usize) -> Result<Vec<Utterance>> {
        self.entries
            .iter()
            .map(|e| {
                if let Some(&bad) = e.tokens.iter().find(|&&t| t >= n_chars) {
                    return Err(Error::invalid(format!("{}: token {bad} outside vocabulary of {n_chars}", e.utt_id)));
                }
                let feats = load_features(base.join(&e.feat_path))?;
                if feats.shape()[0] == 0 {
                    return Err(Error::invalid(format!("{}: empty feature matrix", e.utt_id)));
                }
                Ok(Utterance {
                    utt_id: e.utt_id.clone(),
                    feats,
                    tokens: e.tokens.clone(),
                })
            })
            .collect()
    }
}

pub const META_FILE: &str = "meta.cfg";
pub const LM_FILE: &str = "lm.txt";

/// Writes `train.tsv`, `dev.tsv`, `test.tsv`, `feats/`, `lm.txt` and `meta.cfg` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let feats_dir = dir.join("feats");
    fs::create_dir_all(&feats_dir).map_err(|e| Error::io(&feats_dir, e))?;
    for (name, split) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        let mut m = Manifest::default();
        for u in &split.utts {
            let rel = PathBuf::from("feats").join(format!("{}.pfc", u.utt_id));
            save_features(dir.join(&rel), &u.feats)?;
            m.entries.push(ManifestEntry {
                utt_id: u.utt_id.clone(),
                feat_path: rel,
                tokens: u.tokens.clone(),
            });
        }
        m.write(dir.join(format!("{name}.tsv")))?;
    }
    write_token_lines(&dir.join(LM_FILE), &corpus.lm)?;
    let meta = format!(
        "vocab_size = {}\nd_feat = {}\nseed = {}\n",
        corpus.config.vocab_size, corpus.config.d_feat, corpus.config.seed
    );
    let p = dir.join(META_FILE);
    fs::write(&p, meta).map_err(|e| Error::io(&p, e))
}

pub fn write_token_lines(path: &Path, seqs: &[Vec<usize>]) -> Result<()> {
    let text: String = seqs.iter().map(|s| format_tokens(s) + "\n").collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One token sequence per non-blank line.
pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_tokens(l).map_err(|msg| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, CorpusConfig};

    #[test]
    fn duplicate_ids_report_line() {
        let text = "a\tf/a.pfc\t1 2\n\nb\tf/b.pfc\t3\na\tf/c.pfc\t4\n";
        let err = Manifest::parse(text, "m.tsv").unwrap_err().to_string();
        assert!(err.contains("m.tsv:4") && err.contains("duplicate"), "{err}");
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(Manifest::parse("a\tb\n", "m").is_err());
        assert!(Manifest::parse("a\tb\tx y\n", "m").is_err());
        assert!(Manifest::parse("a\tb\t\n", "m").is_err());
    }

    #[test]
    fn corpus_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            n_train: 4,
            n_dev: 2,
            n_test: 2,
            n_lm: 3,
            ..CorpusConfig::default()
        };
        let c = gen_corpus(&cfg).unwrap();
        write_corpus(dir.path(), &c).unwrap();
        let m = Manifest::read(dir.path().join("train.tsv")).unwrap();
        let utts = m.load_utterances(dir.path(), 16).unwrap();
        assert_eq!(utts, c.train.utts);
        assert_eq!(read_token_lines(&dir.path().join(LM_FILE)).unwrap(), c.lm);
        assert!(m.load_utterances(dir.path(), 2).is_err());
    }
}
