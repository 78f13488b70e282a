use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CandidateSet, DialogueEpisode, Persona, Speaker, Turn};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// ParlAI Persona-Chat text: `<idx> your persona: ...` profile lines, then
    /// `<idx> <utterance>\t<response>\t\t<cand|...|cand>` exchange lines.
    ParlaiText,
    /// One JSON object per episode.
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parlai_text" | "parlai" => Ok(CorpusFormat::ParlaiText),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(Error::InvalidArgument(format!(
                "unknown corpus format '{other}' (expected parlai_text or jsonl)"
            ))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    persona_a: Vec<String>,
    persona_b: Vec<String>,
    turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    candidates: Option<Vec<CandidateSet>>,
}

impl From<&DialogueEpisode> for EpisodeRecord {
    fn from(ep: &DialogueEpisode) -> Self {
        EpisodeRecord {
            persona_a: ep
                .persona_a
                .as_ref()
                .map(|p| p.profiles.clone())
                .unwrap_or_default(),
            persona_b: ep.persona_b.profiles.clone(),
            turns: ep.turns.clone(),
            candidates: ep.candidates.clone(),
        }
    }
}

impl TryFrom<EpisodeRecord> for DialogueEpisode {
    type Error = Error;

    fn try_from(rec: EpisodeRecord) -> Result<Self> {
        let persona_a = if rec.persona_a.is_empty() {
            None
        } else {
            Some(Persona::new(rec.persona_a)?)
        };
        let ep = DialogueEpisode {
            persona_a,
            persona_b: Persona::new(rec.persona_b)?,
            turns: rec.turns,
            candidates: rec.candidates,
        };
        ep.validate()?;
        Ok(ep)
    }
}

/// Parses a whole corpus. An empty stream yields an empty list.
pub fn parse_corpus<R: BufRead>(reader: R, format: CorpusFormat) -> Result<Vec<DialogueEpisode>> {
    match format {
        CorpusFormat::Jsonl => parse_jsonl(reader),
        CorpusFormat::ParlaiText => parse_parlai(reader),
    }
}

pub fn read_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<DialogueEpisode>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file), format)
}

pub fn write_jsonl<W: Write>(episodes: &[DialogueEpisode], mut out: W) -> Result<()> {
    for ep in episodes {
        serde_json::to_writer(&mut out, &EpisodeRecord::from(ep))?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

fn lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader.lines().enumerate().map(|(i, line)| {
        let n = i + 1;
        line.map(|l| (n, l)).map_err(|e| Error::Parse {
            line: n,
            rule: format!("stream is not valid UTF-8 text ({e})"),
        })
    })
}

fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<DialogueEpisode>> {
    let mut episodes = Vec::new();
    for item in lines(reader) {
        let (n, line) = item?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n,
            rule: format!("malformed episode record: {e}"),
        })?;
        let ep = DialogueEpisode::try_from(rec).map_err(|e| at_line(n, e))?;
        episodes.push(ep);
    }
    Ok(episodes)
}

fn at_line(line: usize, err: Error) -> Error {
    match err {
        Error::Episode(rule) => Error::Parse { line, rule },
        other => other,
    }
}

#[derive(Default)]
struct PendingEpisode {
    start_line: usize,
    persona_a: Vec<String>,
    persona_b: Vec<String>,
    turns: Vec<Turn>,
    candidates: Vec<Option<CandidateSet>>,
}

impl PendingEpisode {
    fn is_empty(&self) -> bool {
        self.persona_a.is_empty() && self.persona_b.is_empty() && self.turns.is_empty()
    }

    fn finish(self) -> Result<DialogueEpisode> {
        let line = self.start_line;
        if self.persona_b.is_empty() {
            return Err(Error::Parse {
                line,
                rule: "episode has no 'your persona:' lines".into(),
            });
        }
        let with_cands = self.candidates.iter().filter(|c| c.is_some()).count();
        let candidates = if with_cands == 0 {
            None
        } else if with_cands == self.candidates.len() {
            Some(self.candidates.into_iter().flatten().collect())
        } else {
            return Err(Error::Parse {
                line,
                rule: "candidates present on some exchanges but not others".into(),
            });
        };
        let persona_a = if self.persona_a.is_empty() {
            None
        } else {
            Some(Persona::new(self.persona_a).map_err(|e| at_line(line, e))?)
        };
        let ep = DialogueEpisode {
            persona_a,
            persona_b: Persona::new(self.persona_b).map_err(|e| at_line(line, e))?,
            turns: self.turns,
            candidates,
        };
        ep.validate().map_err(|e| at_line(line, e))?;
        Ok(ep)
    }
}

fn parse_parlai<R: BufRead>(reader: R) -> Result<Vec<DialogueEpisode>> {
    let mut episodes = Vec::new();
    let mut pending = PendingEpisode::default();
    for item in lines(reader) {
        let (n, line) = item?;
        if line.trim().is_empty() {
            continue;
        }
        let (idx, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
        let idx: usize = idx.parse().map_err(|_| Error::Parse {
            line: n,
            rule: format!("line must start with a numeric index, found '{idx}'"),
        })?;
        if idx == 1 && !pending.is_empty() {
            episodes.push(std::mem::take(&mut pending).finish()?);
        }
        if pending.is_empty() {
            pending.start_line = n;
        }

        let profile = rest
            .strip_prefix("your persona:")
            .map(|p| (Speaker::B, p))
            .or_else(|| rest.strip_prefix("partner's persona:").map(|p| (Speaker::A, p)));
        if let Some((speaker, sentence)) = profile {
            if !pending.turns.is_empty() {
                return Err(Error::Parse {
                    line: n,
                    rule: "persona line after dialogue turns".into(),
                });
            }
            let target = match speaker {
                Speaker::A => &mut pending.persona_a,
                Speaker::B => &mut pending.persona_b,
            };
            target.push(sentence.trim().to_string());
            continue;
        }

        let fields: Vec<&str> = rest.split('\t').collect();
        let utterance = fields[0].trim();
        let response = fields.get(1).map(|r| r.trim()).unwrap_or("");
        if utterance.is_empty() {
            return Err(Error::Parse {
                line: n,
                rule: "turn order: B response without a preceding A utterance".into(),
            });
        }
        if response.is_empty() {
            return Err(Error::Parse {
                line: n,
                rule: "exchange line needs a tab-separated response".into(),
            });
        }
        let cands = match fields.get(3).map(|c| c.trim()).filter(|c| !c.is_empty()) {
            None => None,
            Some(raw) => {
                let texts: Vec<String> = raw.split('|').map(|c| c.trim().to_string()).collect();
                let hits: Vec<usize> = texts
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| *t == response)
                    .map(|(i, _)| i)
                    .collect();
                match hits.as_slice() {
                    [gold] => Some(CandidateSet { texts, gold: *gold }),
                    [] => {
                        return Err(Error::Parse {
                            line: n,
                            rule: "candidate list does not contain the response".into(),
                        })
                    }
                    _ => {
                        return Err(Error::Parse {
                            line: n,
                            rule: "candidate list contains the response more than once".into(),
                        })
                    }
                }
            }
        };
        pending.turns.push(Turn::new(Speaker::A, utterance));
        pending.turns.push(Turn::new(Speaker::B, response));
        pending.candidates.push(cands);
    }
    if !pending.is_empty() {
        episodes.push(pending.finish()?);
    }
    Ok(episodes)
}
