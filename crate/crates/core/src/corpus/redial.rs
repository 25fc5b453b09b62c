//! Raw dialogue formats: the ReDial release and the normalized JSONL corpus.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::ItemId;
use super::Speaker;
use crate::error::{Error, Result};

/// Item mention inside a normalized turn; offsets are char indices into `text`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMention {
    pub surface: String,
    pub item_id: ItemId,
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTurn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub items: Vec<ItemMention>,
}

/// One line of the normalized corpus format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDialogue {
    pub id: String,
    pub turns: Vec<RawTurn>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnknownMention {
    pub line: usize,
    pub dialogue_id: String,
    pub item_id: String,
}

#[derive(Clone, Debug, Default)]
pub struct RedialLoad {
    pub dialogues: Vec<RawDialogue>,
    /// Item id → display name, merged over all records.
    pub item_names: BTreeMap<ItemId, String>,
    pub unknown_mentions: Vec<UnknownMention>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RedialRecord {
    conversation_id: serde_json::Value,
    #[serde(default)]
    initiator_worker_id: Option<i64>,
    #[serde(default)]
    movie_mentions: serde_json::Value,
    messages: Vec<RedialMessage>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RedialMessage {
    text: String,
    sender_worker_id: i64,
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Rewrites `@<digits>` markers as movie names, recording each as a mention.
/// Markers whose id is missing from `names` stay as plain text.
pub fn resolve_mentions(
    text: &str,
    names: &BTreeMap<ItemId, String>,
    mut on_unknown: impl FnMut(&str),
) -> (String, Vec<ItemMention>) {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut out_len = 0usize;
    let mut mentions = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '@' && i + 1 < chars.len() && chars[i + 1].is_ascii_digit() {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            let id: String = chars[i + 1..j].iter().collect();
            if let Some(name) = names.get(&id) {
                let n = name.chars().count();
                mentions.push(ItemMention {
                    surface: name.clone(),
                    item_id: id,
                    char_start: out_len,
                    char_end: out_len + n,
                });
                out.push_str(name);
                out_len += n;
            } else {
                on_unknown(&id);
                for c in &chars[i..j] {
                    out.push(*c);
                }
                out_len += j - i;
            }
            i = j;
        } else {
            out.push(chars[i]);
            out_len += 1;
            i += 1;
        }
    }
    (out, mentions)
}

/// Parses the ReDial release (one JSON conversation per line). Speakers are
/// assigned by comparing each sender with the conversation initiator.
pub fn parse_redial<R: BufRead>(reader: R, source: &Path) -> Result<RedialLoad> {
    let mut load = RedialLoad::default();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RedialRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.into(),
            line: lineno,
            message: e.to_string(),
        })?;
        let names: BTreeMap<ItemId, String> = match &record.movie_mentions {
            serde_json::Value::Object(map) => map
                .iter()
                .filter_map(|(k, v)| v.as_str().map(|name| (k.clone(), name.trim().to_string())))
                .collect(),
            serde_json::Value::Null | serde_json::Value::Array(_) => BTreeMap::new(),
            other => {
                return Err(Error::Parse {
                    path: source.into(),
                    line: lineno,
                    message: format!("movieMentions must be an object, got {other}"),
                })
            }
        };
        let dialogue_id = id_string(&record.conversation_id);
        let initiator = record
            .initiator_worker_id
            .or_else(|| record.messages.first().map(|m| m.sender_worker_id));
        let mut turns = Vec::with_capacity(record.messages.len());
        for msg in &record.messages {
            let speaker = if Some(msg.sender_worker_id) == initiator { Speaker::Seeker } else { Speaker::Recommender };
            let (text, items) = resolve_mentions(&msg.text, &names, |id| {
                load.unknown_mentions.push(UnknownMention {
                    line: lineno,
                    dialogue_id: dialogue_id.clone(),
                    item_id: id.to_string(),
                })
            });
            turns.push(RawTurn { speaker, text, items });
        }
        for (k, v) in names {
            load.item_names.entry(k).or_insert(v);
        }
        load.dialogues.push(RawDialogue { id: dialogue_id, turns });
    }
    for u in &load.unknown_mentions {
        log::warn!("line {}: dialogue {} mentions unknown item @{}", u.line, u.dialogue_id, u.item_id);
    }
    Ok(load)
}

pub fn load_redial(path: &Path) -> Result<RedialLoad> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_redial(BufReader::new(f), path)
}

pub fn read_normalized(path: &Path) -> Result<Vec<RawDialogue>> {
    read_jsonl(path)
}

pub fn write_normalized(path: &Path, dialogues: &[RawDialogue]) -> Result<()> {
    write_jsonl(path, dialogues)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RedialLoad> {
        parse_redial(s.as_bytes(), Path::new("test.jsonl"))
    }

    #[test]
    fn single_seeker_utterance_without_mentions() {
        let load = parse(
            r#"{"conversationId":"1","initiatorWorkerId":5,"movieMentions":[],"messages":[{"text":"hello","senderWorkerId":5}]}"#,
        )
        .unwrap();
        assert_eq!(load.dialogues.len(), 1);
        let d = &load.dialogues[0];
        assert_eq!(d.turns.len(), 1);
        assert_eq!(d.turns[0].speaker, Speaker::Seeker);
        assert!(d.turns[0].items.is_empty());
    }

    #[test]
    fn marker_becomes_mention_with_offsets() {
        let load = parse(
            r#"{"conversationId":7,"initiatorWorkerId":1,"movieMentions":{"111776":"It (2017)"},"messages":[{"text":"hi","senderWorkerId":1},{"text":"I loved @111776","senderWorkerId":2}]}"#,
        )
        .unwrap();
        let turn = &load.dialogues[0].turns[1];
        assert_eq!(turn.speaker, Speaker::Recommender);
        assert_eq!(turn.text, "I loved It (2017)");
        assert_eq!(
            turn.items,
            vec![ItemMention { surface: "It (2017)".into(), item_id: "111776".into(), char_start: 8, char_end: 17 }]
        );
        assert_eq!(load.item_names["111776"], "It (2017)");
        assert_eq!(load.dialogues[0].id, "7");
    }

    #[test]
    fn unknown_mention_stays_plain_text() {
        let load = parse(
            r#"{"conversationId":"2","initiatorWorkerId":1,"movieMentions":{},"messages":[{"text":"seen @999 ?","senderWorkerId":1}]}"#,
        )
        .unwrap();
        assert_eq!(load.dialogues[0].turns[0].text, "seen @999 ?");
        assert!(load.dialogues[0].turns[0].items.is_empty());
        assert_eq!(load.unknown_mentions, vec![UnknownMention { line: 1, dialogue_id: "2".into(), item_id: "999".into() }]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("{\"conversationId\":\"1\",\"messages\":[]}\n{not json").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
