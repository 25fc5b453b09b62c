//! Per-session conversation state over a frozen recommender.
//!
//! A session keeps the dialogue history and the accumulated entity set
//! T_u. Each seeker message is linked (item names, `@id` markers and link-map
//! surface forms), appended, and answered by one beam-search decode. When the
//! history no longer fits the model's context budget, whole turns are
//! dropped from the oldest end.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::redial::resolve_mentions;
use crate::corpus::{self, Dialogue, ItemId, ItemMention, ItemSpan, Speaker, TokenId, Utterance};
use crate::error::{Error, Result};
use crate::pipeline::Recommender;
use crate::vpdecode::{DecodeConfig, RenderedSpan};

pub const DEFAULT_IDLE: Duration = Duration::from_secs(30 * 60);

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub history: Vec<Utterance>,
    /// T_u: linked entities in order of first mention; never shrinks.
    pub entities: Vec<String>,
    pub created: SystemTime,
    pub last_active: Instant,
    pub decode: DecodeConfig,
}

impl Session {
    pub fn new(id: String, decode: DecodeConfig) -> Self {
        Session { id, history: Vec::new(), entities: Vec::new(), created: SystemTime::now(), last_active: Instant::now(), decode }
    }

    fn add_entities(&mut self, found: Vec<String>) {
        for e in found {
            if !self.entities.contains(&e) {
                self.entities.push(e);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatItem {
    pub id: ItemId,
    pub name: String,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub user_text: String,
    pub response: String,
    /// Top-k slot alternatives, most probable first.
    pub items: Vec<ChatItem>,
    /// Char ranges of item names inside `response`.
    pub spans: Vec<RenderedSpan>,
    /// 1-based index of the response within the session history.
    pub turn_index: usize,
    pub latency_ms: u64,
}

/// Item mentions in live text: `@id` markers are rewritten to names first,
/// then catalog names are matched case-insensitively on word boundaries,
/// longest first.
pub fn link_items(text: &str, names: &BTreeMap<ItemId, String>) -> (String, Vec<ItemMention>) {
    let (text, mut mentions) = resolve_mentions(text, names, |_| {});
    let chars: Vec<char> = text.chars().collect();
    let lower: Vec<char> = chars.iter().map(|c| c.to_lowercase().next().unwrap_or(*c)).collect();
    let mut by_len: Vec<(Vec<char>, &ItemId)> = names
        .iter()
        .map(|(id, n)| (n.chars().map(|c| c.to_lowercase().next().unwrap_or(c)).collect::<Vec<char>>(), id))
        .filter(|(n, _)| !n.is_empty())
        .collect();
    by_len.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(b.1)));
    let taken = |m: &[ItemMention], s: usize, e: usize| m.iter().any(|x| s < x.char_end && x.char_start < e);
    let boundary = |i: usize| i == 0 || i >= chars.len() || !chars[i - 1].is_alphanumeric() || !chars[i].is_alphanumeric();
    let mut i = 0;
    while i < lower.len() {
        let mut advanced = false;
        for (name, id) in &by_len {
            let end = i + name.len();
            if end <= lower.len()
                && lower[i..end] == name[..]
                && boundary(i)
                && boundary(end)
                && !taken(&mentions, i, end)
            {
                mentions.push(ItemMention {
                    surface: chars[i..end].iter().collect(),
                    item_id: (*id).clone(),
                    char_start: i,
                    char_end: end,
                });
                i = end;
                advanced = true;
                break;
            }
        }
        if !advanced {
            i += 1;
        }
    }
    mentions.sort_by_key(|m| m.char_start);
    (text, mentions)
}

/// Encodes a seeker message as an utterance in the model's marked form.
pub fn seeker_utterance(rec: &Recommender, text: &str) -> Result<Utterance> {
    let (text, mentions) = link_items(text, &rec.item_names);
    let (tokens, words, item_spans) = corpus::encode_text(&text, &mentions, &rec.vocab);
    let u = Utterance { speaker: Speaker::Seeker, tokens, item_spans, raw_text: text, words };
    let marked = corpus::mark_items(&Dialogue { id: String::new(), utterances: vec![u] }, &rec.vocab)?;
    Ok(marked.utterances.into_iter().next().expect("one utterance"))
}

fn recommender_utterance(rec: &Recommender, tokens: &[TokenId], text: String) -> Utterance {
    let tokens: Vec<TokenId> = tokens.iter().copied().filter(|&t| t != rec.vocab.eos()).collect();
    let item_spans = tokens
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| rec.vocab.item_of(t).map(|item| ItemSpan { position: i, item: item.clone() }))
        .collect();
    let words = tokens.iter().map(|&t| rec.vocab.token_str(t).to_string()).collect();
    Utterance { speaker: Speaker::Recommender, tokens, item_spans, raw_text: text, words }
}

/// Context tokens for the newest whole turns that fit in `budget`.
fn history_context(history: &[Utterance], budget: usize, sep: TokenId) -> Vec<TokenId> {
    let mut start = history.len();
    let mut used = 0;
    while start > 0 {
        let need = history[start - 1].tokens.len() + 1;
        if used + need > budget && start < history.len() {
            break;
        }
        used += need;
        start -= 1;
    }
    let mut out = Vec::with_capacity(used);
    for u in &history[start..] {
        out.extend_from_slice(&u.tokens);
        out.push(sep);
    }
    out
}

/// One seeker → recommender exchange on `session`.
pub fn respond(rec: &Recommender, session: &mut Session, text: &str, k: Option<usize>) -> Result<ChatTurn> {
    let started = Instant::now();
    let mut decode = session.decode;
    if let Some(k) = k {
        decode.top_k = k;
    }
    let user = seeker_utterance(rec, text)?;
    let found = rec.link_map.utterance_entities(&user);
    session.history.push(user);
    session.add_entities(found);

    let budget = rec.model.lm.config.max_position.saturating_sub(decode.n_max + 1).max(1);
    let context = history_context(&session.history, budget, rec.vocab.sep());
    let entities = rec.kg.resolve(&session.entities);
    let g = rec.recommend(&context, &entities, &decode)?;

    let reply = recommender_utterance(rec, &g.result.response_tokens, g.text.clone());
    let found = rec.link_map.utterance_entities(&reply);
    session.history.push(reply);
    session.add_entities(found);
    session.last_active = Instant::now();

    let items = g
        .result
        .items
        .iter()
        .map(|(id, p)| ChatItem { id: id.clone(), name: rec.item_name(id), prob: *p })
        .collect();
    Ok(ChatTurn {
        user_text: text.to_string(),
        response: g.text,
        items,
        spans: g.spans,
        turn_index: session.history.len(),
        latency_ms: started.elapsed().as_millis() as u64,
    })
}

/// Saved form of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub id: String,
    pub created_unix_ms: u64,
    pub decode: DecodeConfig,
    pub entities: Vec<String>,
    pub turns: Vec<SnapshotTurn>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotTurn {
    pub speaker: Speaker,
    pub text: String,
    pub tokens: Vec<String>,
}

/// Session store over one shared recommender. Each session sits behind its
/// own lock, so messages to one session are applied in order while other
/// sessions proceed independently.
pub struct ChatEngine {
    rec: Arc<Recommender>,
    defaults: DecodeConfig,
    idle: Duration,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl ChatEngine {
    pub fn new(rec: Arc<Recommender>, defaults: DecodeConfig, idle: Duration) -> Self {
        ChatEngine { rec, defaults, idle, sessions: Mutex::new(HashMap::new()) }
    }

    pub fn recommender(&self) -> &Recommender {
        &self.rec
    }

    pub fn defaults(&self) -> DecodeConfig {
        self.defaults
    }

    fn table(&self) -> std::sync::MutexGuard<'_, HashMap<String, Arc<Mutex<Session>>>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn create_session(&self) -> String {
        let id = uuid::Uuid::new_v4().to_string();
        self.table().insert(id.clone(), Arc::new(Mutex::new(Session::new(id.clone(), self.defaults))));
        id
    }

    pub fn delete_session(&self, id: &str) -> Result<()> {
        self.table().remove(id).map(|_| ()).ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.table().get(id).cloned().ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.table().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn handle_message(&self, id: &str, text: &str, k: Option<usize>) -> Result<ChatTurn> {
        let session = self.session(id)?;
        let mut s = session.lock().unwrap_or_else(|e| e.into_inner());
        respond(&self.rec, &mut s, text, k)
    }

    /// Drops sessions idle for longer than the configured period.
    pub fn expire_idle(&self) -> usize {
        self.expire_idle_at(Instant::now())
    }

    pub fn expire_idle_at(&self, now: Instant) -> usize {
        let mut table = self.table();
        let before = table.len();
        table.retain(|_, s| {
            let s = s.lock().unwrap_or_else(|e| e.into_inner());
            now.saturating_duration_since(s.last_active) <= self.idle
        });
        before - table.len()
    }

    pub fn snapshot(&self) -> Vec<SessionSnapshot> {
        let mut out: Vec<SessionSnapshot> = self
            .table()
            .values()
            .map(|s| {
                let s = s.lock().unwrap_or_else(|e| e.into_inner());
                SessionSnapshot {
                    id: s.id.clone(),
                    created_unix_ms: s.created.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64),
                    decode: s.decode,
                    entities: s.entities.clone(),
                    turns: s
                        .history
                        .iter()
                        .map(|u| SnapshotTurn {
                            speaker: u.speaker,
                            text: u.raw_text.clone(),
                            tokens: u.tokens.iter().map(|&t| self.rec.vocab.token_str(t).to_string()).collect(),
                        })
                        .collect(),
                }
            })
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    pub fn restore(&self, snapshots: &[SessionSnapshot]) -> Result<()> {
        let vocab = &self.rec.vocab;
        let mut restored = Vec::with_capacity(snapshots.len());
        for snap in snapshots {
            let mut history = Vec::with_capacity(snap.turns.len());
            for t in &snap.turns {
                let tokens: Vec<TokenId> = t
                    .tokens
                    .iter()
                    .map(|s| vocab.token(s).ok_or_else(|| Error::Config(format!("session {} has unknown token {s}", snap.id))))
                    .collect::<Result<_>>()?;
                let item_spans = tokens
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &tok)| vocab.item_of(tok).map(|item| ItemSpan { position: i, item: item.clone() }))
                    .collect();
                history.push(Utterance {
                    speaker: t.speaker,
                    tokens,
                    item_spans,
                    raw_text: t.text.clone(),
                    words: t.tokens.clone(),
                });
            }
            let mut s = Session::new(snap.id.clone(), snap.decode);
            s.created = UNIX_EPOCH + Duration::from_millis(snap.created_unix_ms);
            s.history = history;
            s.entities = snap.entities.clone();
            restored.push(s);
        }
        let mut table = self.table();
        for s in restored {
            table.insert(s.id.clone(), Arc::new(Mutex::new(s)));
        }
        Ok(())
    }
}
