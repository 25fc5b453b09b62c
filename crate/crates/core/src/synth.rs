//! Synthetic recommendation dialogues with a known entity → item rule.
//!
//! Items are the cross product of genres and actors. A seeker names a genre
//! (directly, or through a film they loved) and an actor; the recommender
//! answers with the unique item of that genre and actor. When the seeker has
//! already seen it, the follow-up is the item of the same genre with the
//! next actor. Directors exist only as distractor entities.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ItemId, ItemMention, LinkMap, RawDialogue, RawTurn, Speaker};
use crate::error::{Error, Result};

pub const GENRES: [&str; 5] = ["horror", "comedy", "action", "romance", "scifi"];
pub const ACTORS: [&str; 4] = ["hanks", "streep", "washington", "roberts"];
pub const DIRECTORS: [&str; 11] =
    ["nolan", "spielberg", "scott", "lee", "burton", "wright", "coen", "bigelow", "fincher", "jackson", "cameron"];
const ADJECTIVES: [&str; 5] = ["Dark", "Silent", "Golden", "Last", "Hidden"];
const NOUNS: [&str; 4] = ["Harbor", "Garden", "Signal", "Winter"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dialogues: usize,
    pub seed: u64,
    /// Chance the first recommendation names the item rather than asking a
    /// follow-up question.
    pub p_item_first: f64,
    /// Chance the genre is conveyed by a film the seeker loved.
    pub p_indirect: f64,
    /// Chance the seeker drops a director's name.
    pub p_director: f64,
    /// Chance the seeker has already seen the first recommendation.
    pub p_seen: f64,
    /// Zipf exponent on genre popularity; 0 is uniform.
    pub genre_skew: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dialogues: 600,
            seed: 0,
            p_item_first: 0.6,
            p_indirect: 0.5,
            p_director: 0.3,
            p_seen: 0.5,
            genre_skew: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthItem {
    pub id: ItemId,
    pub name: String,
    pub genre: usize,
    pub actor: usize,
    pub director: usize,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub dialogues: Vec<RawDialogue>,
    pub items: Vec<SynthItem>,
    /// (head, relation, tail) entity triples.
    pub triples: Vec<(String, String, String)>,
    pub link_map: LinkMap,
}

pub fn item_entity(id: &str) -> String {
    format!("item/{id}")
}

fn genre_entity(g: usize) -> String {
    format!("genre/{}", GENRES[g])
}

fn actor_entity(a: usize) -> String {
    format!("actor/{}", ACTORS[a])
}

fn director_entity(d: usize) -> String {
    format!("director/{}", DIRECTORS[d])
}

/// The catalog: item `g * |actors| + a` has genre `g` and actor `a`.
pub fn catalog() -> Vec<SynthItem> {
    let mut items = Vec::new();
    for g in 0..GENRES.len() {
        for a in 0..ACTORS.len() {
            let n = g * ACTORS.len() + a;
            items.push(SynthItem {
                id: (101 + n).to_string(),
                name: format!("The {} {}", ADJECTIVES[g], NOUNS[a]),
                genre: g,
                actor: a,
                director: (n * 7) % DIRECTORS.len(),
            });
        }
    }
    items
}

/// The recommendation rule.
pub fn target_item(genre: usize, actor: usize) -> usize {
    genre * ACTORS.len() + actor
}

/// Follow-up after the seeker has seen `target_item(genre, actor)`.
pub fn follow_up_item(genre: usize, actor: usize) -> usize {
    target_item(genre, (actor + 1) % ACTORS.len())
}

struct TurnBuilder {
    text: String,
    len: usize,
    items: Vec<ItemMention>,
}

impl TurnBuilder {
    fn new() -> Self {
        TurnBuilder { text: String::new(), len: 0, items: Vec::new() }
    }

    fn text(mut self, s: &str) -> Self {
        self.text.push_str(s);
        self.len += s.chars().count();
        self
    }

    fn item(mut self, item: &SynthItem) -> Self {
        let n = item.name.chars().count();
        self.items.push(ItemMention { surface: item.name.clone(), item_id: item.id.clone(), char_start: self.len, char_end: self.len + n });
        self.text.push_str(&item.name);
        self.len += n;
        self
    }

    fn build(self, speaker: Speaker) -> RawTurn {
        RawTurn { speaker, text: self.text, items: self.items }
    }
}

fn pick<'a, R: Rng>(rng: &mut R, options: &[&'a str]) -> &'a str {
    options.choose(rng).expect("non-empty")
}

fn genre_weights(skew: f64) -> Vec<f64> {
    (0..GENRES.len()).map(|g| 1.0 / ((g + 1) as f64).powf(skew)).collect()
}

fn weighted<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn dialogue<R: Rng>(id: String, items: &[SynthItem], config: &SynthConfig, weights: &[f64], rng: &mut R) -> RawDialogue {
    let genre = weighted(rng, weights);
    let actor = rng.gen_range(0..ACTORS.len());
    let target = &items[target_item(genre, actor)];
    let mut turns = Vec::new();

    let mut first = TurnBuilder::new().text(pick(rng, &["hi ! ", "hello ! ", "hey there . "]));
    if rng.gen_bool(config.p_indirect) {
        let other_actor = rng.gen_range(0..ACTORS.len());
        first = first.text(pick(rng, &["i really loved ", "last week i watched ", "my favorite film is "]));
        first = first.item(&items[target_item(genre, other_actor)]).text(" .");
    } else {
        first = first.text(pick(rng, &["i am in the mood for a ", "i want to watch a ", "can you suggest a "]));
        first = first.text(GENRES[genre]).text(" movie .");
    }
    if rng.gen_bool(config.p_director) {
        let d = rng.gen_range(0..DIRECTORS.len());
        first = first.text(" i also like films by ").text(DIRECTORS[d]).text(" .");
    }
    turns.push(first.build(Speaker::Seeker));
    turns.push(
        TurnBuilder::new()
            .text(pick(rng, &["what actor do you enjoy ?", "who is your favorite actor ?", "any actor you like ?"]))
            .build(Speaker::Recommender),
    );
    turns.push(
        TurnBuilder::new()
            .text(pick(rng, &["i like ", "anything with ", "i am a big fan of "]))
            .text(ACTORS[actor])
            .text(" .")
            .build(Speaker::Seeker),
    );
    if rng.gen_bool(config.p_item_first) {
        turns.push(TurnBuilder::new().text("how about ").item(target).text(" ?").build(Speaker::Recommender));
        if rng.gen_bool(config.p_seen) {
            turns.push(TurnBuilder::new().text(pick(rng, &["i have seen it already .", "seen it , something else ?"])).build(Speaker::Seeker));
            let next = &items[follow_up_item(genre, actor)];
            turns.push(TurnBuilder::new().text("then try ").item(next).text(" .").build(Speaker::Recommender));
            turns.push(TurnBuilder::new().text("thanks , bye .").build(Speaker::Seeker));
        } else {
            turns.push(TurnBuilder::new().text(pick(rng, &["great , thanks !", "sounds good , thank you !"])).build(Speaker::Seeker));
            turns.push(TurnBuilder::new().text("enjoy the movie ! bye .").build(Speaker::Recommender));
        }
    } else {
        turns.push(TurnBuilder::new().text("how about something with ").text(ACTORS[actor]).text(" ?").build(Speaker::Recommender));
        turns.push(TurnBuilder::new().text(pick(rng, &["sure , which one ?", "ok , what title ?"])).build(Speaker::Seeker));
        turns.push(TurnBuilder::new().text("i recommend ").item(target).text(" .").build(Speaker::Recommender));
        turns.push(TurnBuilder::new().text("thanks , bye .").build(Speaker::Seeker));
    }
    RawDialogue { id, turns }
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.dialogues == 0 {
        return Err(Error::Config("synthetic corpus needs at least one dialogue".into()));
    }
    for p in [config.p_item_first, config.p_indirect, config.p_director, config.p_seen] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("probability {p} outside [0, 1]")));
        }
    }
    let items = catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights = genre_weights(config.genre_skew);
    let dialogues =
        (0..config.dialogues).map(|i| dialogue(format!("s{i:05}"), &items, config, &weights, &mut rng)).collect();

    let mut triples = Vec::new();
    for it in &items {
        let e = item_entity(&it.id);
        triples.push((e.clone(), "genre".to_string(), genre_entity(it.genre)));
        triples.push((e.clone(), "starring".to_string(), actor_entity(it.actor)));
        triples.push((e, "directed_by".to_string(), director_entity(it.director)));
    }
    let mut links: Vec<(String, String)> = items.iter().map(|it| (it.id.clone(), item_entity(&it.id))).collect();
    links.extend((0..GENRES.len()).map(|g| (GENRES[g].to_string(), genre_entity(g))));
    links.extend((0..ACTORS.len()).map(|a| (ACTORS[a].to_string(), actor_entity(a))));
    links.extend((0..DIRECTORS.len()).map(|d| (DIRECTORS[d].to_string(), director_entity(d))));
    Ok(SynthCorpus { dialogues, items, triples, link_map: LinkMap::new(links) })
}

impl SynthCorpus {
    pub fn entity_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.items.iter().map(|it| item_entity(&it.id)).collect();
        ids.extend((0..GENRES.len()).map(genre_entity));
        ids.extend((0..ACTORS.len()).map(actor_entity));
        ids.extend((0..DIRECTORS.len()).map(director_entity));
        ids
    }

    pub fn item_names(&self) -> BTreeMap<ItemId, String> {
        self.items.iter().map(|it| (it.id.clone(), it.name.clone())).collect()
    }

    pub fn write_triples(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (h, r, t) in &self.triples {
            out.push_str(&format!("{h}\t{r}\t{t}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Writes the dialogues in the ReDial release format: `@id` markers in
    /// the text, a `movieMentions` table, seeker as the initiator.
    pub fn write_redial(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let names = self.item_names();
        for (n, d) in self.dialogues.iter().enumerate() {
            let mut mentions = serde_json::Map::new();
            let messages: Vec<serde_json::Value> = d
                .turns
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut text = String::new();
                    let chars: Vec<char> = t.text.chars().collect();
                    let mut cursor = 0;
                    for m in &t.items {
                        text.extend(&chars[cursor..m.char_start]);
                        text.push('@');
                        text.push_str(&m.item_id);
                        mentions.insert(m.item_id.clone(), serde_json::Value::String(names[&m.item_id].clone()));
                        cursor = m.char_end;
                    }
                    text.extend(&chars[cursor..]);
                    let sender = if t.speaker == Speaker::Seeker { 1 } else { 2 };
                    serde_json::json!({"messageId": i, "text": text, "senderWorkerId": sender, "timeOffset": i})
                })
                .collect();
            let record = serde_json::json!({
                "conversationId": 20000 + n,
                "initiatorWorkerId": 1,
                "respondentWorkerId": 2,
                "movieMentions": mentions,
                "messages": messages,
            });
            writeln!(file, "{record}").map_err(|e| Error::io(path, e))?;
        }
        file.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_link_map(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.link_map.to_json()).map_err(|e| Error::io(path, e))
    }
}
