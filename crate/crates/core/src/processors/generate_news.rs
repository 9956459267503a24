// SPDX-License-Identifier: Apache-2.0

//! Seeded synthetic news stream standing in for a social-media feed. Filter
//! limits follow the public streaming API: 400 keywords, 5,000 user ids and
//! 25 location boxes.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{split_list, MIME_TYPE_ATTR, SOURCE_NAME_ATTR};
use crate::engine::processor::{
    parse_property, ConfigError, ProcessContext, ProcessError, Processor, ProcessorSpec, Properties, PropertyDescriptor,
};
use crate::engine::session::ProcessSession;
use crate::model::{rel, Attributes};

pub const MAX_KEYWORDS: usize = 400;
pub const MAX_USER_IDS: usize = 5_000;
pub const MAX_LOCATION_BOXES: usize = 25;
pub const SOURCE_NAME: &str = "twitter-sim";
/// Most flowfiles emitted by one trigger when far behind schedule.
const MAX_PER_TRIGGER: u64 = 1_000;
/// 2020-01-01T00:00:00Z; `published_at` of emission k is this plus k/rate s.
const EPOCH_MS: i64 = 1_577_836_800_000;
const RECENT: usize = 64;

const LANGS: [&str; 6] = ["en", "en", "en", "fr", "de", "es"];
const WORDS: [&str; 24] = [
    "market", "election", "storm", "council", "energy", "report", "vaccine", "league", "budget", "court", "river",
    "festival", "strike", "summit", "launch", "merger", "drought", "rally", "museum", "border", "bridge", "harvest",
    "airport", "protest",
];

pub fn spec() -> ProcessorSpec {
    ProcessorSpec {
        type_name: "GenerateNews",
        relationships: vec![rel::SUCCESS],
        properties: vec![
            PropertyDescriptor::optional("rate_per_sec", Some("10")),
            PropertyDescriptor::optional("keywords", None),
            PropertyDescriptor::optional("user_ids", None),
            PropertyDescriptor::optional("location_boxes", None),
            PropertyDescriptor::optional("seed", Some("0")),
            PropertyDescriptor::optional("duplicate_ratio", Some("0")),
            PropertyDescriptor::optional("max_articles", None),
        ],
        dynamic_relationships: false,
        trigger_when_empty: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Article {
    pub id: String,
    pub source: String,
    pub title: String,
    pub body: String,
    pub lang: String,
    pub published_at: i64,
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub rate_per_sec: f64,
    pub keywords: Vec<String>,
    pub user_ids: Vec<String>,
    pub location_boxes: Vec<[f64; 4]>,
    pub seed: u64,
    pub duplicate_ratio: f64,
    pub max_articles: Option<u64>,
}

fn parse_box(s: &str) -> Result<[f64; 4], ConfigError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| ConfigError::new(format!("location box '{s}' must be four numbers")))?;
    let [w, so, e, n]: [f64; 4] = parts
        .try_into()
        .map_err(|_| ConfigError::new(format!("location box '{s}' must be four numbers")))?;
    if !(-180.0..=180.0).contains(&w) || !(-180.0..=180.0).contains(&e) || !(-90.0..=90.0).contains(&so) || !(-90.0..=90.0).contains(&n) || w > e || so > n {
        return Err(ConfigError::new(format!("location box '{s}' is not sw_lon,sw_lat,ne_lon,ne_lat")));
    }
    Ok([w, so, e, n])
}

impl GeneratorConfig {
    pub fn from_properties(props: &Properties) -> Result<Self, ConfigError> {
        let rate_per_sec: f64 = parse_property(props, "rate_per_sec")?.unwrap_or(10.0);
        if !(rate_per_sec > 0.0 && rate_per_sec.is_finite()) {
            return Err(ConfigError::new("rate_per_sec must be positive"));
        }
        let keywords = props.get("keywords").map_or_else(Vec::new, |v| split_list(v, ','));
        if keywords.len() > MAX_KEYWORDS {
            return Err(ConfigError::new(format!(
                "{} keywords given; at most {MAX_KEYWORDS} allowed",
                keywords.len()
            )));
        }
        let user_ids = props.get("user_ids").map_or_else(Vec::new, |v| split_list(v, ','));
        if user_ids.len() > MAX_USER_IDS {
            return Err(ConfigError::new(format!(
                "{} user ids given; at most {MAX_USER_IDS} allowed",
                user_ids.len()
            )));
        }
        let boxes = props.get("location_boxes").map_or_else(Vec::new, |v| split_list(v, ';'));
        if boxes.len() > MAX_LOCATION_BOXES {
            return Err(ConfigError::new(format!(
                "{} location boxes given; at most {MAX_LOCATION_BOXES} allowed",
                boxes.len()
            )));
        }
        let location_boxes = boxes.iter().map(|b| parse_box(b)).collect::<Result<_, _>>()?;
        let duplicate_ratio: f64 = parse_property(props, "duplicate_ratio")?.unwrap_or(0.0);
        if !(0.0..=1.0).contains(&duplicate_ratio) {
            return Err(ConfigError::new("duplicate_ratio must be within [0, 1]"));
        }
        Ok(GeneratorConfig {
            rate_per_sec,
            keywords,
            user_ids,
            location_boxes,
            seed: parse_property(props, "seed")?.unwrap_or(0),
            duplicate_ratio,
            max_articles: parse_property(props, "max_articles")?,
        })
    }
}

/// Deterministic article source: the n-th call to `next` depends only on the
/// config and n.
pub struct ArticleStream {
    config: GeneratorConfig,
    rng: ChaCha8Rng,
    emitted: u64,
    recent: VecDeque<(Article, Attributes)>,
}

impl ArticleStream {
    pub fn new(config: GeneratorConfig) -> Self {
        ArticleStream {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            emitted: 0,
            recent: VecDeque::new(),
        }
    }

    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    fn published_at(&self, k: u64) -> i64 {
        EPOCH_MS + (k as f64 * 1000.0 / self.config.rate_per_sec) as i64
    }

    /// Next article as JSON bytes plus its attributes.
    pub fn next_article(&mut self) -> (Vec<u8>, Attributes) {
        let k = self.emitted;
        self.emitted += 1;
        if !self.recent.is_empty() && self.rng.gen_bool(self.config.duplicate_ratio) {
            let i = self.rng.gen_range(0..self.recent.len());
            let (a, attrs) = self.recent[i].clone();
            return (serde_json::to_vec(&a).expect("article serializes"), attrs);
        }
        let rng = &mut self.rng;
        let mut title: Vec<String> = (0..rng.gen_range(3..7))
            .map(|_| WORDS.choose(rng).unwrap().to_string())
            .collect();
        let mut attrs = Attributes::new();
        if !self.config.keywords.is_empty() && rng.gen_bool(0.7) {
            let kw = self.config.keywords.choose(rng).unwrap().clone();
            let at = rng.gen_range(0..=title.len());
            title.insert(at, kw.clone());
            attrs.insert("news.keyword".into(), kw);
        }
        let body: Vec<&str> = (0..rng.gen_range(12..40)).map(|_| *WORDS.choose(rng).unwrap()).collect();
        let lang = LANGS.choose(rng).unwrap().to_string();
        if let Some(u) = self.config.user_ids.choose(rng) {
            attrs.insert("user.id".into(), u.clone());
        }
        if let Some(b) = self.config.location_boxes.choose(rng) {
            let lon = rng.gen_range(b[0]..=b[2]);
            let lat = rng.gen_range(b[1]..=b[3]);
            attrs.insert("geo.lon".into(), format!("{lon:.4}"));
            attrs.insert("geo.lat".into(), format!("{lat:.4}"));
        }
        let article = Article {
            id: format!("{}-{k}", self.config.seed),
            source: SOURCE_NAME.into(),
            title: title.join(" "),
            body: body.join(" "),
            lang: lang.clone(),
            published_at: self.published_at(k),
        };
        attrs.insert(SOURCE_NAME_ATTR.into(), SOURCE_NAME.into());
        attrs.insert(MIME_TYPE_ATTR.into(), "application/json".into());
        attrs.insert("lang".into(), lang);
        attrs.insert("article.id".into(), article.id.clone());
        self.recent.push_back((article.clone(), attrs.clone()));
        if self.recent.len() > RECENT {
            self.recent.pop_front();
        }
        (serde_json::to_vec(&article).expect("article serializes"), attrs)
    }
}

struct State {
    stream: ArticleStream,
    started_at: Option<i64>,
}

pub struct GenerateNews {
    config: GeneratorConfig,
    state: Mutex<State>,
}

pub fn build(props: &Properties) -> Result<Arc<dyn Processor>, ConfigError> {
    let config = GeneratorConfig::from_properties(props)?;
    Ok(Arc::new(GenerateNews {
        state: Mutex::new(State {
            stream: ArticleStream::new(config.clone()),
            started_at: None,
        }),
        config,
    }))
}

impl GenerateNews {
    /// Emissions due by `now` when the first was due at `start`: emission k
    /// is due at `start + k * 1000 / rate`.
    fn due(&self, start: i64, now: i64) -> u64 {
        if now < start {
            return 0;
        }
        ((now - start) as f64 * self.config.rate_per_sec / 1000.0 + 1e-9).floor() as u64 + 1
    }

    fn due_time(&self, start: i64, k: u64) -> i64 {
        start + (k as f64 * 1000.0 / self.config.rate_per_sec).ceil() as i64
    }
}

impl Processor for GenerateNews {
    fn on_scheduled(&self, _ctx: &ProcessContext) -> Result<(), ProcessError> {
        self.state.lock().unwrap().started_at = None;
        Ok(())
    }

    fn on_trigger(&self, ctx: &ProcessContext, session: &mut ProcessSession) -> Result<(), ProcessError> {
        let now = ctx.now();
        let mut st = self.state.lock().unwrap();
        // pace relative to the emissions already made before a restart
        let already = st.stream.emitted();
        let start = *st.started_at.get_or_insert_with(|| now - (already as f64 * 1000.0 / self.config.rate_per_sec) as i64);
        let mut target = self.due(start, now);
        if let Some(max) = self.config.max_articles {
            target = target.min(max);
        }
        let n = target.saturating_sub(st.stream.emitted()).min(MAX_PER_TRIGGER);
        let mut batch = Vec::new();
        for _ in 0..n {
            batch.push(st.stream.next_article());
        }
        for (bytes, attrs) in &batch {
            let ff = session.create_with_content(attrs.clone(), bytes)?;
            session.transfer(&ff, rel::SUCCESS)?;
        }
        let next = st.stream.emitted();
        if self.config.max_articles.is_some_and(|m| next >= m) {
            ctx.idle_until(i64::MAX);
        } else {
            ctx.idle_until(self.due_time(start, next));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn props(pairs: &[(&str, String)]) -> Properties {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn list(n: usize, sep: &str, item: impl Fn(usize) -> String) -> String {
        (0..n).map(item).collect::<Vec<_>>().join(sep)
    }

    #[test]
    fn filter_limits() {
        let kw = |n| props(&[("keywords", list(n, ",", |i| format!("k{i}")))]);
        assert!(build(&kw(400)).is_ok());
        assert!(build(&kw(401)).is_err());
        let users = |n| props(&[("user_ids", list(n, "\n", |i| format!("{i}")))]);
        assert!(build(&users(5_000)).is_ok());
        assert!(build(&users(5_001)).is_err());
        let boxes = |n| props(&[("location_boxes", list(n, ";", |_| "-74.3,40.5,-73.7,40.9".into()))]);
        assert!(build(&boxes(25)).is_ok());
        assert!(build(&boxes(26)).is_err());
        assert!(build(&props(&[("location_boxes", "1,2,3".into())])).is_err());
        assert!(build(&props(&[("rate_per_sec", "0".into())])).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = GeneratorConfig::from_properties(&props(&[
            ("seed", "42".into()),
            ("keywords", "flood,vote".into()),
            ("duplicate_ratio", "0.2".into()),
        ]))
        .unwrap();
        let mut a = ArticleStream::new(cfg.clone());
        let mut b = ArticleStream::new(cfg);
        for _ in 0..500 {
            assert_eq!(a.next_article(), b.next_article());
        }
    }

    #[test]
    fn keywords_bias_titles() {
        let cfg = GeneratorConfig::from_properties(&props(&[("keywords", "zebrafish".into())])).unwrap();
        let mut s = ArticleStream::new(cfg);
        let hits = (0..1000)
            .filter(|_| {
                let (bytes, _) = s.next_article();
                let a: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                a["title"].as_str().unwrap().contains("zebrafish")
            })
            .count();
        assert!((600..=800).contains(&hits), "{hits}");
    }

    #[test]
    fn article_shape() {
        let mut s = ArticleStream::new(GeneratorConfig::from_properties(&Properties::new()).unwrap());
        let (bytes, attrs) = s.next_article();
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["body", "id", "lang", "published_at", "source", "title"]);
        assert_eq!(attrs[SOURCE_NAME_ATTR], SOURCE_NAME);
        assert_eq!(attrs["lang"], v["lang"].as_str().unwrap());
        assert_eq!(v["published_at"], EPOCH_MS);
    }
}
