//! Generated corpora with a known gold entity per turn.
//!
//! Every turn's reference mentions values of exactly one entity, and the
//! user turn that opens a dialogue names that entity, so a retriever can
//! learn the mapping from context tokens to entities. The confusable
//! variant pairs each entity with a near-duplicate that differs only in
//! its area; the user then states the area and the reply repeats it.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Entity, KbLevel, KnowledgeBase, Turn};

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ren", "tor", "vel", "sa", "dun", "fi", "gor", "pe", "zu", "bra", "nix",
    "ol", "que", "rha", "sti", "ul", "wen", "yor", "ith", "cal", "dro",
];
const AREAS: [&str; 5] = ["north", "south", "east", "west", "centre"];
const FOODS: [&str; 12] = [
    "chinese", "indian", "italian", "thai", "greek", "french", "korean", "turkish", "british",
    "mexican", "spanish", "lebanese",
];
const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];

const STREETS: [&str; 4] = ["road", "street", "lane", "avenue"];

const OPENERS: [&str; 4] = [
    "i am looking for {name} .",
    "can you tell me about {name} ?",
    "i would like information on {name} please .",
    "is {name} a good place for {food} food ?",
];
const OPENERS_WITH_AREA: [&str; 3] = [
    "i am looking for {name} in the {area} .",
    "can you tell me about {name} , the one in the {area} ?",
    "i would like the {area} {name} please .",
];
// Replies only name values unique to one entity, so that a random ranking
// covers a turn's gold values with probability about K / |KB|.
const FIRST_REPLIES: [&str; 3] = [
    "{name} is at {address} .",
    "you can find {name} at {address} , postcode {postcode} .",
    "{name} is located at {address} .",
];
const FIRST_REPLIES_WITH_AREA: [&str; 3] = [
    "{name} in the {area} is at {address} .",
    "the {area} {name} is located at {address} .",
    "{name} is in the {area} at {address} .",
];
const FOLLOW_UPS: [&str; 3] = [
    "what is the phone number ?",
    "can i have the phone number and postcode ?",
    "how can i reach them ?",
];
const SECOND_REPLIES: [&str; 3] = [
    "the phone number of {name} is {phone} .",
    "you can reach {name} at {phone} , postcode {postcode} .",
    "{name} has phone number {phone} and is at postcode {postcode} .",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub dialogues: usize,
    pub validation_fraction: f64,
    pub confusable: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            entities: 200,
            dialogues: 500,
            validation_fraction: 0.2,
            confusable: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub kb: KnowledgeBase,
    pub train: Vec<Dialogue>,
    pub validation: Vec<Dialogue>,
}

impl SyntheticCorpus {
    pub fn all_dialogues(&self) -> Vec<Dialogue> {
        self.train.iter().chain(&self.validation).cloned().collect()
    }
}

/// Every word the templates can emit outside entity values.
pub fn template_vocabulary() -> Vec<String> {
    let mut words: BTreeSet<String> = BTreeSet::new();
    for t in OPENERS
        .iter()
        .chain(&OPENERS_WITH_AREA)
        .chain(&FIRST_REPLIES)
        .chain(&FIRST_REPLIES_WITH_AREA)
        .chain(&FOLLOW_UPS)
        .chain(&SECOND_REPLIES)
    {
        for w in crate::text::normalize(t) {
            if !["{", "}", "name", "area", "food", "address", "phone", "postcode"].contains(&w.as_str()) {
                words.insert(w);
            }
        }
    }
    for w in ["area", "food", "phone", "postcode"] {
        words.insert(w.to_string());
    }
    words.into_iter().collect()
}

struct Values {
    name: String,
    address: String,
    area: &'static str,
    food: &'static str,
    price: &'static str,
    phone: String,
    postcode: String,
}

impl Values {
    fn attributes(&self) -> Vec<(String, String)> {
        vec![
            ("name".into(), self.name.clone()),
            ("address".into(), self.address.clone()),
            ("area".into(), self.area.into()),
            ("food".into(), self.food.into()),
            ("pricerange".into(), self.price.into()),
            ("phone".into(), self.phone.clone()),
            ("postcode".into(), self.postcode.clone()),
        ]
    }

    fn fill(&self, template: &str) -> String {
        template
            .replace("{name}", &self.name)
            .replace("{address}", &self.address)
            .replace("{area}", self.area)
            .replace("{food}", self.food)
            .replace("{price}", self.price)
            .replace("{phone}", &self.phone)
            .replace("{postcode}", &self.postcode)
    }
}

fn word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
}

fn unique(used: &mut BTreeSet<String>, mut make: impl FnMut() -> String) -> String {
    loop {
        let s = make();
        if used.insert(s.clone()) {
            return s;
        }
    }
}

fn postcode(i: usize) -> String {
    let letter = |n: usize| (b'a' + (n % 26) as u8) as char;
    format!("cb{} {}{}{}", 1 + i % 9, (i / 9) % 10, letter(i / 90), letter(i / 2340))
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut used = BTreeSet::new();
    let mut values: Vec<Values> = Vec::with_capacity(cfg.entities);
    let base_count = if cfg.confusable { cfg.entities.div_ceil(2) } else { cfg.entities };
    for i in 0..base_count {
        let name = unique(&mut used, || format!("{} {}", word(&mut rng), word(&mut rng)));
        let address = unique(&mut used, || {
            let n = rng.gen_range(1..100);
            format!("{n} {} {}", word(&mut rng), STREETS.choose(&mut rng).unwrap())
        });
        let v = Values {
            name,
            address,
            area: AREAS.choose(&mut rng).unwrap(),
            food: FOODS.choose(&mut rng).unwrap(),
            price: PRICES.choose(&mut rng).unwrap(),
            phone: format!("01223{:06}", 100_000 + i * 7919 % 900_000),
            postcode: postcode(i),
        };
        if cfg.confusable && values.len() + 1 < cfg.entities {
            let twin_area = loop {
                let a = *AREAS.choose(&mut rng).unwrap();
                if a != v.area {
                    break a;
                }
            };
            let twin = Values {
                name: v.name.clone(),
                address: v.address.clone(),
                area: twin_area,
                food: v.food,
                price: v.price,
                phone: v.phone.clone(),
                postcode: v.postcode.clone(),
            };
            values.push(v);
            values.push(twin);
        } else {
            values.push(v);
        }
    }
    values.truncate(cfg.entities);
    let entities: Vec<Entity> = values
        .iter()
        .enumerate()
        .map(|(i, v)| Entity::new(format!("ent{i:04}"), v.attributes()).expect("generated entity is valid"))
        .collect();
    let kb = KnowledgeBase::new(entities, KbLevel::Dataset).expect("generated ids are unique");

    // Dialogue i is about entity perm[i % n]; the validation tail then only
    // uses entities that also occur in training whenever dialogues >= 2n.
    let n = values.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut dialogues = Vec::with_capacity(cfg.dialogues);
    for i in 0..cfg.dialogues {
        let row = perm[i % n];
        let v = &values[row];
        let id = kb.entities()[row].id().to_string();
        let (openers, replies): (&[&str], &[&str]) = if cfg.confusable {
            (&OPENERS_WITH_AREA, &FIRST_REPLIES_WITH_AREA)
        } else {
            (&OPENERS, &FIRST_REPLIES)
        };
        let gold = Some(vec![id.clone()]);
        let mut turns = vec![Turn {
            user: v.fill(openers.choose(&mut rng).unwrap()),
            system: v.fill(replies.choose(&mut rng).unwrap()),
            gold_entity_ids: gold.clone(),
        }];
        if rng.gen_bool(0.7) {
            turns.push(Turn {
                user: FOLLOW_UPS.choose(&mut rng).unwrap().to_string(),
                system: v.fill(SECOND_REPLIES.choose(&mut rng).unwrap()),
                gold_entity_ids: gold,
            });
        }
        dialogues.push(Dialogue {
            id: format!("syn{i:04}"),
            domain: "restaurant".into(),
            session_entity_ids: Vec::new(),
            turns,
        });
    }
    let n_val = ((cfg.dialogues as f64) * cfg.validation_fraction).round() as usize;
    let validation = dialogues.split_off(cfg.dialogues - n_val.min(cfg.dialogues));
    SyntheticCorpus {
        kb,
        train: dialogues,
        validation,
    }
}
