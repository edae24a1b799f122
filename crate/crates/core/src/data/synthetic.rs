//! Seeded synthetic corpora built from templated fact paragraphs.
//!
//! Every paragraph describes one or more invented organisations with a
//! founding year, a city, a head count, a leader and a field. Answers to the
//! QA categories are copied verbatim from the paragraph, so exact-match
//! grading is sound.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Category, Corpus, Sample};

const STEMS: &[&str] = &[
    "Harlow", "Orin", "Peltz", "Vask", "Maren", "Tolle", "Quill", "Brannock", "Sefa", "Ludo", "Kestrel", "Amberly",
    "Dorn", "Ilsa", "Corvin", "Rask", "Wend", "Fairholt", "Nym", "Ostra", "Belcroft", "Tamsin", "Greer", "Yarrow",
];
const KINDS: &[&str] = &[
    "Institute", "Lab", "Archive", "Guild", "Society", "Foundry", "Observatory", "Workshop", "Collective", "Academy",
];
const CITIES: &[&str] = &[
    "Verona", "Tromso", "Lagos", "Quito", "Hobart", "Kyoto", "Tartu", "Porto", "Leeds", "Cusco", "Bergen", "Dakar",
    "Perth", "Ghent", "Split", "Nantes",
];
const FIRST: &[&str] = &[
    "Mira", "Jonas", "Ada", "Tobi", "Lena", "Ravi", "Ines", "Omar", "Saga", "Nico", "Yuki", "Pavel", "Zara", "Eli",
];
const LAST: &[&str] = &[
    "Kest", "Albright", "Osei", "Varga", "Lindqvist", "Moreau", "Tanaka", "Ruiz", "Novak", "Adeyemi", "Brandt", "Silva",
];
const FIELDS: &[&str] = &[
    "marine geology", "glass restoration", "bird migration", "soil chemistry", "old maps", "textile dyes",
    "tidal energy", "folk music", "bridge design", "rare fungi", "star catalogues", "water rights",
];
const STAFF: &[&str] = &["researchers", "volunteers", "members", "engineers", "staff", "apprentices"];

/// Knobs for the paragraph generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticProfile {
    pub min_entities: usize,
    pub max_entities: usize,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        SyntheticProfile {
            min_entities: 1,
            max_entities: 3,
        }
    }
}

#[derive(Clone, Debug)]
struct Entity {
    name: String,
    kind: &'static str,
    year: u32,
    city: &'static str,
    count: u32,
    staff: &'static str,
    leader: String,
    field: &'static str,
}

impl Entity {
    fn random(rng: &mut ChaCha8Rng, taken: &[Entity]) -> Entity {
        loop {
            let kind = *KINDS.choose(rng).unwrap();
            let name = format!("the {} {kind}", STEMS.choose(rng).unwrap());
            if taken.iter().any(|e| e.name == name) {
                continue;
            }
            return Entity {
                name,
                kind,
                year: rng.gen_range(1801..=2019),
                city: CITIES.choose(rng).unwrap(),
                count: rng.gen_range(12..=980),
                staff: STAFF.choose(rng).unwrap(),
                leader: format!("{} {}", FIRST.choose(rng).unwrap(), LAST.choose(rng).unwrap()),
                field: FIELDS.choose(rng).unwrap(),
            };
        }
    }

    fn title(&self) -> String {
        capitalize(&self.name)
    }

    fn sentences(&self) -> [String; 4] {
        [
            format!("{} was founded in {} in {}.", self.title(), self.year, self.city),
            format!("It employs {} {}.", self.count, self.staff),
            format!("The {} is led by {}.", self.kind.to_lowercase(), self.leader),
            format!("Its work focuses on {}.", self.field),
        ]
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn join_names(names: &[String]) -> String {
    match names {
        [] => String::new(),
        [a] => a.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Per-category sample counts for `n` by largest remainder over the
/// reference shares (ties broken by category order).
pub(crate) fn category_quotas(n: usize) -> [usize; 6] {
    let mut quotas = [0usize; 6];
    let mut rems = [(0u64, 0usize); 6];
    for (i, c) in Category::ALL.iter().enumerate() {
        let exact = n as u64 * c.reference_share_bp() as u64;
        quotas[i] = (exact / 10_000) as usize;
        rems[i] = (exact % 10_000, i);
    }
    let left = n - quotas.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(left) {
        quotas[i] += 1;
    }
    quotas
}

fn sample_for(category: Category, rng: &mut ChaCha8Rng, profile: &SyntheticProfile) -> Sample {
    let lo = profile.min_entities.max(1);
    let hi = profile.max_entities.max(lo);
    let count = rng.gen_range(lo..=hi);
    let mut entities: Vec<Entity> = Vec::with_capacity(count);
    for _ in 0..count {
        let e = Entity::random(rng, &entities);
        entities.push(e);
    }
    let mut sentences: Vec<String> = entities.iter().flat_map(|e| e.sentences()).collect();
    let focus = entities.choose(rng).unwrap().clone();
    let (prompt, response) = match category {
        Category::ContextualQa => match rng.gen_range(0..3) {
            0 => (format!("Who leads {}?", focus.name), focus.leader.clone()),
            1 => (format!("In which city was {} founded?", focus.name), focus.city.to_string()),
            _ => (format!("What does {} work on?", focus.name), focus.field.to_string()),
        },
        Category::NumericQa => {
            if rng.gen_bool(0.5) {
                (format!("In what year was {} founded?", focus.name), focus.year.to_string())
            } else {
                (
                    format!("How many {} does {} employ?", focus.staff, focus.name),
                    focus.count.to_string(),
                )
            }
        }
        Category::Rephrasing => (
            format!("Rephrase the sentence about the founding of {}.", focus.name),
            format!("In {}, {} was established in {}.", focus.year, focus.name, focus.city),
        ),
        Category::Summarization => {
            let parts: Vec<String> = entities
                .iter()
                .map(|e| format!("{} in {} ({})", e.name, e.city, e.field))
                .collect();
            (
                "Summarize the passage in one sentence.".to_string(),
                format!("The passage describes {}.", join_names(&parts)),
            )
        }
        Category::TitleKeywords => {
            let names: Vec<String> = entities.iter().map(Entity::title).collect();
            let first = &entities[0];
            (
                "Give the passage a title and three keywords.".to_string(),
                format!(
                    "Title: {}. Keywords: {}, {}, {}.",
                    join_names(&names),
                    first.city,
                    first.field,
                    first.leader
                ),
            )
        }
        Category::Continuation => {
            let last = sentences.pop().expect("at least four sentences");
            ("Continue the passage.".to_string(), last)
        }
    };
    Sample {
        context: sentences.join(" "),
        prompt,
        response,
        category: Some(category),
    }
}

/// Deterministic corpus of `n` samples: category counts follow the reference
/// shares exactly (largest remainder), in seeded shuffled order.
pub fn generate_synthetic(seed: u64, n: usize, profile: &SyntheticProfile) -> Corpus {
    let quotas = category_quotas(n);
    let mut cats: Vec<Category> = Category::ALL
        .iter()
        .zip(quotas)
        .flat_map(|(&c, q)| std::iter::repeat(c).take(q))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cats.shuffle(&mut rng);
    let samples = cats.into_iter().map(|c| sample_for(c, &mut rng, profile)).collect();
    Corpus {
        samples,
        provenance: format!(
            "synthetic(seed={seed}, n={n}, entities={}..={})",
            profile.min_entities, profile.max_entities
        ),
        seed: Some(seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotas_sum_to_n() {
        for n in [0, 1, 7, 100, 999, 1000, 3740] {
            assert_eq!(category_quotas(n).iter().sum::<usize>(), n);
        }
        assert_eq!(category_quotas(1000), [564, 92, 68, 71, 138, 67]);
    }

    #[test]
    fn paragraphs_read_naturally() {
        let c = generate_synthetic(3, 12, &SyntheticProfile::default());
        for s in &c.samples {
            assert!(!s.context.is_empty());
            assert!(s.context.ends_with('.'));
            assert!(s.context.chars().next().unwrap().is_uppercase());
        }
    }
}
