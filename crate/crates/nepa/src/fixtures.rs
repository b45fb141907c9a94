//! Deterministic synthetic correspondence for tests and demos: letters
//! assembled from topical sentences, matching binning guidance, and the
//! reviewer annotations a careful reader would produce for them.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BinDef, Guidance, Letter};
use crate::eval::GroundTruthComment;

const TOPICS: &[(&str, &[&str])] = &[
    (
        "water_quality",
        &[
            "Runoff from the new interchange will carry oil and salt into Mill Creek.",
            "The groundwater under the east parcel already shows nitrate contamination.",
            "Please explain how the wetlands along the river will be protected during construction.",
            "Our well sits two hundred feet from the proposed drainage basin.",
            "Stormwater retention ponds in the plan look far too small for a hundred-year flood.",
            "Sediment from the dredging would smother the spawning beds downstream.",
        ],
    ),
    (
        "traffic_noise",
        &[
            "Truck traffic on Route 9 is already dangerous for children walking to school.",
            "The noise study ignores the nighttime hours when deliveries arrive.",
            "Adding two lanes will only invite more congestion at the Elm Street light.",
            "Sound walls should be built before construction begins, not after.",
            "Emergency vehicles cannot get through the corridor at rush hour.",
            "Alternative 5 is the most sensible option here.",
        ],
    ),
    (
        "wildlife",
        &[
            "The desert tortoise habitat south of the wash must not be fragmented.",
            "Migratory birds nest in the cottonwoods that the plan would remove.",
            "A wildlife crossing is needed where the highway cuts the elk corridor.",
            "Night lighting at the facility will disorient the bats roosting nearby.",
            "The survey of rare plants was done in the wrong season.",
        ],
    ),
    (
        "economics",
        &[
            "Local businesses will lose customers during years of detours.",
            "The cost estimate leaves out the price of relocating utilities.",
            "Property values on our street have fallen since the project was announced.",
            "The project should hire workers from the county first.",
            "Taxpayers deserve a clear accounting of who pays for maintenance.",
        ],
    ),
];

const OPENINGS: &[&str] = &[
    "To the review team.",
    "I am writing about the draft statement.",
    "Please accept these comments on the proposal.",
    "As a resident of the valley I have several concerns.",
];

const CLOSINGS: &[&str] = &[
    "Thank you for considering these comments.",
    "I look forward to your response.",
    "Sincerely, a concerned neighbor.",
];

pub fn guidance() -> Guidance {
    Guidance::new(
        "Place each concern in every bin whose subject it addresses. Use other only when no bin fits.",
        vec![
            BinDef::new("water_quality", "Effects on streams, rivers, wetlands, groundwater, drainage and stormwater."),
            BinDef::new("traffic_noise", "Traffic, congestion, noise, safety of roads, and choice among alternatives."),
            BinDef::new("wildlife", "Habitat, species, birds, plants, corridors and crossings."),
            BinDef::new("economics", "Businesses, costs, property values, jobs and taxes."),
            BinDef::new("other", "Anything that fits no other bin."),
        ],
    )
    .expect("static guidance")
}

pub const PROJECT_CONTEXT: &str = "The agency proposes widening a state highway through a river valley, \
with a new interchange, drainage basins and a maintenance facility. Comments were received during the \
public review period of the draft environmental statement.";

/// `n` letters with reviewer annotations of their topical sentences.
pub fn annotated_corpus(n: usize, seed: u64) -> (Vec<Letter>, Vec<GroundTruthComment>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut letters = Vec::with_capacity(n);
    let mut truth = Vec::new();
    for i in 0..n {
        let id = format!("L{i:04}");
        let mut parts: Vec<(String, Option<&str>)> = vec![(OPENINGS.choose(&mut rng).unwrap().to_string(), None)];
        let k = rng.random_range(1..=5);
        let mut picked: Vec<(&str, &str)> = TOPICS
            .iter()
            .flat_map(|(bin, ss)| ss.iter().map(move |s| (*bin, *s)))
            .collect();
        picked.shuffle(&mut rng);
        for (bin, s) in picked.into_iter().take(k) {
            parts.push((s.to_string(), Some(bin)));
        }
        parts.push((CLOSINGS.choose(&mut rng).unwrap().to_string(), None));

        let mut text = String::new();
        for (s, bin) in parts {
            if !text.is_empty() {
                text.push(' ');
            }
            let start = text.chars().count();
            text.push_str(&s);
            if let Some(bin) = bin {
                truth.push(GroundTruthComment {
                    letter_id: id.clone(),
                    start,
                    end: text.chars().count(),
                    bin_name: bin.to_string(),
                });
            }
        }
        letters.push(Letter::new(id, text));
    }
    (letters, truth)
}

pub fn corpus(n: usize, seed: u64) -> Vec<Letter> {
    annotated_corpus(n, seed).0
}

/// Newline-delimited corpus text.
pub fn corpus_jsonl(letters: &[Letter]) -> String {
    letters
        .iter()
        .map(|l| serde_json::to_string(l).expect("letter serializes") + "\n")
        .collect()
}

pub fn truth_jsonl(truth: &[GroundTruthComment]) -> String {
    truth
        .iter()
        .map(|c| serde_json::to_string(c).expect("annotation serializes") + "\n")
        .collect()
}

pub fn guidance_toml() -> String {
    toml::to_string(&guidance()).expect("guidance serializes")
}
