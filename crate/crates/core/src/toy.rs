//! Template-generated dialogues for desk-scale experiments.
//!
//! Every dialogue asks about an outing; the reply names the place, the
//! companion and the thing seen, so a model has to copy from the context.
//! The opener, the adjective and the verb of the reply are drawn uniformly,
//! making each context answerable in many equally likely ways.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::DialogueSample;

const PLACES: &[&str] = &[
    "park", "beach", "museum", "market", "library", "zoo", "cafe", "lake", "mall", "garden", "theater", "stadium",
];
const COMPANIONS: &[&str] = &["sister", "brother", "mother", "father", "friend", "cousin", "uncle", "aunt"];
const THINGS: &[&str] = &[
    "kites", "dolphins", "paintings", "apples", "books", "lions", "cakes", "boats", "shoes", "roses", "actors",
    "players", "fish", "birds", "lamps",
];
const OPENERS: &[&str] = &["yes", "well", "honestly", "oh", "sure", "actually"];
const ADJECTIVES: &[&str] = &["great", "lovely", "fun", "nice", "amazing", "busy", "quiet", "wonderful"];
const VERBS: &[&str] = &["loved", "enjoyed", "liked", "adored", "admired", "noticed"];
const GREETINGS: &[&str] = &["hi , how was your weekend ?", "hello , did you do anything fun ?", "hey , what did you do yesterday ?"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

/// `n` dialogues of three or four turns; the same seed gives the same corpus.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<DialogueSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let place = pick(&mut rng, PLACES);
            let companion = pick(&mut rng, COMPANIONS);
            let thing = pick(&mut rng, THINGS);
            let mut utterances = Vec::with_capacity(4);
            if rng.gen_bool(0.5) {
                utterances.push(pick(&mut rng, GREETINGS).to_owned());
            }
            utterances.push(format!("i went to the {place} with my {companion} yesterday ."));
            utterances.push(format!("did you see the {thing} at the {place} ?"));
            let (opener, adj, verb) = (pick(&mut rng, OPENERS), pick(&mut rng, ADJECTIVES), pick(&mut rng, VERBS));
            utterances.push(format!(
                "{opener} , the {place} was {adj} and my {companion} {verb} the {thing} ."
            ));
            DialogueSample::new(utterances).expect("template dialogues are well formed")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let a = toy_corpus(50, 3);
        assert_eq!(a, toy_corpus(50, 3));
        assert_ne!(a, toy_corpus(50, 4));
        for s in &a {
            assert!((3..=4).contains(&s.utterances.len()));
            let place = s.context().last().unwrap().split_whitespace().nth(7).unwrap();
            assert!(s.reference().contains(place));
        }
    }
}
