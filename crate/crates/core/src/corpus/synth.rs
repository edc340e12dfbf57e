//! Synthetic review corpus with planted spam regularities.
//!
//! Spam authors reuse a personal praise phrase across everything they
//! write, and targeted products collect near-duplicate praise from the
//! spammers reviewing them. Legitimate reviews draw from the same
//! background phrasing, and occasionally praise too, so surface text
//! alone separates the classes only partially; author and product
//! identity carry the rest of the signal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CorpusError, RawReview, Result};

const PREFIXES: [&str; 4] = ["really", "very", "simply", "absolutely"];
const ADJECTIVES: [&str; 8] = [
    "great", "amazing", "awesome", "fantastic", "excellent", "wonderful", "superb", "perfect",
];
const NOUNS: [&str; 8] = [
    "camera", "screen", "battery", "phone", "laptop", "keyboard", "speaker", "charger",
];
const SUFFIXES: [&str; 2] = ["indeed", "truly"];

const SUBJECTS: [&str; 8] = [
    "the delivery",
    "the package",
    "the store",
    "my order",
    "the manual",
    "the box",
    "the courier",
    "the website",
];
const VERBS: [&str; 6] = [
    "arrived",
    "shipped",
    "responded",
    "was updated",
    "was fine",
    "was handled",
];
const TAILS: [&str; 8] = [
    "on time",
    "last week",
    "after two days",
    "as expected",
    "without issues",
    "yesterday",
    "eventually",
    "in the morning",
];
const WORK_ADVERBS: [&str; 4] = ["fine", "okay", "well enough", "as described"];

/// Shape of a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_products: usize,
    pub n_reviews: usize,
    /// Fraction of reviews labelled spam, in (0, 1).
    pub spam_rate: f64,
    /// Size of the praise phrase pool, at most 256.
    pub n_templates: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_users: 100,
            n_products: 50,
            n_reviews: 1000,
            spam_rate: 0.2,
            n_templates: 12,
        }
    }
}

fn template(i: usize) -> String {
    format!(
        "{} {} {}",
        PREFIXES[i / 64],
        ADJECTIVES[i % 8],
        NOUNS[(i / 8) % 8]
    )
}

fn filler(rng: &mut ChaCha8Rng) -> String {
    if rng.gen::<f64>() < 0.15 {
        // Mention a product noun in a neutral way so praise nouns are not
        // spam-specific vocabulary.
        format!(
            "the {} works {}",
            NOUNS[rng.gen_range(0..NOUNS.len())],
            WORK_ADVERBS[rng.gen_range(0..WORK_ADVERBS.len())]
        )
    } else {
        format!(
            "{} {} {}",
            SUBJECTS[rng.gen_range(0..SUBJECTS.len())],
            VERBS[rng.gen_range(0..VERBS.len())],
            TAILS[rng.gen_range(0..TAILS.len())]
        )
    }
}

fn praise_with_optional_suffix(rng: &mut ChaCha8Rng, base: &str, p_suffix: f64) -> String {
    if rng.gen::<f64>() < p_suffix {
        format!("{} {}", base, SUFFIXES[rng.gen_range(0..SUFFIXES.len())])
    } else {
        base.to_string()
    }
}

fn validate(spec: &SynthSpec) -> Result<()> {
    let fail = |reason: &str| {
        Err(CorpusError::InfeasibleSpec {
            reason: reason.to_string(),
        })
    };
    if spec.n_reviews < 1 {
        return fail("n_reviews must be at least 1");
    }
    if spec.n_users < 1 {
        return fail("n_users must be at least 1");
    }
    if spec.n_products < 1 {
        return fail("n_products must be at least 1");
    }
    if !(spec.spam_rate > 0.0 && spec.spam_rate < 1.0) {
        return fail("spam_rate must lie strictly between 0 and 1");
    }
    if spec.n_templates < 1 || spec.n_templates > PREFIXES.len() * ADJECTIVES.len() * NOUNS.len() {
        return fail("n_templates must lie in 1..=256");
    }
    Ok(())
}

/// Generates a labelled corpus. Deterministic given `seed`; the spam
/// count is exactly `round(spam_rate * n_reviews)`.
pub fn generate_synthetic(seed: u64, spec: &SynthSpec) -> Result<Vec<RawReview>> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_spam = (spec.spam_rate * spec.n_reviews as f64).round() as usize;
    let n_spam = n_spam.min(spec.n_reviews);

    // Partition the user pool: spammers write nothing but spam.
    let mut users: Vec<usize> = (0..spec.n_users).collect();
    users.shuffle(&mut rng);
    let n_spam_users = ((spec.n_users as f64 * spec.spam_rate).round() as usize)
        .clamp(1, spec.n_users);
    let (spam_users, honest_users) = users.split_at(n_spam_users.min(spec.n_users));
    let honest_users: Vec<usize> = if honest_users.is_empty() {
        users.clone()
    } else {
        honest_users.to_vec()
    };

    // A minority of products attract the spam campaigns.
    let mut products: Vec<usize> = (0..spec.n_products).collect();
    products.shuffle(&mut rng);
    let n_targets = ((spec.n_products as f64 * 0.3).round() as usize).clamp(1, spec.n_products);
    let targets = &products[..n_targets];

    let templates: Vec<String> = (0..spec.n_templates).map(template).collect();
    let personal: Vec<&String> = (0..spam_users.len())
        .map(|_| &templates[rng.gen_range(0..templates.len())])
        .collect();
    let product_phrase: Vec<&String> = (0..spec.n_products)
        .map(|_| &templates[rng.gen_range(0..templates.len())])
        .collect();

    let mut drafts: Vec<(u8, usize, usize, String)> = Vec::with_capacity(spec.n_reviews);
    for k in 0..n_spam {
        let slot = k % spam_users.len();
        let user = spam_users[slot];
        let product = targets[rng.gen_range(0..targets.len())];
        let n_sent = rng.gen_range(2..=5);
        let mut sentences = vec![personal[slot].clone()];
        if rng.gen::<f64>() < 0.75 {
            sentences.push(praise_with_optional_suffix(
                &mut rng,
                product_phrase[product],
                0.5,
            ));
        }
        while sentences.len() < n_sent {
            sentences.push(filler(&mut rng));
        }
        sentences.shuffle(&mut rng);
        drafts.push((1, user, product, format!("{}.", sentences.join(". "))));
    }
    for _ in n_spam..spec.n_reviews {
        let user = honest_users[rng.gen_range(0..honest_users.len())];
        let product = products[rng.gen_range(0..products.len())];
        let n_sent = rng.gen_range(2..=5);
        let roll = rng.gen::<f64>();
        let n_praise = if roll < 0.06 {
            2
        } else if roll < 0.28 {
            1
        } else {
            0
        };
        let mut sentences = Vec::with_capacity(n_sent);
        for _ in 0..n_praise.min(n_sent) {
            let base = &templates[rng.gen_range(0..templates.len())];
            sentences.push(praise_with_optional_suffix(&mut rng, base, 0.25));
        }
        while sentences.len() < n_sent {
            sentences.push(filler(&mut rng));
        }
        sentences.shuffle(&mut rng);
        drafts.push((0, user, product, format!("{}.", sentences.join(". "))));
    }

    drafts.shuffle(&mut rng);
    Ok(drafts
        .into_iter()
        .enumerate()
        .map(|(i, (label, user, product, text))| RawReview {
            review_id: format!("r{i:06}"),
            user_id: format!("u{user:04}"),
            product_id: format!("p{product:04}"),
            label,
            text,
        })
        .collect())
}

/// Deterministic 80/10/10 partition, stratified by label. Within each
/// class the cut sizes are `n*8/10` and `n/10`, remainder to test.
pub fn split_80_10_10(
    reviews: &[RawReview],
    seed: u64,
) -> (Vec<RawReview>, Vec<RawReview>, Vec<RawReview>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for class in [0u8, 1u8] {
        let mut members: Vec<&RawReview> =
            reviews.iter().filter(|r| r.label == class).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = n * 8 / 10;
        let n_valid = n / 10;
        for (i, r) in members.into_iter().enumerate() {
            if i < n_train {
                train.push(r.clone());
            } else if i < n_train + n_valid {
                valid.push(r.clone());
            } else {
                test.push(r.clone());
            }
        }
    }
    train.shuffle(&mut rng);
    valid.shuffle(&mut rng);
    test.shuffle(&mut rng);
    (train, valid, test)
}
