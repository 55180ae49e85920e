use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{normalize_phrase, AlternativeMap, Caption, Edit, EditBudget, EditSelection};

/// Picks `min(budget, |alternatives|)` distinct keywords uniformly, then one
/// alternative for each. Keywords keep their order in the map.
pub fn select_edits(alternatives: &AlternativeMap, budget: EditBudget, seed: u64) -> EditSelection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let available = alternatives.len();
    let count = budget.cap(available);
    let mut chosen: Vec<usize> = sample(&mut rng, available, count).into_vec();
    chosen.sort_unstable();
    let applied = chosen
        .into_iter()
        .map(|i| {
            let (keyword, options) = alternatives.entries.get_index(i).expect("index within map");
            let alternative = options[rng.random_range(0..options.len())].clone();
            Edit { keyword: keyword.clone(), alternative }
        })
        .collect();
    EditSelection { applied, budget }
}

/// Requested edits whose alternative shows up in the returned caption.
/// The model may apply only part of what was asked; this records what is
/// visible without rejecting the caption.
pub fn detect_edits(edits: &EditSelection, counterfactual: &Caption) -> Vec<String> {
    let text = normalize_phrase(&counterfactual.text());
    edits
        .applied
        .iter()
        .filter(|e| text.contains(&normalize_phrase(&e.alternative)))
        .map(|e| format!("{} -> {}", e.keyword, e.alternative))
        .collect()
}
