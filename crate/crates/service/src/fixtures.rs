//! Synthetic dossiers and session requests for tests, demos and benches.

use ffkv_core::harvest::{DossierContext, FeatureDossier, FeatureStats};
use ffkv_core::numerics::RngStream;

use crate::types::{CreateSession, DossierSet, TaskKind};

const WORDS: [&str; 12] = [
    "bolu", "kemi", "rado", "suna", "tavi", "lemo", "pira", "dune", "galo", "mise", "voka", "zeti",
];

/// Ten random contexts of nine tokens each.
pub fn dossier(feature: usize, seed: u64) -> FeatureDossier {
    let mut rng = RngStream::new(seed, feature as u64);
    let contexts: Vec<DossierContext> = (0..10)
        .map(|i| {
            let tokens: Vec<String> = (0..9).map(|_| WORDS[rng.below(WORDS.len())].to_string()).collect();
            let activations: Vec<f32> = (0..9).map(|_| rng.uniform() as f32 * 3.0).collect();
            let peak_offset = (0..9)
                .max_by(|&a, &b| activations[a].total_cmp(&activations[b]))
                .expect("nonempty");
            DossierContext {
                text_id: i * 7 + rng.below(5),
                doc_ref: format!("doc-{i}"),
                token_ids: (0..9).map(|t| t as u32).collect(),
                peak_position: peak_offset,
                peak: activations[peak_offset],
                tokens,
                activations,
                peak_offset,
            }
        })
        .collect();
    let max = contexts.iter().map(|c| c.peak).fold(0.0f32, f32::max);
    FeatureDossier {
        feature,
        contexts,
        stats: FeatureStats {
            max,
            mean_nonzero: max / 2.0,
            nonzero_count: 90,
        },
    }
}

/// A request drawing `sample` cards from each named pool of `pool` dossiers.
pub fn request(task: TaskKind, pools: &[&str], pool: usize, sample: usize, seed: u64) -> CreateSession {
    CreateSession {
        task,
        seed,
        sample_size: sample,
        raw_display: false,
        sets: pools
            .iter()
            .enumerate()
            .map(|(g, name)| DossierSet {
                provenance: name.to_string(),
                dossiers: (0..pool).map(|f| dossier(f, 1000 * g as u64 + seed)).collect(),
            })
            .collect(),
        pair_sets: Vec::new(),
    }
}
