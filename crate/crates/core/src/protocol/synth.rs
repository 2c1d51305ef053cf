use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::manifest::{DatasetManifest, Example, Partition, Payload};
use crate::error::{Result, SvtError};

/// Class names for synthetic datasets (the CIFAR-100 label set).
pub const CLASS_WORDS: [&str; 100] = [
    "apple", "aquarium fish", "baby", "bear", "beaver", "bed", "bee", "beetle", "bicycle",
    "bottle", "bowl", "boy", "bridge", "bus", "butterfly", "camel", "can", "castle",
    "caterpillar", "cattle", "chair", "chimpanzee", "clock", "cloud", "cockroach", "couch",
    "crab", "crocodile", "cup", "dinosaur", "dolphin", "elephant", "flatfish", "forest", "fox",
    "girl", "hamster", "house", "kangaroo", "keyboard", "lamp", "lawn mower", "leopard", "lion",
    "lizard", "lobster", "man", "maple tree", "motorcycle", "mountain", "mouse", "mushroom",
    "oak tree", "orange", "orchid", "otter", "palm tree", "pear", "pickup truck", "pine tree",
    "plain", "plate", "poppy", "porcupine", "possum", "rabbit", "raccoon", "ray", "road",
    "rocket", "rose", "sea", "seal", "shark", "shrew", "skunk", "skyscraper", "snail", "snake",
    "spider", "squirrel", "streetcar", "sunflower", "sweet pepper", "table", "tank", "telephone",
    "television", "tiger", "tractor", "train", "trout", "tulip", "turtle", "wardrobe", "whale",
    "willow tree", "wolf", "woman", "worm",
];

/// Gaussian class clusters around standard-normal class means.
///
/// Draw order: all class means, then per class its train examples followed
/// by its test examples. Class `c` is named `CLASS_WORDS[c]`.
pub fn synthesize_dataset(
    class_count: usize,
    per_class_train: usize,
    per_class_test: usize,
    feature_dim: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if class_count > CLASS_WORDS.len() {
        return Err(SvtError::Capacity {
            requested: class_count,
            available: CLASS_WORDS.len(),
        });
    }
    if class_count == 0 || per_class_train == 0 || per_class_test == 0 || feature_dim == 0 {
        return Err(SvtError::Validation(
            "synthetic dataset counts must all be at least 1".into(),
        ));
    }
    if !(cluster_spread >= 0.0 && cluster_spread.is_finite()) {
        return Err(SvtError::Validation(format!(
            "cluster_spread must be a finite non-negative number, got {cluster_spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..class_count)
        .map(|_| {
            (0..feature_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut examples = Vec::with_capacity(class_count * (per_class_train + per_class_test));
    for (c, mean) in means.iter().enumerate() {
        for (partition, count) in [
            (Partition::Train, per_class_train),
            (Partition::Test, per_class_test),
        ] {
            for i in 0..count {
                let v = mean
                    .iter()
                    .map(|m| m + cluster_spread * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                examples.push(Example {
                    id: format!("c{c:03}-{}-{i:04}", partition.as_str()),
                    payload: Payload::Vector(v),
                    class_id: c,
                    partition,
                });
            }
        }
    }
    let words = CLASS_WORDS[..class_count].iter().map(|w| w.to_string()).collect();
    DatasetManifest::new(examples, words)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_byte_identical_manifests() {
        let a = synthesize_dataset(20, 30, 10, 32, 0.1, 7).unwrap();
        let b = synthesize_dataset(20, 30, 10, 32, 0.1, 7).unwrap();
        assert_eq!(a.to_csv_bytes().unwrap(), b.to_csv_bytes().unwrap());
        let c = synthesize_dataset(20, 30, 10, 32, 0.1, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_spread_collapses_to_means() {
        let m = synthesize_dataset(3, 4, 2, 5, 0.0, 1).unwrap();
        for c in 0..3 {
            let idx: Vec<usize> = m
                .examples()
                .iter()
                .enumerate()
                .filter(|(_, e)| e.class_id == c)
                .map(|(i, _)| i)
                .collect();
            let first = &m.example(idx[0]).payload;
            assert!(idx.iter().all(|&i| &m.example(i).payload == first));
        }
    }

    #[test]
    fn too_many_classes_is_capacity_error() {
        assert!(matches!(
            synthesize_dataset(101, 1, 1, 2, 0.1, 0),
            Err(SvtError::Capacity { requested: 101, available: 100 })
        ));
    }

    #[test]
    fn word_list_contains_visualized_classes() {
        for w in ["whale", "willow tree", "wolf", "woman", "worm"] {
            assert!(CLASS_WORDS.contains(&w));
        }
        let mut sorted = CLASS_WORDS.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
    }
}
