//! Synthetic datasets for exercising the pipeline, with a stub captioner
//! that writes captions and caption embeddings from record metadata.

use std::collections::BTreeMap;

use super::EmbeddingRecord;

/// Attributes a stub caption is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageMeta {
    pub colour: &'static str,
    pub animal: &'static str,
}

const CLASSES: [ImageMeta; 4] = [
    ImageMeta { colour: "white", animal: "cat" },
    ImageMeta { colour: "black", animal: "cat" },
    ImageMeta { colour: "white", animal: "dog" },
    ImageMeta { colour: "black", animal: "dog" },
];

fn basis(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; CLASSES.len()];
    v[i] = 1.0;
    v
}

/// Level-1 caption names the animal; level 2 adds the colour.
pub fn stub_caption(meta: ImageMeta, level: usize) -> String {
    match level {
        1 => format!("a photo of a {}", meta.animal),
        _ => format!("a photo of a {} {}", meta.colour, meta.animal),
    }
}

/// Caption embedding in the one-hot class space: the normalized indicator
/// of every class the caption is true for.
pub fn stub_caption_embedding(meta: ImageMeta, level: usize) -> Vec<f64> {
    let matches: Vec<usize> = CLASSES
        .iter()
        .enumerate()
        .filter(|(_, c)| c.animal == meta.animal && (level == 1 || c.colour == meta.colour))
        .map(|(i, _)| i)
        .collect();
    let w = 1.0 / (matches.len() as f64).sqrt();
    let mut v = vec![0.0; CLASSES.len()];
    matches.iter().for_each(|&i| v[i] = w);
    v
}

/// Two-level dataset with `counts[i]` images of class `i` in the order
/// white cat, black cat, white dog, black dog.
pub fn two_level_fixture(counts: [usize; 4]) -> Vec<EmbeddingRecord> {
    let mut out = Vec::new();
    for (class, (&meta, &n)) in CLASSES.iter().zip(&counts).enumerate() {
        for j in 0..n {
            let captions: BTreeMap<String, String> =
                (1..=2).map(|l| (l.to_string(), stub_caption(meta, l))).collect();
            let embeddings: BTreeMap<String, Vec<f64>> =
                (1..=2).map(|l| (l.to_string(), stub_caption_embedding(meta, l))).collect();
            out.push(EmbeddingRecord {
                image_id: format!("{}-{}-{j:03}", meta.colour, meta.animal),
                embedding: basis(class),
                captions,
                caption_embeddings: Some(embeddings),
            });
        }
    }
    out
}

/// Class sizes of the dataset shipped with the repository.
pub const SHIPPED_COUNTS: [usize; 4] = [30, 25, 15, 12];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_embeddings_are_unit() {
        for meta in CLASSES {
            for level in 1..=2 {
                let e = stub_caption_embedding(meta, level);
                let n: f64 = e.iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-15);
            }
        }
        assert_eq!(stub_caption(CLASSES[3], 2), "a photo of a black dog");
    }

    #[test]
    fn fixture_shape() {
        let recs = two_level_fixture([2, 1, 0, 3]);
        assert_eq!(recs.len(), 6);
        assert_eq!(recs[2].image_id, "black-cat-000");
        assert_eq!(recs[5].caption(1), Some("a photo of a dog"));
    }
}
