use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng as _;

use super::{DataError, Modality, Spectrum};
use crate::rng::Rng;

/// Per-class positions of spectra in a training pool, split by modality.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    by_class: BTreeMap<u32, [Vec<usize>; 2]>,
    /// Classes with at least one spectrum of each modality, ascending.
    eligible: Vec<u32>,
}

impl ClassIndex {
    pub fn new(spectra: &[Spectrum]) -> Self {
        let mut by_class: BTreeMap<u32, [Vec<usize>; 2]> = BTreeMap::new();
        for (i, s) in spectra.iter().enumerate() {
            by_class.entry(s.class_id).or_default()[s.modality.index()].push(i);
        }
        let eligible = by_class
            .iter()
            .filter(|(_, m)| !m[0].is_empty() && !m[1].is_empty())
            .map(|(&c, _)| c)
            .collect();
        Self { by_class, eligible }
    }

    pub fn eligible_classes(&self) -> &[u32] {
        &self.eligible
    }

    pub fn members(&self, class_id: u32, modality: Modality) -> &[usize] {
        self.by_class.get(&class_id).map(|m| m[modality.index()].as_slice()).unwrap_or(&[])
    }
}

/// `K` anchor/positive/negative triplets. Anchors share a modality; positives
/// and negatives are drawn from the other one.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub anchor_modality: Modality,
    pub anchors: Vec<Spectrum>,
    pub positives: Vec<Spectrum>,
    pub negatives: Vec<Spectrum>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Class and modality constraints for every entry.
    pub fn is_valid(&self) -> bool {
        let other = self.anchor_modality.other();
        self.anchors.len() == self.positives.len()
            && self.anchors.len() == self.negatives.len()
            && self.anchors.iter().zip(&self.positives).zip(&self.negatives).all(|((a, p), n)| {
                a.class_id == p.class_id
                    && a.class_id != n.class_id
                    && a.modality == self.anchor_modality
                    && p.modality == other
                    && n.modality == other
            })
    }
}

/// Samples `k` triplets: anchor class uniform over eligible classes, negative
/// class uniform over the remaining eligible classes, members uniform within class.
pub fn sample_triplet_batch(
    spectra: &[Spectrum],
    index: &ClassIndex,
    k: usize,
    anchor_modality: Modality,
    rng: &mut Rng,
) -> Result<TripletBatch, DataError> {
    let classes = index.eligible_classes();
    if classes.len() < 2 {
        return Err(DataError::NotEnoughClasses(classes.len()));
    }
    let other = anchor_modality.other();
    let mut batch = TripletBatch {
        anchor_modality,
        anchors: Vec::with_capacity(k),
        positives: Vec::with_capacity(k),
        negatives: Vec::with_capacity(k),
    };
    for _ in 0..k {
        let ai = rng.random_range(0..classes.len());
        let mut ni = rng.random_range(0..classes.len() - 1);
        if ni >= ai {
            ni += 1;
        }
        let (ca, cn) = (classes[ai], classes[ni]);
        let pick = |c: u32, m: Modality, rng: &mut Rng| -> Spectrum {
            let idx = *index.members(c, m).choose(rng).expect("eligible class has members");
            spectra[idx].clone()
        };
        batch.anchors.push(pick(ca, anchor_modality, rng));
        batch.positives.push(pick(ca, other, rng));
        batch.negatives.push(pick(cn, other, rng));
    }
    Ok(batch)
}

/// Class-paired `(M1, M2)` couples for the reconstruction, transform and adversarial terms.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub m1: Vec<Spectrum>,
    pub m2: Vec<Spectrum>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.m1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m1.is_empty()
    }
}

/// Pairs each M1 spectrum at `m1_positions` with a uniformly drawn M2 spectrum of its class.
/// Positions whose class lacks M2 spectra are skipped.
pub fn sample_pair_batch(
    spectra: &[Spectrum],
    index: &ClassIndex,
    m1_positions: &[usize],
    rng: &mut Rng,
) -> PairBatch {
    let mut batch = PairBatch { m1: Vec::new(), m2: Vec::new() };
    for &i in m1_positions {
        let s = &spectra[i];
        if let Some(&j) = index.members(s.class_id, Modality::M2).choose(rng) {
            batch.m1.push(s.clone());
            batch.m2.push(spectra[j].clone());
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy(classes: u32, per: usize) -> Vec<Spectrum> {
        let mut v = Vec::new();
        for c in 0..classes {
            for m in Modality::BOTH {
                for i in 0..per {
                    v.push(Spectrum {
                        values: vec![c as f64 / 100.0; 4],
                        modality: m,
                        class_id: c,
                        source_id: format!("{c}-{m}-{i}"),
                    });
                }
            }
        }
        v
    }

    #[test]
    fn k_valid_triplets() {
        let data = toy(8, 2);
        let idx = ClassIndex::new(&data);
        let mut rng = Rng::seed_from_u64(3);
        let b = sample_triplet_batch(&data, &idx, 5, Modality::M1, &mut rng).unwrap();
        assert_eq!(b.len(), 5);
        assert!(b.is_valid());
        let m = sample_triplet_batch(&data, &idx, 5, Modality::M2, &mut rng).unwrap();
        assert!(m.is_valid());
    }

    #[test]
    fn two_class_toy() {
        let data = toy(2, 1);
        let idx = ClassIndex::new(&data);
        let b = sample_triplet_batch(&data, &idx, 1, Modality::M1, &mut Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.anchors[0].class_id, b.positives[0].class_id);
        assert_eq!(b.negatives[0].class_id, 1 - b.anchors[0].class_id);
    }

    #[test]
    fn needs_two_classes() {
        let data = toy(1, 3);
        let idx = ClassIndex::new(&data);
        let r = sample_triplet_batch(&data, &idx, 1, Modality::M1, &mut Rng::seed_from_u64(0));
        assert!(matches!(r, Err(DataError::NotEnoughClasses(1))));
    }

    #[test]
    fn anchor_classes_are_uniform() {
        let data = toy(10, 1);
        let idx = ClassIndex::new(&data);
        let mut rng = Rng::seed_from_u64(17);
        let mut counts = [0usize; 10];
        let b = sample_triplet_batch(&data, &idx, 10_000, Modality::M1, &mut rng).unwrap();
        assert!(b.is_valid());
        for a in &b.anchors {
            counts[a.class_id as usize] += 1;
        }
        for c in counts {
            let rel = (c as f64 - 1000.0).abs() / 1000.0;
            assert!(rel <= 0.05, "class count {c}");
        }
    }

    #[test]
    fn pairs_share_class() {
        let data = toy(4, 3);
        let idx = ClassIndex::new(&data);
        let m1: Vec<usize> = (0..data.len()).filter(|&i| data[i].modality == Modality::M1).collect();
        let b = sample_pair_batch(&data, &idx, &m1, &mut Rng::seed_from_u64(2));
        assert_eq!(b.len(), m1.len());
        assert!(b.m1.iter().zip(&b.m2).all(|(a, c)| a.class_id == c.class_id && c.modality == Modality::M2));
    }
}
