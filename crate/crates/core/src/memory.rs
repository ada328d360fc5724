//! Episodic memory: one fixed-capacity ring per task, sampled uniformly.

use std::collections::BTreeMap;

use rand::Rng;

use crate::batch::{Batch, BatchRole, ExampleRef};
use crate::checkpoint::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StoredExample {
    pub image: Vec<f64>,
    pub label: Vec<f64>,
    pub task: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct TaskRing {
    slots: Vec<StoredExample>,
    cursor: usize,
    n_seen: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodicMemory {
    per_task_capacity: usize,
    image_shape: [usize; 3],
    num_classes: usize,
    rings: BTreeMap<usize, TaskRing>,
}

impl EpisodicMemory {
    pub fn new(per_task_capacity: usize, image_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            per_task_capacity,
            image_shape,
            num_classes,
            rings: BTreeMap::new(),
        }
    }

    pub fn per_task_capacity(&self) -> usize {
        self.per_task_capacity
    }

    /// Total stored examples over all tasks.
    pub fn len(&self) -> usize {
        self.rings.values().map(|r| r.slots.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.rings.keys().copied()
    }

    /// Ring contents for `task` in slot order.
    pub fn slots(&self, task: usize) -> &[StoredExample] {
        self.rings.get(&task).map_or(&[], |r| r.slots.as_slice())
    }

    pub fn cursor(&self, task: usize) -> usize {
        self.rings.get(&task).map_or(0, |r| r.cursor)
    }

    /// Examples of `task` offered to [`write`](Self::write) so far.
    pub fn n_seen(&self, task: usize) -> usize {
        self.rings.get(&task).map_or(0, |r| r.n_seen)
    }

    /// Ring-buffer write of every example in `batch` under `task`.
    pub fn write(&mut self, task: usize, batch: &Batch) -> Result<()> {
        if let Some(other) = batch.task_ids.iter().find(|&&t| t != task) {
            return Err(Error::invalid(
                "memory.write",
                format!("batch mixes task {other} into a write for task {task}"),
            ));
        }
        if !batch.is_empty() && (batch.image_shape() != self.image_shape || batch.num_classes() != self.num_classes) {
            return Err(Error::shape("memory.write", &self.image_shape, &batch.image_shape()));
        }
        let cap = self.per_task_capacity;
        let ring = self.rings.entry(task).or_default();
        for ex in batch.examples() {
            ring.n_seen += 1;
            if cap == 0 {
                continue;
            }
            let stored = StoredExample {
                image: ex.image.to_vec(),
                label: ex.label.to_vec(),
                task,
            };
            if ring.slots.len() < cap {
                ring.slots.push(stored);
            } else {
                ring.slots[ring.cursor] = stored;
            }
            ring.cursor = (ring.cursor + 1) % cap;
        }
        Ok(())
    }

    /// All stored examples, tasks ascending and slots in ring order.
    pub fn stored(&self) -> impl Iterator<Item = &StoredExample> {
        self.rings.values().flat_map(|r| r.slots.iter())
    }

    /// Up to `k` distinct examples drawn uniformly without replacement from
    /// the union of all rings.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Batch {
        let pool: Vec<&StoredExample> = self.stored().collect();
        let amount = k.min(pool.len());
        let picks = rand::seq::index::sample(rng, pool.len(), amount);
        let examples = picks.iter().map(|i| {
            let e = pool[i];
            ExampleRef {
                image: &e.image,
                label: &e.label,
                task: e.task,
            }
        });
        Batch::from_examples(self.image_shape, self.num_classes, examples, BatchRole::Memory)
            .expect("stored examples match memory geometry")
    }

    /// Serialised form stored in the `MEMS` checkpoint section.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.u64(self.per_task_capacity as u64);
        for d in self.image_shape {
            w.u32(d as u32);
        }
        w.u32(self.num_classes as u32);
        w.u32(self.rings.len() as u32);
        for (task, ring) in &self.rings {
            w.u32(*task as u32);
            w.u64(ring.cursor as u64);
            w.u64(ring.n_seen as u64);
            w.u64(ring.slots.len() as u64);
            for e in &ring.slots {
                e.image.iter().for_each(|v| w.f64(*v));
                e.label.iter().for_each(|v| w.f64(*v));
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let per_task_capacity = r.u64()? as usize;
        let image_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let num_classes = r.u32()? as usize;
        let image_len: usize = image_shape.iter().product();
        let mut rings = BTreeMap::new();
        for _ in 0..r.u32()? {
            let task = r.u32()? as usize;
            let cursor = r.u64()? as usize;
            let n_seen = r.u64()? as usize;
            let count = r.u64()? as usize;
            if count > per_task_capacity || (per_task_capacity > 0 && cursor >= per_task_capacity) {
                return Err(Error::Format(format!("memory ring for task {task} exceeds capacity")));
            }
            let mut slots = Vec::with_capacity(count);
            for _ in 0..count {
                let image = (0..image_len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let label = (0..num_classes).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                slots.push(StoredExample { image, label, task });
            }
            rings.insert(task, TaskRing { slots, cursor, n_seen });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after memory snapshot".into()));
        }
        Ok(Self {
            per_task_capacity,
            image_shape,
            num_classes,
            rings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::one_hot;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Batch of `ids.len()` 1x1x1 images whose pixel value is the example id.
    fn batch(task: usize, ids: &[usize]) -> Batch {
        let n = ids.len();
        Batch::new(
            Tensor::new(vec![n, 1, 1, 1], ids.iter().map(|&i| i as f64).collect()).unwrap(),
            Tensor::new(vec![n, 2], ids.iter().flat_map(|&i| one_hot(i % 2, 2)).collect()).unwrap(),
            vec![task; n],
            BatchRole::Current,
        )
        .unwrap()
    }

    fn ids(mem: &EpisodicMemory, task: usize) -> Vec<usize> {
        mem.slots(task).iter().map(|e| e.image[0] as usize).collect()
    }

    #[test]
    fn ring_wraps_over_oldest() {
        let mut mem = EpisodicMemory::new(3, [1, 1, 1], 2);
        mem.write(0, &batch(0, &[1, 2])).unwrap();
        mem.write(0, &batch(0, &[3, 4])).unwrap();
        assert_eq!(ids(&mem, 0), vec![4, 2, 3]);
        assert_eq!(mem.n_seen(0), 4);
    }

    #[test]
    fn under_capacity_keeps_order() {
        let mut mem = EpisodicMemory::new(3, [1, 1, 1], 2);
        mem.write(0, &batch(0, &[1, 2, 3])).unwrap();
        assert_eq!(ids(&mem, 0), vec![1, 2, 3]);
    }

    #[test]
    fn zero_capacity_is_inert() {
        let mut mem = EpisodicMemory::new(0, [1, 1, 1], 2);
        mem.write(0, &batch(0, &[1, 2, 3])).unwrap();
        assert!(mem.is_empty());
        assert_eq!(mem.n_seen(0), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mem.sample(10, &mut rng).is_empty());
    }

    #[test]
    fn mixed_tasks_rejected() {
        let mut mem = EpisodicMemory::new(3, [1, 1, 1], 2);
        let mut b = batch(0, &[1, 2]);
        b.task_ids[1] = 1;
        assert!(mem.write(0, &b).is_err());
    }

    #[test]
    fn sample_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let empty = EpisodicMemory::new(5, [1, 1, 1], 2);
        assert!(empty.sample(10, &mut rng).is_empty());

        let mut mem = EpisodicMemory::new(5, [1, 1, 1], 2);
        mem.write(0, &batch(0, &[10, 11, 12, 13, 14])).unwrap();
        let s = mem.sample(5, &mut rng);
        let mut got: Vec<usize> = s.examples().map(|e| e.image[0] as usize).collect();
        got.sort();
        assert_eq!(got, vec![10, 11, 12, 13, 14]);
        assert_eq!(s.role, BatchRole::Memory);
    }

    #[test]
    fn sample_is_uniform() {
        let mut mem = EpisodicMemory::new(50, [1, 1, 1], 2);
        mem.write(0, &batch(0, &(0..50).collect::<Vec<_>>())).unwrap();
        mem.write(1, &batch(1, &(50..100).collect::<Vec<_>>())).unwrap();
        let trials = 10_000;
        let mut counts = [0usize; 100];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..trials {
            for e in mem.sample(10, &mut rng).examples() {
                counts[e.image[0] as usize] += 1;
            }
        }
        let p: f64 = 0.1;
        let expected = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            assert!((c as f64 - expected).abs() < 3.0 * sigma, "example {i}: {c}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 99.9th percentile of chi-square with 99 degrees of freedom is ~148.2.
        assert!(chi2 < 148.2, "chi2 = {chi2}");
    }

    #[test]
    fn snapshot_round_trip() {
        let mut mem = EpisodicMemory::new(3, [1, 1, 1], 2);
        mem.write(0, &batch(0, &[1, 2, 3, 4])).unwrap();
        mem.write(2, &batch(2, &[7])).unwrap();
        let bytes = mem.to_bytes();
        let back = EpisodicMemory::from_bytes(&bytes).unwrap();
        assert_eq!(back, mem);
        assert_eq!(back.to_bytes(), bytes);
    }

    proptest! {
        #[test]
        fn ring_matches_list_oracle(cap in 0usize..6, sizes in prop::collection::vec(0usize..5, 0..12)) {
            let mut mem = EpisodicMemory::new(cap, [1, 1, 1], 2);
            let mut written = Vec::new();
            let mut next = 0;
            for s in sizes {
                let ids: Vec<usize> = (next..next + s).collect();
                next += s;
                mem.write(0, &batch(0, &ids)).unwrap();
                written.extend(ids);
                prop_assert!(mem.slots(0).len() <= cap);
            }
            // Oracle: slot i holds the latest write whose index is i mod cap.
            let mut oracle: Vec<usize> = Vec::new();
            if cap > 0 {
                for (i, id) in written.iter().enumerate() {
                    if i < cap { oracle.push(*id) } else { oracle[i % cap] = *id }
                }
            }
            prop_assert_eq!(ids(&mem, 0), oracle);
            prop_assert_eq!(mem.n_seen(0), written.len());
        }

        #[test]
        fn sample_has_no_duplicates(n in 0usize..30, k in 0usize..40, seed in any::<u64>()) {
            let mut mem = EpisodicMemory::new(30, [1, 1, 1], 2);
            mem.write(0, &batch(0, &(0..n).collect::<Vec<_>>())).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut got: Vec<usize> = mem.sample(k, &mut rng).examples().map(|e| e.image[0] as usize).collect();
            prop_assert_eq!(got.len(), k.min(n));
            got.sort();
            got.dedup();
            prop_assert_eq!(got.len(), k.min(n));
        }
    }
}
