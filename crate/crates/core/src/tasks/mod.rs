//! Client datasets and few-shot episode sampling.

mod raster;
mod synthetic;

pub use raster::{load_directory, read_famr, resize_nearest, save_directory, write_famr, RasterImage};
pub use synthetic::{
    make_clients_with_shifts, make_synthetic_clients, ShiftParams, SyntheticBank, SyntheticParams,
};

use std::path::PathBuf;

use rand::seq::index;

use crate::error::{FamError, Result};
use crate::model::Batch;
use crate::rng::{rng_for, tag};
use crate::tensor::Tensor;

/// Position of an example inside its client dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExampleId {
    pub class: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        family: String,
        shift: ShiftParams,
        seed: u64,
    },
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub source: DataSource,
    pub class_names: Vec<String>,
    /// Examples per class, each shaped `input_shape`.
    pub examples: Vec<Vec<Tensor>>,
    pub input_shape: Vec<usize>,
}

impl ClientDataset {
    pub fn num_classes(&self) -> usize {
        self.examples.len()
    }

    pub fn num_examples(&self) -> usize {
        self.examples.iter().map(Vec::len).sum()
    }

    pub fn inventory(&self) -> Vec<(String, usize)> {
        self.class_names
            .iter()
            .cloned()
            .zip(self.examples.iter().map(Vec::len))
            .collect()
    }

    /// Splits every class into a leading part and its last `held_out` examples.
    pub fn split(&self, held_out: usize) -> Result<(ClientDataset, ClientDataset)> {
        let mut head = self.clone();
        let mut tail = self.clone();
        for (c, ex) in self.examples.iter().enumerate() {
            if ex.len() <= held_out {
                return Err(FamError::Episode(format!(
                    "class `{}` has {} examples, cannot hold out {held_out}",
                    self.class_names[c],
                    ex.len()
                )));
            }
            let cut = ex.len() - held_out;
            head.examples[c] = ex[..cut].to_vec();
            tail.examples[c] = ex[cut..].to_vec();
        }
        Ok((head, tail))
    }

    /// Every example with its source class as label, class-major.
    pub fn full_batch(&self) -> Result<Batch> {
        Batch::stack(
            self.examples
                .iter()
                .enumerate()
                .flat_map(|(c, ex)| ex.iter().map(move |x| (x, c))),
        )
    }

    /// `per_class` examples of each listed class, labeled by position in `classes`.
    pub fn sample_batch(&self, classes: &[usize], per_class: usize, seed: u64) -> Result<(Batch, Vec<ExampleId>)> {
        let mut rng = rng_for(seed, &[tag::EPISODE, 1]);
        let mut picked = Vec::new();
        for &c in classes {
            let pool = self.class_pool(c, per_class)?;
            for i in index::sample(&mut rng, pool, per_class).into_vec() {
                picked.push(ExampleId { class: c, index: i });
            }
        }
        let batch = self.gather(classes, &picked)?;
        Ok((batch, picked))
    }

    fn class_pool(&self, class: usize, need: usize) -> Result<usize> {
        let have = self
            .examples
            .get(class)
            .map(Vec::len)
            .ok_or_else(|| FamError::Episode(format!("class {class} does not exist")))?;
        if have < need {
            return Err(FamError::Episode(format!(
                "class `{}` of client {} has {have} examples, {need} needed",
                self.class_names[class], self.client_id
            )));
        }
        Ok(have)
    }

    fn gather(&self, classes: &[usize], ids: &[ExampleId]) -> Result<Batch> {
        Batch::stack(ids.iter().map(|id| {
            let label = classes.iter().position(|&c| c == id.class).unwrap();
            (&self.examples[id.class][id.index], label)
        }))
    }
}

/// One N-way K-shot task. `classes[label]` is the source class of `label`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub classes: Vec<usize>,
    pub support: Batch,
    pub query: Batch,
    pub support_ids: Vec<ExampleId>,
    pub query_ids: Vec<ExampleId>,
}

/// Samples `way` classes without replacement, then `shot` support and `query`
/// query examples per class, disjoint. Chosen classes are relabeled
/// `0..way` in ascending source order.
pub fn sample_episode(ds: &ClientDataset, way: usize, shot: usize, query: usize, seed: u64) -> Result<Episode> {
    if way == 0 || shot == 0 || query == 0 {
        return Err(FamError::Episode(format!(
            "way, shot and query must be positive (got {way}, {shot}, {query})"
        )));
    }
    if ds.num_classes() < way {
        return Err(FamError::Episode(format!(
            "client {} has {} classes, {way}-way episodes need {} more",
            ds.client_id,
            ds.num_classes(),
            way - ds.num_classes()
        )));
    }
    let mut rng = rng_for(seed, &[tag::EPISODE]);
    let mut classes = index::sample(&mut rng, ds.num_classes(), way).into_vec();
    classes.sort_unstable();
    sample_with_rng(ds, classes, shot, query, &mut rng)
}

/// Like [`sample_episode`] but with a fixed, ordered class list.
pub fn sample_episode_for_classes(
    ds: &ClientDataset,
    classes: &[usize],
    shot: usize,
    query: usize,
    seed: u64,
) -> Result<Episode> {
    if classes.is_empty() || shot == 0 || query == 0 {
        return Err(FamError::Episode("empty episode request".into()));
    }
    let mut rng = rng_for(seed, &[tag::EPISODE, 2]);
    sample_with_rng(ds, classes.to_vec(), shot, query, &mut rng)
}

fn sample_with_rng(
    ds: &ClientDataset,
    classes: Vec<usize>,
    shot: usize,
    query: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Episode> {
    let mut support_ids = Vec::with_capacity(classes.len() * shot);
    let mut query_ids = Vec::with_capacity(classes.len() * query);
    for &c in &classes {
        let pool = ds.class_pool(c, shot + query)?;
        let picks = index::sample(rng, pool, shot + query).into_vec();
        let (s, q) = picks.split_at(shot);
        support_ids.extend(s.iter().map(|&i| ExampleId { class: c, index: i }));
        query_ids.extend(q.iter().map(|&i| ExampleId { class: c, index: i }));
    }
    Ok(Episode {
        way: classes.len(),
        support: ds.gather(&classes, &support_ids)?,
        query: ds.gather(&classes, &query_ids)?,
        classes,
        support_ids,
        query_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn dataset(classes: usize, per_class: usize) -> ClientDataset {
        ClientDataset {
            client_id: 0,
            source: DataSource::Directory(PathBuf::new()),
            class_names: (0..classes).map(|c| format!("c{c}")).collect(),
            examples: (0..classes)
                .map(|c| {
                    (0..per_class)
                        .map(|i| Tensor::from_vec(&[2], vec![c as f64, i as f64]).unwrap())
                        .collect()
                })
                .collect(),
            input_shape: vec![2],
        }
    }

    #[test]
    fn two_way_one_shot_counts() {
        let ds = dataset(4, 5);
        let e = sample_episode(&ds, 2, 1, 1, 3).unwrap();
        assert_eq!(e.support.len(), 2);
        assert_eq!(e.query.len(), 2);
        let labels: HashSet<usize> = e.support.labels.iter().copied().collect();
        assert_eq!(labels, HashSet::from([0, 1]));
    }

    #[test]
    fn episodes_are_reproducible_and_disjoint() {
        let ds = dataset(6, 8);
        let a = sample_episode(&ds, 3, 2, 4, 11).unwrap();
        let b = sample_episode(&ds, 3, 2, 4, 11).unwrap();
        assert_eq!(a, b);
        let s: HashSet<_> = a.support_ids.iter().collect();
        assert!(a.query_ids.iter().all(|id| !s.contains(id)));
        // labels follow the relabeling
        for (i, id) in a.support_ids.iter().enumerate() {
            assert_eq!(a.classes[a.support.labels[i]], id.class);
            assert_eq!(a.support.example(i).data()[0], id.class as f64);
        }
    }

    #[test]
    fn deficits_are_reported() {
        let ds = dataset(3, 2);
        assert!(matches!(sample_episode(&ds, 5, 1, 1, 0), Err(FamError::Episode(_))));
        let err = sample_episode(&ds, 2, 2, 1, 0).unwrap_err();
        assert!(err.to_string().contains("3 needed"), "{err}");
    }

    #[test]
    fn split_holds_out_tail() {
        let ds = dataset(2, 5);
        let (head, tail) = ds.split(2).unwrap();
        assert_eq!(head.examples[0].len(), 3);
        assert_eq!(tail.examples[1][0].data()[1], 3.0);
        assert!(ds.split(5).is_err());
    }
}
