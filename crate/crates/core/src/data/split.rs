use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabeledDataset;
use crate::error::{DataError, Result, VimError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    /// (train, val, test)
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        SplitSpec {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.ratios.iter().all(|r| (0.0..=1.0).contains(r))
            && (self.ratios.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DataError::Ratios(self.ratios).into())
        }
    }

    /// Per-class `(train, val, test)` counts: val and test are floored, train takes the rest.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let take = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
        let val = take(self.ratios[1]);
        let test = take(self.ratios[2]).min(n - val);
        (n - val - test, val, test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        })
    }
}

impl FromStr for Partition {
    type Err = VimError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(VimError::invalid(format!("unknown partition `{other}`"))),
        }
    }
}

/// Dataset indices per partition, each sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, p: Partition) -> &[usize] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    /// `(train, val, test)` counts per class.
    pub fn class_table(&self, ds: &LabeledDataset) -> Vec<(usize, usize, usize)> {
        let mut rows = vec![(0, 0, 0); ds.num_classes()];
        for &i in &self.train {
            rows[ds.samples[i].label].0 += 1;
        }
        for &i in &self.val {
            rows[ds.samples[i].label].1 += 1;
        }
        for &i in &self.test {
            rows[ds.samples[i].label].2 += 1;
        }
        rows
    }

    pub fn from_manifest(ds: &LabeledDataset, entries: &[ManifestEntry]) -> Result<Self> {
        let mut split = Split::default();
        for e in entries {
            let i = ds
                .index_of(&e.path)
                .ok_or_else(|| DataError::UnknownSample(e.path.clone()))?;
            if ds.samples[i].label != e.label {
                return Err(VimError::invalid(format!(
                    "{}: manifest label {} but folder label {}",
                    e.path, e.label, ds.samples[i].label
                )));
            }
            match e.partition {
                Partition::Train => split.train.push(i),
                Partition::Val => split.val.push(i),
                Partition::Test => split.test.push(i),
            }
        }
        split.train.sort_unstable();
        split.val.sort_unstable();
        split.test.sort_unstable();
        Ok(split)
    }
}

/// Shuffles each class with the seed, then deals `val`, `test`, and the remainder to train.
pub fn stratified_split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for (i, s) in ds.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = Split::default();
    for (label, mut items) in by_class.into_iter().enumerate() {
        if items.is_empty() {
            return Err(VimError::invalid(format!(
                "class `{}` has no items",
                ds.class_names[label]
            )));
        }
        items.shuffle(&mut rng);
        let (train, val, test) = spec.counts(items.len());
        if val == 0 || test == 0 || train == 0 {
            log::warn!(
                "class `{}` with {} items splits as {train}/{val}/{test}",
                ds.class_names[label],
                items.len()
            );
        }
        split.val.extend_from_slice(&items[..val]);
        split.test.extend_from_slice(&items[val..val + test]);
        split.train.extend_from_slice(&items[val + test..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Permutation of `0..n` keyed by `(seed, epoch)`, cut into batches.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let key = seed
        ^ (epoch as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub partition: Partition,
}

/// `relative_path<TAB>class_index<TAB>partition` per sample, in dataset order.
pub fn write_manifest(ds: &LabeledDataset, split: &Split) -> String {
    let mut part = vec![None; ds.len()];
    for (p, idx) in [
        (Partition::Train, &split.train),
        (Partition::Val, &split.val),
        (Partition::Test, &split.test),
    ] {
        for &i in idx {
            part[i] = Some(p);
        }
    }
    let mut out = String::new();
    for (s, p) in ds.samples.iter().zip(part) {
        if let Some(p) = p {
            out.push_str(&format!("{}\t{}\t{}\n", s.id, s.label, p));
        }
    }
    out
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let err = |line: usize, message: String| VimError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [p, label, part] = fields[..] else {
            return Err(err(
                n + 1,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        };
        let label = label
            .parse()
            .map_err(|_| err(n + 1, format!("bad class index `{label}`")))?;
        let partition = part
            .parse()
            .map_err(|e: VimError| err(n + 1, e.to_string()))?;
        out.push(ManifestEntry {
            path: p.to_string(),
            label,
            partition,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| VimError::io(path, e))?;
    parse_manifest(&text, path)
}

/// Class names by label, taken from the first path component of each entry.
pub fn class_names_from_manifest(entries: &[ManifestEntry]) -> Result<Vec<String>> {
    let k = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
    let mut names: Vec<Option<String>> = vec![None; k];
    for e in entries {
        let folder = e.path.split('/').next().unwrap_or("").to_string();
        match &names[e.label] {
            Some(n) if *n != folder => {
                return Err(VimError::invalid(format!(
                    "label {} maps to both `{n}` and `{folder}`",
                    e.label
                )))
            }
            _ => names[e.label] = Some(folder),
        }
    }
    names
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.ok_or_else(|| VimError::invalid(format!("no samples for label {i}"))))
        .collect()
}
