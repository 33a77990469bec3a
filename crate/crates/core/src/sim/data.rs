//! Client datasets: a seeded Gaussian-mixture generator and an IDX loader.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, TAG_DATA};
use crate::{Error, Result};

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub n_features: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    fn push(&mut self, x: &[f64], label: usize) {
        self.features.extend_from_slice(x);
        self.labels.push(label);
    }

    pub fn label_histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0; n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Everything one simulation trains and evaluates on.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedData {
    pub n_features: usize,
    pub n_classes: usize,
    pub clients: Vec<Dataset>,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// One Gaussian blob per class. Class means are standard normal vectors
    /// times `separation`; samples add `noise`-scaled standard normal noise.
    Synthetic {
        n_classes: usize,
        n_features: usize,
        samples_per_client: usize,
        test_samples: usize,
        separation: f64,
        noise: f64,
        /// `None` draws labels uniformly (IID). `Some(m)` gives each client
        /// `m` distinct labels, used round-robin.
        #[serde(default)]
        labels_per_client: Option<usize>,
    },
    /// IDX image files. Training samples are dealt to clients in shuffled
    /// order, or by label shards when `labels_per_client` is set.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        labels_per_client: Option<usize>,
    },
}

impl DataSpec {
    pub fn build(&self, n_clients: usize, seed: u64) -> Result<FederatedData> {
        match self {
            DataSpec::Synthetic { .. } => generate_synthetic(self, n_clients, seed),
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                labels_per_client,
            } => {
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                if train.n_features != test.n_features {
                    return Err(Error::InvalidInput(
                        "train/test feature sizes differ".into(),
                    ));
                }
                split_idx(train, test, n_clients, *labels_per_client, seed)
            }
        }
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            scale * e
        })
        .collect()
}

/// Draws the class means, every client's data and a balanced test split.
pub fn generate_synthetic(spec: &DataSpec, n_clients: usize, seed: u64) -> Result<FederatedData> {
    let DataSpec::Synthetic {
        n_classes,
        n_features,
        samples_per_client,
        test_samples,
        separation,
        noise,
        labels_per_client,
    } = *spec
    else {
        return Err(Error::InvalidInput("not a synthetic data spec".into()));
    };
    if n_clients == 0 || n_classes < 2 || n_features == 0 || samples_per_client == 0 {
        return Err(Error::InvalidInput(
            "need n_clients >= 1, n_classes >= 2, n_features >= 1, samples_per_client >= 1".into(),
        ));
    }
    if !(separation.is_finite() && separation > 0.0 && noise.is_finite() && noise >= 0.0) {
        return Err(Error::InvalidInput(
            "separation must be > 0 and noise >= 0".into(),
        ));
    }
    if let Some(m) = labels_per_client {
        if m == 0 || m > n_classes {
            return Err(Error::InvalidInput(format!(
                "labels_per_client = {m} outside 1..={n_classes}"
            )));
        }
    }

    let mut mean_rng = rng::stream(seed, &[TAG_DATA, 0]);
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| normal_vec(&mut mean_rng, n_features, separation))
        .collect();
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, label: usize, out: &mut Dataset| {
        let x: Vec<f64> = means[label]
            .iter()
            .map(|m| {
                let e: f64 = StandardNormal.sample(rng);
                m + noise * e
            })
            .collect();
        out.push(&x, label);
    };

    let mut classes: Vec<usize> = (0..n_classes).collect();
    let clients = (0..n_clients)
        .map(|c| {
            let mut r = rng::stream(seed, &[TAG_DATA, 1, c as u64]);
            let mut ds = Dataset {
                n_features,
                ..Default::default()
            };
            let labels: Vec<usize> = match labels_per_client {
                None => (0..samples_per_client)
                    .map(|_| r.gen_range(0..n_classes))
                    .collect(),
                Some(m) => {
                    classes.shuffle(&mut r);
                    let subset = &classes[..m];
                    let mut l: Vec<usize> =
                        (0..samples_per_client).map(|i| subset[i % m]).collect();
                    l.shuffle(&mut r);
                    l
                }
            };
            for label in labels {
                draw(&mut r, label, &mut ds);
            }
            ds
        })
        .collect();

    let mut r = rng::stream(seed, &[TAG_DATA, 2]);
    let mut test = Dataset {
        n_features,
        ..Default::default()
    };
    for i in 0..test_samples {
        draw(&mut r, i % n_classes, &mut test);
    }
    Ok(FederatedData {
        n_features,
        n_classes,
        clients,
        test,
    })
}

fn read_idx_header<R: Read>(r: &mut R, want_type: u8) -> Result<Vec<usize>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic[0] != 0 || magic[1] != 0 || magic[2] != want_type {
        return Err(Error::InvalidInput("not an unsigned-byte IDX file".into()));
    }
    let mut dims = Vec::with_capacity(magic[3] as usize);
    for _ in 0..magic[3] {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        dims.push(u32::from_be_bytes(b) as usize);
    }
    Ok(dims)
}

/// Loads an IDX image file and its label file; pixels are scaled to [0, 1].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut ri = BufReader::new(File::open(images)?);
    let mut rl = BufReader::new(File::open(labels)?);
    let idims = read_idx_header(&mut ri, 0x08)?;
    let ldims = read_idx_header(&mut rl, 0x08)?;
    if idims.is_empty() || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(Error::InvalidInput(
            "IDX image and label counts differ".into(),
        ));
    }
    let n = idims[0];
    let n_features: usize = idims[1..].iter().product();
    let mut px = vec![0u8; n * n_features];
    ri.read_exact(&mut px)?;
    let mut lb = vec![0u8; n];
    rl.read_exact(&mut lb)?;
    Ok(Dataset {
        n_features,
        features: px.iter().map(|&p| f64::from(p) / 255.0).collect(),
        labels: lb.iter().map(|&l| l as usize).collect(),
    })
}

fn split_idx(
    train: Dataset,
    test: Dataset,
    n_clients: usize,
    labels_per_client: Option<usize>,
    seed: u64,
) -> Result<FederatedData> {
    if n_clients == 0 || train.len() < n_clients {
        return Err(Error::InvalidInput(
            "fewer training samples than clients".into(),
        ));
    }
    let n_classes = train
        .labels
        .iter()
        .chain(&test.labels)
        .max()
        .map_or(0, |&m| m + 1)
        .max(2);
    let mut r = rng::stream(seed, &[TAG_DATA, 3]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut r);
    if let Some(m) = labels_per_client {
        // Sort by label, then hand each client `m` contiguous shards.
        order.sort_by_key(|&i| train.labels[i]);
        let n_shards = n_clients * m.max(1);
        let shard = train.len() / n_shards;
        let mut shard_ids: Vec<usize> = (0..n_shards).collect();
        shard_ids.shuffle(&mut r);
        let clients = shard_ids
            .chunks(m.max(1))
            .map(|ids| {
                let mut ds = Dataset {
                    n_features: train.n_features,
                    ..Default::default()
                };
                for &s in ids {
                    for &i in &order[s * shard..(s + 1) * shard] {
                        ds.push(train.row(i), train.labels[i]);
                    }
                }
                ds
            })
            .collect();
        return Ok(FederatedData {
            n_features: train.n_features,
            n_classes,
            clients,
            test,
        });
    }
    let per = train.len() / n_clients;
    let clients = order
        .chunks(per)
        .take(n_clients)
        .map(|idx| {
            let mut ds = Dataset {
                n_features: train.n_features,
                ..Default::default()
            };
            for &i in idx {
                ds.push(train.row(i), train.labels[i]);
            }
            ds
        })
        .collect();
    Ok(FederatedData {
        n_features: train.n_features,
        n_classes,
        clients,
        test,
    })
}
