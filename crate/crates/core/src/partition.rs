//! Synthetic data and non-IID partitioning.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::{ExperimentConfig, Scheme};
use crate::error::{Error, Result};
use crate::seed::{domain, stream_seed, sub_seed, SplitMix64};

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<u32>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<u32>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::InvalidInput("dataset needs d >= 1 and k >= 1".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch { expected: labels.len() * dim, actual: features.len() });
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidInput(format!("label {l} outside [0, {classes})")));
        }
        Ok(Self { features, labels, dim, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { features, labels, dim: self.dim, classes: self.classes }
    }

    /// Label counts, one slot per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    const MAGIC: &'static [u8; 4] = b"FLDS";
    const VERSION: u32 = 1;

    /// Writes the `FLDS` binary layout: magic, u32 version, u64 n, u64 d,
    /// u64 k, then row-major f64 features and u32 labels, all little-endian.
    pub fn write_flds<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.classes as u64).to_le_bytes())?;
        for v in &self.features {
            w.write_all(&v.to_le_bytes())?;
        }
        for l in &self.labels {
            w.write_all(&l.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_flds<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 32];
        r.read_exact(&mut head)?;
        if &head[0..4] != Self::MAGIC {
            return Err(Error::InvalidInput("not an FLDS file".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != Self::VERSION {
            return Err(Error::InvalidInput(format!("unsupported FLDS version {version}")));
        }
        let word = |i: usize| u64::from_le_bytes(head[i..i + 8].try_into().unwrap()) as usize;
        let (n, d, k) = (word(8), word(16), word(24));
        let mut buf = vec![0u8; n * d * 8];
        r.read_exact(&mut buf)?;
        let features = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let labels = buf.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        Dataset::new(features, labels, d, k)
    }

    pub fn save_flds(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_flds(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_flds(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_flds(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Gaussian blobs: class `c` is centered at `class_sep * e_(c mod d)` with
/// identity covariance. Rows are ordered class-major, then by draw.
pub fn make_blobs(n_per_class: usize, k: usize, d: usize, class_sep: f64, seed: u64) -> Dataset {
    assert!(k >= 1 && d >= 1 && n_per_class >= 1);
    let mut rng = SplitMix64::new(seed);
    let n = n_per_class * k;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        let axis = c % d;
        for _ in 0..n_per_class {
            for j in 0..d {
                let center = if j == axis { class_sep } else { 0.0 };
                features.push(center + rng.standard_normal());
            }
            labels.push(c as u32);
        }
    }
    Dataset { features, labels, dim: d, classes: k }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha: f64 },
    Shards { per_client: usize },
}

impl PartitionScheme {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        match cfg.partition.scheme {
            Scheme::Iid => PartitionScheme::Iid,
            Scheme::Dirichlet => PartitionScheme::Dirichlet { alpha: cfg.partition.dirichlet_alpha },
            Scheme::Shards => PartitionScheme::Shards { per_client: cfg.partition.shards_per_client as usize },
        }
    }
}

/// Disjoint cover of `[0, n)` by one index list per client.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
    pub scheme: PartitionScheme,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn shard(&self, client_id: u32) -> &[usize] {
        &self.clients[client_id as usize]
    }
}

pub fn partition(dataset: &Dataset, m: usize, scheme: PartitionScheme, seed: u64) -> Result<PartitionPlan> {
    let n = dataset.len();
    if m == 0 {
        return Err(Error::InvalidInput("partition needs at least one client".into()));
    }
    if m > n {
        return Err(Error::InvalidInput(format!("{m} clients but only {n} samples")));
    }
    let mut rng = SplitMix64::new(seed);
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); m];
    match scheme {
        PartitionScheme::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            for (pos, idx) in order.into_iter().enumerate() {
                clients[pos % m].push(idx);
            }
        }
        PartitionScheme::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::InvalidInput(format!("dirichlet alpha must be positive, got {alpha}")));
            }
            for class in 0..dataset.classes() {
                let mut members: Vec<usize> = (0..n).filter(|&i| dataset.labels[i] as usize == class).collect();
                if members.is_empty() {
                    continue;
                }
                rng.shuffle(&mut members);
                let props = dirichlet(&mut rng, alpha, m);
                let total = members.len();
                let mut cum = 0.0;
                let mut start = 0;
                for (j, p) in props.iter().enumerate() {
                    cum += p;
                    let end = if j + 1 == m { total } else { ((cum * total as f64).floor() as usize).clamp(start, total) };
                    clients[j].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
        }
        PartitionScheme::Shards { per_client } => {
            let shard_count = m * per_client;
            if per_client == 0 || shard_count > n {
                return Err(Error::InvalidInput(format!("{shard_count} shards need at least that many samples, have {n}")));
            }
            let mut by_label: Vec<usize> = (0..n).collect();
            by_label.sort_by_key(|&i| dataset.labels[i]);
            let base = n / shard_count;
            let extra = n % shard_count;
            let mut shards = Vec::with_capacity(shard_count);
            let mut start = 0;
            for s in 0..shard_count {
                let len = base + usize::from(s < extra);
                shards.push(&by_label[start..start + len]);
                start += len;
            }
            let mut perm: Vec<usize> = (0..shard_count).collect();
            rng.shuffle(&mut perm);
            for (j, client) in clients.iter_mut().enumerate() {
                for &s in &perm[j * per_client..(j + 1) * per_client] {
                    client.extend_from_slice(shards[s]);
                }
            }
        }
    }
    repair_empty(&mut clients);
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(PartitionPlan { clients, scheme, seed })
}

fn dirichlet(rng: &mut SplitMix64, alpha: f64, m: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..m).map(|_| rng.gamma(alpha)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        vec![1.0 / m as f64; m]
    }
}

/// Moves one index at a time from the largest client (lowest id on ties)
/// into each empty client.
fn repair_empty(clients: &mut [Vec<usize>]) {
    while let Some(empty) = clients.iter().position(|c| c.is_empty()) {
        let donor = (0..clients.len())
            .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let idx = clients[donor].pop().expect("donor is non-empty when m <= n");
        clients[empty].push(idx);
    }
}

/// Fraction of a client shard held out as its local test set.
pub const TEST_FRACTION_DENOM: usize = 5;

/// Seeded 80/20 split of a client shard into (train, test) indices.
///
/// The test part gets `floor(n / 5)` rows, so training always keeps at
/// least one row. Both parts are returned in ascending index order.
pub fn client_split(shard: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = shard.to_vec();
    SplitMix64::new(seed).shuffle(&mut order);
    let n_test = shard.len() / TEST_FRACTION_DENOM;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Everything a federation derives from its config: the pooled synthetic
/// dataset and its partition. Every process regenerates it locally.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub pooled: Dataset,
    pub plan: PartitionPlan,
    seed: u64,
}

/// One client's local data.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: Dataset,
    pub test: Dataset,
}

impl FederatedData {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let t = &cfg.task;
        let pooled = make_blobs(
            t.n_per_class as usize,
            t.n_classes as usize,
            t.feature_dim as usize,
            t.class_sep,
            sub_seed(cfg.seed, domain::DATA),
        );
        let plan = partition(
            &pooled,
            cfg.clients as usize,
            PartitionScheme::from_config(cfg),
            sub_seed(cfg.seed, domain::PARTITION),
        )?;
        Ok(Self { pooled, plan, seed: cfg.seed })
    }

    pub fn client(&self, client_id: u32) -> ClientData {
        let split_seed = sub_seed(stream_seed(self.seed, client_id as u64, 0), domain::SPLIT);
        let (train, test) = client_split(self.plan.shard(client_id), split_seed);
        ClientData { train: self.pooled.subset(&train), test: self.pooled.subset(&test) }
    }
}
