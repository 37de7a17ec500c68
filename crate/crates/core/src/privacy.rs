//! Update privacy: norm clipping with the Gaussian mechanism, and secure
//! aggregation with pairwise additive masks over fixed-point residues.
//!
//! A client runs clip -> noise -> encode -> mask. The server only ever sums
//! masked residues; the masks of every selected pair cancel exactly modulo
//! 2^64, leaving `sum(n_k * w_k)` and `sum(n_k)`.

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::seed::{domain, stream_seed, sub_seed, SplitMix64};
use crate::types::{vec_axpy, LocalUpdate, ParameterVector, Payload, ResidueVector};

/// Scales `delta` into the L2 ball of radius `clip`.
pub fn clip(delta: &ParameterVector, clip: f64) -> ParameterVector {
    let norm = delta.l2_norm();
    if norm <= clip || norm == 0.0 {
        return delta.clone();
    }
    delta.scaled(clip / norm)
}

/// Noise scale of the classical Gaussian mechanism:
/// `clip * sqrt(2 ln(1.25 / delta)) / epsilon`.
pub fn gaussian_sigma(clip: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(Error::InvalidInput(format!("clip must be positive, got {clip}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(clip * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Adds `sigma * z_i` with `z_i` drawn by Box–Muller from a SplitMix64
/// stream seeded with `seed`.
pub fn add_noise(delta: &ParameterVector, sigma: f64, seed: u64) -> ParameterVector {
    if sigma == 0.0 {
        return delta.clone();
    }
    let mut rng = SplitMix64::new(seed);
    ParameterVector::from_vec_unchecked(
        delta.as_slice().iter().map(|v| v + sigma * rng.standard_normal()).collect(),
    )
}

/// Rounds `x * scale` half-to-even and embeds it as two's complement.
///
/// The caller keeps every partial sum below 2^63 in magnitude; the config
/// validator enforces a bound on the scale for this.
pub fn fp_encode(x: &ParameterVector, scale: u64) -> ResidueVector {
    let s = scale as f64;
    ResidueVector(x.as_slice().iter().map(|v| encode_scalar(*v, s)).collect())
}

fn encode_scalar(v: f64, scale: f64) -> u64 {
    (v * scale).round_ties_even() as i64 as u64
}

/// Interprets residues as signed and divides by `scale * divisor`.
pub fn fp_decode(r: &ResidueVector, scale: u64, divisor: u64) -> Result<ParameterVector> {
    let denom = scale as f64 * divisor as f64;
    ParameterVector::new(r.0.iter().map(|&v| v as i64 as f64 / denom).collect())
}

/// Symmetric per-pair mask seeds derived from the shared auth token.
#[derive(Debug, Clone)]
pub struct MaskSeedTable {
    token: Vec<u8>,
}

impl MaskSeedTable {
    pub fn new(auth_token: &str) -> Self {
        Self { token: auth_token.as_bytes().to_vec() }
    }

    /// First 8 bytes (little-endian) of `SHA-256(token || lo || hi)` where
    /// `lo`/`hi` are the ordered pair as u32 little-endian.
    pub fn seed(&self, i: u32, j: u32) -> u64 {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        let mut h = Sha256::new();
        h.update(&self.token);
        h.update(lo.to_le_bytes());
        h.update(hi.to_le_bytes());
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("sha256 is 32 bytes"))
    }
}

/// Client `i`'s mask: `+PRG(seed_ij)` for every `j > i`, `-PRG(seed_ij)` for
/// every `j < i`, where the PRG is SplitMix64 seeded with `seed_ij ^ round`.
pub fn pairwise_mask(client: u32, participants: &[u32], round: u32, table: &MaskSeedTable, dim: usize) -> ResidueVector {
    let mut mask = ResidueVector::zeros(dim);
    for &other in participants {
        if other == client {
            continue;
        }
        let mut prg = SplitMix64::new(table.seed(client, other) ^ round as u64);
        if other > client {
            for m in mask.0.iter_mut() {
                *m = m.wrapping_add(prg.next_u64());
            }
        } else {
            for m in mask.0.iter_mut() {
                *m = m.wrapping_sub(prg.next_u64());
            }
        }
    }
    mask
}

/// Unmasks the sum of all selected clients' payloads and returns
/// `sum(n_k * w_k) / sum(n_k)`.
///
/// Every id in `expected` must be present: a missing mask cannot cancel.
pub fn secagg_aggregate(updates: &[LocalUpdate], expected: &[u32], scale: u64) -> Result<ParameterVector> {
    let missing: Vec<u32> = expected
        .iter()
        .copied()
        .filter(|id| !updates.iter().any(|u| u.client_id == *id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::SecaggDropout { missing });
    }
    let mut sum: Option<ResidueVector> = None;
    for u in updates {
        let Payload::Masked(r) = &u.payload else {
            return Err(Error::InvalidInput("secure aggregation received a plain payload".into()));
        };
        match sum.as_mut() {
            None => sum = Some(r.clone()),
            Some(s) => s.wrapping_add_assign(r)?,
        }
    }
    let mut sum = sum.ok_or_else(|| Error::InvalidInput("no masked updates".into()))?;
    let total = sum.0.pop().ok_or_else(|| Error::InvalidInput("empty masked payload".into()))?;
    if total == 0 {
        return Err(Error::InvalidInput("masked sample counts sum to zero".into()));
    }
    fp_decode(&sum, scale, total)
}

/// The client-side privacy pipeline configured for an experiment.
#[derive(Debug, Clone)]
pub struct PrivacyPipeline {
    dp: Option<(f64, f64)>,
    secagg: Option<(u64, MaskSeedTable)>,
    seed: u64,
}

impl PrivacyPipeline {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let dp = if cfg.dp.enabled {
            Some((cfg.dp.clip, gaussian_sigma(cfg.dp.clip, cfg.dp.epsilon, cfg.dp.delta)?))
        } else {
            None
        };
        let secagg = cfg
            .secagg
            .enabled
            .then(|| (cfg.secagg.fixed_point_scale, MaskSeedTable::new(&cfg.comm.auth_token)));
        Ok(Self { dp, secagg, seed: cfg.seed })
    }

    pub fn is_masked(&self) -> bool {
        self.secagg.is_some()
    }

    /// Per-round noise scale, when DP is on.
    pub fn sigma(&self) -> Option<f64> {
        self.dp.map(|(_, s)| s)
    }

    /// Turns a trained local model into the payload actually transmitted.
    pub fn protect(
        &self,
        client_id: u32,
        round: u32,
        global: &ParameterVector,
        local: &ParameterVector,
        sample_count: u64,
        participants: &[u32],
    ) -> Result<Payload> {
        let mut model = local.clone();
        if let Some((c, sigma)) = self.dp {
            let delta = clip(&local.sub(global)?, c);
            let noise_seed = sub_seed(stream_seed(self.seed, client_id as u64, round as u64), domain::NOISE);
            let delta = add_noise(&delta, sigma, noise_seed);
            model = vec_axpy(1.0, &delta, global)?.validate()?;
        }
        let Some((scale, table)) = &self.secagg else {
            return Ok(Payload::Plain(model));
        };
        let mut residues = fp_encode(&model.scaled(sample_count as f64), *scale);
        residues.0.push(sample_count);
        let mask = pairwise_mask(client_id, participants, round, table, residues.dim());
        residues.wrapping_add_assign(&mask)?;
        Ok(Payload::Masked(residues))
    }
}
