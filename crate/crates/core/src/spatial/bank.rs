//! Popularity-partitioned prototype memory: construction, EMA refresh and
//! binary persistence.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, StapError};
use crate::numerics::{Param, Tensor};
use crate::spatial::kmeans::{kmeans, KMeansConfig};
use crate::spatial::routing::RoutingResult;

pub const BANK_MAGIC: &[u8; 7] = b"STAPMB1";

/// `P x C` grid of trainable `d_m`-wide slots with per-slot popularity
/// centroids and a clamped routing temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub partitions: usize,
    pub clusters: usize,
    pub dim: usize,
    /// Shape `[P, C, d_m]`.
    pub slots: Param,
    /// Shape `[P, C]`, label units.
    pub centroids: Tensor,
    /// Shape `[1]`.
    pub tau: Param,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl MemoryBank {
    pub fn new(
        slots: Tensor,
        centroids: Tensor,
        tau: f64,
        tau_min: f64,
        tau_max: f64,
    ) -> Result<Self> {
        if slots.rank() != 3 {
            return Err(StapError::shape("memory slots must be P x C x d_m"));
        }
        let (p, c, d) = (slots.shape()[0], slots.shape()[1], slots.shape()[2]);
        centroids.expect_shape(&[p, c], "popularity centroids")?;
        if !(0.0 < tau_min && tau_min <= tau_max) {
            return Err(StapError::invalid(format!(
                "temperature bounds [{tau_min}, {tau_max}] are invalid"
            )));
        }
        Ok(MemoryBank {
            partitions: p,
            clusters: c,
            dim: d,
            slots: Param::new("bank.slots", slots),
            centroids,
            tau: Param::new("bank.tau", Tensor::scalar(tau.clamp(tau_min, tau_max))),
            tau_min,
            tau_max,
        })
    }

    pub fn slot_count(&self) -> usize {
        self.partitions * self.clusters
    }

    pub fn slot(&self, k: usize) -> &[f64] {
        &self.slots.value.data()[k * self.dim..(k + 1) * self.dim]
    }

    pub fn slot_mut(&mut self, k: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.slots.value.data_mut()[k * d..(k + 1) * d]
    }

    pub fn centroid(&self, k: usize) -> f64 {
        self.centroids.data()[k]
    }

    pub fn temperature(&self) -> f64 {
        self.tau.value.value()
    }

    pub fn set_temperature(&mut self, tau: f64) {
        self.tau.value.data_mut()[0] = tau.clamp(self.tau_min, self.tau_max);
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(BANK_MAGIC)?;
        for v in [self.partitions, self.clusters, self.dim] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in [self.temperature(), self.tau_min, self.tau_max] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.slots.value.data().iter().chain(self.centroids.data()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 7];
        read_exact(r, &mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(StapError::Format("not a memory bank dump".into()));
        }
        let p = read_u64(r)? as usize;
        let c = read_u64(r)? as usize;
        let d = read_u64(r)? as usize;
        if p == 0 || c == 0 || d == 0 || p.saturating_mul(c).saturating_mul(d) > 1 << 32 {
            return Err(StapError::Format(format!(
                "implausible bank header {p}x{c}x{d}"
            )));
        }
        let tau = read_f64(r)?;
        let tau_min = read_f64(r)?;
        let tau_max = read_f64(r)?;
        let slots = read_f64s(r, p * c * d)?;
        let centroids = read_f64s(r, p * c)?;
        MemoryBank::new(
            Tensor::new(vec![p, c, d], slots)?,
            Tensor::new(vec![p, c], centroids)?,
            tau,
            tau_min,
            tau_max,
        )
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| StapError::Format(format!("truncated dump: {e}")))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

/// Splits sample indices into `parts` label quantiles, lowest labels first.
/// Partition sizes differ by at most one.
pub fn quantile_partitions(labels: &[f64], parts: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[a].total_cmp(&labels[b]).then(a.cmp(&b)));
    let base = labels.len() / parts;
    let extra = labels.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankInit {
    pub tau: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub kmeans: KMeansConfig,
}

impl Default for BankInit {
    fn default() -> Self {
        BankInit {
            tau: 1.0,
            tau_min: 0.1,
            tau_max: 5.0,
            kmeans: KMeansConfig::default(),
        }
    }
}

/// Builds a bank from sample embeddings: label-quantile partitions, then
/// k-means within each partition.
pub fn init_bank(
    embeddings: &Tensor,
    labels: &[f64],
    partitions: usize,
    clusters: usize,
    seed: u64,
) -> Result<MemoryBank> {
    init_bank_with(
        embeddings,
        labels,
        partitions,
        clusters,
        seed,
        &BankInit::default(),
    )
}

pub fn init_bank_with(
    embeddings: &Tensor,
    labels: &[f64],
    partitions: usize,
    clusters: usize,
    seed: u64,
    init: &BankInit,
) -> Result<MemoryBank> {
    if embeddings.rank() != 2 || embeddings.rows() != labels.len() {
        return Err(StapError::shape(format!(
            "embeddings {:?} do not match {} labels",
            embeddings.shape(),
            labels.len()
        )));
    }
    if partitions == 0 || clusters == 0 {
        return Err(StapError::invalid(
            "partition and cluster counts must be positive",
        ));
    }
    let n = labels.len();
    if n < partitions * clusters {
        return Err(StapError::invalid(format!(
            "{n} samples cannot fill {partitions}x{clusters} slots"
        )));
    }
    if let Some(i) = labels.iter().position(|v| !v.is_finite()) {
        return Err(StapError::Data(format!("label {i} is not finite")));
    }
    let d = embeddings.cols();
    let mut slots = Vec::with_capacity(partitions * clusters * d);
    let mut centroids = Vec::with_capacity(partitions * clusters);
    for (p, members) in quantile_partitions(labels, partitions)
        .into_iter()
        .enumerate()
    {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(p as u64));
        let points: Vec<&[f64]> = members.iter().map(|&i| embeddings.row(i)).collect();
        let fit = kmeans(&points, clusters, &init.kmeans, &mut rng)?;
        let partition_mean = members.iter().map(|&i| labels[i]).sum::<f64>() / members.len() as f64;
        for (c, center) in fit.centers.iter().enumerate() {
            slots.extend_from_slice(center);
            let assigned: Vec<f64> = members
                .iter()
                .zip(&fit.assignment)
                .filter(|(_, &a)| a == c)
                .map(|(&i, _)| labels[i])
                .collect();
            centroids.push(if assigned.is_empty() {
                partition_mean
            } else {
                assigned.iter().sum::<f64>() / assigned.len() as f64
            });
        }
    }
    MemoryBank::new(
        Tensor::new(vec![partitions, clusters, d], slots)?,
        Tensor::new(vec![partitions, clusters], centroids)?,
        init.tau,
        init.tau_min,
        init.tau_max,
    )
}

/// EMA refresh of routed slots and their popularity centroids toward the
/// gate-weighted mean of the routed projected queries, followed by a clamped
/// gradient step on the temperature.
pub fn update_bank(
    bank: &mut MemoryBank,
    routes: &[RoutingResult],
    labels: &[f64],
    eta: f64,
    tau_lr: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(StapError::invalid(format!("EMA rate {eta} outside [0, 1]")));
    }
    if routes.len() != labels.len() {
        return Err(StapError::shape("one label per routing result is required"));
    }
    let n = bank.slot_count();
    let d = bank.dim;
    let mut mass = vec![0.0; n];
    let mut q_sum = vec![0.0; n * d];
    let mut y_sum = vec![0.0; n];
    for (r, &y) in routes.iter().zip(labels) {
        if r.query_proj.len() != d {
            return Err(StapError::shape(
                "projected query width differs from slot width",
            ));
        }
        for &k in &r.selected_flat {
            let g = r.gate.data()[k];
            mass[k] += g;
            y_sum[k] += g * y;
            for (s, q) in q_sum[k * d..(k + 1) * d].iter_mut().zip(&r.query_proj) {
                *s += g * q;
            }
        }
    }
    for k in 0..n {
        if mass[k] <= 0.0 {
            continue;
        }
        let inv = 1.0 / mass[k];
        let slot = bank.slot_mut(k);
        for (m, s) in slot.iter_mut().zip(&q_sum[k * d..(k + 1) * d]) {
            *m = (1.0 - eta) * *m + eta * s * inv;
        }
        let mu = &mut bank.centroids.data_mut()[k];
        *mu = (1.0 - eta) * *mu + eta * y_sum[k] * inv;
    }
    let proposed = bank.temperature() - tau_lr * bank.tau.grad.value();
    bank.set_temperature(proposed);
    Ok(())
}
