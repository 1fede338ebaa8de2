//! Analytical per-layer energy model.
//!
//! Per conv/linear layer k:
//!
//! ```text
//! flops_k    = C_in · Ω² · C_out · S_out          (linear: C_in · C_out)
//! E_flops_k  = flops_k · A
//! mem_k      = (params_k · 3 + S_out · C_out · 2) · bytes_per_value
//! E_access_k = (mem_k / 2^20) · B
//! E_k        = E_flops_k + E_access_k
//! P_k        = E_k / Σ_{eligible} E_k
//! ```
//!
//! The ×3 covers parameters plus their gradients and momentum buffers, the
//! ×2 covers activations and their errors. Activations are charged at the
//! producing layer only; pooling, activation and reshaping layers cost zero.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::archspec::{infer_shapes, param_count, LayerKind, LayerSpec, NetworkArch};
use crate::error::{Error, Result};

pub const BYTES_PER_MB: f64 = (1u64 << 20) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConstants {
    /// Joules per FLOP.
    pub a_per_flop: f64,
    /// Joules per MB (2^20 bytes) of DRAM traffic.
    pub b_per_mb: f64,
    pub bytes_per_value: u64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        EnergyConstants {
            a_per_flop: 2.3e-12,
            b_per_mb: 640e-12,
            bytes_per_value: 4,
        }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a_per_flop > 0.0
            && self.a_per_flop.is_finite()
            && self.b_per_mb > 0.0
            && self.b_per_mb.is_finite()
            && self.bytes_per_value > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "energy constants must be strictly positive: {self:?}"
            )))
        }
    }

    /// Both per-unit energies multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        EnergyConstants {
            a_per_flop: self.a_per_flop * c,
            b_per_mb: self.b_per_mb * c,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerEnergy {
    pub layer_id: usize,
    pub kind: LayerKind,
    pub flops: u64,
    pub e_flops: f64,
    pub mem_bytes: u64,
    pub e_access: f64,
    pub e_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub per_layer: Vec<LayerEnergy>,
    pub network_total: f64,
}

impl EnergyReport {
    pub fn layer(&self, id: usize) -> Option<&LayerEnergy> {
        self.per_layer.iter().find(|l| l.layer_id == id)
    }

    pub fn total_flops(&self) -> u64 {
        self.per_layer.iter().map(|l| l.flops).sum()
    }
}

fn s_out(layer: &LayerSpec) -> Result<u64> {
    layer
        .s_out()
        .map(|s| s as u64)
        .ok_or(Error::ShapesNotInferred(layer.id))
}

pub fn layer_flops(layer: &LayerSpec) -> Result<u64> {
    let (c_in, c_out, k) = (
        layer.c_in as u64,
        layer.c_out as u64,
        layer.kernel_omega as u64,
    );
    match layer.kind {
        LayerKind::Conv => Ok(c_in * k * k * c_out * s_out(layer)?),
        LayerKind::Linear => {
            s_out(layer)?;
            Ok(c_in * c_out)
        }
        _ => Ok(0),
    }
}

pub fn flops_energy(flops: u64, constants: &EnergyConstants) -> f64 {
    flops as f64 * constants.a_per_flop
}

pub fn layer_mem_bytes(layer: &LayerSpec, constants: &EnergyConstants) -> Result<u64> {
    if !layer.kind.is_parametric() {
        return Ok(0);
    }
    Ok(memory_footprint(
        param_count(layer),
        s_out(layer)?,
        layer.c_out as u64,
        constants.bytes_per_value,
    ))
}

/// `(params · 3 + s_out · c_out · 2) · bytes_per_value`
pub fn memory_footprint(params: u64, s_out: u64, c_out: u64, bytes_per_value: u64) -> u64 {
    (params * 3 + s_out * c_out * 2) * bytes_per_value
}

pub fn access_energy(mem_bytes: u64, constants: &EnergyConstants) -> f64 {
    mem_bytes as f64 / BYTES_PER_MB * constants.b_per_mb
}

pub fn layer_energy(layer: &LayerSpec, constants: &EnergyConstants) -> Result<LayerEnergy> {
    let flops = layer_flops(layer)?;
    let mem_bytes = layer_mem_bytes(layer, constants)?;
    let e_flops = flops_energy(flops, constants);
    let e_access = access_energy(mem_bytes, constants);
    Ok(LayerEnergy {
        layer_id: layer.id,
        kind: layer.kind,
        flops,
        e_flops,
        mem_bytes,
        e_access,
        e_total: e_flops + e_access,
    })
}

/// Per-layer and total energy of one forward/backward footprint of `arch`.
/// Shapes are inferred if they are not already.
pub fn network_energy(arch: &NetworkArch, constants: &EnergyConstants) -> Result<EnergyReport> {
    constants.validate()?;
    let inferred;
    let arch = if arch.is_inferred() {
        arch
    } else {
        inferred = infer_shapes(arch)?;
        &inferred
    };
    let per_layer = arch
        .layers
        .iter()
        .map(|l| layer_energy(l, constants))
        .collect::<Result<Vec<_>>>()?;
    let network_total = per_layer.iter().map(|l| l.e_total).sum();
    Ok(EnergyReport {
        per_layer,
        network_total,
    })
}

/// Energy-proportional selection distribution over `eligible` layers, in
/// ascending layer-id order.
pub fn selection_probs(
    arch: &NetworkArch,
    constants: &EnergyConstants,
    eligible: &BTreeSet<usize>,
) -> Result<Vec<(usize, f64)>> {
    let report = network_energy(arch, constants)?;
    selection_probs_from_report(&report, eligible)
}

pub fn selection_probs_from_report(
    report: &EnergyReport,
    eligible: &BTreeSet<usize>,
) -> Result<Vec<(usize, f64)>> {
    if eligible.is_empty() {
        return Err(Error::Energy("eligible layer set is empty".into()));
    }
    let energies = eligible
        .iter()
        .map(|&id| {
            report
                .layer(id)
                .map(|l| (id, l.e_total))
                .ok_or_else(|| Error::Energy(format!("eligible layer {id} does not exist")))
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = energies.iter().map(|(_, e)| e).sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Energy(
            "eligible layers have zero total energy".into(),
        ));
    }
    Ok(energies
        .into_iter()
        .map(|(id, e)| (id, e / total))
        .collect())
}
