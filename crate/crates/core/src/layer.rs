//! Sparse interpolated expert layers.
//!
//! A wrapped weight keeps its frozen pre-trained value and adds one shared
//! trainable delta whose input units (columns) are gated per expert. Because
//! every expert mask gates inputs, the soft mixture collapses to one effective
//! gate `g = Σ α_i z̄_i`, and the layer runs as `W_pre x + W_δ (g ⊙ x)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gates::{GateConstants, GateGroup};
use crate::model::{LayerId, LayerKind, TinyTransformerConfig};

/// How freshly attached gates are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateInit {
    pub target_active_prob: f64,
    pub noise_std: f64,
    pub constants: GateConstants,
}

impl Default for GateInit {
    fn default() -> Self {
        GateInit {
            target_active_prob: 0.95,
            noise_std: 0.01,
            constants: GateConstants::default(),
        }
    }
}

/// Checks that `alphas` is a length-`m` point on the probability simplex.
pub fn validate_alphas(alphas: &[f64], m: usize) -> Result<()> {
    if alphas.len() != m {
        return Err(Error::Contract(format!(
            "expected {m} expert activations, got {}",
            alphas.len()
        )));
    }
    let sum: f64 = alphas.iter().sum();
    if alphas.iter().any(|a| !(*a >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "activations {alphas:?} are not on the simplex"
        )));
    }
    Ok(())
}

fn effective_gate(gates: &[GateGroup], alphas: &[f64]) -> Result<Vec<f64>> {
    validate_alphas(alphas, gates.len())?;
    let x = gates.first().map_or(0, GateGroup::len);
    let mut g = vec![0.0; x];
    for (gate, &a) in gates.iter().zip(alphas) {
        for (gj, z) in g.iter_mut().zip(gate.median()) {
            *gj += a * z;
        }
    }
    Ok(g)
}

fn init_gates<R: Rng + ?Sized>(len: usize, experts: usize, init: &GateInit, rng: &mut R) -> Result<Vec<GateGroup>> {
    if experts == 0 {
        return Err(Error::Config("at least one expert is required".into()));
    }
    (0..experts)
        .map(|_| GateGroup::init(len, init.target_active_prob, init.noise_std, init.constants, rng))
        .collect()
}

/// A `Y×X` weight upcycled into `M` column-gated experts sharing one delta.
#[derive(Debug, Clone, PartialEq)]
pub struct SimoeLinear {
    pub layer_id: LayerId,
    pub theta_pre: Tensor,
    pub theta_delta: Tensor,
    pub gates: Vec<GateGroup>,
}

impl SimoeLinear {
    pub fn new<R: Rng + ?Sized>(
        layer_id: LayerId,
        theta_pre: Tensor,
        experts: usize,
        init: &GateInit,
        rng: &mut R,
    ) -> Result<Self> {
        let (_, x) = match theta_pre.shape() {
            [y, x] => (*y, *x),
            s => return Err(Error::Contract(format!("{layer_id}: expected a matrix, got {s:?}"))),
        };
        let gates = init_gates(x, experts, init, rng)?;
        Ok(SimoeLinear {
            layer_id,
            theta_delta: Tensor::zeros(theta_pre.shape()),
            theta_pre,
            gates,
        })
    }

    pub fn experts(&self) -> usize {
        self.gates.len()
    }

    pub fn in_dim(&self) -> usize {
        self.theta_pre.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.theta_pre.rows()
    }

    pub fn median_gates(&self) -> Vec<Vec<f64>> {
        self.gates.iter().map(GateGroup::median).collect()
    }

    /// `Σ α_i z̄_i` over input units.
    pub fn effective_gate(&self, alphas: &[f64]) -> Result<Vec<f64>> {
        effective_gate(&self.gates, alphas)
    }

    /// Factored forward: `W_pre x + W_δ (g ⊙ x)`.
    pub fn forward(&self, x: &[f64], alphas: &[f64]) -> Result<Vec<f64>> {
        let g = self.effective_gate(alphas)?;
        let mut y = self.theta_pre.matvec(x)?;
        let gx: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a * b).collect();
        for (yi, d) in y.iter_mut().zip(self.theta_delta.matvec(&gx)?) {
            *yi += d;
        }
        Ok(y)
    }

    /// Explicit merged weight `W_pre + Σ α_i (W_δ with column j scaled by z̄_ij)`.
    pub fn merged_weights(&self, alphas: &[f64]) -> Result<Tensor> {
        validate_alphas(alphas, self.experts())?;
        let (y, x) = (self.out_dim(), self.in_dim());
        let mut w = self.theta_pre.clone();
        for (gate, &a) in self.gates.iter().zip(alphas) {
            let z = gate.median();
            let data = w.data_mut();
            for r in 0..y {
                for c in 0..x {
                    data[r * x + c] += a * z[c] * self.theta_delta.get2(r, c);
                }
            }
        }
        Ok(w)
    }

    /// Drops every column whose gate is exactly zero in all experts.
    pub fn prune(&self) -> PrunedLayer {
        let medians = self.median_gates();
        let kept = kept_units(&medians, self.in_dim());
        let y = self.out_dim();
        let mut delta = Vec::with_capacity(y * kept.len());
        for r in 0..y {
            delta.extend(kept.iter().map(|&c| self.theta_delta.get2(r, c)));
        }
        PrunedLayer {
            layer_id: self.layer_id,
            theta_pre: self.theta_pre.clone(),
            delta: Tensor::matrix(y, kept.len(), delta).expect("kept columns"),
            gate_values: restrict(&medians, &kept),
            kept,
            vector: false,
        }
    }
}

/// A gain vector upcycled elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SimoeVector {
    pub layer_id: LayerId,
    pub theta_pre: Vec<f64>,
    pub theta_delta: Vec<f64>,
    pub gates: Vec<GateGroup>,
}

impl SimoeVector {
    pub fn new<R: Rng + ?Sized>(
        layer_id: LayerId,
        theta_pre: Vec<f64>,
        experts: usize,
        init: &GateInit,
        rng: &mut R,
    ) -> Result<Self> {
        let gates = init_gates(theta_pre.len(), experts, init, rng)?;
        Ok(SimoeVector {
            layer_id,
            theta_delta: vec![0.0; theta_pre.len()],
            theta_pre,
            gates,
        })
    }

    pub fn experts(&self) -> usize {
        self.gates.len()
    }

    pub fn median_gates(&self) -> Vec<Vec<f64>> {
        self.gates.iter().map(GateGroup::median).collect()
    }

    pub fn effective_gate(&self, alphas: &[f64]) -> Result<Vec<f64>> {
        effective_gate(&self.gates, alphas)
    }

    /// `θ_pre + θ_δ ⊙ g`.
    pub fn effective_value(&self, alphas: &[f64]) -> Result<Vec<f64>> {
        let g = self.effective_gate(alphas)?;
        Ok(self
            .theta_pre
            .iter()
            .zip(&self.theta_delta)
            .zip(&g)
            .map(|((p, d), g)| p + d * g)
            .collect())
    }

    pub fn prune(&self) -> PrunedLayer {
        let medians = self.median_gates();
        let kept = kept_units(&medians, self.theta_pre.len());
        PrunedLayer {
            layer_id: self.layer_id,
            theta_pre: Tensor::vector(self.theta_pre.clone()),
            delta: Tensor::vector(kept.iter().map(|&j| self.theta_delta[j]).collect()),
            gate_values: restrict(&medians, &kept),
            kept,
            vector: true,
        }
    }
}

fn kept_units(medians: &[Vec<f64>], len: usize) -> Vec<usize> {
    (0..len).filter(|&j| medians.iter().any(|z| z[j] != 0.0)).collect()
}

fn restrict(medians: &[Vec<f64>], kept: &[usize]) -> Vec<Vec<f64>> {
    medians.iter().map(|z| kept.iter().map(|&j| z[j]).collect()).collect()
}

/// Either kind of upcycled parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum SimoeParam {
    Linear(SimoeLinear),
    Vector(SimoeVector),
}

impl SimoeParam {
    pub fn layer_id(&self) -> LayerId {
        match self {
            SimoeParam::Linear(l) => l.layer_id,
            SimoeParam::Vector(v) => v.layer_id,
        }
    }

    pub fn gates(&self) -> &[GateGroup] {
        match self {
            SimoeParam::Linear(l) => &l.gates,
            SimoeParam::Vector(v) => &v.gates,
        }
    }

    pub fn gates_mut(&mut self) -> &mut [GateGroup] {
        match self {
            SimoeParam::Linear(l) => &mut l.gates,
            SimoeParam::Vector(v) => &mut v.gates,
        }
    }

    pub fn experts(&self) -> usize {
        self.gates().len()
    }

    /// Number of gated units (columns, or vector entries).
    pub fn gate_len(&self) -> usize {
        self.gates().first().map_or(0, GateGroup::len)
    }

    /// Delta parameters controlled by one gate.
    pub fn params_per_gate(&self) -> usize {
        match self {
            SimoeParam::Linear(l) => l.out_dim(),
            SimoeParam::Vector(_) => 1,
        }
    }

    pub fn delta_len(&self) -> usize {
        self.gate_len() * self.params_per_gate()
    }

    pub fn delta(&self) -> &[f64] {
        match self {
            SimoeParam::Linear(l) => l.theta_delta.data(),
            SimoeParam::Vector(v) => &v.theta_delta,
        }
    }

    pub fn delta_mut(&mut self) -> &mut [f64] {
        match self {
            SimoeParam::Linear(l) => l.theta_delta.data_mut(),
            SimoeParam::Vector(v) => &mut v.theta_delta,
        }
    }

    pub fn theta_pre(&self) -> Tensor {
        match self {
            SimoeParam::Linear(l) => l.theta_pre.clone(),
            SimoeParam::Vector(v) => Tensor::vector(v.theta_pre.clone()),
        }
    }

    pub fn delta_tensor(&self) -> Tensor {
        match self {
            SimoeParam::Linear(l) => l.theta_delta.clone(),
            SimoeParam::Vector(v) => Tensor::vector(v.theta_delta.clone()),
        }
    }

    pub fn median_gates(&self) -> Vec<Vec<f64>> {
        self.gates().iter().map(GateGroup::median).collect()
    }

    /// Gate latents stacked as an `M×X` tensor.
    pub fn log_phi_tensor(&self) -> Tensor {
        let data = self.gates().iter().flat_map(|g| g.log_phi.iter().copied()).collect();
        Tensor::matrix(self.experts(), self.gate_len(), data).expect("equal gate lengths")
    }

    pub fn prune(&self) -> PrunedLayer {
        match self {
            SimoeParam::Linear(l) => l.prune(),
            SimoeParam::Vector(v) => v.prune(),
        }
    }
}

/// A wrapped layer with never-active columns removed.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedLayer {
    pub layer_id: LayerId,
    pub theta_pre: Tensor,
    /// `Y×K` compact delta for matrices, length `K` for vectors.
    pub delta: Tensor,
    pub kept: Vec<usize>,
    /// Median gate values of every expert on the kept units (`M×K`).
    pub gate_values: Vec<Vec<f64>>,
    pub vector: bool,
}

impl PrunedLayer {
    pub fn experts(&self) -> usize {
        self.gate_values.len()
    }

    /// Per-expert binary masks over the kept units.
    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.gate_values
            .iter()
            .map(|z| z.iter().map(|&v| v != 0.0).collect())
            .collect()
    }

    pub fn effective_gate(&self, alphas: &[f64]) -> Result<Vec<f64>> {
        validate_alphas(alphas, self.experts())?;
        let mut g = vec![0.0; self.kept.len()];
        for (z, &a) in self.gate_values.iter().zip(alphas) {
            for (gj, zj) in g.iter_mut().zip(z) {
                *gj += a * zj;
            }
        }
        Ok(g)
    }

    pub fn forward(&self, x: &[f64], alphas: &[f64]) -> Result<Vec<f64>> {
        if self.vector {
            return Err(Error::Contract(format!("{} is a gain vector", self.layer_id)));
        }
        let g = self.effective_gate(alphas)?;
        let mut y = self.theta_pre.matvec(x)?;
        if self.kept.is_empty() {
            return Ok(y);
        }
        let gx: Vec<f64> = self.kept.iter().zip(&g).map(|(&j, gj)| x[j] * gj).collect();
        for (yi, d) in y.iter_mut().zip(self.delta.matvec(&gx)?) {
            *yi += d;
        }
        Ok(y)
    }

    /// Stored parameters: compact delta plus one gate value per expert and kept unit.
    pub fn stored_params(&self) -> usize {
        self.delta.numel() + self.experts() * self.kept.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachMode {
    AllLinear,
    FfnOnly,
    Explicit(Vec<String>),
}

/// Which seed tensors get wrapped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttachmentPolicy {
    pub mode: AttachMode,
    pub include_lm_head: bool,
    pub include_embedding: bool,
}

impl Default for AttachmentPolicy {
    fn default() -> Self {
        AttachmentPolicy {
            mode: AttachMode::AllLinear,
            include_lm_head: true,
            include_embedding: false,
        }
    }
}

impl AttachmentPolicy {
    pub fn ffn_only() -> Self {
        AttachmentPolicy {
            mode: AttachMode::FfnOnly,
            ..Default::default()
        }
    }

    /// Parses the command-line form: `all`, `ffn`, or a comma-separated list of layer ids.
    pub fn parse(spec: &str) -> Result<Self> {
        Ok(match spec {
            "all" | "all_linear" => AttachmentPolicy::default(),
            "ffn" | "ffn_only" => AttachmentPolicy::ffn_only(),
            list => AttachmentPolicy {
                mode: AttachMode::Explicit(list.split(',').map(|s| s.trim().to_string()).collect()),
                ..Default::default()
            },
        })
    }

    /// Selected layer ids in architecture order.
    pub fn resolve(&self, cfg: &TinyTransformerConfig) -> Result<Vec<LayerId>> {
        let ids = cfg.layer_ids();
        match &self.mode {
            AttachMode::AllLinear => Ok(ids
                .into_iter()
                .filter(|id| match id.kind {
                    LayerKind::PosEmb => false,
                    LayerKind::TokEmb => self.include_embedding,
                    LayerKind::LmHead => self.include_lm_head,
                    _ => true,
                })
                .collect()),
            AttachMode::FfnOnly => Ok(ids.into_iter().filter(|id| id.kind.is_ffn()).collect()),
            AttachMode::Explicit(names) => {
                let mut chosen = Vec::new();
                for n in names {
                    let id = LayerId::parse(n)
                        .filter(|id| cfg.index_of(*id).is_some())
                        .ok_or_else(|| Error::Config(format!("unknown layer id {n:?}")))?;
                    if id.kind == LayerKind::PosEmb {
                        return Err(Error::Config("the position table cannot be upcycled".into()));
                    }
                    chosen.push(id);
                }
                Ok(ids.into_iter().filter(|id| chosen.contains(id)).collect())
            }
        }
    }
}
