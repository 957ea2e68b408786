//! Expert routing from frozen seed-model representations.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{PackedBatch, TinyTransformer};

/// One routing vector per example, or one per token position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    #[default]
    Instance,
    Token,
}

impl RoutingMode {
    pub fn name(self) -> &'static str {
        match self {
            RoutingMode::Instance => "instance",
            RoutingMode::Token => "token",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(RoutingMode::Instance),
            "token" => Ok(RoutingMode::Token),
            other => Err(Error::Config(format!("unknown routing mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    /// Hidden width; the seed model width when unset.
    pub hidden: Option<usize>,
    pub mode: RoutingMode,
    /// Subtract the mean training embedding from router inputs.
    pub center_inputs: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            hidden: None,
            mode: RoutingMode::Instance,
            center_inputs: true,
        }
    }
}

/// `softmax(W_out · tanh(W_hidden · (e − μ)))`.
///
/// The output layer starts at zero so every expert is weighted equally. `μ` is a
/// fixed input offset, zero unless set from training embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterNet {
    pub w_hidden: Tensor,
    pub w_out: Tensor,
    pub input_mean: Vec<f64>,
    pub mode: RoutingMode,
}

impl RouterNet {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        experts: usize,
        mode: RoutingMode,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || experts == 0 {
            return Err(Error::Config("router dimensions must be positive".into()));
        }
        let normal = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("positive std");
        let w_hidden = Tensor::matrix(
            hidden,
            input_dim,
            (0..hidden * input_dim).map(|_| normal.sample(rng)).collect(),
        )?;
        Ok(RouterNet {
            w_hidden,
            w_out: Tensor::zeros(&[experts, hidden]),
            input_mean: vec![0.0; input_dim],
            mode,
        })
    }

    pub fn experts(&self) -> usize {
        self.w_out.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_hidden.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hidden.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w_hidden.numel() + self.w_out.numel()
    }

    /// Sets the input offset to the mean row of `inputs`.
    pub fn center_on(&mut self, inputs: &Tensor) -> Result<()> {
        let (n, d) = inputs.dims2()?;
        if d != self.input_dim() || n == 0 {
            return Err(Error::Dimension {
                op: "center_on",
                lhs: inputs.shape().to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(inputs.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        self.input_mean = mean;
        Ok(())
    }

    /// Router inputs with the offset removed.
    pub fn shifted(&self, inputs: &Tensor) -> Result<Tensor> {
        let d = self.input_dim();
        if inputs.dims2()?.1 != d {
            return Err(Error::Dimension {
                op: "route",
                lhs: inputs.shape().to_vec(),
                rhs: vec![d],
            });
        }
        let mut out = inputs.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v -= self.input_mean[i % d];
        }
        Ok(out)
    }

    /// Routing vectors for each row of `inputs` (`B×d` in, `B×M` out).
    pub fn route_rows(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let e = tape.constant(self.shifted(inputs)?);
        let a = vars.route(&mut tape, e)?;
        Ok(tape.value(a).clone())
    }

    pub fn route(&self, input: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::matrix(1, input.len(), input.to_vec())?;
        Ok(self.route_rows(&t)?.into_data())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> RouterVars {
        RouterVars {
            w_hidden: tape.leaf(self.w_hidden.clone(), trainable),
            w_out: tape.leaf(self.w_out.clone(), trainable),
        }
    }
}

/// Router weights placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct RouterVars {
    pub w_hidden: Var,
    pub w_out: Var,
}

impl RouterVars {
    pub fn route(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let pre = tape.matmul_t(inputs, self.w_hidden)?;
        let h = tape.tanh(pre);
        let logits = tape.matmul_t(h, self.w_out)?;
        if !tape.value(logits).all_finite() {
            return Err(Error::Numeric("router produced non-finite logits".into()));
        }
        tape.softmax(logits)
    }
}

/// Router inputs for a packed batch, taken from the frozen seed model.
///
/// Instance routing uses the final hidden state at each prompt's last token
/// (`B×d`); token routing uses every row's hidden state (`N×d`).
pub fn routing_inputs(seed: &TinyTransformer, mode: RoutingMode, batch: &PackedBatch) -> Result<Tensor> {
    let hidden = seed.hidden_states(batch)?;
    match mode {
        RoutingMode::Token => Ok(hidden),
        RoutingMode::Instance => {
            let rows: Vec<Vec<f64>> = batch
                .prompt_end_rows()
                .iter()
                .map(|&r| hidden.row(r).to_vec())
                .collect();
            Tensor::from_rows(&rows)
        }
    }
}

/// Instance embedding of a single prompt.
pub fn instance_embedding(seed: &TinyTransformer, prompt: &[usize]) -> Result<Vec<f64>> {
    let batch = PackedBatch::for_inference(&[prompt.to_vec()], &[prompt.len()])?;
    Ok(routing_inputs(seed, RoutingMode::Instance, &batch)?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::model::TinyTransformerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_layer_routes_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = RouterNet::new(8, 8, 4, RoutingMode::Instance, &mut rng).unwrap();
        let e: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        assert_eq!(r.route(&e).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn routes_lie_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut r = RouterNet::new(6, 5, 3, RoutingMode::Token, &mut rng).unwrap();
        r.w_out = Tensor::matrix(3, 5, (0..15).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let e = Tensor::matrix(4, 6, (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let a = r.route_rows(&e).unwrap();
        assert_eq!(a.shape(), &[4, 3]);
        for i in 0..4 {
            assert!(a.row(i).iter().all(|&v| v > 0.0));
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn centering_removes_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = RouterNet::new(2, 3, 2, RoutingMode::Instance, &mut rng).unwrap();
        let e = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        r.center_on(&e).unwrap();
        assert_eq!(r.input_mean, vec![2.0, 4.0]);
        assert_eq!(r.shifted(&e).unwrap().data(), &[-1.0, -2.0, 1.0, 2.0]);
        r.w_out = Tensor::full(&[2, 3], 0.5);
        let a = r.route(&[2.0, 4.0]).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
        assert!(r.center_on(&Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = RouterNet::new(2, 2, 2, RoutingMode::Instance, &mut rng).unwrap();
        r.w_out = Tensor::full(&[2, 2], f64::NAN);
        assert!(matches!(r.route(&[1.0, 1.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn router_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = RouterNet::new(4, 3, 3, RoutingMode::Instance, &mut rng).unwrap();
        let e = Tensor::matrix(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let weights = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7]).unwrap();
        let mut params: Vec<f64> = base.w_hidden.data().to_vec();
        params.extend((0..9).map(|_| rng.random_range(-1.0..1.0)));
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let vars = RouterVars {
                w_hidden: tape.param(Tensor::matrix(3, 4, p[..12].to_vec())?),
                w_out: tape.param(Tensor::matrix(3, 3, p[12..].to_vec())?),
            };
            let x = tape.constant(e.clone());
            let a = vars.route(&mut tape, x)?;
            let w = tape.constant(weights.clone());
            let s = tape.mul(a, w)?;
            let loss = tape.sum(s);
            tape.backward(loss)?;
            let mut g = tape.grad(vars.w_hidden).unwrap().to_vec();
            g.extend_from_slice(tape.grad(vars.w_out).unwrap());
            Ok((tape.value(loss).item(), g))
        };
        assert!(finite_difference_check(f, &params, 1e-6, None).unwrap() < 1e-5);
    }

    #[test]
    fn instance_inputs_match_prompt_only_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = TinyTransformerConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 16,
            vocab: 20,
            max_seq: 16,
        };
        let seed = TinyTransformer::init(cfg, &mut rng).unwrap();
        let seqs = vec![vec![1, 4, 5, 6, 9], vec![1, 7, 8]];
        let batch = PackedBatch::for_inference(&seqs, &[3, 2]).unwrap();
        let inst = routing_inputs(&seed, RoutingMode::Instance, &batch).unwrap();
        let direct = instance_embedding(&seed, &[1, 4, 5]).unwrap();
        assert!(inst.row(0).iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-12));
        let tok = routing_inputs(&seed, RoutingMode::Token, &batch).unwrap();
        assert_eq!(tok.rows(), 8);
    }
}
