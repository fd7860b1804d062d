//! Forward graphs for the three architectures.

use super::{Model, ModelConfig};
use crate::autodiff::{AdError, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// Activation selector for the graph filter recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Identity,
}

impl Act {
    fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Act::Relu => tape.relu(x),
            Act::Identity => x,
        }
    }
}

/// One ARMA graph-filter layer: `stacks` parallel recursions of
/// `iterations` steps, averaged. Each step propagates the running state
/// through the normalized adjacency and re-adds the (dropped-out) skip
/// projection of the layer input.
#[allow(clippy::too_many_arguments)]
pub fn arma_layer(
    tape: &mut Tape,
    x0: Var,
    adj: Var,
    stacks: &[(Var, Var, Var)],
    iterations: usize,
    act: Act,
    dropout: f64,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<Var, AdError> {
    let mut combined: Option<Var> = None;
    for &(w0, w, v) in stacks {
        let skip_base = tape.matmul(x0, v)?;
        let mut h = {
            let xw = tape.matmul(x0, w0)?;
            let prop = tape.matmul(adj, xw)?;
            let skip = tape.dropout(skip_base, dropout, rng, training)?;
            let s = tape.add(prop, skip)?;
            act.apply(tape, s)
        };
        for _ in 2..=iterations {
            let hw = tape.matmul(h, w)?;
            let prop = tape.matmul(adj, hw)?;
            let skip = tape.dropout(skip_base, dropout, rng, training)?;
            let s = tape.add(prop, skip)?;
            h = act.apply(tape, s);
        }
        combined = Some(match combined {
            None => h,
            Some(acc) => tape.add(acc, h)?,
        });
    }
    Ok(tape.scale(combined.expect("at least one stack"), 1.0 / stacks.len() as f64))
}

impl Model {
    fn p(&self, tape: &mut Tape, name: &str) -> Var {
        let idx = self
            .params()
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        tape.param(self.params(), idx)
    }

    /// The filter trunk shared by ACEOT and the ARMA-only baseline.
    #[allow(clippy::too_many_arguments)]
    fn arma_stack(
        &self,
        tape: &mut Tape,
        mut x: Var,
        adj: Var,
        layers: usize,
        stacks: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
        training: bool,
        iterations: usize,
    ) -> Result<Var, AdError> {
        for layer in 1..=layers {
            let stack_params: Vec<(Var, Var, Var)> = (0..stacks)
                .map(|k| {
                    (
                        self.p(tape, &format!("arma{layer}.k{k}.w0")),
                        self.p(tape, &format!("arma{layer}.k{k}.w")),
                        self.p(tape, &format!("arma{layer}.k{k}.v")),
                    )
                })
                .collect();
            x = arma_layer(
                tape,
                x,
                adj,
                &stack_params,
                iterations,
                Act::Relu,
                dropout,
                rng,
                training,
            )?;
            if layer % 2 == 0 {
                let gain = self.p(tape, &format!("arma{layer}.ln.gain"));
                let bias = self.p(tape, &format!("arma{layer}.ln.bias"));
                x = tape.layer_norm(x, gain, bias, 1e-5)?;
            }
        }
        Ok(x)
    }

    /// Multi-head scaled dot-product self-attention with the concat +
    /// output projection, dropout on the attention weights.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn self_attention(
        &self,
        tape: &mut Tape,
        x: Var,
        enc: usize,
        heads: usize,
        d_k: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<Var, AdError> {
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let wq = self.p(tape, &format!("enc{enc}.attn.wq{h}"));
            let wk = self.p(tape, &format!("enc{enc}.attn.wk{h}"));
            let wv = self.p(tape, &format!("enc{enc}.attn.wv{h}"));
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
            let attn = tape.softmax_rows(scaled)?;
            let attn = tape.dropout(attn, dropout, rng, training)?;
            outs.push(tape.matmul(attn, v)?);
        }
        let concat = tape.concat_last(&outs)?;
        let wo = self.p(tape, &format!("enc{enc}.attn.wo"));
        tape.matmul(concat, wo)
    }

    /// Post-norm encoder layer: attention and feed-forward sub-layers,
    /// each wrapped in residual + normalization.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn encoder_layer(
        &self,
        tape: &mut Tape,
        x: Var,
        enc: usize,
        heads: usize,
        d_k: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<Var, AdError> {
        let attn = self.self_attention(tape, x, enc, heads, d_k, dropout, rng, training)?;
        let attn = tape.dropout(attn, dropout, rng, training)?;
        let r1 = tape.add(x, attn)?;
        let g1 = self.p(tape, &format!("enc{enc}.ln1.gain"));
        let b1 = self.p(tape, &format!("enc{enc}.ln1.bias"));
        let x1 = tape.layer_norm(r1, g1, b1, 1e-5)?;

        let w1 = self.p(tape, &format!("enc{enc}.ffn.w1"));
        let bias1 = self.p(tape, &format!("enc{enc}.ffn.b1"));
        let w2 = self.p(tape, &format!("enc{enc}.ffn.w2"));
        let bias2 = self.p(tape, &format!("enc{enc}.ffn.b2"));
        let h = tape.matmul(x1, w1)?;
        let h = tape.add(h, bias1)?;
        let h = tape.relu(h);
        let f = tape.matmul(h, w2)?;
        let f = tape.add(f, bias2)?;
        let f = tape.dropout(f, dropout, rng, training)?;
        let r2 = tape.add(x1, f)?;
        let g2 = self.p(tape, &format!("enc{enc}.ln2.gain"));
        let b2 = self.p(tape, &format!("enc{enc}.ln2.bias"));
        tape.layer_norm(r2, g2, b2, 1e-5)
    }

    /// Everything up to the classification head. Returns the per-node
    /// representation and its width.
    pub fn forward_trunk(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, usize), AdError> {
        let n = self.config.n_buses();
        let shape = features.shape();
        if shape.len() != 3 || shape[1] != n || shape[2] != 2 {
            return Err(AdError::ShapeMismatch(format!(
                "features must be (batch, {n}, 2), got {shape:?}"
            )));
        }
        let x_in = tape.constant(features.clone());
        match &self.config {
            ModelConfig::Aceot(c) => {
                let table = self.p(tape, "embed.table");
                let ids: Vec<usize> = (0..n).collect();
                let pos = tape.embedding_lookup(table, &ids)?;
                let proj = self.p(tape, "input.proj");
                let xp = tape.matmul(x_in, proj)?;
                let x0 = tape.add(xp, pos)?;
                let adj = tape.constant(self.adj_norm.clone());
                let x = self.arma_stack(
                    tape,
                    x0,
                    adj,
                    c.arma_layers,
                    c.stacks,
                    c.dropout,
                    rng,
                    training,
                    c.iterations,
                )?;
                let bw = self.p(tape, "bridge.w");
                let bb = self.p(tape, "bridge.b");
                let xb = tape.matmul(x, bw)?;
                let mut x = tape.add(xb, bb)?;
                for e in 0..c.enc_layers {
                    x = self.encoder_layer(
                        tape,
                        x,
                        e,
                        c.heads,
                        c.head_dim(),
                        c.dropout,
                        rng,
                        training,
                    )?;
                }
                Ok((x, c.d_model))
            }
            ModelConfig::ArmaOnly(c) => {
                let proj = self.p(tape, "input.proj");
                let bias = self.p(tape, "input.bias");
                let xp = tape.matmul(x_in, proj)?;
                let x0 = tape.add(xp, bias)?;
                let adj = tape.constant(self.adj_norm.clone());
                let x = self.arma_stack(
                    tape,
                    x0,
                    adj,
                    c.arma_layers,
                    c.stacks,
                    c.dropout,
                    rng,
                    training,
                    c.iterations,
                )?;
                Ok((x, c.h_c))
            }
            ModelConfig::Mlp(c) => {
                let mut x = x_in;
                let mut dim = 2;
                for l in 0..c.layers.saturating_sub(1) {
                    let w = self.p(tape, &format!("mlp{l}.w"));
                    let b = self.p(tape, &format!("mlp{l}.b"));
                    let h = tape.matmul(x, w)?;
                    let h = tape.add(h, b)?;
                    let h = tape.relu(h);
                    x = tape.dropout(h, c.dropout, rng, training)?;
                    dim = c.hidden;
                }
                Ok((x, dim))
            }
        }
    }

    /// Node logits, shape (batch, n).
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, AdError> {
        let (trunk, _) = self.forward_trunk(tape, features, training, rng)?;
        let (w_name, b_name) = match &self.config {
            ModelConfig::Mlp(c) => (
                format!("mlp{}.w", c.layers - 1),
                format!("mlp{}.b", c.layers - 1),
            ),
            _ => ("head.w".to_string(), "head.b".to_string()),
        };
        let hw = self.p(tape, &w_name);
        let hb = self.p(tape, &b_name);
        let logits3 = tape.matmul(trunk, hw)?;
        let logits3 = tape.add(logits3, hb)?;
        let batch = features.shape()[0];
        tape.reshape(logits3, &[batch, self.config.n_buses()])
    }

    /// Per-node trunk embedding of a single sample, for external
    /// projection tools. Returns (dim, row-major n x dim values).
    pub fn node_embeddings(&self, features: &Tensor) -> Result<(usize, Vec<f64>), AdError> {
        let mut tape = Tape::new();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let (trunk, dim) = self.forward_trunk(&mut tape, features, false, &mut rng)?;
        Ok((dim, tape.value(trunk).data().to_vec()))
    }
}
