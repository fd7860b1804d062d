//! Parameter construction and initialization.

use super::{AceotConfig, ArmaOnlyConfig, ConfigError, MlpConfig, Model, ModelConfig};
use crate::autodiff::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weight matrix.
    fn linear(&mut self, set: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) {
        let bound = (1.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        set.add(
            name,
            Tensor::from_vec(&[fan_in, fan_out], data).expect("sized"),
            true,
        );
    }

    fn bias(&mut self, set: &mut ParamSet, name: &str, dim: usize) {
        set.add(name, Tensor::zeros(&[dim]), false);
    }

    /// N(0, 0.02^2) embedding table.
    fn embedding(&mut self, set: &mut ParamSet, name: &str, rows: usize, dim: usize) {
        let dist = Normal::new(0.0, 0.02).expect("positive sigma");
        let data = (0..rows * dim).map(|_| dist.sample(&mut self.rng)).collect();
        set.add(
            name,
            Tensor::from_vec(&[rows, dim], data).expect("sized"),
            false,
        );
    }

    fn layer_norm(&mut self, set: &mut ParamSet, name: &str, dim: usize) {
        set.add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0), false);
        set.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false);
    }
}

fn arma_params(init: &mut Init, set: &mut ParamSet, prefix: &str, cfg_layers: usize, stacks: usize, width: usize) {
    for layer in 1..=cfg_layers {
        for k in 0..stacks {
            init.linear(set, &format!("{prefix}{layer}.k{k}.w0"), width, width);
            init.linear(set, &format!("{prefix}{layer}.k{k}.w"), width, width);
            init.linear(set, &format!("{prefix}{layer}.k{k}.v"), width, width);
        }
        // Normalization after every other layer (even 1-based index).
        if layer % 2 == 0 {
            init.layer_norm(set, &format!("{prefix}{layer}.ln"), width);
        }
    }
}

impl Model {
    /// Build a model with fresh parameters. `adj_norm` is the (n, n)
    /// normalized adjacency; the MLP baseline carries it but ignores it.
    pub fn new(config: ModelConfig, adj_norm: Tensor, seed: u64) -> Result<Model, ConfigError> {
        config.validate()?;
        assert_eq!(
            adj_norm.shape(),
            &[config.n_buses(), config.n_buses()],
            "adjacency shape must match n_buses"
        );
        let mut set = ParamSet::new();
        let mut init = Init::new(seed);
        match &config {
            ModelConfig::Aceot(c) => build_aceot(&mut init, &mut set, c),
            ModelConfig::ArmaOnly(c) => build_arma_only(&mut init, &mut set, c),
            ModelConfig::Mlp(c) => build_mlp(&mut init, &mut set, c),
        }
        Ok(Model {
            config,
            adj_norm,
            params: set,
        })
    }

    /// Rebuild a model around restored parameters.
    pub fn from_parts(
        config: ModelConfig,
        adj_norm: Tensor,
        params: ParamSet,
    ) -> Result<Model, ConfigError> {
        config.validate()?;
        Ok(Model {
            config,
            adj_norm,
            params,
        })
    }
}

fn build_aceot(init: &mut Init, set: &mut ParamSet, c: &AceotConfig) {
    init.embedding(set, "embed.table", c.n_buses, c.h_c);
    init.linear(set, "input.proj", 2, c.h_c);
    arma_params(init, set, "arma", c.arma_layers, c.stacks, c.h_c);
    init.linear(set, "bridge.w", c.h_c, c.d_model);
    init.bias(set, "bridge.b", c.d_model);
    let dk = c.head_dim();
    for e in 0..c.enc_layers {
        for h in 0..c.heads {
            init.linear(set, &format!("enc{e}.attn.wq{h}"), c.d_model, dk);
            init.linear(set, &format!("enc{e}.attn.wk{h}"), c.d_model, dk);
            init.linear(set, &format!("enc{e}.attn.wv{h}"), c.d_model, dk);
        }
        init.linear(set, &format!("enc{e}.attn.wo"), c.d_model, c.d_model);
        init.layer_norm(set, &format!("enc{e}.ln1"), c.d_model);
        init.linear(set, &format!("enc{e}.ffn.w1"), c.d_model, c.d_ff);
        init.bias(set, &format!("enc{e}.ffn.b1"), c.d_ff);
        init.linear(set, &format!("enc{e}.ffn.w2"), c.d_ff, c.d_model);
        init.bias(set, &format!("enc{e}.ffn.b2"), c.d_model);
        init.layer_norm(set, &format!("enc{e}.ln2"), c.d_model);
    }
    init.linear(set, "head.w", c.d_model, 1);
    init.bias(set, "head.b", 1);
}

fn build_arma_only(init: &mut Init, set: &mut ParamSet, c: &ArmaOnlyConfig) {
    init.linear(set, "input.proj", 2, c.h_c);
    init.bias(set, "input.bias", c.h_c);
    arma_params(init, set, "arma", c.arma_layers, c.stacks, c.h_c);
    init.linear(set, "head.w", c.h_c, 1);
    init.bias(set, "head.b", 1);
}

fn build_mlp(init: &mut Init, set: &mut ParamSet, c: &MlpConfig) {
    let mut width_in = 2;
    for l in 0..c.layers {
        let width_out = if l + 1 == c.layers { 1 } else { c.hidden };
        init.linear(set, &format!("mlp{l}.w"), width_in, width_out);
        init.bias(set, &format!("mlp{l}.b"), width_out);
        width_in = width_out;
    }
}
