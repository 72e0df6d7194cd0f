//! Shared encoder and auxiliary reconstruction decoder.
//!
//! Encoder: 4 pairs of conv-BN-ReLU blocks with 2x2 average pooling after
//! each pair, then a 1x1 class convolution (linear) down to one channel per
//! category. Decoder mirrors it with nearest-neighbor upsampling in front
//! of each pair and a 1x1 reverse convolution back to a single channel.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{AutogradError, BnMode, BnStats, Graph, Tensor, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("encoder input time axis {t} is not a multiple of 16")]
    TimeNotPadded { t: usize },
    #[error("encoder input mel axis {got} does not match configured {want}")]
    MelMismatch { got: usize, want: usize },
    #[error("{0}")]
    BadInput(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub categories: usize,
    pub mel_bins: usize,
    pub channels: [usize; 4],
    pub profile: String,
}

impl ModelConfig {
    pub fn paper(categories: usize) -> Self {
        Self { categories, mel_bins: 64, channels: [64, 128, 256, 512], profile: "paper".into() }
    }

    pub fn desk(categories: usize) -> Self {
        Self { categories, mel_bins: 64, channels: [16, 32, 64, 128], profile: "desk".into() }
    }

    /// Small enough for finite-difference checks.
    pub fn tiny(categories: usize, mel_bins: usize) -> Self {
        Self { categories, mel_bins, channels: [2, 2, 2, 2], profile: "tiny".into() }
    }

    pub fn by_name(profile: &str, categories: usize) -> Option<Self> {
        match profile {
            "paper" => Some(Self::paper(categories)),
            "desk" => Some(Self::desk(categories)),
            _ => None,
        }
    }
}

/// Ordered name -> tensor map. Order is the construction order and defines
/// the optimizer and checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.values[self.index_of(name)]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter_mut())
    }

    pub fn value_at(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        let idx = self.index_of(name);
        assert_eq!(self.values[idx].shape(), value.shape(), "shape change for {name}");
        self.values[idx] = value;
    }

    /// Registers every parameter as a graph leaf, in store order.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        BoundParams { ids: self.values.iter().map(|t| g.leaf(t, requires_grad)).collect() }
    }
}

/// Graph ids for one binding of a [`ParamStore`], aligned with store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub ids: Vec<TensorId>,
}

impl BoundParams {
    pub fn from_ids(ids: &[TensorId]) -> Self {
        Self { ids: ids.to_vec() }
    }

    pub fn id(&self, store: &ParamStore, name: &str) -> TensorId {
        self.ids[store.index_of(name)]
    }
}

pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::new(
        shape,
        (0..crate::autograd::numel(shape)).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("shape/data agree")
}

#[derive(Debug, Clone)]
pub struct SedModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    bn: Vec<(String, BnStats)>,
}

impl SedModel {
    /// Kaiming-uniform fan-in init for conv weights, zero biases,
    /// BN gamma 1 / beta 0. Fully determined by the seed.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bn = Vec::new();

        let add_conv = |params: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng| {
            let fan_in = cin * k * k;
            params.insert(format!("{name}.weight"), kaiming_uniform(&[cout, cin, k, k], fan_in, rng));
            params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        };
        let add_bn = |params: &mut ParamStore, bn: &mut Vec<(String, BnStats)>, name: &str, c: usize| {
            params.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
            params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
            bn.push((name.to_string(), BnStats::new(c)));
        };

        let mut cin = 1;
        for (b, &ch) in config.channels.iter().enumerate() {
            let blk = format!("enc.block{}", b + 1);
            add_conv(&mut params, &format!("{blk}.conv1"), cin, ch, 3, &mut rng);
            add_bn(&mut params, &mut bn, &format!("{blk}.bn1"), ch);
            add_conv(&mut params, &format!("{blk}.conv2"), ch, ch, 3, &mut rng);
            add_bn(&mut params, &mut bn, &format!("{blk}.bn2"), ch);
            cin = ch;
        }
        add_conv(&mut params, "enc.class", cin, config.categories, 1, &mut rng);

        let mut cin = config.categories;
        for (b, &ch) in config.channels.iter().rev().enumerate() {
            let blk = format!("dec.block{}", b + 1);
            add_conv(&mut params, &format!("{blk}.conv1"), cin, ch, 3, &mut rng);
            add_bn(&mut params, &mut bn, &format!("{blk}.bn1"), ch);
            add_conv(&mut params, &format!("{blk}.conv2"), ch, ch, 3, &mut rng);
            add_bn(&mut params, &mut bn, &format!("{blk}.bn2"), ch);
            cin = ch;
        }
        add_conv(&mut params, "dec.reverse", cin, 1, 1, &mut rng);

        Self { config, params, bn }
    }

    pub fn bn_stats(&self) -> impl Iterator<Item = (&str, &BnStats)> {
        self.bn.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn set_bn_stats(&mut self, name: &str, stats: BnStats) {
        let entry = self
            .bn
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown bn layer {name}"));
        entry.1 = stats;
    }

    fn bn_mut(&mut self, name: &str) -> &mut BnStats {
        &mut self
            .bn
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown bn layer {name}"))
            .1
    }

    fn conv_bn_relu(
        &mut self,
        g: &mut Graph,
        bound: &BoundParams,
        prefix: &str,
        conv: &str,
        bn: &str,
        x: TensorId,
        pad: usize,
        mode: BnMode,
    ) -> Result<TensorId, ModelError> {
        let w = bound.id(&self.params, &format!("{prefix}.{conv}.weight"));
        let b = bound.id(&self.params, &format!("{prefix}.{conv}.bias"));
        let gamma = bound.id(&self.params, &format!("{prefix}.{bn}.gamma"));
        let beta = bound.id(&self.params, &format!("{prefix}.{bn}.beta"));
        let x = g.conv2d(x, w, b, (pad, pad))?;
        let bn_name = format!("{prefix}.{bn}");
        let stats = self.bn_mut(&bn_name);
        let x = g.batchnorm2d(x, gamma, beta, mode, stats)?;
        Ok(g.relu(x))
    }

    /// [N, 1, F0, T_pad] -> segmentation maps [N, C, F0/16, T_pad/16].
    pub fn encoder_forward(
        &mut self,
        g: &mut Graph,
        bound: &BoundParams,
        x: TensorId,
        mode: BnMode,
    ) -> Result<TensorId, ModelError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(ModelError::BadInput(format!(
                "encoder expects [N,1,F,T], got {shape:?}"
            )));
        }
        if shape[2] != self.config.mel_bins {
            return Err(ModelError::MelMismatch { got: shape[2], want: self.config.mel_bins });
        }
        if shape[3] % 16 != 0 {
            return Err(ModelError::TimeNotPadded { t: shape[3] });
        }
        let mut x = x;
        for b in 1..=4 {
            let blk = format!("enc.block{b}");
            x = self.conv_bn_relu(g, bound, &blk, "conv1", "bn1", x, 1, mode)?;
            x = self.conv_bn_relu(g, bound, &blk, "conv2", "bn2", x, 1, mode)?;
            x = g.avgpool2d(x)?;
        }
        let w = bound.id(&self.params, "enc.class.weight");
        let b = bound.id(&self.params, "enc.class.bias");
        Ok(g.conv2d(x, w, b, (0, 0))?)
    }

    /// Segmentation maps [N, C, F', T'] -> reconstruction [N, 1, F0, T_pad].
    pub fn decoder_forward(
        &mut self,
        g: &mut Graph,
        bound: &BoundParams,
        z: TensorId,
        mode: BnMode,
    ) -> Result<TensorId, ModelError> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 4 || shape[1] != self.config.categories {
            return Err(ModelError::BadInput(format!(
                "decoder expects [N,{},F',T'], got {shape:?}",
                self.config.categories
            )));
        }
        let mut x = z;
        for b in 1..=4 {
            let blk = format!("dec.block{b}");
            x = g.upsample2x(x)?;
            x = self.conv_bn_relu(g, bound, &blk, "conv1", "bn1", x, 1, mode)?;
            x = self.conv_bn_relu(g, bound, &blk, "conv2", "bn2", x, 1, mode)?;
        }
        let w = bound.id(&self.params, "dec.reverse.weight");
        let b = bound.id(&self.params, "dec.reverse.bias");
        Ok(g.conv2d(x, w, b, (0, 0))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradcheck, random_tensor};

    #[test]
    fn shape_contract_desk_profile() {
        let mut m = SedModel::init(ModelConfig::desk(3), 1);
        let mut g = Graph::new();
        let bound = m.params.bind(&mut g, false);
        let x = g.leaf(&Tensor::zeros(&[1, 1, 64, 320]), false);
        let z = m.encoder_forward(&mut g, &bound, x, BnMode::Train).unwrap();
        assert_eq!(g.shape(z), &[1, 3, 4, 20]);
        let xbar = m.decoder_forward(&mut g, &bound, z, BnMode::Train).unwrap();
        assert_eq!(g.shape(xbar), &[1, 1, 64, 320]);
    }

    #[test]
    fn unpadded_time_axis_rejected() {
        let mut m = SedModel::init(ModelConfig::desk(3), 1);
        let mut g = Graph::new();
        let bound = m.params.bind(&mut g, false);
        let x = g.leaf(&Tensor::zeros(&[1, 1, 64, 311]), false);
        assert!(matches!(
            m.encoder_forward(&mut g, &bound, x, BnMode::Train),
            Err(ModelError::TimeNotPadded { t: 311 })
        ));
    }

    #[test]
    fn zero_weights_give_zero_maps() {
        let mut m = SedModel::init(ModelConfig::tiny(2, 16), 3);
        for (_, t) in m.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let names: Vec<String> = m.bn_stats().map(|(n, _)| n.to_string()).collect();
        for n in &names {
            let mut s = BnStats::new(2);
            s.initialized = true;
            m.set_bn_stats(n, s);
        }
        let mut g = Graph::new();
        let bound = m.params.bind(&mut g, false);
        let x = g.leaf(&random_tensor(&[1, 1, 16, 16], &mut ChaCha8Rng::seed_from_u64(9)), false);
        let z = m.encoder_forward(&mut g, &bound, x, BnMode::Eval).unwrap();
        assert!(g.data(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_with_expected_statistics() {
        let a = SedModel::init(ModelConfig::desk(3), 42);
        let b = SedModel::init(ModelConfig::desk(3), 42);
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        // kaiming fan-in: empirical variance of a big conv ~ 2/fan_in
        let w = a.params.get("enc.block4.conv2.weight");
        let fan_in = 128 * 9;
        let mean: f64 = w.data().iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / fan_in as f64;
        assert!(
            (var - expected).abs() < 0.2 * expected,
            "var {var} vs expected {expected}"
        );
        for b in 1..=4 {
            for bn in ["bn1", "bn2"] {
                let gamma = a.params.get(&format!("enc.block{b}.{bn}.gamma"));
                assert!(gamma.data().iter().all(|&v| v == 1.0));
            }
        }
        assert!(a.params.get("enc.block1.conv1.bias").data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_encoder_and_decoder_gradcheck() {
        // checkable cases come from the shared registry, which redraws
        // around relu kinks and degenerate batch statistics
        for case in crate::checks::registry(55) {
            if case.name == "encoder_tiny" || case.name == "decoder_tiny" {
                let report = gradcheck(case.name, &case.inputs, &case.case, 55).unwrap();
                assert!(report.passed, "{}", report.summary());
            }
        }
    }
}
