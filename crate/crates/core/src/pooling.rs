//! Pooling heads mapping segmentation maps Z[N,C,F',T'] to clip
//! probabilities P[N,C].
//!
//! The two-step head attends over frequency first, then time. Step 1 at
//! each (f,t): attention logits sigmoid(W_a1 z + b_a1) are softmax-normalized
//! over F', and weight the linear classification output W_c1 z + b_c1.
//! Step 2 repeats along T' on the pooled output, with a sigmoid on the
//! classification path so the final weighted combination lands in [0,1].

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{AutogradError, Graph, Tensor, TensorId};
use crate::model::{kaiming_uniform, BoundParams, ParamStore};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("non-finite segmentation map fed to attention pooling")]
    NonFinite,
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolingKind {
    TwoStep,
    Gap,
    Gmp,
    Gwrp { decay: f64 },
}

impl PoolingKind {
    pub fn name(&self) -> &'static str {
        match self {
            PoolingKind::TwoStep => "2ap",
            PoolingKind::Gap => "gap",
            PoolingKind::Gmp => "gmp",
            PoolingKind::Gwrp { .. } => "gwrp",
        }
    }

    pub fn parse(s: &str, gwrp_decay: f64) -> Option<Self> {
        match s {
            "2ap" => Some(PoolingKind::TwoStep),
            "gap" => Some(PoolingKind::Gap),
            "gmp" => Some(PoolingKind::Gmp),
            "gwrp" => Some(PoolingKind::Gwrp { decay: gwrp_decay }),
            _ => None,
        }
    }
}

pub const TWO_STEP_PARAM_NAMES: [&str; 8] = [
    "pool.freq.attn.weight",
    "pool.freq.attn.bias",
    "pool.freq.cls.weight",
    "pool.freq.cls.bias",
    "pool.time.attn.weight",
    "pool.time.attn.bias",
    "pool.time.cls.weight",
    "pool.time.cls.bias",
];

/// Attention parameters: zero attention maps (uniform weights at step 0),
/// Kaiming classification maps. All maps act across the category axis.
pub fn init_two_step_params(categories: usize, rng: &mut ChaCha8Rng) -> ParamStore {
    let c = categories;
    let mut store = ParamStore::new();
    store.insert("pool.freq.attn.weight", Tensor::zeros(&[c, c]));
    store.insert("pool.freq.attn.bias", Tensor::zeros(&[c]));
    store.insert("pool.freq.cls.weight", kaiming_uniform(&[c, c], c, rng));
    store.insert("pool.freq.cls.bias", Tensor::zeros(&[c]));
    store.insert("pool.time.attn.weight", Tensor::zeros(&[c, c]));
    store.insert("pool.time.attn.bias", Tensor::zeros(&[c]));
    store.insert("pool.time.cls.weight", kaiming_uniform(&[c, c], c, rng));
    store.insert("pool.time.cls.bias", Tensor::zeros(&[c]));
    store
}

/// Graph ids of the intermediate attention quantities, all in
/// [N, T', F', C] / [N, T', C] layout as computed.
#[derive(Debug, Clone, Copy)]
pub struct TraceIds {
    pub za1: TensorId,
    pub zc1: TensorId,
    pub zp1: TensorId,
    pub za2: TensorId,
    pub zc2: TensorId,
    pub zp2: TensorId,
}

/// Two-step attention pooling: Z[N,C,F',T'] -> (P[N,C], trace).
pub fn two_step_forward(
    g: &mut Graph,
    store: &ParamStore,
    bound: &BoundParams,
    z: TensorId,
) -> Result<(TensorId, TraceIds), PoolError> {
    if g.data(z).iter().any(|v| !v.is_finite()) {
        return Err(PoolError::NonFinite);
    }
    let shape = g.shape(z).to_vec();
    let (n, c, f, t) = (shape[0], shape[1], shape[2], shape[3]);
    let wa1 = bound.id(store, "pool.freq.attn.weight");
    let ba1 = bound.id(store, "pool.freq.attn.bias");
    let wc1 = bound.id(store, "pool.freq.cls.weight");
    let bc1 = bound.id(store, "pool.freq.cls.bias");
    let wa2 = bound.id(store, "pool.time.attn.weight");
    let ba2 = bound.id(store, "pool.time.attn.bias");
    let wc2 = bound.id(store, "pool.time.cls.weight");
    let bc2 = bound.id(store, "pool.time.cls.bias");

    // category axis last so the linear maps act per (f,t) position
    let zp = g.permute(z, &[0, 3, 2, 1])?; // [N,T,F,C]
    let flat = g.reshape(zp, &[n * t * f, c])?;

    let a1_lin = g.linear(flat, wa1, ba1)?;
    let a1_sig = g.sigmoid(a1_lin);
    let a1 = g.reshape(a1_sig, &[n, t, f, c])?;
    let za1 = g.softmax_along(a1, 2)?;

    let c1_lin = g.linear(flat, wc1, bc1)?;
    let zc1 = g.reshape(c1_lin, &[n, t, f, c])?;

    let weighted = g.mul(zc1, za1)?;
    let zp1 = g.sum_along(weighted, 2)?; // [N,T,C]

    let flat2 = g.reshape(zp1, &[n * t, c])?;
    let a2_lin = g.linear(flat2, wa2, ba2)?;
    let a2_sig = g.sigmoid(a2_lin);
    let a2 = g.reshape(a2_sig, &[n, t, c])?;
    let za2 = g.softmax_along(a2, 1)?;

    let c2_lin = g.linear(flat2, wc2, bc2)?;
    let c2_sig = g.sigmoid(c2_lin);
    let zc2 = g.reshape(c2_sig, &[n, t, c])?;

    let weighted2 = g.mul(zc2, za2)?;
    let p = g.sum_along(weighted2, 1)?; // [N,C]

    Ok((p, TraceIds { za1, zc1, zp1, za2, zc2, zp2: p }))
}

/// Global average pooling: raw per-category scores (no sigmoid).
pub fn gap_forward(g: &mut Graph, z: TensorId) -> Result<TensorId, PoolError> {
    let shape = g.shape(z).to_vec();
    let (f, t) = (shape[2], shape[3]);
    let s = g.sum_along(z, 3)?;
    let s = g.sum_along(s, 2)?;
    Ok(g.scale(s, 1.0 / (f * t) as f64))
}

/// Global max pooling: raw scores.
pub fn gmp_forward(g: &mut Graph, z: TensorId) -> Result<TensorId, PoolError> {
    Ok(g.gmp2d(z)?)
}

/// Global weighted rank pooling: raw scores.
pub fn gwrp_forward(g: &mut Graph, z: TensorId, decay: f64) -> Result<TensorId, PoolError> {
    Ok(g.gwrp2d(z, decay)?)
}

/// Any pooling head to probabilities in [0,1]. The baselines get a sigmoid
/// on top of their raw scores; the two-step head is bounded by
/// construction.
pub fn pooling_probabilities(
    g: &mut Graph,
    kind: PoolingKind,
    store: &ParamStore,
    bound: &BoundParams,
    z: TensorId,
) -> Result<(TensorId, Option<TraceIds>), PoolError> {
    match kind {
        PoolingKind::TwoStep => {
            let (p, trace) = two_step_forward(g, store, bound, z)?;
            Ok((p, Some(trace)))
        }
        PoolingKind::Gap => {
            let s = gap_forward(g, z)?;
            Ok((g.sigmoid(s), None))
        }
        PoolingKind::Gmp => {
            let s = gmp_forward(g, z)?;
            Ok((g.sigmoid(s), None))
        }
        PoolingKind::Gwrp { decay } => {
            let s = gwrp_forward(g, z, decay)?;
            Ok((g.sigmoid(s), None))
        }
    }
}

/// Intermediate attention quantities for one clip, in the per-clip layout
/// used by the trace files: [C,F',T'] for step-1 maps, [C,T'] for step-2,
/// [C] for the final probabilities.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub za1: Tensor,
    pub zc1: Tensor,
    pub zp1: Tensor,
    pub za2: Tensor,
    pub zc2: Tensor,
    pub zp2: Tensor,
}

/// Pulls the trace values for clip `n_index` out of the graph.
pub fn extract_trace(g: &Graph, ids: &TraceIds, n_index: usize) -> AttentionTrace {
    let shape = g.shape(ids.za1).to_vec(); // [N,T,F,C]
    let (t, f, c) = (shape[1], shape[2], shape[3]);
    let to_cft = |data: &[f64]| {
        let mut out = vec![0.0; c * f * t];
        for ti in 0..t {
            for fi in 0..f {
                for ci in 0..c {
                    out[(ci * f + fi) * t + ti] = data[((n_index * t + ti) * f + fi) * c + ci];
                }
            }
        }
        Tensor::new(&[c, f, t], out).expect("sized above")
    };
    let to_ct = |data: &[f64]| {
        let mut out = vec![0.0; c * t];
        for ti in 0..t {
            for ci in 0..c {
                out[ci * t + ti] = data[(n_index * t + ti) * c + ci];
            }
        }
        Tensor::new(&[c, t], out).expect("sized above")
    };
    let p = &g.data(ids.zp2)[n_index * c..(n_index + 1) * c];
    AttentionTrace {
        za1: to_cft(g.data(ids.za1)),
        zc1: to_cft(g.data(ids.zc1)),
        zp1: to_ct(g.data(ids.zp1)),
        za2: to_ct(g.data(ids.za2)),
        zc2: to_ct(g.data(ids.zc2)),
        zp2: Tensor::new(&[c], p.to_vec()).expect("sized above"),
    }
}

impl AttentionTrace {
    /// Writes trace_za1.csv .. trace_zp2.csv in long form with a header
    /// naming the axes.
    pub fn write_csvs(&self, dir: &Path) -> std::io::Result<()> {
        let w3 = |name: &str, t: &Tensor| -> std::io::Result<()> {
            let mut f = std::fs::File::create(dir.join(name))?;
            writeln!(f, "category,freq,time,value")?;
            let (c, fr, ti) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            for ci in 0..c {
                for fi in 0..fr {
                    for t_i in 0..ti {
                        writeln!(f, "{ci},{fi},{t_i},{:.12e}", t.data()[(ci * fr + fi) * ti + t_i])?;
                    }
                }
            }
            Ok(())
        };
        let w2 = |name: &str, t: &Tensor| -> std::io::Result<()> {
            let mut f = std::fs::File::create(dir.join(name))?;
            writeln!(f, "category,time,value")?;
            let (c, ti) = (t.shape()[0], t.shape()[1]);
            for ci in 0..c {
                for t_i in 0..ti {
                    writeln!(f, "{ci},{t_i},{:.12e}", t.data()[ci * ti + t_i])?;
                }
            }
            Ok(())
        };
        w3("trace_za1.csv", &self.za1)?;
        w3("trace_zc1.csv", &self.zc1)?;
        w2("trace_zp1.csv", &self.zp1)?;
        w2("trace_za2.csv", &self.za2)?;
        w2("trace_zc2.csv", &self.zc2)?;
        let mut f = std::fs::File::create(dir.join("trace_zp2.csv"))?;
        writeln!(f, "category,value")?;
        for (ci, v) in self.zp2.data().iter().enumerate() {
            writeln!(f, "{ci},{v:.12e}")?;
        }
        Ok(())
    }
}
