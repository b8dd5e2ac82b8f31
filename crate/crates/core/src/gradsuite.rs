//! Finite-difference checks of every tape primitive and of the composite
//! blocks and losses built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cpc::{cpcl_loss, PrototypeMemory, DEFAULT_MOMENTUM};
use crate::data::Modality;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check_many, GradCheckReport};
use crate::losses::{id_loss, triplet_loss};
use crate::mii::{channel_exchange, cmcl_loss, ClipLayout, Mii};
use crate::nn::Linear;
use crate::params::{Bound, ParamStore};
use crate::tape::{AttentionSpec, Tape, Var, L2_EPS, LAYERNORM_EPS};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// Contracts `x` against fixed pseudo-random weights so every output element
/// reaches the scalar with a distinct coefficient.
fn readout(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 + 13) % 97) as f64 / 97.0 - 0.5).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum_all(prod))
}

fn check<F>(name: &'static str, inputs: Vec<Tensor>, f: F) -> Result<GradCase>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = grad_check_many(
        |tape: &mut Tape, v: &[Var]| {
            let out = f(tape, v)?;
            if tape.value(out).numel() == 1 {
                Ok(out)
            } else {
                readout(tape, out)
            }
        },
        &inputs,
        STEP,
    )?;
    Ok(GradCase { name, report })
}

/// Store values followed by `extra` inputs; `f` gets the rebuilt binding and
/// the extra handles.
fn with_params(store: &ParamStore, extra: Vec<Tensor>) -> (Vec<Tensor>, usize) {
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let k = inputs.len();
    inputs.extend(extra);
    (inputs, k)
}

fn bind(v: &[Var], k: usize) -> (Bound, &[Var]) {
    (Bound::from_vars(v[..k].to_vec()), &v[k..])
}

pub fn primitive_cases() -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    let mut cases = vec![
        check("matmul", vec![normal(r, &[3, 4]), normal(r, &[4, 2])], |t, v| t.matmul(v[0], v[1]))?,
        check("add", vec![normal(r, &[2, 3]), normal(r, &[2, 3])], |t, v| t.add(v[0], v[1]))?,
        check("sub", vec![normal(r, &[2, 3]), normal(r, &[2, 3])], |t, v| t.sub(v[0], v[1]))?,
        check("mul", vec![normal(r, &[2, 3]), normal(r, &[2, 3])], |t, v| t.mul(v[0], v[1]))?,
        check("scale", vec![normal(r, &[5])], |t, v| Ok(t.scale(v[0], -1.7)))?,
        check("add_scalar", vec![normal(r, &[5])], |t, v| Ok(t.add_scalar(v[0], 0.3)))?,
        check("gelu", vec![uniform(r, &[8], -3.0, 3.0)], |t, v| Ok(t.gelu(v[0])))?,
        // Kept away from the kink at zero.
        check("relu", vec![Tensor::from_vec(vec![-1.2, -0.4, 0.3, 0.9, 2.0])], |t, v| Ok(t.relu(v[0])))?,
        check("sqrt", vec![uniform(r, &[6], 0.2, 3.0)], |t, v| Ok(t.sqrt(v[0])))?,
        check("add_row", vec![normal(r, &[3, 4]), normal(r, &[4])], |t, v| t.add_row(v[0], v[1]))?,
        check("transpose", vec![normal(r, &[3, 2])], |t, v| t.transpose(v[0]))?,
        check("reshape", vec![normal(r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4]))?,
        check("softmax_rows", vec![normal(r, &[3, 4])], |t, v| t.softmax(v[0], 1))?,
        check("softmax_cols", vec![normal(r, &[3, 4])], |t, v| t.softmax(v[0], 0))?,
        check(
            "layernorm",
            vec![normal(r, &[3, 5]), uniform(r, &[5], 0.5, 1.5), normal(r, &[5])],
            |t, v| t.layernorm(v[0], v[1], v[2], LAYERNORM_EPS),
        )?,
        check("concat", vec![normal(r, &[2, 3]), normal(r, &[1, 3])], |t, v| t.concat(&[v[0], v[1]], 0))?,
        check("concat_cols", vec![normal(r, &[2, 3]), normal(r, &[2, 2])], |t, v| t.concat(&[v[0], v[1]], 1))?,
        check("slice", vec![normal(r, &[3, 6])], |t, v| t.slice(v[0], 1, 2, 5))?,
        check("mean", vec![normal(r, &[2, 3, 4])], |t, v| t.mean(v[0], 1))?,
        check("sum", vec![normal(r, &[2, 3, 4])], |t, v| t.sum(v[0], 2))?,
        check("sum_all", vec![normal(r, &[3, 3])], |t, v| Ok(t.sum_all(v[0])))?,
        check("mean_all", vec![normal(r, &[3, 3])], |t, v| Ok(t.mean_all(v[0])))?,
        check("l2_normalize", vec![normal(r, &[3, 4])], |t, v| t.l2_normalize(v[0], 1, L2_EPS))?,
        check("gather_rows", vec![normal(r, &[4, 3])], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]))?,
        check("cross_entropy", vec![normal(r, &[4, 5])], |t, v| t.cross_entropy_logits(v[0], &[1, 4, 0, 1]))?,
    ];
    let spec = AttentionSpec {
        groups: 2,
        queries: 2,
        keys: 3,
        heads: 2,
    };
    cases.push(check(
        "attention",
        vec![normal(r, &[4, 4]), normal(r, &[6, 4]), normal(r, &[6, 4])],
        move |t, v| t.attention(v[0], v[1], v[2], spec),
    )?);
    Ok(cases)
}

pub fn composite_cases() -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (dim, heads) = (8, 2);
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let mii = Mii::new(&mut store, dim, heads, 5);
    let layout = ClipLayout {
        clips: 1,
        frames: 3,
        patches: 2,
    };

    let (inputs, k) = with_params(&store, vec![normal(&mut rng, &[3, dim]), normal(&mut rng, &[6, dim])]);
    cases.push(check("sii", inputs.clone(), |t, v| {
        let (p, x) = bind(v, k);
        let exchanged = channel_exchange(t, x[1], layout, 1)?;
        Ok(mii.sii_block(t, &p, x[0], exchanged, layout)?.out)
    })?);
    cases.push(check("lii", inputs, |t, v| {
        let (p, x) = bind(v, k);
        Ok(mii.lii_block(t, &p, x[0], x[1], layout, 1)?.out)
    })?);

    let pair = ClipLayout {
        clips: 2,
        frames: 2,
        patches: 2,
    };
    let (inputs, k) = with_params(&store, vec![normal(&mut rng, &[2, dim]), normal(&mut rng, &[8, dim])]);
    cases.push(check("cii", inputs, |t, v| {
        let (p, x) = bind(v, k);
        mii.cii_block(t, &p, x[0], x[1], &[1, 0], pair)
    })?);

    let ids = [0usize, 1, 2];
    let proto = |rng: &mut ChaCha8Rng, m: Modality| -> Result<PrototypeMemory> {
        let rows: Vec<Vec<f64>> = ids.iter().map(|_| normal(rng, &[4]).into_data()).collect();
        PrototypeMemory::from_embeddings(m, ids.len(), DEFAULT_MOMENTUM, rows.iter().enumerate().map(|(i, r)| (i, r.as_slice())))
    };
    let vis = proto(&mut rng, Modality::Visible)?;
    let ir = proto(&mut rng, Modality::Infrared)?;
    cases.push(check("cpcl", vec![normal(&mut rng, &[6, 4])], |t, v| {
        let b = t.l2_normalize(v[0], 1, L2_EPS)?;
        cpcl_loss(t, b, &[0, 0, 1, 1, 2, 2], &vis, &ir, 0.5)
    })?);

    cases.push(check("triplet", vec![normal(&mut rng, &[6, 3])], |t, v| {
        triplet_loss(t, v[0], &[0, 0, 1, 1, 2, 2], 0.3)
    })?);

    let mut head_store = ParamStore::new();
    let head = Linear::new(&mut head_store, "cls", 5, 3, &mut rng);
    for value in head_store.values_mut() {
        *value = normal(&mut rng, value.shape());
    }
    let (inputs, k) = with_params(&head_store, vec![normal(&mut rng, &[4, 5])]);
    cases.push(check("ce", inputs, |t, v| {
        let (p, x) = bind(v, k);
        id_loss(t, &p, &head, x[0], &[2, 0, 1, 2])
    })?);

    cases.push(check(
        "cmcl",
        vec![
            normal(&mut rng, &[3, 4]),
            normal(&mut rng, &[3, 4]),
            normal(&mut rng, &[3, 4]),
            normal(&mut rng, &[3, 4]),
        ],
        |t, v| cmcl_loss(t, &[(v[0], v[1]), (v[2], v[3])]),
    )?);

    let config = EncoderConfig {
        height: 8,
        width: 4,
        patch: 4,
        dim: 8,
        embed_dim: 4,
        layers: 1,
        heads: 2,
        seed: 9,
    };
    let mut enc_store = ParamStore::new();
    let encoder = Encoder::new(&mut enc_store, config.clone())?;
    let (inputs, k) = with_params(&enc_store, vec![normal(&mut rng, &[2 * config.patches(), config.patch_len()])]);
    cases.push(check("encoder", inputs, |t, v| {
        let (p, x) = bind(v, k);
        let (cls, patches) = encoder.encode_frames(t, &p, x[0], &[Modality::Visible, Modality::Infrared])?;
        let emb = encoder.project_cls(t, &p, cls)?;
        let a = readout(t, emb)?;
        let b = readout(t, patches)?;
        t.add(a, b)
    })?);
    Ok(cases)
}

/// Every case, primitives first.
pub fn run_suite() -> Result<Vec<GradCase>> {
    let mut cases = primitive_cases()?;
    cases.extend(composite_cases()?);
    Ok(cases)
}
