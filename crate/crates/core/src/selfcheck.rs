//! Invariant suites run against the brute-force oracles and finite
//! differences. Shared by the `selfcheck` command and the acceptance tests.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nalgebra::{Rotation3, UnitQuaternion, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{attention_macs, fit_quadratic, AttentionKind, BlockConfig, ExternalAttention, SelfAttention};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gate::{Gate, GateInput};
use crate::geometry::{farthest_point_sample_from, knn, pair_features, spfh_descriptor, PairFeatureVariant, PointCloud, Vec3};
use crate::mae::{chamfer_distance, random_mask, with_normals, Model, ReconstructionHead};
use crate::nn::{
    check_input_gradient, check_param_gradients, check_param_gradients_sampled, Activation, LayerNorm, Mlp, ParamStore, Tape,
    Tensor,
};
use crate::oracle;

/// Finite-difference acceptance threshold.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Outcome of one named suite.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// One suite: a name and a body that reports (passed, detail).
pub type Suite = (&'static str, fn() -> Result<(bool, String)>);

pub const SUITES: [Suite; 6] = [
    ("geometry-oracles", geometry_oracles),
    ("spfh", spfh_correctness),
    ("degeneracy", degeneracy_audit),
    ("gradients", gradient_suite),
    ("invariants", structural_invariants),
    ("complexity", complexity),
];

pub fn run_suite(suite: Suite) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match (suite.1)() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        name: suite.0,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

pub fn run_all() -> Vec<CheckOutcome> {
    SUITES.iter().map(|&s| run_suite(s)).collect()
}

fn unit_cube_point(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let q = Vector4::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q)).to_rotation_matrix()
}

/// FPS and k-NN against exhaustive references (exact), Chamfer against the
/// double loop (1e-6).
pub fn geometry_oracles() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0f05);
    let mut fps_bad = 0;
    for trial in 0..500 {
        let n = rng.random_range(1..=8);
        // integer grid coordinates in half the trials force distance ties
        let pts: Vec<Vec3> = (0..n)
            .map(|_| {
                if trial % 2 == 0 {
                    Vec3::new(rng.random_range(0..3) as f64, rng.random_range(0..3) as f64, rng.random_range(0..2) as f64)
                } else {
                    unit_cube_point(&mut rng)
                }
            })
            .collect();
        let count = rng.random_range(1..=n);
        let first = rng.random_range(0..n);
        let got = farthest_point_sample_from(&PointCloud::new(pts.clone()), count, first)?;
        if got != oracle::fps_exhaustive(&pts, count, first) {
            fps_bad += 1;
        }
    }
    let mut knn_bad = 0;
    for trial in 0..500 {
        let n = rng.random_range(1..=64);
        let pts: Vec<Vec3> = (0..n)
            .map(|_| {
                if trial % 2 == 0 {
                    Vec3::new(rng.random_range(0..4) as f64, rng.random_range(0..4) as f64, 0.0)
                } else {
                    unit_cube_point(&mut rng)
                }
            })
            .collect();
        let query = if trial % 2 == 0 { pts[rng.random_range(0..n)] } else { unit_cube_point(&mut rng) };
        let k = rng.random_range(0..=n);
        if knn(&PointCloud::new(pts.clone()), &query, k)? != oracle::knn_full_sort(&pts, &query, k) {
            knn_bad += 1;
        }
    }
    let mut chamfer_err = 0.0f64;
    for _ in 0..200 {
        let a: Vec<Vec3> = (0..10).map(|_| unit_cube_point(&mut rng)).collect();
        let b: Vec<Vec3> = (0..10).map(|_| unit_cube_point(&mut rng)).collect();
        let want = oracle::chamfer_double_loop(&a, &b);
        chamfer_err = chamfer_err.max((chamfer_distance(&a, &b)? - want).abs());
        let flat = |s: &[Vec3]| Tensor::<f64>::from_f64(&[1, s.len(), 3], &s.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>());
        let mut tape = Tape::<f64>::new();
        let pa = tape.constant(flat(&a)?);
        let pb = tape.constant(flat(&b)?);
        let loss = tape.chamfer_l2(pa, pb)?;
        chamfer_err = chamfer_err.max((tape.value(loss).item() - want).abs());
    }
    Ok((
        fps_bad == 0 && knn_bad == 0 && chamfer_err <= 1e-6,
        format!("fps mismatches {fps_bad}/500, knn mismatches {knn_bad}/500, chamfer max error {chamfer_err:.2e}"),
    ))
}

/// Hand-computed frames, rotation invariance and histogram normalization.
pub fn spfh_correctness() -> Result<(bool, String)> {
    let std = PairFeatureVariant::Standard;
    let z = Vec3::z();
    let a = pair_features(&Vec3::zeros(), &z, &Vec3::x(), &z, std)?;
    let b = pair_features(&Vec3::zeros(), &z, &Vec3::x(), &Vec3::x(), std)?;
    let hand = [(a, [0.0, 0.0, 0.0]), (b, [0.0, 0.0, PI / 2.0])];
    let hand_err = hand
        .iter()
        .map(|(f, e)| (f.alpha - e[0]).abs().max((f.phi - e[1]).abs()).max((f.theta - e[2]).abs()))
        .fold(0.0f64, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(0x5bf4);
    let pts: Vec<Vec3> = (0..48).map(|_| unit_cube_point(&mut rng)).collect();
    let normals: Vec<Vec3> = (0..48).map(|_| unit_vector(&mut rng)).collect();
    let cloud = PointCloud::with_normals(pts, normals)?;
    let neighbors: Vec<usize> = (0..48).collect();
    let centers = [0usize, 7, 23];
    let base: Vec<_> = centers
        .iter()
        .map(|&c| spfh_descriptor(&cloud, c, &neighbors, 11, std))
        .collect::<Result<_>>()?;
    let mut rot_err = 0.0f64;
    for _ in 0..100 {
        let turned = cloud.rotated(&random_rotation(&mut rng));
        for (&c, d) in centers.iter().zip(&base) {
            let t = spfh_descriptor(&turned, c, &neighbors, 11, std)?;
            for (x, y) in d.histogram.iter().zip(&t.histogram) {
                rot_err = rot_err.max((x - y).abs());
            }
        }
    }
    let sum_err = base
        .iter()
        .flat_map(|d| d.sub_histograms().map(|h| (h.iter().sum::<f64>() - 1.0).abs()))
        .fold(0.0f64, f64::max);
    let width = base[0].histogram.len();
    Ok((
        hand_err <= 1e-9 && rot_err <= 1e-5 && sum_err <= 1e-6 && width == 33,
        format!("hand-computed error {hand_err:.1e}, rotation max diff {rot_err:.1e} over 100 rotations, sub-histogram sum error {sum_err:.1e}, {width} bins"),
    ))
}

/// The literal angle formula collapses alpha to zero; the standard one
/// does not.
pub fn degeneracy_audit() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa1fa);
    let mut literal_nonzero = 0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let (pq, pi) = (unit_cube_point(&mut rng), unit_cube_point(&mut rng));
        let (nq, ni) = (unit_vector(&mut rng), unit_vector(&mut rng));
        if pair_features(&pq, &nq, &pi, &ni, PairFeatureVariant::PaperLiteral)?.alpha != 0.0 {
            literal_nonzero += 1;
        }
        let a = pair_features(&pq, &nq, &pi, &ni, PairFeatureVariant::Standard)?.alpha;
        lo = lo.min(a);
        hi = hi.max(a);
    }
    Ok((
        literal_nonzero == 0 && hi - lo > 0.5,
        format!("literal alpha nonzero in {literal_nonzero}/1000 pairs, standard alpha range [{lo:.3}, {hi:.3}]"),
    ))
}

fn randomized(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn sphere_cloud(n: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            let v = unit_vector(&mut rng);
            v + Vec3::new(0.15 * v.x * v.x, 0.0, 0.05 * v.y)
        })
        .collect();
    crate::geometry::normalize_cloud(&PointCloud::new(pts))
}

/// Squared mean of a block output, a scalar with nonzero gradients everywhere.
fn mean_square(tape: &mut Tape<'_, f64>, y: crate::nn::Var) -> Result<crate::nn::Var> {
    let sq = tape.mul(y, y)?;
    Ok(tape.mean_all(sq))
}

/// Finite differences against the tape for every layer family and the full
/// pretraining loss.
pub fn gradient_suite() -> Result<(bool, String)> {
    let h = crate::nn::gradcheck::DEFAULT_STEP;
    let mut results: Vec<(&str, f64)> = Vec::new();

    let mlp = Mlp::new("mlp", &[5, 7, 3], Activation::Gelu);
    let mut s = ParamStore::new();
    mlp.init(&mut s, &mut ChaCha8Rng::seed_from_u64(1))?;
    randomized(&mut s, 2, 0.8);
    let x = random_tensor(&[4, 5], 3, 1.0);
    let p = check_param_gradients(&s, |t| {
        let xv = t.constant(x.clone());
        let y = mlp.forward(t, xv)?;
        mean_square(t, y)
    }, h)?;
    let i = input_check_with_params(&s, &x, |t, xv| {
        let y = mlp.forward(t, xv)?;
        mean_square(t, y)
    })?;
    results.push(("mlp", p.max_relative_error.max(i)));

    let ln = LayerNorm::new("ln", 6);
    let mut s = ParamStore::new();
    ln.init(&mut s, &mut ChaCha8Rng::seed_from_u64(4))?;
    randomized(&mut s, 5, 1.0);
    let x = random_tensor(&[3, 6], 6, 2.0);
    let w = random_tensor(&[3, 6], 7, 1.0);
    let weighted = |t: &mut Tape<'_, f64>, y| {
        let wv = t.constant(w.clone());
        let prod = t.mul(y, wv)?;
        Ok(t.sum_all(prod))
    };
    let p = check_param_gradients(&s, |t| {
        let xv = t.constant(x.clone());
        let y = ln.forward(t, xv)?;
        weighted(t, y)
    }, h)?;
    let i = input_check_with_params(&s, &x, |t, xv| {
        let y = ln.forward(t, xv)?;
        weighted(t, y)
    })?;
    results.push(("layer-norm", p.max_relative_error.max(i)));

    let x = random_tensor(&[3, 5, 4], 8, 1.0);
    let mut pool = 0.0f64;
    for axis in [0, 1, 2] {
        pool = pool.max(check_input_gradient(&x, |t, v| {
            let m = t.max_axis(v, axis)?;
            mean_square(t, m)
        }, h)?);
        pool = pool.max(check_input_gradient(&x, |t, v| {
            let m = t.mean_axis(v, axis)?;
            mean_square(t, m)
        }, h)?);
    }
    results.push(("pooling", pool));

    let x = random_tensor(&[3, 8], 9, 1.0);
    let sa = SelfAttention { prefix: "sa".into(), d: 8, heads: 2 };
    let mut s = ParamStore::new();
    sa.init(&mut s, &mut ChaCha8Rng::seed_from_u64(10))?;
    randomized(&mut s, 11, 0.5);
    let p = check_param_gradients(&s, |t| {
        let xv = t.constant(x.clone());
        let y = sa.forward(t, xv)?;
        mean_square(t, y)
    }, h)?;
    let i = input_check_with_params(&s, &x, |t, xv| {
        let y = sa.forward(t, xv)?;
        mean_square(t, y)
    })?;
    results.push(("self-attention", p.max_relative_error.max(i)));

    let ea = ExternalAttention { prefix: "ea".into(), d: 8, heads: 2, slots: 5, query_projection: true };
    let mut s = ParamStore::new();
    ea.init(&mut s, &mut ChaCha8Rng::seed_from_u64(12))?;
    randomized(&mut s, 13, 0.5);
    let p = check_param_gradients(&s, |t| {
        let xv = t.constant(x.clone());
        let y = ea.forward(t, xv)?;
        mean_square(t, y)
    }, h)?;
    let i = input_check_with_params(&s, &x, |t, xv| {
        let y = ea.forward(t, xv)?;
        mean_square(t, y)
    })?;
    results.push(("external-attention", p.max_relative_error.max(i)));

    let cfg = ModelConfig::gradcheck();
    let gate = Gate::new(&cfg);
    let mut s = ParamStore::new();
    gate.init(&mut s, &mut ChaCha8Rng::seed_from_u64(14))?;
    let mut sal = s.subset("gate.channel_saliency");
    sal.merge(s.subset("gate.spatial_saliency"))?;
    randomized(&mut sal, 15, 0.5);
    let x = random_tensor(&[2, 5, cfg.patch_channels], 16, 1.0);
    let p = check_param_gradients(&sal, |t| {
        let xv = t.constant(x.clone());
        let (_, s_t) = gate.adaptive_saliency(t, xv)?;
        Ok(t.mean_all(s_t))
    }, h)?;
    let i = input_check_with_params(&sal, &x, |t, xv| {
        let (_, s_t) = gate.adaptive_saliency(t, xv)?;
        Ok(t.mean_all(s_t))
    })?;
    results.push(("adaptive-saliency", p.max_relative_error.max(i)));

    let head = ReconstructionHead::new(6, 4);
    let mut s = ParamStore::new();
    head.linear.init(&mut s, &mut ChaCha8Rng::seed_from_u64(17))?;
    randomized(&mut s, 18, 0.5);
    let x = random_tensor(&[3, 6], 19, 1.0);
    let target = random_tensor(&[3, 4, 3], 20, 0.3);
    let p = check_param_gradients(&s, |t| {
        let xv = t.constant(x.clone());
        let y = head.forward(t, xv)?;
        let gt = t.constant(target.clone());
        t.chamfer_l2(y, gt)
    }, h)?;
    results.push(("reconstruction-head", p.max_relative_error));

    results.push(("pretrain-loss (gradcheck config, all coordinates)", pretrain_check(&ModelConfig::gradcheck(), None)?));
    results.push(("pretrain-loss (tiny config, 4 coordinates per tensor)", pretrain_check(&ModelConfig::tiny(), Some(4))?));

    let worst = results.iter().map(|r| r.1).fold(0.0f64, f64::max);
    let detail = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((worst < GRAD_TOLERANCE, format!("max relative error {worst:.2e}: {detail}")))
}

/// Input-gradient check for a function of parameters held in `store`.
fn input_check_with_params(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    build: impl Fn(&mut Tape<'_, f64>, crate::nn::Var) -> Result<crate::nn::Var>,
) -> Result<f64> {
    let eval = |v: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let xv = tape.constant(v.clone());
        let out = build(&mut tape, xv)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::with_params(store);
    let xv = tape.input(x.clone());
    let out = build(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    crate::nn::finite_difference_check(eval, x, &analytic, crate::nn::gradcheck::DEFAULT_STEP)
}

/// Pretraining loss of one cloud under a fixed mask, differenced over all
/// coordinates or a seeded sample per tensor.
fn pretrain_check(cfg: &ModelConfig, per_tensor: Option<usize>) -> Result<f64> {
    let model = Model::new(cfg)?;
    let mut params = model.init_params::<f64>(4)?;
    // wider than the training init so gradients sit well above rounding noise
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (_, p) in params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let cloud = with_normals(&sphere_cloud(cfg.n, 6)?, cfg)?;
    let (_, input) = model.gate_input::<f64>(&cloud, 1)?;
    let mask = random_mask(cfg.g, cfg.r, 2)?;
    let build = |tape: &mut Tape<'_, f64>| Ok(model.pretrain_from_input(tape, &input, mask.clone())?.loss);
    let h = crate::nn::gradcheck::DEFAULT_STEP;
    let res = match per_tensor {
        None => check_param_gradients(&params, build, h)?,
        Some(n) => check_param_gradients_sampled(&params, build, h, n, 7)?,
    };
    Ok(res.max_relative_error)
}

/// Mask cardinality, permutation equivariance/invariance, attention row
/// sums and saliency ranges.
pub fn structural_invariants() -> Result<(bool, String)> {
    let mut mask_bad = 0;
    let mut mask_cases = 0;
    for g in [4usize, 7, 10, 16, 33, 64, 100, 256] {
        for tenths in 1..10 {
            let want = oracle::masked_count_exact(g, tenths, 10);
            mask_cases += 1;
            match random_mask(g, tenths as f64 / 10.0, g as u64 + tenths as u64) {
                Ok(m) => {
                    let mut all: Vec<usize> = m.masked_indices.iter().chain(&m.visible_indices).copied().collect();
                    all.sort_unstable();
                    if m.masked_indices.len() != want || all != (0..g).collect::<Vec<_>>() {
                        mask_bad += 1;
                    }
                }
                Err(Error::DegenerateMaskRatio { .. }) if want == 0 || want == g => {}
                Err(_) => mask_bad += 1,
            }
        }
    }

    let cfg = ModelConfig::tiny();
    let model = Model::new(&cfg)?;
    let params64 = model.init_params::<f64>(3)?;
    let m = cfg.visible_count();
    let tokens = random_tensor(&[m, cfg.d], 21, 1.0);
    let centers = random_tensor(&[m, 3], 22, 1.0);
    let encode = |tok: &Tensor<f64>, cen: &Tensor<f64>| -> Result<Tensor<f64>> {
        let mut tape = Tape::with_params(&params64);
        let t = tape.constant(tok.clone());
        let y = model.encoder.forward(&mut tape, t, cen)?;
        Ok(tape.value(y).clone())
    };
    let base = encode(&tokens, &centers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut equiv_err = 0.0f64;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let out = encode(&tokens.select_rows(&perm)?, &centers.select_rows(&perm)?)?;
        let want = base.select_rows(&perm)?;
        for (a, b) in out.data().iter().zip(want.data()) {
            equiv_err = equiv_err.max((a - b).abs());
        }
    }

    let params32 = model.init_params::<f32>(3)?;
    let cloud = with_normals(&sphere_cloud(cfg.n, 24)?, &cfg)?;
    let (_, input) = model.gate_input::<f32>(&cloud, 0)?;
    let gate_tokens = |inp: &GateInput<f32>| -> Result<Tensor<f32>> {
        let mut tape = Tape::with_params(&params32);
        let seq = model.gate.forward(&mut tape, inp)?;
        Ok(tape.value(seq.tokens).clone())
    };
    let reference = gate_tokens(&input)?;
    let mut invariant = true;
    for _ in 0..10 {
        let mut shuffled = input.clone();
        let (g, k) = (cfg.g, cfg.k);
        let src = input.neighborhoods.data();
        let dst = shuffled.neighborhoods.data_mut();
        for p in 0..g {
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            for (j, &o) in order.iter().enumerate() {
                let (to, from) = ((p * k + j) * 3, (p * k + o) * 3);
                dst[to..to + 3].copy_from_slice(&src[from..from + 3]);
            }
        }
        invariant &= gate_tokens(&shuffled)? == reference;
    }

    let bc = BlockConfig::encoder(&cfg);
    let ea = ExternalAttention {
        prefix: "ea".into(),
        d: bc.d,
        heads: bc.heads,
        slots: bc.s_mem,
        query_projection: bc.query_projection,
    };
    let mut s = ParamStore::<f64>::new();
    ea.init(&mut s, &mut ChaCha8Rng::seed_from_u64(25))?;
    randomized(&mut s, 26, 0.3);
    let mut row_err = 0.0f64;
    for m in [1usize, 5, 64] {
        let mut tape = Tape::with_params(&s);
        let x = tape.constant(random_tensor(&[m, bc.d], m as u64, 3.0));
        let a = ea.weights(&mut tape, x)?;
        for row in tape.value(a).data().chunks(bc.s_mem) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let mut gates_in_range = true;
    let mut tape = Tape::with_params(&params64);
    let p_t = tape.constant(random_tensor(&[cfg.g, cfg.k, cfg.patch_channels], 27, 2.0));
    let (w, _) = model.gate.adaptive_saliency(&mut tape, p_t)?;
    for v in [w.channel, w.spatial] {
        gates_in_range &= tape.value(v).data().iter().all(|&x| x > 0.0 && x < 1.0);
    }

    Ok((
        mask_bad == 0 && equiv_err <= 1e-5 && invariant && row_err <= 1e-6 && gates_in_range,
        format!(
            "mask cardinality mismatches {mask_bad}/{mask_cases}, encoder permutation max diff {equiv_err:.1e} over 20 permutations, \
             gate tokens invariant to point order: {invariant}, attention row-sum error {row_err:.1e}, saliency gates in (0,1): {gates_in_range}"
        ),
    ))
}

/// Multiply-accumulate counts of one attention layer, measured on an
/// instrumented tape at m in {16, 32, 64, 128}, fitted with a quadratic.
pub fn complexity() -> Result<(bool, String)> {
    let cfg = ModelConfig::tiny();
    let bc = BlockConfig::encoder(&cfg);
    let ms = [16usize, 32, 64, 128];
    let mut fits = Vec::new();
    let mut accounting_matches = true;
    for kind in [AttentionKind::External, AttentionKind::SelfAttention] {
        let ea = ExternalAttention {
            prefix: "attn".into(),
            d: bc.d,
            heads: bc.heads,
            slots: bc.s_mem,
            query_projection: bc.query_projection,
        };
        let sa = SelfAttention { prefix: "attn".into(), d: bc.d, heads: bc.heads };
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match kind {
            AttentionKind::External => ea.init(&mut store, &mut rng)?,
            AttentionKind::SelfAttention => sa.init(&mut store, &mut rng)?,
        }
        let mut counts = Vec::new();
        for &m in &ms {
            let mut tape = Tape::with_params(&store);
            let x = tape.constant(Tensor::zeros(&[m, bc.d]));
            match kind {
                AttentionKind::External => ea.forward(&mut tape, x)?,
                AttentionKind::SelfAttention => sa.forward(&mut tape, x)?,
            };
            accounting_matches &= tape.mac_count() == attention_macs(kind, m, &bc);
            counts.push(tape.mac_count() as f64);
        }
        let xs: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
        fits.push(fit_quadratic(&xs, &counts));
    }
    let (ea, sa) = (fits[0], fits[1]);
    let ea_ratio = ea[2].abs() / ea[1].abs();
    Ok((
        accounting_matches && ea_ratio < 1e-9 && sa[2] > 0.0,
        format!(
            "external attention quadratic/linear {ea_ratio:.1e} (linear {:.0}), self-attention quadratic {:.1} (linear {:.0}), closed form matches tape: {accounting_matches}",
            ea[1], sa[2], sa[1]
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_pass() {
        for suite in [SUITES[0], SUITES[1], SUITES[2], SUITES[5]] {
            let out = run_suite(suite);
            assert!(out.passed, "{out}");
        }
    }
}
