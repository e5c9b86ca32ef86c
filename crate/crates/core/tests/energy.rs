use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use slotenergy::autograd::{Float, Graph, Tensor};
use slotenergy::encoder::FeatureMap;
use slotenergy::energy::{
    compose_energies, permute_slots, EnergyConfig, EnergyModel, EnergyVariant, LatentEnergy,
    LatentSet,
};
use slotenergy::sampler::langevin_step;
use slotenergy::Params;

const DH: usize = 8;
const DZ: usize = 6;

fn model(variant: EnergyVariant, dh: usize, dz: usize) -> EnergyModel {
    EnergyModel::new(
        EnergyConfig {
            variant,
            ..Default::default()
        },
        dh,
        dz,
    )
}

/// Initialized parameters with every entry jittered, so that layer-norm
/// offsets and biases are non-trivial.
fn random_params<F: Float>(m: &EnergyModel, seed: u64) -> Params<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    m.init_params(&mut p, &mut rng);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += F::from_f64(0.1 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    p
}

fn random<F: Float>(shape: &[usize], rng: &mut impl Rng) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| F::from_f64(rng.sample(StandardNormal))).collect(),
    )
}

fn features<F: Float>(b: usize, side: usize, dh: usize, rng: &mut impl Rng) -> FeatureMap<F> {
    FeatureMap {
        features: random(&[b, side * side, dh], rng),
        grid: (side, side),
    }
}

fn latents<F: Float>(b: usize, k: usize, dz: usize, rng: &mut impl Rng) -> LatentSet<F> {
    LatentSet::new(random(&[b, k, dz], rng)).unwrap()
}

fn shuffled(k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

#[test]
fn energy_is_invariant_to_slot_permutations() {
    for variant in [EnergyVariant::Attention, EnergyVariant::Sum] {
        let m = model(variant, DH, DZ);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for draw in 0..10 {
            let p = random_params::<f32>(&m, draw);
            let h = features::<f32>(2, 3, DH, &mut rng);
            let z = latents::<f32>(2, 5, DZ, &mut rng);
            let e = m.energy(&p, &h, &z).unwrap();
            for _ in 0..100 {
                let perm = shuffled(5, &mut rng);
                let ep = m.energy(&p, &h, &z.permute_slots(&perm)).unwrap();
                for (a, b) in e.data().iter().zip(ep.data()) {
                    assert!(
                        (a - b).abs() <= 1e-5 * (1.0 + a.abs()),
                        "{variant:?}: {a} vs {b} under {perm:?}"
                    );
                }
            }
        }
    }
}

#[test]
fn energy_gradient_is_permutation_equivariant() {
    for variant in [EnergyVariant::Attention, EnergyVariant::Sum] {
        let m = model(variant, DH, DZ);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for draw in 0..5 {
            let p = random_params::<f64>(&m, 100 + draw);
            let h = features::<f64>(2, 3, DH, &mut rng);
            let z = latents::<f64>(2, 4, DZ, &mut rng);
            let f = compose_energies(&m, &p, vec![(h, 1.0)]).unwrap();
            let (_, g) = f.value_and_grad(&z.latents);
            for _ in 0..10 {
                let perm = shuffled(4, &mut rng);
                let (_, gp) = f.value_and_grad(&permute_slots(&z.latents, &perm));
                assert!(gp.max_abs_diff(&permute_slots(&g, &perm)) <= 1e-5);
            }
        }
    }
}

#[test]
fn langevin_step_commutes_with_slot_permutations() {
    let m = model(EnergyVariant::Attention, DH, DZ);
    let p = random_params::<f64>(&m, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = features::<f64>(2, 3, DH, &mut rng);
    let f = compose_energies(&m, &p, vec![(h, 1.0)]).unwrap();
    let z = latents::<f64>(2, 4, DZ, &mut rng);
    let noise = random::<f64>(&[2, 4, DZ], &mut rng);
    let next = langevin_step(&f, &z, 0.1, 1.0, &noise).unwrap();
    for _ in 0..20 {
        let perm = shuffled(4, &mut rng);
        let next_p = langevin_step(
            &f,
            &z.permute_slots(&perm),
            0.1,
            1.0,
            &permute_slots(&noise, &perm),
        )
        .unwrap();
        assert!(next_p.latents.max_abs_diff(&permute_slots(&next.latents, &perm)) <= 1e-5);
    }
}

fn fd_check(variant: EnergyVariant) {
    let (dh, dz, k) = (12, 8, 3);
    let m = model(variant, dh, dz);
    let p = random_params::<f64>(&m, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let h = features::<f64>(1, 8, dh, &mut rng);
    let z = latents::<f64>(1, k, dz, &mut rng);
    let f = compose_energies(&m, &p, vec![(h, 1.0)]).unwrap();
    let (_, g) = f.value_and_grad(&z.latents);
    let step = 1e-5;
    let fd: Vec<f64> = (0..z.latents.numel())
        .map(|i| {
            let mut plus = z.latents.clone();
            plus.data_mut()[i] += step;
            let mut minus = z.latents.clone();
            minus.data_mut()[i] -= step;
            let ep = f.value_and_grad(&plus).0.item();
            let em = f.value_and_grad(&minus).0.item();
            (ep - em) / (2.0 * step)
        })
        .collect();
    let err = rel_err(g.data(), &fd);
    assert!(err <= 1e-5, "{variant:?}: relative error {err:e}");
}

#[test]
fn attention_energy_gradient_matches_finite_differences() {
    fd_check(EnergyVariant::Attention);
}

#[test]
fn sum_energy_gradient_matches_finite_differences() {
    fd_check(EnergyVariant::Sum);
}

#[test]
fn hessian_vector_product_matches_finite_differences() {
    for variant in [EnergyVariant::Attention, EnergyVariant::Sum] {
        let m = model(variant, DH, DZ);
        let p = random_params::<f64>(&m, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let h = features::<f64>(1, 3, DH, &mut rng);
        let z = random::<f64>(&[1, 3, DZ], &mut rng);
        let v = random::<f64>(&[1, 3, DZ], &mut rng);
        let f = compose_energies(&m, &p, vec![(h, 1.0)]).unwrap();

        let g = Graph::new();
        let zv = g.leaf(z.clone());
        let grad = g.grad(f.energy_var(&g, zv).sum_all(), &[zv])[0];
        let dir = grad.mul(g.leaf(v.clone())).sum_all();
        let hvp = g.grad(dir, &[zv])[0].tensor();

        let step = 1e-5;
        let shift = |s: f64| z.zip_map(&v, |a, b| a + s * b);
        let gp = f.value_and_grad(&shift(step)).1;
        let gm = f.value_and_grad(&shift(-step)).1;
        let fd: Vec<f64> = gp
            .data()
            .iter()
            .zip(gm.data())
            .map(|(a, b)| (a - b) / (2.0 * step))
            .collect();
        let err = rel_err(hvp.data(), &fd);
        assert!(err <= 1e-4, "{variant:?}: relative error {err:e}");
    }
}

#[test]
fn sum_energy_is_additive_over_slots() {
    let m = model(EnergyVariant::Sum, DH, DZ);
    let p = random_params::<f64>(&m, 41);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let h = features::<f64>(1, 3, DH, &mut rng);
    let z = latents::<f64>(1, 2, DZ, &mut rng);
    let single = |k: usize| {
        let zk = Tensor::new(vec![1, 1, DZ], z.latents.data()[k * DZ..(k + 1) * DZ].to_vec());
        m.energy(&p, &h, &LatentSet::new(zk).unwrap()).unwrap().item()
    };
    let (e1, e2) = (single(0), single(1));
    assert_eq!(m.energy_sum(&p, &h, &z).unwrap().item(), e1 + e2);

    let dup = Tensor::new(vec![1, 2, DZ], [&z.latents.data()[..DZ]; 2].concat());
    assert_eq!(
        m.energy_sum(&p, &h, &LatentSet::new(dup).unwrap()).unwrap().item(),
        2.0 * e1
    );
}

#[test]
fn variant_specific_entry_points_check_the_variant() {
    let m = model(EnergyVariant::Sum, DH, DZ);
    let p = random_params::<f64>(&m, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = features::<f64>(1, 2, DH, &mut rng);
    let z = latents::<f64>(1, 2, DZ, &mut rng);
    assert!(m.energy_attention(&p, &h, &z).is_err());
    assert!(m.energy_sum(&p, &h, &z).is_ok());
}

#[test]
fn shape_errors_are_reported() {
    let m = model(EnergyVariant::Attention, DH, DZ);
    let p = random_params::<f64>(&m, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = features::<f64>(1, 2, DH, &mut rng);
    assert!(m.energy(&p, &h, &latents(1, 2, DZ + 1, &mut rng)).is_err());
    assert!(m.energy(&p, &h, &latents(2, 2, DZ, &mut rng)).is_err());
    assert!(m.energy(&p, &features(1, 2, DH + 1, &mut rng), &latents(1, 2, DZ, &mut rng)).is_err());
    assert!(LatentSet::new(Tensor::<f64>::zeros([1, 0, DZ])).is_err());
    assert!(m
        .cross_attention_block(&p, 5, &h, &latents(1, 2, DZ, &mut rng))
        .is_err());
}

#[test]
fn composition_is_linear_in_the_weights() {
    let m = model(EnergyVariant::Attention, DH, DZ);
    let p = random_params::<f64>(&m, 51);
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let h1 = features::<f64>(2, 3, DH, &mut rng);
    let h2 = features::<f64>(2, 3, DH, &mut rng);
    let z = random::<f64>(&[2, 3, DZ], &mut rng);
    let plain = |h: &FeatureMap<f64>| {
        compose_energies(&m, &p, vec![(h.clone(), 1.0)])
            .unwrap()
            .value_and_grad(&z)
    };
    let (e1, g1) = plain(&h1);
    let (e2, g2) = plain(&h2);
    let direct = m.energy(&p, &h1, &LatentSet::new(z.clone()).unwrap()).unwrap();
    assert_eq!(e1, direct);

    let half = compose_energies(&m, &p, vec![(h1.clone(), 0.5), (h1.clone(), 0.5)]).unwrap();
    let (eh, gh) = half.value_and_grad(&z);
    assert_eq!(eh, e1);
    assert!(gh.max_abs_diff(&g1) <= 1e-12);

    let diff = compose_energies(&m, &p, vec![(h1.clone(), 1.0), (h2, -1.0)]).unwrap();
    let (ed, gd) = diff.value_and_grad(&z);
    assert!(ed.max_abs_diff(&e1.zip_map(&e2, |a, b| a - b)) <= 1e-6);
    assert!(gd.max_abs_diff(&g1.zip_map(&g2, |a, b| a - b)) <= 1e-6);

    let twice = compose_energies(&m, &p, vec![(h1.clone(), 1.0), (h1, 1.0)]).unwrap();
    assert_eq!(twice.value_and_grad(&z).0, e1.map(|v| 2.0 * v));
}

#[test]
fn composition_rejects_bad_terms() {
    let m = model(EnergyVariant::Attention, DH, DZ);
    let p = random_params::<f64>(&m, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!(compose_energies::<f64>(&m, &p, vec![]).is_err());
    let h = features::<f64>(1, 3, DH, &mut rng);
    assert!(compose_energies(&m, &p, vec![(h.clone(), 1.0), (features(1, 2, DH, &mut rng), 1.0)]).is_err());
    assert!(compose_energies(&m, &p, vec![(h, f64::NAN)]).is_err());
}

fn ln(x: &[f64], scale: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    x.iter()
        .zip(scale.iter().zip(bias))
        .map(|(v, (s, b))| (v - mean) * inv * s + b)
        .collect()
}

fn dense(x: &[f64], p: &Params<f64>, name: &str) -> Vec<f64> {
    let w = p.get(&format!("{name}.w")).unwrap();
    let b = p.get(&format!("{name}.b")).unwrap();
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout)
        .map(|j| b.data()[j] + (0..din).map(|i| x[i] * w.data()[i * dout + j]).sum::<f64>())
        .collect()
}

#[test]
fn single_slot_block_matches_closed_form() {
    let m = model(EnergyVariant::Attention, DH, DZ);
    let p = random_params::<f64>(&m, 61);
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let h = features::<f64>(1, 3, DH, &mut rng);
    let z = latents::<f64>(1, 1, DZ, &mut rng);
    let out = m.cross_attention_block(&p, 0, &h, &z).unwrap();

    let get = |n: &str| p.get(&format!("energy.block0.{n}")).unwrap().data().to_vec();
    let zn = ln(z.latents.data(), &get("ln_z.scale"), &get("ln_z.bias"));
    let attn = dense(&dense(&zn, &p, "energy.block0.v"), &p, "energy.block0.o");
    for (loc, row) in h.features.data().chunks(DH).enumerate() {
        let h1: Vec<f64> = row.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let hn = ln(&h1, &get("ln_mlp.scale"), &get("ln_mlp.bias"));
        let hidden: Vec<f64> = dense(&hn, &p, "energy.block0.mlp.fc1")
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let mlp = dense(&hidden, &p, "energy.block0.mlp.fc2");
        for d in 0..DH {
            let want = h1[d] + mlp[d];
            let got = out.features.data()[loc * DH + d];
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn block_output_is_invariant_to_slot_order() {
    let m = model(EnergyVariant::Attention, DH, DZ);
    let p = random_params::<f32>(&m, 71);
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let h = features::<f32>(2, 3, DH, &mut rng);
    let z = latents::<f32>(2, 5, DZ, &mut rng);
    let out = m.cross_attention_block(&p, 1, &h, &z).unwrap();
    for _ in 0..20 {
        let perm = shuffled(5, &mut rng);
        let outp = m.cross_attention_block(&p, 1, &h, &z.permute_slots(&perm)).unwrap();
        assert!(outp.features.max_abs_diff(&out.features) <= 1e-5);
    }
}
