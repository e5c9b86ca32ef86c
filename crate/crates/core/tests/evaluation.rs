use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotenergy::autograd::Tensor;
use slotenergy::datasets::{generate_scene, DatasetConfig, ObjectSpec, SceneRecord, ShapeKind};
use slotenergy::evaluation::*;
use slotenergy::Error;

/// ARI from explicit pair enumeration.
fn ari_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut in_a, mut in_b) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            both += (sa && sb) as u8 as f64;
            in_a += sa as u8 as f64;
            in_b += sb as u8 as f64;
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let expected = in_a * in_b / pairs;
    let max = 0.5 * (in_a + in_b);
    if max == expected {
        1.0
    } else {
        (both - expected) / (max - expected)
    }
}

#[test]
fn ari_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.gen_range(2..120);
        let ka = rng.gen_range(1..6);
        let kb = rng.gen_range(1..6);
        let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kb)).collect();
        let got = ari(&a, &b).unwrap();
        assert!((got - ari_pairs(&a, &b)).abs() <= 1e-12);
    }
}

#[test]
fn ari_reference_values() {
    assert_eq!(ari(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
    assert!((ari(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap() - 4.0 / 7.0).abs() < 1e-15);
    assert!((ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-15);
    assert_eq!(ari(&[3, 3, 3], &[1, 1, 1]).unwrap(), 1.0);
    assert!(matches!(ari(&[0, 1], &[0]), Err(Error::Shape(_))));
    assert!(ari(&[0], &[0]).is_err());
}

#[test]
fn argmax_ties_go_to_the_lowest_slot() {
    let m = Tensor::<f64>::new(vec![3, 1, 3], vec![0.2, 0.5, 0.1, 0.2, 0.5, 0.3, 0.6, 0.0, 0.3]);
    assert_eq!(masks_to_labels(&m), vec![2, 0, 1]);
    let flat = Tensor::<f64>::full(vec![4, 2, 2], 0.25);
    assert_eq!(masks_to_labels(&flat), vec![0; 4]);
}

fn scene_from_labels(h: usize, w: usize, labels: &[usize], n_obj: usize) -> SceneRecord {
    let masks = (0..=n_obj).map(|k| labels.iter().map(|&l| l == k).collect()).collect();
    SceneRecord {
        height: h,
        width: w,
        image: vec![0.0; h * w * 3],
        masks,
        objects: (0..n_obj)
            .map(|i| ObjectSpec {
                shape: ShapeKind::Square,
                color: [1.0, 0.0, 0.0],
                size: 1.0,
                position: [i as f32, 0.0],
                z_order: i as u8 + 1,
            })
            .collect(),
        jitter: None,
    }
}

fn one_hot(h: usize, w: usize, labels: &[usize], k: usize) -> Tensor<f64> {
    let n = h * w;
    let mut d = vec![0.0; k * n];
    for (p, &l) in labels.iter().enumerate() {
        d[l * n + p] = 1.0;
    }
    Tensor::new(vec![k, h, w], d)
}

#[test]
fn foreground_ari_ignores_background_pixels() {
    let truth = [0, 0, 1, 1, 2, 2];
    let scene = scene_from_labels(2, 3, &truth, 2);
    // Background split across slots does not matter.
    let pred = one_hot(2, 3, &[3, 1, 0, 0, 2, 2], 4);
    assert_eq!(foreground_ari(&pred, &scene).unwrap(), Some(1.0));
    let merged = one_hot(2, 3, &[0, 0, 1, 1, 1, 1], 2);
    assert_eq!(foreground_ari(&merged, &scene).unwrap(), Some(0.0));
    let empty = scene_from_labels(2, 3, &[0; 6], 0);
    assert_eq!(foreground_ari(&pred, &empty).unwrap(), None);
    assert!(foreground_ari(&one_hot(3, 2, &[0; 6], 2), &scene).is_err());
}

fn permutations(items: &[usize], len: usize) -> Vec<Vec<usize>> {
    if len == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut tail in permutations(&rest, len - 1) {
            tail.insert(0, x);
            out.push(tail);
        }
    }
    out
}

/// Exhaustive search returning the lexicographically smallest optimum.
fn brute_force(cost: &[Vec<f64>]) -> (f64, Vec<Option<usize>>) {
    let n = cost.len();
    let m = cost[0].len();
    let mut best: Option<(f64, Vec<Option<usize>>)> = None;
    let key = |v: &Vec<Option<usize>>| v.iter().map(|c| c.unwrap_or(usize::MAX)).collect::<Vec<_>>();
    let mut consider = |assign: Vec<Option<usize>>| {
        let c: f64 = assign
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| cost[r][c]))
            .sum();
        let better = match &best {
            None => true,
            Some((bc, ba)) => c < *bc - 1e-9 || ((c - bc).abs() <= 1e-9 && key(&assign) < key(ba)),
        };
        if better {
            best = Some((c, assign));
        }
    };
    if n <= m {
        for p in permutations(&(0..m).collect::<Vec<_>>(), n) {
            consider(p.into_iter().map(Some).collect());
        }
    } else {
        for p in permutations(&(0..n).collect::<Vec<_>>(), m) {
            let mut a = vec![None; n];
            for (c, &r) in p.iter().enumerate() {
                a[r] = Some(c);
            }
            consider(a);
        }
    }
    best.unwrap()
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=6);
        // Every other matrix has small integer costs, so ties are common.
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..m)
                    .map(|_| {
                        if trial % 2 == 0 {
                            rng.gen_range(-1.0..1.0)
                        } else {
                            rng.gen_range(0..3) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let got = hungarian(&cost).unwrap();
        let (want_cost, want) = brute_force(&cost);
        assert_eq!(got.row_to_col, want, "trial {trial}: {cost:?}");
        assert!((got.cost - want_cost).abs() <= 1e-12);
    }
}

#[test]
fn hungarian_equal_costs_and_errors() {
    let a = hungarian(&vec![vec![1.0; 4]; 3]).unwrap();
    assert_eq!(a.row_to_col, vec![Some(0), Some(1), Some(2)]);
    let tall = hungarian(&vec![vec![0.0; 2]; 4]).unwrap();
    assert_eq!(tall.row_to_col, vec![Some(0), Some(1), None, None]);
    assert!(hungarian(&[vec![0.0, 1.0], vec![0.0]]).is_err());
    assert!(hungarian(&[vec![f64::NAN]]).is_err());
    assert_eq!(hungarian(&[]).unwrap().row_to_col, Vec::<Option<usize>>::new());
}

fn random_samples(rng: &mut ChaCha8Rng, n: usize, palette: usize) -> Vec<ProbeSample> {
    (0..n)
        .map(|_| {
            let color_id = rng.gen_range(0..palette);
            ProbeSample {
                latent: vec![],
                color_id,
                object: ObjectSpec {
                    // Skewed so chance accuracy is not uniform.
                    shape: if rng.gen_bool(0.6) { ShapeKind::Circle } else { ShapeKind::ALL[rng.gen_range(0..3)] },
                    color: [color_id as f32 * 0.1, rng.gen(), rng.gen()],
                    size: rng.gen_range(4.0..8.0),
                    position: [rng.gen_range(0.0..48.0), rng.gen_range(0.0..48.0)],
                    z_order: 1,
                },
            }
        })
        .collect()
}

fn truth_latent(s: &ProbeSample, palette: usize) -> Vec<f64> {
    let mut v = vec![0.0; 3 + palette];
    v[s.object.shape.id() as usize] = 1.0;
    v[3 + s.color_id] = 1.0;
    v.extend(s.object.color.iter().map(|&c| c as f64));
    v.extend(s.object.position.iter().map(|&c| c as f64));
    v.push(s.object.size as f64);
    v
}

fn score(scores: &[PropertyScore], p: Property) -> f64 {
    scores.iter().find(|s| s.property == p).unwrap().value
}

#[test]
fn probe_recovers_ground_truth_latents() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut train = random_samples(&mut rng, 300, 6);
    let mut test = random_samples(&mut rng, 200, 6);
    for s in train.iter_mut().chain(test.iter_mut()) {
        s.latent = truth_latent(s, 6);
    }
    let scores = probe_eval(&probe_fit(&train).unwrap(), &test).unwrap();
    for s in &scores {
        assert!((s.value - 1.0).abs() < 1e-9, "{s:?}");
    }
}

#[test]
fn probe_on_noise_is_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut train = random_samples(&mut rng, 4000, 6);
    let mut test = random_samples(&mut rng, 2000, 6);
    for s in train.iter_mut().chain(test.iter_mut()) {
        s.latent = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    }
    let scores = probe_eval(&probe_fit(&train).unwrap(), &test).unwrap();
    let majority = |f: &dyn Fn(&ProbeSample) -> usize, k: usize| {
        (0..k).map(|c| test.iter().filter(|s| f(s) == c).count()).max().unwrap() as f64 / test.len() as f64
    };
    let shape_major = majority(&|s| s.object.shape.id() as usize, 3);
    assert!((score(&scores, Property::Shape) - shape_major).abs() < 0.03);
    assert!(score(&scores, Property::ColorId) < majority(&|s| s.color_id, 6) + 0.03);
    for p in [Property::ColorRgb, Property::Position, Property::Size] {
        assert!(score(&scores, p).abs() < 0.02, "{p:?}");
    }
}

#[test]
fn r_squared_of_the_mean_predictor_is_zero() {
    let t = nalgebra::DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 6.0]);
    let p = nalgebra::DMatrix::from_element(4, 1, 3.0);
    assert!(r_squared(&t, &p).abs() < 1e-15);
    assert_eq!(r_squared(&t, &t), 1.0);
}

#[test]
fn probe_needs_samples_of_equal_width() {
    assert!(probe_fit(&[]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = random_samples(&mut rng, 3, 2);
    s[0].latent = vec![0.0; 2];
    s[1].latent = vec![0.0; 3];
    s[2].latent = vec![0.0; 2];
    assert!(matches!(probe_fit(&s), Err(Error::Shape(_))));
}

#[test]
fn matching_pairs_slots_with_their_objects() {
    let truth = [0, 1, 1, 2, 2, 0];
    let scene = scene_from_labels(2, 3, &truth, 2);
    let pred = one_hot(2, 3, &[2, 0, 0, 1, 1, 2], 3);
    let mut pairs = match_slots(&pred, &scene).unwrap();
    pairs.sort();
    assert_eq!(pairs, vec![(0, 0), (1, 1)]);
}

#[test]
fn ablation_grid_records_failures_and_continues() {
    let space = AblationSpace {
        epsilon: vec![0.1, 0.2],
        steps: vec![3],
        noise_scale: vec![0.0, 1.0],
    };
    let points = space.points();
    assert_eq!(points.len(), 4);
    let rows = ablation_grid(&points, &[0, 1], |p, seed| {
        if p.epsilon > 0.15 && seed == 1 {
            Err(Error::Precondition("diverged".into()))
        } else {
            Ok(p.epsilon + seed as f64)
        }
    });
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].scores, vec![0.1, 1.1]);
    assert_eq!(rows[2].scores, vec![0.2]);
    assert_eq!(rows[2].errors.len(), 1);
    assert_eq!(rows[2].sd, 0.0);
    let empty = AblationSpace {
        epsilon: vec![],
        ..space
    };
    assert!(ablation_grid(&empty.points(), &[0], |_, _| Ok(1.0)).is_empty());
}

#[test]
fn mean_and_sample_deviation() {
    let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
    assert_eq!(m, 2.0);
    assert!((s - 1.0).abs() < 1e-15);
}

#[test]
fn ood_evaluation_rejects_too_few_slots() {
    use slotenergy::model::{Model, ModelConfig};
    let cfg = DatasetConfig {
        height: 16,
        width: 16,
        object_count_range: [4, 4],
        size_range: [2.0, 3.0],
        min_visible_pixels: 2,
        ..DatasetConfig::default()
    };
    let scenes: Vec<_> = (0..2).map(|i| generate_scene(i, &cfg).unwrap()).collect();
    let model = Model::new(ModelConfig {
        height: 16,
        width: 16,
        ..ModelConfig::default()
    })
    .unwrap();
    let params = model.init_params::<f32>(0);
    let sampler = model.config.sampler.clone();
    let err = eval_ood_counts(&model, &params, &scenes, 4, &sampler, 0, 2).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
    let ok = eval_ood_counts(&model, &params, &scenes, 5, &sampler, 0, 2).unwrap();
    assert_eq!(ok.scores.len() + ok.skipped, 2);
}

#[test]
fn foreground_mass_excludes_the_background_slot() {
    let truth = [0, 0, 0, 0, 1, 1];
    let scene = scene_from_labels(2, 3, &truth, 1);
    let pred = one_hot(2, 3, &[2, 2, 2, 2, 0, 1], 3);
    assert!((foreground_mask_mass(&pred, &scene) - 2.0 / 6.0).abs() < 1e-15);
}
