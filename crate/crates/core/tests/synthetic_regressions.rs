//! Regression values measured once on the default synthetic seed.

use contour_spt::data::{dataset_split, synth_generate, Camera, Dataset, SynthConfig};
use contour_spt::trainer::{make_triplet_batches, TrainConfig};

fn pixels(data: &Dataset, k: usize) -> &[f64] {
    data.images[k].tensor().data()
}

fn indices(data: &Dataset, identity: usize, camera: Camera) -> Vec<usize> {
    (0..data.len())
        .filter(|&k| data.meta[k].identity == identity && data.meta[k].camera == camera)
        .collect()
}

fn mean_l1(data: &Dataset, xs: &[usize], ys: &[usize]) -> f64 {
    let mut total = 0.0;
    for &x in xs {
        for &y in ys {
            let (a, b) = (pixels(data, x), pixels(data, y));
            total += a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
        }
    }
    total / (xs.len() * ys.len()) as f64
}

#[test]
fn clothing_change_stays_closer_than_another_identity() {
    let data = synth_generate(&SynthConfig::default()).unwrap();
    let ids = data.identities();
    let mut closer = 0;
    for &i in &ids {
        let own_a = indices(&data, i, Camera::A);
        let cross = mean_l1(&data, &own_a, &indices(&data, i, Camera::C));
        let others: Vec<usize> = ids
            .iter()
            .filter(|&&j| j != i)
            .flat_map(|&j| indices(&data, j, Camera::A))
            .collect();
        if cross < mean_l1(&data, &own_a, &others) {
            closer += 1;
        }
    }
    let fraction = closer as f64 / ids.len() as f64;
    println!("A-vs-C closer than A-vs-other on {closer}/{} identities", ids.len());
    assert!(fraction >= 0.95);
    assert_eq!(closer, FROZEN_CLOSER);
}

const FROZEN_CLOSER: usize = 30;

#[test]
fn nearest_centroid_separates_training_identities() {
    let data = synth_generate(&SynthConfig::default()).unwrap();
    let (train, _) = dataset_split(&data.identities(), 2.0 / 3.0, 7).unwrap();
    let dim = pixels(&data, 0).len();
    let groups: Vec<Vec<usize>> = train.iter().map(|&i| indices(&data, i, Camera::A)).collect();
    let centroids: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut c = vec![0.0; dim];
            for &k in g {
                for (s, v) in c.iter_mut().zip(pixels(&data, k)) {
                    *s += v / g.len() as f64;
                }
            }
            c
        })
        .collect();
    let mut correct = 0;
    let mut total = 0;
    for (truth, g) in groups.iter().enumerate() {
        for &k in g {
            let x = pixels(&data, k);
            let d = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..centroids.len())
                .min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b])))
                .unwrap();
            correct += usize::from(best == truth);
            total += 1;
        }
    }
    println!("nearest centroid {correct}/{total}");
    assert!(correct as f64 / total as f64 > 0.9);
    assert_eq!(correct, FROZEN_CENTROID_HITS);
}

const FROZEN_CENTROID_HITS: usize = 400;

#[test]
fn one_epoch_of_positives_is_cross_variant() {
    let data = synth_generate(&SynthConfig::default()).unwrap();
    let (train, _) = dataset_split(&data.identities(), 2.0 / 3.0, 7).unwrap();
    let set = data.restrict(&train);
    let cfg = TrainConfig::default();
    let plan = make_triplet_batches(&set, cfg.triplets_per_epoch.unwrap(), cfg.batch_triplets, cfg.sampler_seed, 0).unwrap();
    let triplets: Vec<_> = plan.batches.iter().flatten().collect();
    let cross = triplets
        .iter()
        .filter(|t| set.meta[t.anchor].variant != set.meta[t.positive].variant)
        .count();
    println!("cross-variant positives {cross}/{}", triplets.len());
    assert!(cross as f64 >= 0.95 * triplets.len() as f64);
    assert_eq!((cross, plan.same_variant_positives), FROZEN_COVERAGE);
}

const FROZEN_COVERAGE: (usize, usize) = (256, 0);
