use std::collections::HashMap;

use modalnet::data::{generate_dataset, generate_sample, Batcher, GeneratorConfig, Split, SyntheticSample};

fn config(samples: usize) -> GeneratorConfig {
    GeneratorConfig { train_samples: samples, test_samples: samples / 4, ..GeneratorConfig::default() }
}

/// Object id read off the mask by majority vote over non-background pixels.
fn mask_object(s: &SyntheticSample) -> usize {
    let c = s.object_mask.shape().c();
    let mut votes = vec![0usize; c];
    for px in s.object_mask.data().chunks(c) {
        let hot = px.iter().position(|&v| v == 1.0).unwrap();
        votes[hot] += 1;
    }
    (1..c).max_by_key(|&k| (votes[k], std::cmp::Reverse(k))).unwrap() - 1
}

/// Motion read off the flow: sign pattern of the mean over moving pixels.
fn flow_motion(s: &SyntheticSample) -> (i64, i64) {
    let (mut sx, mut sy) = (0.0, 0.0);
    for px in s.flow.data().chunks(2) {
        if px[0].abs() + px[1].abs() > 0.5 {
            sx += px[0];
            sy += px[1];
        }
    }
    (sx.signum() as i64 * (sx.abs() > 1.0) as i64, sy.signum() as i64 * (sy.abs() > 1.0) as i64)
}

/// Colour class of the brightest pixels.
fn rgb_colour(s: &SyntheticSample) -> usize {
    let mut sums = [0.0; 3];
    for px in s.rgb.data().chunks(3) {
        if px.iter().sum::<f64>() > 0.6 {
            for c in 0..3 {
                sums[c] += px[c];
            }
        }
    }
    let on: Vec<bool> = sums.iter().map(|&v| v > 0.5 * sums.iter().cloned().fold(0.0, f64::max)).collect();
    match (on[0], on[1], on[2]) {
        (true, true, _) => 3,
        (true, false, _) => 0,
        (false, true, _) => 1,
        _ => 2,
    }
}

/// Fits a majority-label lookup table on `train` and scores it on `test`.
fn lookup_accuracy<K: std::hash::Hash + Eq>(train: &[SyntheticSample], test: &[SyntheticSample], key: impl Fn(&SyntheticSample) -> K) -> f64 {
    let mut table: HashMap<K, HashMap<usize, usize>> = HashMap::new();
    for s in train {
        *table.entry(key(s)).or_default().entry(s.label).or_default() += 1;
    }
    let hits = test
        .iter()
        .filter(|s| {
            table
                .get(&key(s))
                .and_then(|counts| counts.iter().max_by_key(|(l, c)| (**c, std::cmp::Reverse(**l))).map(|(l, _)| *l))
                == Some(s.label)
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn single_modalities_are_insufficient_and_pairs_decide() {
    let c = config(4000);
    let train = generate_dataset(&c, Split::Train).unwrap();
    let test = generate_dataset(&c, Split::Test).unwrap();
    for s in &train[..200] {
        assert_eq!(mask_object(s), s.object);
        assert_eq!(rgb_colour(s), s.object % 4);
    }
    let object_only = lookup_accuracy(&train, &test, mask_object);
    let flow_only = lookup_accuracy(&train, &test, flow_motion);
    let rgb_flow = lookup_accuracy(&train, &test, |s| (rgb_colour(s), flow_motion(s)));
    let object_flow = lookup_accuracy(&train, &test, |s| (mask_object(s), flow_motion(s)));
    let bound = 1.0 / c.motion_patterns.min(c.num_objects) as f64;
    assert!(object_only <= bound + 0.05, "object only {object_only}");
    assert!(flow_only <= 1.0 / 8.0 + 0.05, "flow only {flow_only}");
    assert!(rgb_flow <= 0.5 + 0.05, "rgb and flow {rgb_flow}");
    eprintln!("object {object_only} flow {flow_only} rgb+flow {rgb_flow} object+flow {object_flow}");
    assert!(object_flow >= 0.97, "object and flow {object_flow}");
}

#[test]
fn flip_rate_matches_noise() {
    let c = GeneratorConfig { mask_noise_rate: 0.2, frames: 2, ..config(0) };
    let clean_cfg = GeneratorConfig { mask_noise_rate: 0.0, ..c.clone() };
    let (mut flipped, mut total) = (0usize, 0usize);
    let mut i = 0;
    while total < 10_000 {
        let noisy = generate_sample(&c, Split::Train, i);
        let clean = generate_sample(&clean_cfg, Split::Train, i);
        for (a, b) in noisy.object_mask.data().chunks(c.mask_channels()).zip(clean.object_mask.data().chunks(c.mask_channels())) {
            flipped += (a != b) as usize;
            total += 1;
        }
        i += 1;
    }
    let rate = flipped as f64 / total as f64;
    assert!((0.18..=0.22).contains(&rate), "flip rate {rate}");
}

#[test]
fn one_motion_makes_object_sufficient() {
    let c = GeneratorConfig { motion_patterns: 1, num_classes: 8, ..config(400) };
    let train = generate_dataset(&c, Split::Train).unwrap();
    assert_eq!(lookup_accuracy(&train, &train, mask_object), 1.0);
}

#[test]
fn batcher_sequences() {
    let a: Vec<Vec<usize>> = Batcher::new(50, 4, 9).unwrap().take(30).collect();
    let b: Vec<Vec<usize>> = Batcher::new(50, 4, 9).unwrap().take(30).collect();
    assert_eq!(a, b);
    let mut epoch: Vec<usize> = a[..12].concat();
    epoch.sort_unstable();
    epoch.dedup();
    assert_eq!(epoch.len(), 48);
    let firsts: std::collections::HashSet<Vec<usize>> = (0..5)
        .map(|seed| {
            let mut f = Batcher::new(50, 4, seed).unwrap().next().unwrap();
            f.sort_unstable();
            f
        })
        .collect();
    assert_eq!(firsts.len(), 5);
}

#[test]
fn generation_is_a_pure_function_of_index() {
    let c = config(20);
    let all = generate_dataset(&c, Split::Train).unwrap();
    assert_eq!(generate_sample(&c, Split::Train, 13), all[13]);
    assert_ne!(generate_sample(&c, Split::Test, 13), all[13]);
}
