use rand::seq::SliceRandom;

use super::{Dims, Sample, SplitDataset};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Stratified train/val/test assignment.
///
/// Split totals are the largest-remainder rounding of `n · ratio`; within
/// each class the per-split counts are the floor or ceiling of
/// `n_class · ratio`, so every class lands within one sample of its global
/// proportion. `ratios` are normalized, so counts such as `(70, 13, 13)`
/// work as well as fractions.
pub fn stratified_split(samples: &[Sample], dims: Dims, ratios: [f64; 3], seed: u64) -> Result<SplitDataset> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    let ratios = ratios.map(|r| r / total);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dims.classes];
    for (i, s) in samples.iter().enumerate() {
        s.validate(&dims)?;
        by_class[s.label].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < 3 {
            return Err(Error::Stratification(format!(
                "class {class} has {} sample(s); at least 3 are needed",
                members.len()
            )));
        }
    }

    let targets = largest_remainder(samples.len(), &ratios);
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let counts = allocate(&sizes, &ratios, targets)
        .or_else(|| {
            // The rounded split totals cannot always be met exactly; relax
            // them to the ceiling of each split's share.
            let ceil = ratios.map(|r| (samples.len() as f64 * r - 1e-9).ceil() as usize);
            allocate(&sizes, &ratios, ceil)
        })
        .ok_or_else(|| Error::Stratification("no per-class allocation fits the split ratios".into()))?;

    let mut rng = rng::stream(seed, Stream::Split);
    let mut parts: [Vec<Sample>; 3] = Default::default();
    for (class, members) in by_class.iter().enumerate() {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let mut it = members.into_iter();
        for (s, part) in parts.iter_mut().enumerate() {
            part.extend(it.by_ref().take(counts[class][s]).map(|i| samples[i].clone()));
        }
    }
    for part in parts.iter_mut() {
        part.shuffle(&mut rng);
    }
    let [train, val, test] = parts;
    Ok(SplitDataset { dims, train, val, test })
}

fn largest_remainder(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| n as f64 * r);
    let mut out = exact.map(|e| e.floor() as usize);
    let mut left = n - out.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[s] += 1;
        left -= 1;
    }
    out
}

/// Per-class split counts, each the floor or ceiling of `n_class · ratio`,
/// with split totals capped by `caps` and every class fully placed.
/// Ceilings are handed out by augmenting paths, so a class only displaces
/// another when that one can move to a split where it still has room.
fn allocate(sizes: &[usize], ratios: &[f64; 3], caps: [usize; 3]) -> Option<Vec<[usize; 3]>> {
    let exact: Vec<[f64; 3]> = sizes.iter().map(|&n| ratios.map(|r| n as f64 * r)).collect();
    let floors: Vec<[usize; 3]> = exact.iter().map(|e| e.map(|v| (v + 1e-9).floor() as usize)).collect();
    let allowed: Vec<[bool; 3]> = exact
        .iter()
        .zip(&floors)
        .map(|(e, f)| std::array::from_fn(|s| e[s] > f[s] as f64 + 1e-9))
        .collect();
    let mut room: [usize; 3] = std::array::from_fn(|s| caps[s].saturating_sub(floors.iter().map(|f| f[s]).sum()));
    if (0..3).any(|s| floors.iter().map(|f| f[s]).sum::<usize>() > caps[s]) {
        return None;
    }
    let mut extra = vec![[false; 3]; sizes.len()];
    for c in 0..sizes.len() {
        let need = sizes[c] - floors[c].iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = exact[c][a] - floors[c][a] as f64;
            let fb = exact[c][b] - floors[c][b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for _ in 0..need {
            if !augment_from(c, &order, &allowed, &mut extra, &mut room, &mut vec![false; 3]) {
                return None;
            }
        }
    }
    Some(floors.iter().zip(&extra).map(|(f, e)| std::array::from_fn(|s| f[s] + usize::from(e[s]))).collect())
}

fn augment_from(
    c: usize,
    order: &[usize; 3],
    allowed: &[[bool; 3]],
    extra: &mut [[bool; 3]],
    room: &mut [usize; 3],
    visited: &mut Vec<bool>,
) -> bool {
    for &s in order {
        if !allowed[c][s] || extra[c][s] || visited[s] {
            continue;
        }
        visited[s] = true;
        if room[s] > 0 {
            room[s] -= 1;
            extra[c][s] = true;
            return true;
        }
        // Split `s` is full: try to move some other class's ceiling out of it.
        for other in 0..extra.len() {
            if other != c && extra[other][s] {
                extra[other][s] = false;
                room[s] += 1;
                if augment_from(other, &[0, 1, 2], allowed, extra, room, visited) {
                    room[s] -= 1;
                    extra[c][s] = true;
                    return true;
                }
                room[s] -= 1;
                extra[other][s] = true;
            }
        }
    }
    false
}
