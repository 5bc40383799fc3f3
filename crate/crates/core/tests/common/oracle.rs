//! Brute-force nearest-neighbour classifier used as a test oracle. It reads
//! only the model's raw instances, schema, weights and k.

use std::collections::BTreeSet;

use coachme_core::iml::{FeatureVector, KnnModel};

pub struct OracleAnswer {
    pub label: String,
    pub confidence: f64,
    pub neighbor_ids: Vec<u64>,
}

fn ranges(model: &KnnModel) -> Vec<(f64, f64)> {
    let n = model.schema.numeric.len();
    let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); n];
    for inst in &model.instances {
        for (j, (_, v)) in inst.features.numeric.iter().enumerate() {
            if *v < out[j].0 {
                out[j].0 = *v;
            }
            if *v > out[j].1 {
                out[j].1 = *v;
            }
        }
    }
    out
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union: BTreeSet<&String> = a.iter().chain(b.iter()).collect();
    if union.is_empty() {
        return 0.0;
    }
    let common = a.iter().filter(|x| b.contains(*x)).count();
    1.0 - common as f64 / union.len() as f64
}

/// Weighted mixed distance, fields summed in schema order.
pub fn oracle_distance(
    model: &KnnModel,
    ranges: &[(f64, f64)],
    q: &FeatureVector,
    x: &FeatureVector,
) -> f64 {
    let w = &model.weights;
    let mut field = 0;
    let mut top = 0.0;
    let mut bottom = 0.0;
    for j in 0..q.numeric.len() {
        let (lo, hi) = ranges[j];
        let mut d = 0.0;
        if hi != lo {
            d = (q.numeric[j].1 - x.numeric[j].1).abs() / (hi - lo);
            d = d.clamp(0.0, 1.0);
        }
        top += w[field] * d;
        bottom += w[field];
        field += 1;
    }
    for j in 0..q.categorical.len() {
        let d = if q.categorical[j].1 == x.categorical[j].1 {
            0.0
        } else {
            1.0
        };
        top += w[field] * d;
        bottom += w[field];
        field += 1;
    }
    for j in 0..q.setvalued.len() {
        top += w[field] * jaccard(&q.setvalued[j].1, &x.setvalued[j].1);
        bottom += w[field];
        field += 1;
    }
    top / bottom
}

pub fn oracle_predict(model: &KnnModel, q: &FeatureVector) -> OracleAnswer {
    if model.instances.is_empty() {
        return OracleAnswer {
            label: model.default_label.clone(),
            confidence: 0.0,
            neighbor_ids: Vec::new(),
        };
    }
    let r = ranges(model);
    let mut all: Vec<(f64, u64, &str)> = model
        .instances
        .iter()
        .map(|i| {
            (
                oracle_distance(model, &r, q, &i.features),
                i.instance_id,
                i.label.as_str(),
            )
        })
        .collect();
    // full stable sort, then take the k nearest
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let k = model.k.min(all.len());
    let nearest = &all[..k];

    let mut tally: Vec<(&str, usize)> = Vec::new();
    for (_, _, label) in nearest {
        match tally.iter_mut().find(|(l, _)| l == label) {
            Some(entry) => entry.1 += 1,
            None => tally.push((label, 1)),
        }
    }
    // tally is in order of first (nearest) appearance; keep the first maximum
    let mut best = tally[0];
    for entry in &tally[1..] {
        if entry.1 > best.1 {
            best = *entry;
        }
    }
    OracleAnswer {
        label: best.0.to_string(),
        confidence: best.1 as f64 / k as f64,
        neighbor_ids: nearest.iter().map(|n| n.1).collect(),
    }
}
