//! Tag-based activity clustering: machine proposals, caregiver confirmation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::PlanningError;
use crate::domain::{ActivityCluster, ActivityPool};

pub fn jaccard_similarity(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Average-linkage agglomerative clustering over Jaccard similarity of tag
/// sets. Merges the most similar pair while its similarity is at least
/// `threshold`; ties go to the pair whose smallest member ids sort first.
///
/// Output clusters are unconfirmed, ordered by smallest member id and
/// numbered `c1`, `c2`, ...
pub fn propose_clusters(pool: &ActivityPool, threshold: f64) -> Vec<ActivityCluster> {
    let activities: Vec<_> = pool.iter().collect();
    let n = activities.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = jaccard_similarity(&activities[i].tags, &activities[j].tags);
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }

    // member indices; pool order is id order, so each cluster's first member
    // is its smallest id and the list stays sorted by it
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let total: f64 = clusters[a]
                    .iter()
                    .flat_map(|&i| clusters[b].iter().map(move |&j| (i, j)))
                    .map(|(i, j)| sim[i][j])
                    .sum();
                let avg = total / (clusters[a].len() * clusters[b].len()) as f64;
                if best.is_none_or(|(s, _, _)| avg > s) {
                    best = Some((avg, a, b));
                }
            }
        }
        match best {
            Some((s, a, b)) if s >= threshold => {
                let merged = clusters.remove(b);
                clusters[a].extend(merged);
                clusters[a].sort_unstable();
            }
            _ => break,
        }
    }

    clusters
        .into_iter()
        .enumerate()
        .map(|(i, members)| ActivityCluster {
            cluster_id: format!("c{}", i + 1),
            member_ids: members
                .into_iter()
                .map(|m| activities[m].activity_id.clone())
                .collect(),
            confirmed: false,
        })
        .collect()
}

/// A caregiver correction applied on top of proposed clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ClusterEdit {
    /// Move one activity into `to`, creating the cluster if needed.
    Move { activity_id: String, to: String },
    /// Fold cluster `from` into `into`.
    Merge { from: String, into: String },
    /// Move `members` out of `cluster_id` into a new cluster.
    Split {
        cluster_id: String,
        members: BTreeSet<String>,
        new_cluster_id: String,
    },
    /// Set a cluster's membership outright, leaving other clusters untouched.
    Assign {
        cluster_id: String,
        member_ids: BTreeSet<String>,
    },
}

/// Applies caregiver edits and marks the result confirmed.
///
/// The result partitions the pool: overlapping membership is rejected, empty
/// clusters are dropped and activities left without a cluster become
/// singletons.
pub fn confirm_clusters(
    proposed: &[ActivityCluster],
    edits: &[ClusterEdit],
    pool: &ActivityPool,
) -> Result<Vec<ActivityCluster>, PlanningError> {
    let mut clusters: BTreeMap<String, BTreeSet<String>> = proposed
        .iter()
        .map(|c| (c.cluster_id.clone(), c.member_ids.clone()))
        .collect();
    let known = |id: &String| -> Result<(), PlanningError> {
        if pool.contains(id) {
            Ok(())
        } else {
            Err(PlanningError::UnknownActivity(id.clone()))
        }
    };
    for members in clusters.values() {
        members.iter().try_for_each(known)?;
    }

    for edit in edits {
        match edit {
            ClusterEdit::Move { activity_id, to } => {
                known(activity_id)?;
                for members in clusters.values_mut() {
                    members.remove(activity_id);
                }
                clusters
                    .entry(to.clone())
                    .or_default()
                    .insert(activity_id.clone());
            }
            ClusterEdit::Merge { from, into } => {
                if !clusters.contains_key(into) {
                    return Err(PlanningError::UnknownCluster(into.clone()));
                }
                let moved = clusters
                    .remove(from)
                    .ok_or_else(|| PlanningError::UnknownCluster(from.clone()))?;
                clusters.get_mut(into).unwrap().extend(moved);
            }
            ClusterEdit::Split {
                cluster_id,
                members,
                new_cluster_id,
            } => {
                members.iter().try_for_each(known)?;
                let source = clusters
                    .get_mut(cluster_id)
                    .ok_or_else(|| PlanningError::UnknownCluster(cluster_id.clone()))?;
                if let Some(stray) = members.iter().find(|m| !source.contains(*m)) {
                    return Err(PlanningError::UnknownActivity(stray.clone()));
                }
                source.retain(|m| !members.contains(m));
                clusters
                    .entry(new_cluster_id.clone())
                    .or_default()
                    .extend(members.iter().cloned());
            }
            ClusterEdit::Assign {
                cluster_id,
                member_ids,
            } => {
                member_ids.iter().try_for_each(known)?;
                clusters.insert(cluster_id.clone(), member_ids.clone());
            }
        }
    }

    clusters.retain(|_, m| !m.is_empty());
    let mut owner: BTreeMap<&String, &String> = BTreeMap::new();
    for (cid, members) in &clusters {
        for m in members {
            if owner.insert(m, cid).is_some() {
                return Err(PlanningError::OverlapViolation(m.clone()));
            }
        }
    }
    let uncovered: Vec<String> = pool
        .iter()
        .map(|a| &a.activity_id)
        .filter(|id| !owner.contains_key(id))
        .cloned()
        .collect();
    let mut next = clusters.len() + 1;
    for id in uncovered {
        while clusters.contains_key(&format!("c{next}")) {
            next += 1;
        }
        clusters.insert(format!("c{next}"), [id].into());
    }

    Ok(clusters
        .into_iter()
        .map(|(cluster_id, member_ids)| ActivityCluster {
            cluster_id,
            member_ids,
            confirmed: true,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Activity, ActivityKind};

    fn act(id: &str, tags: &[&str]) -> Activity {
        Activity {
            activity_id: id.into(),
            kind: ActivityKind::Diet,
            title: id.into(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            required_resources: Default::default(),
            importance: 3,
        }
    }

    fn members(cs: &[ActivityCluster]) -> Vec<Vec<&str>> {
        cs.iter()
            .map(|c| c.member_ids.iter().map(String::as_str).collect())
            .collect()
    }

    #[test]
    fn identical_tags_cluster() {
        let pool = ActivityPool::new([act("x", &["a", "b"]), act("y", &["a", "b"])]).unwrap();
        let cs = propose_clusters(&pool, 0.5);
        assert_eq!(members(&cs), vec![vec!["x", "y"]]);
        assert!(!cs[0].confirmed);
    }

    #[test]
    fn disjoint_tags_stay_apart() {
        let pool = ActivityPool::new([act("x", &["a"]), act("y", &["b"])]).unwrap();
        assert_eq!(
            members(&propose_clusters(&pool, 0.5)),
            vec![vec!["x"], vec!["y"]]
        );
    }

    #[test]
    fn half_overlap_merges_at_threshold() {
        let pool =
            ActivityPool::new([act("x", &["a", "b", "c"]), act("y", &["a", "b", "d"])]).unwrap();
        assert_eq!(
            jaccard_similarity(&pool.get("x").unwrap().tags, &pool.get("y").unwrap().tags),
            0.5
        );
        assert_eq!(propose_clusters(&pool, 0.5).len(), 1);
        assert_eq!(propose_clusters(&pool, 0.51).len(), 2);
    }

    #[test]
    fn average_linkage_blocks_chaining() {
        // x~y and y~z are 1/3, x~z is 0: after x+y merge, avg(xy | z) = 1/6
        let pool = ActivityPool::new([
            act("x", &["a", "b"]),
            act("y", &["b", "c"]),
            act("z", &["c", "d"]),
        ])
        .unwrap();
        let cs = propose_clusters(&pool, 0.3);
        assert_eq!(members(&cs), vec![vec!["x", "y"], vec!["z"]]);
    }

    #[test]
    fn accept_unchanged() {
        let pool =
            ActivityPool::new([act("x", &["a"]), act("y", &["a"]), act("z", &["q"])]).unwrap();
        let proposed = propose_clusters(&pool, 0.5);
        let confirmed = confirm_clusters(&proposed, &[], &pool).unwrap();
        assert_eq!(members(&confirmed), members(&proposed));
        assert!(confirmed.iter().all(|c| c.confirmed));
    }

    #[test]
    fn move_preserves_partition() {
        let pool =
            ActivityPool::new([act("x", &["a"]), act("y", &["a"]), act("z", &["q"])]).unwrap();
        let proposed = propose_clusters(&pool, 0.5);
        let edits = [ClusterEdit::Move {
            activity_id: "y".into(),
            to: "c2".into(),
        }];
        let confirmed = confirm_clusters(&proposed, &edits, &pool).unwrap();
        assert_eq!(members(&confirmed), vec![vec!["x"], vec!["y", "z"]]);
    }

    #[test]
    fn overlap_rejected() {
        let pool =
            ActivityPool::new([act("x", &["a"]), act("y", &["a"]), act("z", &["q"])]).unwrap();
        let proposed = propose_clusters(&pool, 0.5);
        let edits = [ClusterEdit::Assign {
            cluster_id: "c2".into(),
            member_ids: ["x".to_string(), "z".to_string()].into(),
        }];
        assert_eq!(
            confirm_clusters(&proposed, &edits, &pool),
            Err(PlanningError::OverlapViolation("x".into()))
        );
    }

    #[test]
    fn merge_split_and_unknowns() {
        let pool =
            ActivityPool::new([act("x", &["a"]), act("y", &["b"]), act("z", &["c"])]).unwrap();
        let proposed = propose_clusters(&pool, 0.5);
        let edits = [
            ClusterEdit::Merge {
                from: "c2".into(),
                into: "c1".into(),
            },
            ClusterEdit::Split {
                cluster_id: "c1".into(),
                members: ["x".to_string()].into(),
                new_cluster_id: "solo".into(),
            },
        ];
        let confirmed = confirm_clusters(&proposed, &edits, &pool).unwrap();
        assert_eq!(members(&confirmed), vec![vec!["y"], vec!["z"], vec!["x"]]);

        let bad = [ClusterEdit::Move {
            activity_id: "nope".into(),
            to: "c1".into(),
        }];
        assert_eq!(
            confirm_clusters(&proposed, &bad, &pool),
            Err(PlanningError::UnknownActivity("nope".into()))
        );
        let bad = [ClusterEdit::Merge {
            from: "c9".into(),
            into: "c1".into(),
        }];
        assert_eq!(
            confirm_clusters(&proposed, &bad, &pool),
            Err(PlanningError::UnknownCluster("c9".into()))
        );
    }

    #[test]
    fn dropped_activity_becomes_singleton() {
        let pool = ActivityPool::new([act("x", &["a"]), act("y", &["a"])]).unwrap();
        let proposed = propose_clusters(&pool, 0.5);
        let edits = [ClusterEdit::Assign {
            cluster_id: "c1".into(),
            member_ids: ["x".to_string()].into(),
        }];
        let confirmed = confirm_clusters(&proposed, &edits, &pool).unwrap();
        assert_eq!(members(&confirmed), vec![vec!["x"], vec!["y"]]);
    }

    #[test]
    fn edit_grammar_json() {
        let e: ClusterEdit =
            serde_json::from_str(r#"{"op":"move","activity_id":"y","to":"c2"}"#).unwrap();
        assert_eq!(
            e,
            ClusterEdit::Move {
                activity_id: "y".into(),
                to: "c2".into()
            }
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn proposals_partition_and_repeat(
                tag_sets in prop::collection::vec(prop::collection::btree_set(0u8..6, 1..4), 1..25),
                threshold in 0.0f64..=1.0,
            ) {
                let pool = ActivityPool::new(tag_sets.iter().enumerate().map(|(i, t)| Activity {
                    activity_id: format!("a{i:02}"),
                    kind: ActivityKind::Diet,
                    title: String::new(),
                    tags: t.iter().map(|x| format!("t{x}")).collect(),
                    required_resources: Default::default(),
                    importance: 1,
                })).unwrap();
                let first = propose_clusters(&pool, threshold);
                let mut seen = BTreeSet::new();
                for c in &first {
                    prop_assert!(!c.member_ids.is_empty());
                    for m in &c.member_ids {
                        prop_assert!(seen.insert(m.clone()));
                    }
                }
                prop_assert_eq!(seen.len(), pool.len());
                let again = propose_clusters(&pool, threshold);
                prop_assert_eq!(serde_json::to_string(&first).unwrap(), serde_json::to_string(&again).unwrap());
            }

            #[test]
            fn jaccard_symmetric_bounded(
                a in prop::collection::btree_set("[a-e]", 0..5),
                b in prop::collection::btree_set("[a-e]", 0..5),
            ) {
                let ab = jaccard_similarity(&a, &b);
                prop_assert_eq!(ab, jaccard_similarity(&b, &a));
                prop_assert!((0.0..=1.0).contains(&ab));
            }
        }
    }
}
