//! Interaction data: k-core filtering, dense indexing, leave-one-out splits,
//! training segments and padded batches.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

/// One raw user-item event as read from a source file.
#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f32,
    pub timestamp: i64,
}

/// Raw item metadata row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemMeta {
    pub raw_id: String,
    pub title: String,
    pub genre: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemRecord {
    pub raw_id: String,
    pub index: usize,
    pub title: String,
    pub genre: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemCatalog {
    items: Vec<ItemRecord>,
    by_raw: BTreeMap<String, usize>,
}

impl ItemCatalog {
    /// Catalog from records whose `index` fields are `0..n` in order.
    pub fn new(items: Vec<ItemRecord>) -> Result<Self> {
        let mut by_raw = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            if it.index != i {
                return Err(Error::Index {
                    context: "catalog item index",
                    index: it.index,
                    bound: i,
                });
            }
            if by_raw.insert(it.raw_id.clone(), i).is_some() {
                return Err(Error::Config(alloc::format!("duplicate item id `{}`", it.raw_id)));
            }
        }
        Ok(Self { items, by_raw })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Index used for padding positions; never a real item.
    pub fn pad_index(&self) -> usize {
        self.items.len()
    }

    pub fn get(&self, index: usize) -> Option<&ItemRecord> {
        self.items.get(index)
    }

    pub fn index_of(&self, raw_id: &str) -> Option<usize> {
        self.by_raw.get(raw_id).copied()
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }
}

/// Chronological interaction history of one user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user_index: usize,
    pub raw_id: String,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub catalog: ItemCatalog,
    pub users: Vec<UserSequence>,
}

impl Dataset {
    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }
}

/// Iteratively drop users and items with fewer than `k` interactions until
/// every survivor has at least `k`. Input order is preserved.
pub fn kcore_filter(interactions: Vec<Interaction>, k: usize) -> Result<Vec<Interaction>> {
    if k == 0 {
        return Err(Error::Config(String::from("k-core k must be >= 1")));
    }
    if interactions.is_empty() {
        return Err(Error::KCoreEmpty { k });
    }
    let mut users: BTreeMap<&str, usize> = BTreeMap::new();
    let mut items: BTreeMap<&str, usize> = BTreeMap::new();
    let edges: Vec<(usize, usize)> = interactions
        .iter()
        .map(|x| {
            let n = users.len();
            let u = *users.entry(x.user.as_str()).or_insert(n);
            let n = items.len();
            let i = *items.entry(x.item.as_str()).or_insert(n);
            (u, i)
        })
        .collect();
    let mut alive = vec![true; edges.len()];
    let mut udeg = vec![0usize; users.len()];
    let mut ideg = vec![0usize; items.len()];
    for &(u, i) in &edges {
        udeg[u] += 1;
        ideg[i] += 1;
    }
    loop {
        let mut changed = false;
        for (e, &(u, i)) in edges.iter().enumerate() {
            if alive[e] && (udeg[u] < k || ideg[i] < k) {
                alive[e] = false;
                udeg[u] -= 1;
                ideg[i] -= 1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let kept: Vec<Interaction> = interactions
        .into_iter()
        .zip(alive)
        .filter_map(|(x, a)| a.then_some(x))
        .collect();
    if kept.is_empty() {
        return Err(Error::KCoreEmpty { k });
    }
    Ok(kept)
}

/// Assign dense indices (order of first appearance) and build per-user
/// sequences sorted by timestamp, ties kept in input order. Ratings are
/// ignored. Items without metadata use their raw id as title.
pub fn build_dataset(interactions: &[Interaction], metadata: &[ItemMeta]) -> Result<Dataset> {
    if interactions.is_empty() {
        return Err(Error::Empty("interactions"));
    }
    let meta: BTreeMap<&str, &ItemMeta> = metadata.iter().map(|m| (m.raw_id.as_str(), m)).collect();
    let mut item_index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut records = Vec::new();
    let mut user_index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut users: Vec<UserSequence> = Vec::new();
    let mut events: Vec<Vec<(i64, usize)>> = Vec::new();
    for x in interactions {
        let it = match item_index.get(x.item.as_str()) {
            Some(&i) => i,
            None => {
                let i = records.len();
                item_index.insert(x.item.as_str(), i);
                let (title, genre) = match meta.get(x.item.as_str()) {
                    Some(m) if !(m.title.is_empty() && m.genre.is_empty()) => (m.title.clone(), m.genre.clone()),
                    _ => (x.item.clone(), String::new()),
                };
                records.push(ItemRecord {
                    raw_id: x.item.clone(),
                    index: i,
                    title,
                    genre,
                });
                i
            }
        };
        let u = *user_index.entry(x.user.as_str()).or_insert_with(|| {
            users.push(UserSequence {
                user_index: users.len(),
                raw_id: x.user.clone(),
                items: Vec::new(),
                timestamps: Vec::new(),
            });
            events.push(Vec::new());
            users.len() - 1
        });
        events[u].push((x.timestamp, it));
    }
    for (u, mut ev) in users.iter_mut().zip(events) {
        ev.sort_by_key(|e| e.0);
        u.items = ev.iter().map(|e| e.1).collect();
        u.timestamps = ev.iter().map(|e| e.0).collect();
    }
    Ok(Dataset {
        catalog: ItemCatalog::new(records)?,
        users,
    })
}

/// Leave-one-out view of one user: all but the last two items train, the
/// second-to-last validates, the last tests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub user: usize,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

pub fn leave_one_out_split(users: &[UserSequence]) -> Result<Vec<UserSplit>> {
    users
        .iter()
        .map(|u| {
            let t = u.items.len();
            if t < 3 {
                return Err(Error::SequenceTooShort {
                    user: u.user_index,
                    len: t,
                    min: 3,
                });
            }
            Ok(UserSplit {
                user: u.user_index,
                train: u.items[..t - 2].to_vec(),
                valid: u.items[t - 2],
                test: u.items[t - 1],
            })
        })
        .collect()
}

/// Input items followed by the item to predict.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub user: usize,
    pub input: Vec<usize>,
    pub target: usize,
}

/// Contiguous window of `min(len, max_len)` items with a uniformly random
/// start. The last element is the target, the rest the input.
pub fn sample_segment(prefix: &[usize], max_len: usize, rng: &mut impl Rng) -> Result<(Vec<usize>, usize)> {
    if prefix.len() < 2 || max_len < 2 {
        return Err(Error::SequenceTooShort {
            user: usize::MAX,
            len: prefix.len().min(max_len),
            min: 2,
        });
    }
    let len = prefix.len().min(max_len);
    let start = rng.gen_range(0..=prefix.len() - len);
    let window = &prefix[start..start + len];
    Ok((window[..len - 1].to_vec(), window[len - 1]))
}

/// One segment per user with a trainable prefix (the "sampling" strategy).
pub fn sample_epoch(splits: &[UserSplit], max_len: usize, rng: &mut impl Rng) -> Vec<Segment> {
    splits
        .iter()
        .filter(|s| s.train.len() >= 2)
        .map(|s| {
            let (input, target) = sample_segment(&s.train, max_len, rng).expect("prefix has >= 2 items");
            Segment {
                user: s.user,
                input,
                target,
            }
        })
        .collect()
}

/// Every train-region target with its preceding (at most `max_len - 1`)
/// items (the "all" strategy).
pub fn all_segments(splits: &[UserSplit], max_len: usize) -> Vec<Segment> {
    let window = max_len.saturating_sub(1).max(1);
    let mut out = Vec::new();
    for s in splits {
        for j in 1..s.train.len() {
            out.push(Segment {
                user: s.user,
                input: s.train[j.saturating_sub(window)..j].to_vec(),
                target: s.train[j],
            });
        }
    }
    out
}

/// Left-padded batch of segment inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub len: usize,
    /// `size * len` item indices; padding uses the catalog pad index.
    pub inputs: Vec<usize>,
    pub mask: Vec<bool>,
    pub targets: Vec<usize>,
    pub users: Vec<usize>,
}

impl Batch {
    pub fn row(&self, b: usize) -> &[usize] {
        &self.inputs[b * self.len..(b + 1) * self.len]
    }

    /// Real (unpadded) input items of row `b`.
    pub fn history(&self, b: usize) -> Vec<usize> {
        self.row(b)
            .iter()
            .zip(&self.mask[b * self.len..(b + 1) * self.len])
            .filter_map(|(&i, &m)| m.then_some(i))
            .collect()
    }
}

pub fn make_batches(examples: &[Segment], batch_size: usize, pad_to: usize, pad_index: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config(String::from("batch size must be >= 1")));
    }
    let mut out = Vec::with_capacity(examples.len().div_ceil(batch_size));
    for chunk in examples.chunks(batch_size) {
        let mut inputs = Vec::with_capacity(chunk.len() * pad_to);
        let mut mask = Vec::with_capacity(chunk.len() * pad_to);
        for ex in chunk {
            if ex.input.len() > pad_to {
                return Err(Error::Overlength {
                    len: ex.input.len(),
                    max: pad_to,
                });
            }
            let pad = pad_to - ex.input.len();
            inputs.extend(core::iter::repeat_n(pad_index, pad));
            inputs.extend_from_slice(&ex.input);
            mask.extend(core::iter::repeat_n(false, pad));
            mask.extend(core::iter::repeat_n(true, ex.input.len()));
        }
        out.push(Batch {
            size: chunk.len(),
            len: pad_to,
            inputs,
            mask,
            targets: chunk.iter().map(|e| e.target).collect(),
            users: chunk.iter().map(|e| e.user).collect(),
        });
    }
    Ok(out)
}

/// Inputs and held-out target for ranking evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub user: usize,
    /// Most recent items fed to the model (at most the configured window).
    pub history: Vec<usize>,
    pub target: usize,
    /// Already-interacted items removed from the candidate set. Never
    /// contains `target`.
    pub exclude: Vec<usize>,
}

fn eval_case(user: usize, seen: &[usize], target: usize, window: usize) -> EvalCase {
    let start = seen.len().saturating_sub(window);
    let exclude: BTreeSet<usize> = seen.iter().copied().filter(|&i| i != target).collect();
    EvalCase {
        user,
        history: seen[start..].to_vec(),
        target,
        exclude: exclude.into_iter().collect(),
    }
}

/// Validation cases: train prefix in, second-to-last item out.
pub fn valid_cases(splits: &[UserSplit], window: usize) -> Vec<EvalCase> {
    splits
        .iter()
        .map(|s| eval_case(s.user, &s.train, s.valid, window))
        .collect()
}

/// Test cases: train prefix (plus the validation item when
/// `include_valid`) in, last item out.
pub fn test_cases(splits: &[UserSplit], window: usize, include_valid: bool) -> Vec<EvalCase> {
    splits
        .iter()
        .map(|s| {
            let mut seen = s.train.clone();
            if include_valid {
                seen.push(s.valid);
            }
            let mut case = eval_case(s.user, &seen, s.test, window);
            if !include_valid && s.valid != s.test {
                case.exclude.push(s.valid);
                case.exclude.sort_unstable();
                case.exclude.dedup();
            }
            case
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ix(u: &str, i: &str, ts: i64) -> Interaction {
        Interaction {
            user: u.to_string(),
            item: i.to_string(),
            rating: 1.0,
            timestamp: ts,
        }
    }

    /// Remove one under-degree edge at a time until none is left.
    fn brute_force_kcore(edges: &[(&str, &str)], k: usize) -> Vec<(String, String)> {
        let mut cur: Vec<(String, String)> = edges.iter().map(|(u, i)| (u.to_string(), i.to_string())).collect();
        loop {
            let pos = cur.iter().position(|(u, i)| {
                cur.iter().filter(|(v, _)| v == u).count() < k || cur.iter().filter(|(_, j)| j == i).count() < k
            });
            match pos {
                Some(p) => {
                    cur.remove(p);
                }
                None => return cur,
            }
        }
    }

    #[test]
    fn kcore_chain_collapses_to_empty() {
        let edges = [("u1", "i1"), ("u1", "i2"), ("u2", "i2")];
        assert!(brute_force_kcore(&edges, 2).is_empty());
        let xs: Vec<_> = edges.iter().map(|(u, i)| ix(u, i, 0)).collect();
        assert_eq!(kcore_filter(xs, 2), Err(Error::KCoreEmpty { k: 2 }));
    }

    #[test]
    fn kcore_complete_bipartite_and_k1_unchanged() {
        let mut xs = Vec::new();
        for u in ["a", "b", "c"] {
            for i in ["x", "y", "z"] {
                xs.push(ix(u, i, 0));
            }
        }
        assert_eq!(kcore_filter(xs.clone(), 3).unwrap(), xs);
        let sparse = vec![ix("a", "x", 0), ix("b", "y", 1)];
        assert_eq!(kcore_filter(sparse.clone(), 1).unwrap(), sparse);
    }

    #[test]
    fn leave_one_out_examples() {
        let u = |items: Vec<usize>| UserSequence {
            user_index: 0,
            raw_id: "u".into(),
            timestamps: vec![0; items.len()],
            items,
        };
        let s = leave_one_out_split(&[u(vec![0, 1, 2, 3, 4])]).unwrap();
        assert_eq!(s[0].train, vec![0, 1, 2]);
        assert_eq!((s[0].valid, s[0].test), (3, 4));
        let s = leave_one_out_split(&[u(vec![0, 1, 2])]).unwrap();
        assert_eq!(s[0].train, vec![0]);
        assert!(matches!(
            leave_one_out_split(&[u(vec![0, 1])]),
            Err(Error::SequenceTooShort { len: 2, .. })
        ));
    }

    #[test]
    fn sample_segment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prefix = [10, 11, 12, 13, 14];
        let (input, target) = sample_segment(&prefix, 21, &mut rng).unwrap();
        assert_eq!(input, vec![10, 11, 12, 13]);
        assert_eq!(target, 14);

        let long: Vec<usize> = (0..100).collect();
        for _ in 0..200 {
            let (input, target) = sample_segment(&long, 21, &mut rng).unwrap();
            assert_eq!(input.len(), 20);
            assert_eq!(target, input[0] + 20);
            assert!(input[0] <= 79);
        }
        assert!(sample_segment(&[3], 21, &mut rng).is_err());
    }

    #[test]
    fn sample_segment_start_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let long: Vec<usize> = (0..100).collect();
        let draws = 100_000usize;
        let mut counts = [0usize; 80];
        for _ in 0..draws {
            let (input, _) = sample_segment(&long, 21, &mut rng).unwrap();
            counts[input[0]] += 1;
        }
        let p = 1.0 / 80.0;
        let mean = draws as f64 * p;
        let sigma = libm::sqrt(draws as f64 * p * (1.0 - p));
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma + 1.0, "count {c} vs {mean}");
        }
    }

    #[test]
    fn batches_examples() {
        let ex: Vec<Segment> = (0..10)
            .map(|i| Segment {
                user: i,
                input: vec![1, 2],
                target: 3,
            })
            .collect();
        let b = make_batches(&ex, 4, 4, 99).unwrap();
        assert_eq!(b.iter().map(|b| b.size).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b[0].row(0), &[99, 99, 1, 2]);
        assert_eq!(&b[0].mask[..4], &[false, false, true, true]);
        assert_eq!(b[0].history(0), vec![1, 2]);

        let b = make_batches(&ex, 3, 2, 99).unwrap();
        assert!(b.iter().all(|b| b.mask.iter().all(|&m| m)));
        assert!(make_batches(&ex, 3, 1, 99).is_err());
    }

    #[test]
    fn build_dataset_orders_by_time_with_stable_ties() {
        let xs = vec![ix("u", "c", 5), ix("u", "a", 1), ix("u", "b", 5), ix("v", "a", 0)];
        let d = build_dataset(&xs, &[]).unwrap();
        let a = d.catalog.index_of("a").unwrap();
        let b = d.catalog.index_of("b").unwrap();
        let c = d.catalog.index_of("c").unwrap();
        assert_eq!(d.users[0].items, vec![a, c, b]);
        assert_eq!(d.catalog.get(a).unwrap().title, "a");
    }

    #[test]
    fn all_segments_cover_train_region() {
        let s = UserSplit {
            user: 0,
            train: (0..30).collect(),
            valid: 30,
            test: 31,
        };
        let segs = all_segments(core::slice::from_ref(&s), 21);
        assert_eq!(segs.len(), 29);
        assert_eq!(segs[0].input, vec![0]);
        assert_eq!(segs[28].input.len(), 20);
        assert_eq!(segs[28].target, 29);
    }

    #[test]
    fn eval_cases_never_exclude_target() {
        let s = UserSplit {
            user: 0,
            train: vec![1, 2, 5, 2],
            valid: 5,
            test: 5,
        };
        let c = test_cases(core::slice::from_ref(&s), 20, true);
        assert_eq!(c[0].exclude, vec![1, 2]);
        assert_eq!(c[0].history, vec![1, 2, 5, 2, 5]);
        let v = valid_cases(core::slice::from_ref(&s), 2);
        assert_eq!(v[0].history, vec![5, 2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn edges() -> impl Strategy<Value = Vec<(u8, u8)>> {
            proptest::collection::vec((0u8..12, 0u8..12), 1..120)
        }

        proptest! {
            #[test]
            fn kcore_is_stable_and_valid(es in edges(), k in 1usize..4) {
                let xs: Vec<Interaction> = es.iter().enumerate()
                    .map(|(t, (u, i))| ix(&alloc::format!("u{u}"), &alloc::format!("i{i}"), t as i64))
                    .collect();
                if let Ok(out) = kcore_filter(xs, k) {
                    let again = kcore_filter(out.clone(), k).unwrap();
                    prop_assert_eq!(&again, &out);
                    for x in &out {
                        prop_assert!(out.iter().filter(|y| y.user == x.user).count() >= k);
                        prop_assert!(out.iter().filter(|y| y.item == x.item).count() >= k);
                    }
                }
            }

            #[test]
            fn split_conserves_length(lens in proptest::collection::vec(3usize..40, 1..20)) {
                let users: Vec<UserSequence> = lens.iter().enumerate().map(|(u, &n)| UserSequence {
                    user_index: u, raw_id: alloc::format!("{u}"), items: (0..n).collect(), timestamps: vec![0; n],
                }).collect();
                let splits = leave_one_out_split(&users).unwrap();
                for (s, u) in splits.iter().zip(&users) {
                    prop_assert_eq!(s.train.len() + 2, u.items.len());
                    prop_assert_eq!(s.test, *u.items.last().unwrap());
                }
            }
        }
    }
}
