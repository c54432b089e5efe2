//! LETOR / SVMLight-with-qid datasets.
//!
//! Lines look like `<rel> qid:<id> <idx>:<val> ... [# comment]`. Feature
//! indices are 1-based on disk and 0-based in memory; features are stored
//! densely, missing indices become `0.0`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub features: Vec<f64>,
    pub relevance: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryGroup {
    pub query_id: String,
    pub documents: Vec<Document>,
}

impl QueryGroup {
    pub fn relevances(&self) -> Vec<u8> {
        self.documents.iter().map(|d| d.relevance).collect()
    }
}

/// One split (train or test) of a ranking dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub queries: Vec<QueryGroup>,
    pub feature_count: usize,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    fn pad_to(&mut self, feature_count: usize) {
        for doc in self.queries.iter_mut().flat_map(|q| q.documents.iter_mut()) {
            doc.features.resize(feature_count, 0.0);
        }
        self.feature_count = feature_count;
    }

    fn columns(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.queries
            .iter()
            .flat_map(|q| q.documents.iter().map(|d| &d.features))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    pub feature_count: usize,
    pub relevance_levels: u8,
}

impl Dataset {
    /// Combines two parsed splits, padding both to a common feature
    /// dimension and checking labels and query-id disjointness.
    pub fn new(mut train: DatasetSplit, mut test: DatasetSplit, relevance_levels: u8) -> Result<Self> {
        if relevance_levels != 3 && relevance_levels != 5 {
            return Err(Error::validation(
                "dataset.relevance_levels",
                format!("must be 3 or 5, got {relevance_levels}"),
            ));
        }
        for (name, split) in [("train", &train), ("test", &test)] {
            for q in &split.queries {
                if let Some(d) = q.documents.iter().find(|d| d.relevance >= relevance_levels) {
                    return Err(Error::Config(format!(
                        "{name} query {} has relevance {} outside 0..{}",
                        q.query_id,
                        d.relevance,
                        relevance_levels - 1
                    )));
                }
            }
        }
        let train_ids: HashSet<&str> = train.queries.iter().map(|q| q.query_id.as_str()).collect();
        if let Some(q) = test.queries.iter().find(|q| train_ids.contains(q.query_id.as_str())) {
            return Err(Error::Config(format!(
                "query id {} appears in both train and test",
                q.query_id
            )));
        }
        let feature_count = train.feature_count.max(test.feature_count);
        train.pad_to(feature_count);
        test.pad_to(feature_count);
        Ok(Dataset {
            train,
            test,
            feature_count,
            relevance_levels,
        })
    }

    pub fn train_query_count(&self) -> usize {
        self.train.len()
    }
}

/// Parses a LETOR split, grouping documents by qid in order of first
/// appearance.
pub fn parse_letor<R: BufRead>(reader: R) -> Result<DatasetSplit> {
    let mut queries: Vec<QueryGroup> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut raw: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut slots: Vec<(usize, usize)> = Vec::new();
    let mut feature_count = 0;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line,
        };
        let mut tokens = content.split_whitespace();
        let Some(rel_tok) = tokens.next() else {
            continue;
        };
        let err = |msg: String| Error::Parse { line: lineno, msg };
        let relevance: u8 = rel_tok
            .parse()
            .map_err(|_| err(format!("invalid relevance label `{rel_tok}`")))?;
        let qid_tok = tokens.next().ok_or_else(|| err("missing qid".to_string()))?;
        let qid = qid_tok
            .strip_prefix("qid:")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| err(format!("expected `qid:<id>`, got `{qid_tok}`")))?;

        let mut feats = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("expected `<idx>:<val>`, got `{tok}`")))?;
            let idx: usize = idx.parse().map_err(|_| err(format!("invalid feature index `{idx}`")))?;
            if idx == 0 {
                return Err(err("feature indices are 1-based".to_string()));
            }
            let val: f64 = val.parse().map_err(|_| err(format!("invalid feature value `{val}`")))?;
            if !val.is_finite() {
                return Err(err(format!("non-finite feature value `{val}`")));
            }
            feature_count = feature_count.max(idx);
            feats.push((idx - 1, val));
        }

        let q = *index.entry(qid.to_string()).or_insert_with(|| {
            queries.push(QueryGroup {
                query_id: qid.to_string(),
                documents: Vec::new(),
            });
            queries.len() - 1
        });
        queries[q].documents.push(Document {
            features: Vec::new(),
            relevance,
        });
        slots.push((q, queries[q].documents.len() - 1));
        raw.push(feats);
    }

    for ((q, d), feats) in slots.into_iter().zip(raw) {
        let mut dense = vec![0.0; feature_count];
        for (i, v) in feats {
            dense[i] = v;
        }
        queries[q].documents[d].features = dense;
    }
    Ok(DatasetSplit { queries, feature_count })
}

pub fn parse_letor_str(text: &str) -> Result<DatasetSplit> {
    parse_letor(text.as_bytes())
}

pub fn read_letor_file(path: &Path) -> Result<DatasetSplit> {
    let file = fs::File::open(path)?;
    parse_letor(std::io::BufReader::new(file))
}

/// Writes a split back out in LETOR format, every feature included.
pub fn to_letor(split: &DatasetSplit) -> String {
    let mut out = String::new();
    for q in &split.queries {
        for d in &q.documents {
            let _ = write!(out, "{} qid:{}", d.relevance, q.query_id);
            for (i, v) in d.features.iter().enumerate() {
                let _ = write!(out, " {}:{}", i + 1, v);
            }
            out.push('\n');
        }
    }
    out
}

/// Loads `<dir>/<train_file>` and `<dir>/<test_file>`.
pub fn load_letor_fold(dir: &Path, train_file: &str, test_file: &str, relevance_levels: u8) -> Result<Dataset> {
    let train = read_letor_file(&dir.join(train_file))?;
    let test = read_letor_file(&dir.join(test_file))?;
    Dataset::new(train, test, relevance_levels)
}

/// Per-feature min/max taken from a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureScaling {
    pub fn fit(split: &DatasetSplit) -> Self {
        let n = split.feature_count;
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for row in split.columns() {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        FeatureScaling { min, max }
    }

    pub fn apply(&self, split: &mut DatasetSplit) {
        for doc in split.queries.iter_mut().flat_map(|q| q.documents.iter_mut()) {
            for (j, v) in doc.features.iter_mut().enumerate() {
                let (lo, hi) = (self.min[j], self.max[j]);
                // constant (or absent) column
                *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
            }
        }
    }
}

/// Min-max scaling fitted on the training split and applied to both
/// splits. Test values outside the training range are not clamped.
pub fn normalize_features(dataset: &Dataset) -> Dataset {
    let scaling = FeatureScaling::fit(&dataset.train);
    let mut out = dataset.clone();
    scaling.apply(&mut out.train);
    scaling.apply(&mut out.test);
    out
}

/// Training queries owned by one client, as indices into the train split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPartition {
    pub client_id: usize,
    pub queries: Vec<usize>,
}

impl ClientPartition {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn query_ids<'a>(&self, dataset: &'a Dataset) -> Vec<&'a str> {
        self.queries
            .iter()
            .map(|&q| dataset.train.queries[q].query_id.as_str())
            .collect()
    }
}

/// Shuffles the training queries with a seeded generator and deals them
/// round-robin, so partition sizes differ by at most one.
pub fn partition_clients(dataset: &Dataset, n_clients: usize, seed: u64) -> Result<Vec<ClientPartition>> {
    let n_queries = dataset.train.len();
    if n_clients == 0 {
        return Err(Error::validation("n_clients", "must be at least 1"));
    }
    if n_queries < n_clients {
        return Err(Error::Config(format!(
            "{n_queries} training queries cannot be split across {n_clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..n_queries).collect();
    let mut rng = stream_rng(seed, Stream::Partition, 0, 0);
    order.shuffle(&mut rng);

    let mut parts: Vec<ClientPartition> = (0..n_clients)
        .map(|client_id| ClientPartition {
            client_id,
            queries: Vec::with_capacity(n_queries / n_clients + 1),
        })
        .collect();
    for (i, q) in order.into_iter().enumerate() {
        parts[i % n_clients].queries.push(q);
    }
    for p in &mut parts {
        p.queries.sort_unstable();
    }
    Ok(parts)
}

/// Parameters of a generated dataset whose labels are a deterministic
/// banding of a hidden linear score.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train_queries: usize,
    pub test_queries: usize,
    pub docs_per_query: usize,
    pub feature_count: usize,
    pub relevance_levels: u8,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_queries: 400,
            test_queries: 100,
            docs_per_query: 20,
            feature_count: 10,
            relevance_levels: 5,
            seed: 2024,
        }
    }
}

/// Label shares from grade 0 upwards.
fn label_shares(levels: u8) -> &'static [f64] {
    match levels {
        3 => &[0.60, 0.25, 0.15],
        _ => &[0.45, 0.25, 0.15, 0.10, 0.05],
    }
}

/// Generates a linearly separable dataset: features are uniform on
/// `[0, 1)`, and relevance grades are score quantile bands of a hidden
/// Gaussian weight vector.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.docs_per_query == 0 || spec.feature_count == 0 {
        return Err(Error::validation(
            "synthetic",
            "docs_per_query and feature_count must be positive",
        ));
    }
    let mut rng = stream_rng(spec.seed, Stream::Synthetic, 0, 0);
    let hidden: Vec<f64> = (0..spec.feature_count)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();

    let total = spec.train_queries + spec.test_queries;
    let mut features = Vec::with_capacity(total * spec.docs_per_query);
    let mut scores = Vec::with_capacity(total * spec.docs_per_query);
    for _ in 0..total * spec.docs_per_query {
        let x: Vec<f64> = (0..spec.feature_count).map(|_| rng.random::<f64>()).collect();
        scores.push(x.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>());
        features.push(x);
    }

    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let mut thresholds = Vec::new();
    let mut cum = 0.0;
    for share in &label_shares(spec.relevance_levels)[..spec.relevance_levels as usize - 1] {
        cum += share;
        let pos = ((cum * sorted.len() as f64) as usize).min(sorted.len() - 1);
        thresholds.push(sorted[pos]);
    }

    let mut docs = features.into_iter().zip(scores).map(|(features, s)| Document {
        relevance: thresholds.iter().filter(|&&t| s >= t).count() as u8,
        features,
    });
    let mut make_split = |prefix: &str, n: usize| DatasetSplit {
        queries: (0..n)
            .map(|i| QueryGroup {
                query_id: format!("{prefix}{i}"),
                documents: docs.by_ref().take(spec.docs_per_query).collect(),
            })
            .collect(),
        feature_count: spec.feature_count,
    };
    let train = make_split("tr", spec.train_queries);
    let test = make_split("te", spec.test_queries);
    Dataset::new(train, test, spec.relevance_levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn split(text: &str) -> DatasetSplit {
        parse_letor_str(text).unwrap()
    }

    #[test]
    fn parses_sparse_line() {
        let s = split("2 qid:10 1:0.5 3:1.0\n");
        assert_eq!(s.feature_count, 3);
        assert_eq!(s.queries[0].query_id, "10");
        assert_eq!(s.queries[0].documents[0].relevance, 2);
        assert_eq!(s.queries[0].documents[0].features, vec![0.5, 0.0, 1.0]);
    }

    #[test]
    fn ignores_comments() {
        let s = split("0 qid:1 1:0 # docid=X\n");
        assert_eq!(s.queries[0].query_id, "1");
        assert_eq!(s.queries[0].documents[0].relevance, 0);
        assert_eq!(s.queries[0].documents[0].features, vec![0.0]);
    }

    #[test]
    fn groups_by_qid_in_file_order() {
        let s = split("1 qid:7 1:0.1\n0 qid:7 1:0.2\n2 qid:8 2:1\n");
        assert_eq!(s.queries.len(), 2);
        let docs = &s.queries[0].documents;
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].features[0], 0.1);
        assert_eq!(docs[1].features[0], 0.2);
        // densified to the split-wide dimension
        assert_eq!(docs[0].features, vec![0.1, 0.0]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_letor_str("1 qid:1 1:0.5\n\nx qid:2 1:1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(matches!(
            parse_letor_str("1 1:0.5").unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
        assert!(matches!(
            parse_letor_str("1 qid:3 0:0.5").unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
        assert!(matches!(
            parse_letor_str("1 qid:3 2-0.5").unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
    }

    #[test]
    fn dataset_rejects_bad_labels_and_shared_qids() {
        let tr = split("3 qid:1 1:1\n");
        let te = split("0 qid:2 1:1\n");
        assert!(Dataset::new(tr.clone(), te.clone(), 3).is_err());
        assert!(Dataset::new(tr.clone(), te.clone(), 5).is_ok());
        assert!(Dataset::new(tr.clone(), te.clone(), 4).is_err());
        assert!(Dataset::new(tr.clone(), split("0 qid:1 1:1\n"), 5).is_err());
    }

    #[test]
    fn dataset_pads_splits_to_common_dimension() {
        let ds = Dataset::new(split("0 qid:1 1:1\n"), split("0 qid:2 4:1\n"), 3).unwrap();
        assert_eq!(ds.feature_count, 4);
        assert_eq!(ds.train.queries[0].documents[0].features.len(), 4);
    }

    fn one_column(train: &[f64], test: &[f64]) -> Dataset {
        let mk = |prefix: &str, vals: &[f64]| DatasetSplit {
            queries: vec![QueryGroup {
                query_id: prefix.to_string(),
                documents: vals
                    .iter()
                    .map(|&v| Document {
                        features: vec![v],
                        relevance: 0,
                    })
                    .collect(),
            }],
            feature_count: 1,
        };
        Dataset::new(mk("a", train), mk("b", test), 3).unwrap()
    }

    fn column(split: &DatasetSplit) -> Vec<f64> {
        split.queries[0].documents.iter().map(|d| d.features[0]).collect()
    }

    #[test]
    fn min_max_scaling() {
        let n = normalize_features(&one_column(&[0.0, 5.0, 10.0], &[20.0]));
        assert_eq!(column(&n.train), vec![0.0, 0.5, 1.0]);
        // fitted on train only, not clamped
        assert_eq!(column(&n.test), vec![2.0]);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let n = normalize_features(&one_column(&[3.0, 3.0, 3.0], &[4.0]));
        assert_eq!(column(&n.train), vec![0.0, 0.0, 0.0]);
        assert_eq!(column(&n.test), vec![0.0]);
    }

    fn query_dataset(n: usize) -> Dataset {
        let text: String = (0..n).map(|i| format!("0 qid:{i} 1:{i}\n")).collect();
        Dataset::new(split(&text), split("0 qid:test 1:0\n"), 3).unwrap()
    }

    #[test]
    fn partition_sizes() {
        let sizes = |n, c| {
            let mut s: Vec<usize> = partition_clients(&query_dataset(n), c, 1)
                .unwrap()
                .iter()
                .map(|p| p.len())
                .collect();
            s.sort_unstable_by(|a, b| b.cmp(a));
            s
        };
        assert_eq!(sizes(10, 2), vec![5, 5]);
        assert_eq!(sizes(7, 3), vec![3, 2, 2]);
    }

    #[test]
    fn partition_is_deterministic() {
        let ds = query_dataset(50);
        assert_eq!(
            partition_clients(&ds, 10, 42).unwrap(),
            partition_clients(&ds, 10, 42).unwrap()
        );
        assert_ne!(
            partition_clients(&ds, 10, 42).unwrap(),
            partition_clients(&ds, 10, 43).unwrap()
        );
    }

    #[test]
    fn partition_needs_enough_queries() {
        assert!(matches!(
            partition_clients(&query_dataset(2), 3, 0),
            Err(Error::Config(_))
        ));
        assert!(partition_clients(&query_dataset(2), 0, 0).is_err());
    }

    #[test]
    fn synthetic_dataset_is_deterministic_and_banded() {
        let spec = SyntheticSpec {
            train_queries: 20,
            test_queries: 5,
            ..SyntheticSpec::default()
        };
        let a = synthetic_dataset(&spec).unwrap();
        assert_eq!(a, synthetic_dataset(&spec).unwrap());
        assert_eq!(a.train.len(), 20);
        assert_eq!(a.test.len(), 5);
        let max = a
            .train
            .queries
            .iter()
            .flat_map(|q| q.documents.iter().map(|d| d.relevance))
            .max()
            .unwrap();
        assert_eq!(max, 4);
    }

    fn arb_split() -> impl Strategy<Value = DatasetSplit> {
        (1usize..5, 1usize..6).prop_flat_map(|(nq, nf)| {
            prop::collection::vec(
                prop::collection::vec((0u8..5, prop::collection::vec(-1e6f64..1e6, nf)), 1..4),
                nq,
            )
            .prop_map(move |qs| DatasetSplit {
                queries: qs
                    .into_iter()
                    .enumerate()
                    .map(|(i, docs)| QueryGroup {
                        query_id: format!("q{i}"),
                        documents: docs
                            .into_iter()
                            .map(|(relevance, features)| Document { features, relevance })
                            .collect(),
                    })
                    .collect(),
                feature_count: nf,
            })
        })
    }

    proptest! {
        #[test]
        fn letor_text_round_trips(s in arb_split()) {
            let back = parse_letor_str(&to_letor(&s)).unwrap();
            prop_assert_eq!(back, s);
        }

        #[test]
        fn partitions_are_disjoint_and_cover(n in 1usize..60, c in 1usize..12, seed in any::<u64>()) {
            prop_assume!(n >= c);
            let ds = query_dataset(n);
            let parts = partition_clients(&ds, c, seed).unwrap();
            let mut all: Vec<usize> = parts.iter().flat_map(|p| p.queries.iter().copied()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let max = parts.iter().map(|p| p.len()).max().unwrap();
            let min = parts.iter().map(|p| p.len()).min().unwrap();
            prop_assert!(max - min <= 1);
        }

        #[test]
        fn normalization_is_idempotent_on_train(s in arb_split()) {
            let ds = Dataset::new(s, split("0 qid:zz 1:0\n"), 5).unwrap();
            let once = normalize_features(&ds);
            let twice = normalize_features(&once);
            for (a, b) in once.train.columns().zip(twice.train.columns()) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }
}
