//! Aggregation structure of a hierarchical time series.
//!
//! Series are ordered aggregates first, bottoms second, so the summing
//! matrix has the block form `S = [A; I]` with `A` the aggregation block
//! and `I` the `N_b × N_b` identity.

use std::collections::{BTreeMap, HashSet};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An aggregate series: its id, level, and the sorted bottom indices it sums.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Aggregate {
    pub id: String,
    pub level: u32,
    pub children: Vec<usize>,
}

/// Validated aggregation structure.
///
/// Aggregates are declared directly as sets of bottom indices; multi-level
/// trees list each level's aggregates. Overlapping aggregates (grouped
/// structures) are permitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchySpec {
    bottom_ids: Vec<String>,
    aggregates: Vec<Aggregate>,
    bottom_level: u32,
}

/// Dense `(N_a + N_b) × N_b` summing matrix with entries in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummingMatrix {
    data: Array2<f64>,
}

impl SummingMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn n_series(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_bottom(&self) -> usize {
        self.data.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

impl HierarchySpec {
    /// Builds a spec from bottom ids and `(id, level, bottom indices)` aggregates.
    pub fn new(
        bottom_ids: Vec<String>,
        aggregates: Vec<(String, u32, Vec<usize>)>,
        bottom_level: u32,
    ) -> Result<Self> {
        if bottom_ids.is_empty() {
            return Err(Error::Hierarchy("at least one bottom series is required".into()));
        }
        let n_bottom = bottom_ids.len();
        let mut seen = HashSet::new();
        for id in bottom_ids.iter() {
            if !seen.insert(id.clone()) {
                return Err(Error::Hierarchy(format!("duplicate id {id:?}")));
            }
        }
        let mut out = Vec::with_capacity(aggregates.len());
        for (id, level, mut children) in aggregates {
            if !seen.insert(id.clone()) {
                return Err(Error::Hierarchy(format!("duplicate id {id:?}")));
            }
            if children.is_empty() {
                return Err(Error::Hierarchy(format!("aggregate {id:?} is empty")));
            }
            if let Some(&bad) = children.iter().find(|&&c| c >= n_bottom) {
                return Err(Error::Hierarchy(format!(
                    "aggregate {id:?}: unknown bottom index {bad} (have {n_bottom} bottoms)"
                )));
            }
            children.sort_unstable();
            if children.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Hierarchy(format!(
                    "aggregate {id:?} lists a bottom series twice"
                )));
            }
            out.push(Aggregate { id, level, children });
        }
        Ok(Self { bottom_ids, aggregates: out, bottom_level })
    }

    /// A flat hierarchy (no aggregates) over the given bottom ids.
    pub fn flat(bottom_ids: Vec<String>) -> Result<Self> {
        Self::new(bottom_ids, Vec::new(), 0)
    }

    pub fn n_bottom(&self) -> usize {
        self.bottom_ids.len()
    }

    pub fn n_aggregate(&self) -> usize {
        self.aggregates.len()
    }

    pub fn n_series(&self) -> usize {
        self.n_aggregate() + self.n_bottom()
    }

    pub fn bottom_ids(&self) -> &[String] {
        &self.bottom_ids
    }

    pub fn aggregates(&self) -> &[Aggregate] {
        &self.aggregates
    }

    pub fn bottom_level(&self) -> u32 {
        self.bottom_level
    }

    /// All series ids in full-hierarchy order (aggregates, then bottoms).
    pub fn series_ids(&self) -> Vec<String> {
        self.aggregates
            .iter()
            .map(|a| a.id.clone())
            .chain(self.bottom_ids.iter().cloned())
            .collect()
    }

    /// Level of the series at full-hierarchy index `i`.
    pub fn level_of(&self, i: usize) -> u32 {
        if i < self.n_aggregate() {
            self.aggregates[i].level
        } else {
            self.bottom_level
        }
    }

    pub fn summing_matrix(&self) -> SummingMatrix {
        let n_a = self.n_aggregate();
        let n_b = self.n_bottom();
        let mut data = Array2::zeros((n_a + n_b, n_b));
        for (row, agg) in self.aggregates.iter().enumerate() {
            for &c in &agg.children {
                data[[row, c]] = 1.0;
            }
        }
        for b in 0..n_b {
            data[[n_a + b, b]] = 1.0;
        }
        SummingMatrix { data }
    }

    /// Full-hierarchy vector `S · y_bottom`.
    pub fn aggregate(&self, y_bottom: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if y_bottom.len() != self.n_bottom() {
            return Err(Error::shape(format!(
                "expected {} bottom values, got {}",
                self.n_bottom(),
                y_bottom.len()
            )));
        }
        let mut out = Array1::zeros(self.n_series());
        for (row, agg) in self.aggregates.iter().enumerate() {
            out[row] = agg.children.iter().map(|&c| y_bottom[c]).sum();
        }
        out.slice_mut(ndarray::s![self.n_aggregate()..]).assign(&y_bottom);
        Ok(out)
    }

    /// Applies [`aggregate`](Self::aggregate) to every column of an `N_b × T` matrix.
    pub fn aggregate_columns(&self, y_bottom: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if y_bottom.nrows() != self.n_bottom() {
            return Err(Error::shape(format!(
                "expected {} bottom rows, got {}",
                self.n_bottom(),
                y_bottom.nrows()
            )));
        }
        let n_a = self.n_aggregate();
        let mut out = Array2::zeros((self.n_series(), y_bottom.ncols()));
        for (row, agg) in self.aggregates.iter().enumerate() {
            let mut dst = out.row_mut(row);
            for &c in &agg.children {
                dst += &y_bottom.row(c);
            }
        }
        out.slice_mut(ndarray::s![n_a.., ..]).assign(&y_bottom);
        Ok(out)
    }

    /// Maximum absolute violation `max |y_a - A y_b|`; zero iff `y_full` is coherent.
    pub fn coherence_residual(&self, y_full: ArrayView1<'_, f64>) -> Result<f64> {
        if y_full.len() != self.n_series() {
            return Err(Error::shape(format!(
                "expected {} series values, got {}",
                self.n_series(),
                y_full.len()
            )));
        }
        let n_a = self.n_aggregate();
        let worst = self
            .aggregates
            .iter()
            .enumerate()
            .map(|(row, agg)| {
                let sum: f64 = agg.children.iter().map(|&c| y_full[n_a + c]).sum();
                (y_full[row] - sum).abs()
            })
            .fold(0.0, f64::max);
        Ok(worst)
    }

    /// Partition of `0..N_i` by level, ascending.
    pub fn level_groups(&self) -> Vec<(u32, Vec<usize>)> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for i in 0..self.n_series() {
            groups.entry(self.level_of(i)).or_default().push(i);
        }
        groups.into_iter().collect()
    }

    /// Parses and validates a hierarchy JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: HierarchyDocument = serde_json::from_str(text)?;
        doc.into_spec()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("hierarchy document serializes")
    }

    pub fn to_document(&self) -> HierarchyDocument {
        HierarchyDocument {
            bottom: self.bottom_ids.clone(),
            aggregates: self
                .aggregates
                .iter()
                .map(|a| AggregateEntry {
                    id: a.id.clone(),
                    level: a.level,
                    children: a
                        .children
                        .iter()
                        .map(|&c| ChildRef::Id(self.bottom_ids[c].clone()))
                        .collect(),
                })
                .collect(),
            bottom_level: self.bottom_level,
        }
    }
}

/// Wire form of a hierarchy:
/// `{"bottom": [...], "aggregates": [{"id", "level", "children"}], "bottom_level": n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyDocument {
    pub bottom: Vec<String>,
    #[serde(default)]
    pub aggregates: Vec<AggregateEntry>,
    #[serde(default)]
    pub bottom_level: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateEntry {
    pub id: String,
    pub level: u32,
    pub children: Vec<ChildRef>,
}

/// A child reference: a bottom id, or a raw bottom index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChildRef {
    Id(String),
    Index(usize),
}

impl HierarchyDocument {
    pub fn into_spec(self) -> Result<HierarchySpec> {
        let index: std::collections::HashMap<&str, usize> = self
            .bottom
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut aggregates = Vec::with_capacity(self.aggregates.len());
        for entry in &self.aggregates {
            let children = entry
                .children
                .iter()
                .map(|c| match c {
                    ChildRef::Index(i) => Ok(*i),
                    ChildRef::Id(id) => index.get(id.as_str()).copied().ok_or_else(|| {
                        Error::Hierarchy(format!(
                            "aggregate {:?} references unknown bottom id {id:?}",
                            entry.id
                        ))
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            aggregates.push((entry.id.clone(), entry.level, children));
        }
        HierarchySpec::new(self.bottom, aggregates, self.bottom_level)
    }
}

/// The country / state / region example: Total, two states, four regions.
pub fn example_hierarchy() -> HierarchySpec {
    HierarchySpec::new(
        ["b1", "b2", "b3", "b4"].iter().map(|s| s.to_string()).collect(),
        vec![
            ("Total".into(), 0, vec![0, 1, 2, 3]),
            ("S1".into(), 1, vec![0, 1]),
            ("S2".into(), 1, vec![2, 3]),
        ],
        2,
    )
    .expect("static example is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    const EXAMPLE_DOC: &str = r#"{
        "bottom": ["b1","b2","b3","b4"],
        "aggregates": [
            {"id":"Total","level":0,"children":["b1","b2","b3","b4"]},
            {"id":"S1","level":1,"children":["b1","b2"]},
            {"id":"S2","level":1,"children":["b3","b4"]}
        ],
        "bottom_level": 2
    }"#;

    fn two_bottom() -> HierarchySpec {
        HierarchySpec::new(
            vec!["b1".into(), "b2".into()],
            vec![("Total".into(), 0, vec![0, 1])],
            1,
        )
        .unwrap()
    }

    #[test]
    fn parses_example_document() {
        let spec = HierarchySpec::from_json(EXAMPLE_DOC).unwrap();
        assert_eq!(spec.n_aggregate(), 3);
        assert_eq!(spec.n_bottom(), 4);
        assert_eq!(spec.n_series(), 7);
        assert_eq!(spec, example_hierarchy());
    }

    #[test]
    fn parses_flat_document() {
        let spec = HierarchySpec::from_json(r#"{"bottom":["x","y"],"aggregates":[]}"#).unwrap();
        assert_eq!((spec.n_aggregate(), spec.n_bottom()), (0, 2));
    }

    #[test]
    fn rejects_unknown_bottom_index() {
        let doc = r#"{"bottom":["a","b","c","d"],"aggregates":[{"id":"T","level":0,"children":[0,9]}]}"#;
        let err = HierarchySpec::from_json(doc).unwrap_err().to_string();
        assert!(err.contains("unknown bottom index"), "{err}");
    }

    #[test]
    fn rejects_bad_documents() {
        let dup = r#"{"bottom":["a","a"]}"#;
        assert!(HierarchySpec::from_json(dup).unwrap_err().to_string().contains("duplicate"));
        let clash = r#"{"bottom":["a","b"],"aggregates":[{"id":"a","level":0,"children":["a"]}]}"#;
        assert!(HierarchySpec::from_json(clash).is_err());
        let unknown = r#"{"bottom":["a"],"aggregates":[{"id":"T","level":0,"children":["zz"]}]}"#;
        assert!(HierarchySpec::from_json(unknown).unwrap_err().to_string().contains("unknown bottom id"));
        let empty = r#"{"bottom":["a"],"aggregates":[{"id":"T","level":0,"children":[]}]}"#;
        assert!(HierarchySpec::from_json(empty).unwrap_err().to_string().contains("empty"));
        assert!(matches!(HierarchySpec::from_json("{nope"), Err(Error::Json(_))));
    }

    #[test]
    fn example_summing_matrix() {
        let s = example_hierarchy().summing_matrix();
        let expected = array![
            [1., 1., 1., 1.],
            [1., 1., 0., 0.],
            [0., 0., 1., 1.],
            [1., 0., 0., 0.],
            [0., 1., 0., 0.],
            [0., 0., 1., 0.],
            [0., 0., 0., 1.]
        ];
        assert_eq!(s.view(), expected.view());
    }

    #[test]
    fn flat_and_single_aggregate_matrices() {
        let flat = HierarchySpec::flat(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(flat.summing_matrix().into_inner(), Array2::<f64>::eye(3));
        assert_eq!(two_bottom().summing_matrix().into_inner(), array![[1., 1.], [1., 0.], [0., 1.]]);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(two_bottom().aggregate(array![3., 5.].view()).unwrap(), array![8., 3., 5.]);
        assert_eq!(two_bottom().aggregate(array![0., 0.].view()).unwrap(), array![0., 0., 0.]);
        let full = example_hierarchy().aggregate(array![1., 1., 1., 1.].view()).unwrap();
        assert_eq!(full, array![4., 2., 2., 1., 1., 1., 1.]);
        assert!(two_bottom().aggregate(array![1.].view()).is_err());
    }

    #[test]
    fn coherence_residual_examples() {
        let spec = two_bottom();
        assert_eq!(spec.coherence_residual(array![8., 3., 5.].view()).unwrap(), 0.0);
        assert_eq!(spec.coherence_residual(array![9., 3., 5.].view()).unwrap(), 1.0);
        assert!(spec.coherence_residual(array![8., 3.].view()).is_err());
    }

    #[test]
    fn level_group_examples() {
        assert_eq!(
            example_hierarchy().level_groups(),
            vec![(0, vec![0]), (1, vec![1, 2]), (2, vec![3, 4, 5, 6])]
        );
        let flat = HierarchySpec::flat(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(flat.level_groups(), vec![(0, vec![0, 1])]);
        assert_eq!(two_bottom().level_groups().len(), 2);
    }

    #[test]
    fn aggregate_columns_matches_vector_form() {
        let spec = example_hierarchy();
        let y = array![[1., 2.], [3., 4.], [5., 6.], [7., 8.]];
        let full = spec.aggregate_columns(y.view()).unwrap();
        for t in 0..2 {
            assert_eq!(full.column(t), spec.aggregate(y.column(t)).unwrap());
        }
    }

    fn arb_spec() -> impl Strategy<Value = HierarchySpec> {
        (1usize..7).prop_flat_map(|n_b| {
            let aggs = prop::collection::vec(
                (prop::collection::btree_set(0..n_b, 1..=n_b), 0u32..3),
                0..5,
            );
            aggs.prop_map(move |aggs| {
                let bottoms = (0..n_b).map(|i| format!("b{i}")).collect();
                let aggs = aggs
                    .into_iter()
                    .enumerate()
                    .map(|(k, (set, lvl))| (format!("a{k}"), lvl, set.into_iter().collect()))
                    .collect();
                HierarchySpec::new(bottoms, aggs, 3).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn summing_matrix_structure(spec in arb_spec()) {
            let s = spec.summing_matrix().into_inner();
            let n_a = spec.n_aggregate();
            prop_assert!(s.iter().all(|&v| v == 0.0 || v == 1.0));
            let bottom = s.slice(ndarray::s![n_a.., ..]).to_owned();
            prop_assert_eq!(bottom, Array2::<f64>::eye(spec.n_bottom()));
        }

        #[test]
        fn aggregated_vectors_are_coherent(
            spec in arb_spec(),
            vals in prop::collection::vec(-1e6f64..1e6, 6),
        ) {
            let y_b = Array1::from(vals[..spec.n_bottom()].to_vec());
            let full = spec.aggregate(y_b.view()).unwrap();
            let max = y_b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(spec.coherence_residual(full.view()).unwrap() <= 1e-12 * (1.0 + max));
        }

        #[test]
        fn json_round_trip_is_fixed_point(spec in arb_spec()) {
            let once = HierarchySpec::from_json(&spec.to_json()).unwrap();
            prop_assert_eq!(&once, &spec);
            prop_assert_eq!(once.to_json(), spec.to_json());
        }
    }
}
