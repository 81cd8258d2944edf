//! Layer-wise attribute probing: one cross-validated ridge per
//! (store, attribute), scored by Spearman ρ on a held-out split.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::spearman;
use crate::regression::{AlphaGrid, CvFitter, ProbeModel, fit_multioutput};
use crate::store::{Component, FeatureStore, StoreManifest};
use crate::tables::{DelimitedTable, parse_f64, parse_id_list};

/// Per-image attribute values, one column per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    pub image_ids: Vec<String>,
    pub attribute_names: Vec<String>,
    /// N × K
    pub values: DMatrix<f64>,
    pub value_range: Option<(f64, f64)>,
    index: HashMap<String, usize>,
}

impl AttributeTable {
    pub fn new(
        image_ids: Vec<String>,
        attribute_names: Vec<String>,
        values: DMatrix<f64>,
        value_range: Option<(f64, f64)>,
    ) -> Result<Self> {
        if attribute_names.is_empty() {
            return Err(Error::validation("attribute_names", "need at least one attribute"));
        }
        if values.nrows() != image_ids.len() || values.ncols() != attribute_names.len() {
            return Err(Error::validation(
                "values",
                format!(
                    "{}×{} values for {} images and {} attributes",
                    values.nrows(),
                    values.ncols(),
                    image_ids.len(),
                    attribute_names.len()
                ),
            ));
        }
        let mut names = HashSet::new();
        if let Some(dup) = attribute_names.iter().find(|n| !names.insert(n.as_str())) {
            return Err(Error::validation("attribute_names", format!("duplicate `{dup}`")));
        }
        let mut index = HashMap::with_capacity(image_ids.len());
        for (i, id) in image_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::validation("image_ids", format!("duplicate id `{id}`")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("values", "must be finite"));
        }
        let table = Self {
            image_ids,
            attribute_names,
            values,
            value_range: None,
            index,
        };
        match value_range {
            Some((lo, hi)) => table.with_range(lo, hi),
            None => Ok(table),
        }
    }

    /// Parses `image_id,<attr1>,<attr2>,...`.
    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let table = DelimitedTable::parse(text, source)?;
        let id_col = table.column("image_id", source)?;
        let attr_cols: Vec<usize> = (0..table.headers.len()).filter(|&c| c != id_col).collect();
        let names = attr_cols.iter().map(|&c| table.headers[c].clone()).collect();
        let mut ids = Vec::with_capacity(table.rows.len());
        let mut values = DMatrix::zeros(table.rows.len(), attr_cols.len());
        for (i, row) in table.rows.iter().enumerate() {
            ids.push(row[id_col].clone());
            for (k, &c) in attr_cols.iter().enumerate() {
                values[(i, k)] = parse_f64(&row[c], source, i + 1)?;
            }
        }
        Self::new(ids, names, values, None)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["image_id".to_string()];
        header.extend(self.attribute_names.iter().cloned());
        w.write_record(&header).unwrap();
        for (i, id) in self.image_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    /// Declares and checks the value range shared by all attributes.
    pub fn with_range(mut self, lo: f64, hi: f64) -> Result<Self> {
        if let Some(pos) = self.values.iter().position(|&v| v < lo || v > hi) {
            let (row, col) = (pos % self.values.nrows(), pos / self.values.nrows());
            return Err(Error::validation(
                self.attribute_names[col].clone(),
                format!(
                    "value {} for image `{}` outside [{lo}, {hi}]",
                    self.values[(row, col)],
                    self.image_ids[row]
                ),
            ));
        }
        self.value_range = Some((lo, hi));
        Ok(self)
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attribute_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::validation("attribute", format!("unknown attribute `{name}`")))
    }

    /// The table restricted to attributes not in `names`.
    pub fn without(&self, names: &[String]) -> Result<Self> {
        for n in names {
            self.attribute_index(n)?;
        }
        let keep: Vec<usize> = (0..self.attribute_names.len())
            .filter(|&k| !names.contains(&self.attribute_names[k]))
            .collect();
        Self::new(
            self.image_ids.clone(),
            keep.iter().map(|&k| self.attribute_names[k].clone()).collect(),
            self.values.select_columns(&keep),
            self.value_range,
        )
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Rows for `ids`, all attributes.
    pub fn rows_for<S: AsRef<str>>(&self, ids: &[S]) -> Result<DMatrix<f64>> {
        let rows = ids
            .iter()
            .map(|id| {
                let id = id.as_ref();
                self.index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::UnknownImage(id.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.values.select_rows(&rows))
    }
}

/// Disjoint, non-empty train and test image lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitSpec {
    pub fn new(train_ids: Vec<String>, test_ids: Vec<String>) -> Result<Self> {
        if train_ids.is_empty() {
            return Err(Error::validation("train_ids", "must not be empty"));
        }
        if test_ids.is_empty() {
            return Err(Error::validation("test_ids", "must not be empty"));
        }
        let train: HashSet<&str> = train_ids.iter().map(String::as_str).collect();
        if train.len() != train_ids.len() {
            return Err(Error::validation("train_ids", "contains duplicates"));
        }
        let mut test = HashSet::new();
        for id in &test_ids {
            if train.contains(id.as_str()) {
                return Err(Error::validation("split", format!("`{id}` is in both train and test")));
            }
            if !test.insert(id.as_str()) {
                return Err(Error::validation("test_ids", format!("duplicate id `{id}`")));
            }
        }
        Ok(Self {
            train_ids,
            test_ids,
        })
    }

    /// Builds a split from two one-id-per-line files.
    pub fn from_lists(train_text: &str, test_text: &str) -> Result<Self> {
        Self::new(
            parse_id_list(train_text, "train split")?,
            parse_id_list(test_text, "test split")?,
        )
    }
}

/// Identity of one store in sweep results.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StoreKey {
    pub model_id: String,
    pub component: Component,
    pub prompt_id: String,
    pub augmentation: String,
    pub dataset_id: String,
    pub layer_index: u32,
}

impl StoreKey {
    pub fn of(manifest: &StoreManifest) -> Self {
        Self {
            model_id: manifest.model_id.clone(),
            component: manifest.component,
            prompt_id: manifest.prompt_id.clone(),
            augmentation: manifest.augmentation.clone(),
            dataset_id: manifest.dataset_id.clone(),
            layer_index: manifest.layer_index,
        }
    }

    /// Everything but the layer: the unit over which best layers are chosen.
    pub fn group(&self) -> GroupKey {
        GroupKey {
            model_id: self.model_id.clone(),
            component: self.component,
            prompt_id: self.prompt_id.clone(),
            augmentation: self.augmentation.clone(),
            dataset_id: self.dataset_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub model_id: String,
    pub component: Component,
    pub prompt_id: String,
    pub augmentation: String,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum CellStatus {
    Ok,
    Undefined,
    Failed(String),
}

impl CellStatus {
    pub fn label(&self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Undefined => "undefined",
            CellStatus::Failed(_) => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub rho: Option<f64>,
    pub alpha: Option<f64>,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeSweepResult {
    /// Attribute names in table order.
    pub attributes: Vec<String>,
    pub entries: BTreeMap<(StoreKey, String), ProbeCell>,
}

impl ProbeSweepResult {
    pub fn get(&self, key: &StoreKey, attribute: &str) -> Option<&ProbeCell> {
        self.entries.get(&(key.clone(), attribute.to_string()))
    }

    pub fn stores(&self) -> Vec<StoreKey> {
        let mut keys: Vec<StoreKey> = self.entries.keys().map(|(k, _)| k.clone()).collect();
        keys.dedup();
        keys
    }

    /// `component,layer,attribute,rho,status,...` with store identity
    /// columns appended.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "component",
            "layer",
            "attribute",
            "rho",
            "status",
            "alpha",
            "model_id",
            "prompt_id",
            "augmentation",
            "dataset_id",
        ])
        .unwrap();
        for key in self.stores() {
            for attr in &self.attributes {
                let Some(cell) = self.get(&key, attr) else {
                    continue;
                };
                w.write_record([
                    key.component.as_str(),
                    &key.layer_index.to_string(),
                    attr,
                    &fmt_opt(cell.rho),
                    cell.status.label(),
                    &fmt_opt(cell.alpha),
                    &key.model_id,
                    &key.prompt_id,
                    &key.augmentation,
                    &key.dataset_id,
                ])
                .unwrap();
            }
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn check_coverage(store: &FeatureStore, ids: &[String]) -> Result<()> {
    if let Some(missing) = ids.iter().find(|id| !store.contains(id)) {
        return Err(Error::validation(
            store.manifest.label(),
            format!("store does not cover image `{missing}`"),
        ));
    }
    Ok(())
}

fn probe_store(
    store: &FeatureStore,
    attrs: &AttributeTable,
    split: &SplitSpec,
    grid: &AlphaGrid,
) -> Vec<ProbeCell> {
    let design = store
        .rows_for(&split.train_ids)
        .and_then(|x| Ok((CvFitter::new(&x)?, store.rows_for(&split.test_ids)?)));
    let (fitter, x_test) = match design {
        Ok(d) => d,
        Err(e) => {
            let cell = ProbeCell {
                rho: None,
                alpha: None,
                status: CellStatus::Failed(e.to_string()),
            };
            return vec![cell; attrs.attribute_names.len()];
        }
    };
    let y_train = attrs.rows_for(&split.train_ids).expect("coverage checked");
    let y_test = attrs.rows_for(&split.test_ids).expect("coverage checked");
    (0..attrs.attribute_names.len())
        .map(|k| {
            let y: Vec<f64> = y_train.column(k).iter().copied().collect();
            let truth: Vec<f64> = y_test.column(k).iter().copied().collect();
            let outcome = fitter.fit(&y, grid).and_then(|model| {
                let pred = model.predict(&x_test)?;
                Ok((model.alpha, spearman(&truth, pred.as_slice())?))
            });
            match outcome {
                Ok((alpha, rho)) => ProbeCell {
                    rho: rho.value,
                    alpha: Some(alpha),
                    status: if rho.is_defined() {
                        CellStatus::Ok
                    } else {
                        CellStatus::Undefined
                    },
                },
                Err(e) => ProbeCell {
                    rho: None,
                    alpha: None,
                    status: CellStatus::Failed(e.to_string()),
                },
            }
        })
        .collect()
}

/// Fits every attribute on the train split of every store and records test
/// Spearman ρ. Stores are processed in parallel; results are keyed, so
/// scheduling does not affect output.
pub fn run_probe_sweep(
    stores: &[FeatureStore],
    attrs: &AttributeTable,
    split: &SplitSpec,
    grid: &AlphaGrid,
) -> Result<ProbeSweepResult> {
    let all_ids: Vec<String> = split.train_ids.iter().chain(&split.test_ids).cloned().collect();
    if let Some(missing) = all_ids.iter().find(|id| !attrs.contains(id)) {
        return Err(Error::validation(
            "attributes",
            format!("attribute table does not cover image `{missing}`"),
        ));
    }
    let mut seen = HashSet::new();
    for store in stores {
        check_coverage(store, &all_ids)?;
        if !seen.insert(StoreKey::of(&store.manifest)) {
            return Err(Error::validation(
                "stores",
                format!("duplicate store {}", store.manifest.label()),
            ));
        }
    }
    let cells: Vec<(StoreKey, Vec<ProbeCell>)> = stores
        .par_iter()
        .map(|s| (StoreKey::of(&s.manifest), probe_store(s, attrs, split, grid)))
        .collect();
    let mut entries = BTreeMap::new();
    for (key, row) in cells {
        for (attr, cell) in attrs.attribute_names.iter().zip(row) {
            entries.insert((key.clone(), attr.clone()), cell);
        }
    }
    Ok(ProbeSweepResult {
        attributes: attrs.attribute_names.clone(),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestLayerRow {
    pub group: GroupKey,
    pub attribute: String,
    /// `(rho, layer)`, or `None` when every layer was undefined or failed.
    pub best: Option<(f64, u32)>,
}

/// Highest defined ρ per (store group, attribute) over layers; ties go to
/// the smaller layer index.
pub fn best_layer_report(result: &ProbeSweepResult) -> Vec<BestLayerRow> {
    let mut best: BTreeMap<(GroupKey, usize), Option<(f64, u32)>> = BTreeMap::new();
    for ((key, attr), cell) in &result.entries {
        let Some(k) = result.attributes.iter().position(|a| a == attr) else {
            continue;
        };
        let slot = best.entry((key.group(), k)).or_insert(None);
        if let Some(rho) = cell.rho {
            let better = match *slot {
                None => true,
                Some((r, layer)) => rho > r || (rho == r && key.layer_index < layer),
            };
            if better {
                *slot = Some((rho, key.layer_index));
            }
        }
    }
    best.into_iter()
        .map(|((group, k), best)| BestLayerRow {
            group,
            attribute: result.attributes[k].clone(),
            best,
        })
        .collect()
}

pub fn best_layer_csv(rows: &[BestLayerRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model_id",
        "component",
        "prompt_id",
        "augmentation",
        "dataset_id",
        "attribute",
        "best_rho",
        "layer",
        "status",
    ])
    .unwrap();
    for row in rows {
        let g = &row.group;
        let (rho, layer, status) = match row.best {
            Some((r, l)) => (r.to_string(), l.to_string(), "ok"),
            None => ("NA".into(), "NA".into(), "unreportable"),
        };
        w.write_record([
            g.model_id.as_str(),
            g.component.as_str(),
            &g.prompt_id,
            &g.augmentation,
            &g.dataset_id,
            &row.attribute,
            &rho,
            &layer,
            status,
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Trains the user-agnostic attribute probe used by the reduced PIAA
/// variant, on the training split of one store.
pub fn fit_probe_model(
    store: &FeatureStore,
    attrs: &AttributeTable,
    train_ids: &[String],
    grid: &AlphaGrid,
) -> Result<ProbeModel> {
    let x = store.rows_for(train_ids)?;
    let y = attrs.rows_for(train_ids)?;
    fit_multioutput(&x, &y, &attrs.attribute_names, grid)
}
