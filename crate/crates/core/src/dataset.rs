//! Interaction data model, CSV input/output and per-client temporal splits.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the sparse field that carries item identifiers.
pub const ITEM_FIELD: &str = "item_id";

const RESERVED: [&str; 3] = ["client_id", "label", "timestamp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u64);

impl std::fmt::Display for ClientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseField {
    pub name: String,
    pub cardinality: u32,
    #[serde(default)]
    pub multivalued: bool,
}

impl SparseField {
    pub fn single(name: &str, cardinality: u32) -> Self {
        Self {
            name: name.to_string(),
            cardinality,
            multivalued: false,
        }
    }

    pub fn multi(name: &str, cardinality: u32) -> Self {
        Self {
            name: name.to_string(),
            cardinality,
            multivalued: true,
        }
    }
}

/// Where a sparse field's index comes from inside an [`Interaction`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseSlot {
    Item,
    /// Position in `Interaction::sparse_values`.
    Single(usize),
    History,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub sparse_fields: Vec<SparseField>,
    #[serde(default)]
    pub dense_fields: Vec<String>,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self
            .sparse_fields
            .iter()
            .map(|f| f.name.as_str())
            .chain(self.dense_fields.iter().map(String::as_str))
        {
            if RESERVED.contains(&name) {
                return Err(Error::Schema(format!("field name `{name}` is reserved")));
            }
            if !seen.insert(name) {
                return Err(Error::Schema(format!("duplicate field name `{name}`")));
            }
        }
        for f in &self.sparse_fields {
            if f.cardinality == 0 {
                return Err(Error::Schema(format!(
                    "field `{}` has cardinality 0",
                    f.name
                )));
            }
        }
        match self.sparse_fields.iter().find(|f| f.name == ITEM_FIELD) {
            None => {
                return Err(Error::Schema(format!(
                    "missing sparse field `{ITEM_FIELD}`"
                )))
            }
            Some(f) if f.multivalued => {
                return Err(Error::Schema(format!(
                    "`{ITEM_FIELD}` must be single-valued"
                )))
            }
            Some(_) => {}
        }
        if self.sparse_fields.iter().filter(|f| f.multivalued).count() > 1 {
            return Err(Error::Schema(
                "at most one multivalued (history) field is supported".into(),
            ));
        }
        Ok(())
    }

    pub fn n_items(&self) -> u32 {
        self.sparse_fields
            .iter()
            .find(|f| f.name == ITEM_FIELD)
            .map_or(0, |f| f.cardinality)
    }

    /// Slot of each sparse field, in declaration order.
    pub fn slots(&self) -> Vec<SparseSlot> {
        let mut k = 0;
        self.sparse_fields
            .iter()
            .map(|f| {
                if f.name == ITEM_FIELD {
                    SparseSlot::Item
                } else if f.multivalued {
                    SparseSlot::History
                } else {
                    k += 1;
                    SparseSlot::Single(k - 1)
                }
            })
            .collect()
    }

    /// Single-valued fields other than the item field, in `sparse_values` order.
    pub fn extra_single_fields(&self) -> impl Iterator<Item = &SparseField> {
        self.sparse_fields
            .iter()
            .filter(|f| f.name != ITEM_FIELD && !f.multivalued)
    }

    pub fn history_field(&self) -> Option<&SparseField> {
        self.sparse_fields.iter().find(|f| f.multivalued)
    }

    /// Reads a schema from a TOML file.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let schema: FeatureSchema =
            toml::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub client_id: ClientId,
    pub item_id: u32,
    pub sparse_values: Vec<u32>,
    pub history: Vec<u32>,
    pub dense_values: Vec<f64>,
    pub label: u8,
    pub timestamp: i64,
}

impl Interaction {
    pub fn is_click(&self) -> bool {
        self.label == 1
    }

    pub fn sparse_index(&self, slot: SparseSlot) -> Option<u32> {
        match slot {
            SparseSlot::Item => Some(self.item_id),
            SparseSlot::Single(k) => self.sparse_values.get(k).copied(),
            SparseSlot::History => None,
        }
    }

    /// Checks field counts and index ranges against `schema`.
    pub fn check(&self, schema: &FeatureSchema) -> Result<()> {
        let slots = schema.slots();
        let n_single = slots
            .iter()
            .filter(|s| matches!(s, SparseSlot::Single(_)))
            .count();
        if self.sparse_values.len() != n_single {
            return Err(Error::Schema(format!(
                "expected {n_single} sparse values, got {}",
                self.sparse_values.len()
            )));
        }
        if self.dense_values.len() != schema.dense_fields.len() {
            return Err(Error::Schema(format!(
                "expected {} dense values, got {}",
                schema.dense_fields.len(),
                self.dense_values.len()
            )));
        }
        if self.label > 1 {
            return Err(Error::Schema(format!("label {} is not binary", self.label)));
        }
        for (field, slot) in schema.sparse_fields.iter().zip(&slots) {
            let out_of_range = match slot {
                SparseSlot::History => self.history.iter().any(|&h| h >= field.cardinality),
                s => self
                    .sparse_index(*s)
                    .is_some_and(|v| v >= field.cardinality),
            };
            if out_of_range {
                return Err(Error::Schema(format!(
                    "index out of range for field `{}` (cardinality {})",
                    field.name, field.cardinality
                )));
            }
        }
        if !schema.sparse_fields.iter().any(|f| f.multivalued) && !self.history.is_empty() {
            return Err(Error::Schema(
                "history given but schema has no multivalued field".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: ClientId,
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

impl ClientDataset {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.train.iter().chain(&self.test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPolicy {
    /// Trailing fraction of each client's interactions held out as test.
    pub test_fraction: f64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self { test_fraction: 0.2 }
    }
}

impl SplitPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::invalid(format!(
                "test_fraction must be in [0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }

    /// Number of held-out interactions for a client with `n` interactions.
    pub fn n_test(&self, n: usize) -> usize {
        if n < 2 || self.test_fraction == 0.0 {
            return 0;
        }
        ((self.test_fraction * n as f64).round() as usize).clamp(1, n - 1)
    }

    /// Sorts by timestamp (stable) and splits off the trailing test fraction.
    pub fn split(&self, client_id: ClientId, mut interactions: Vec<Interaction>) -> ClientDataset {
        interactions.sort_by_key(|i| i.timestamp);
        let n_test = self.n_test(interactions.len());
        let test = interactions.split_off(interactions.len() - n_test);
        ClientDataset {
            client_id,
            train: interactions,
            test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    pub split: SplitPolicy,
    /// Treat the label column as a rating; ratings >= 5 become clicks.
    pub rating_to_click: bool,
    /// Apply `ln(1 + x)` to every dense value.
    pub log_dense: bool,
}

pub const CLICK_RATING: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    /// Sorted by ascending client id.
    pub clients: Vec<ClientDataset>,
    pub item_popularity: Vec<u64>,
}

impl Dataset {
    /// Validates every interaction and computes the click-popularity table.
    pub fn new(schema: FeatureSchema, mut clients: Vec<ClientDataset>) -> Result<Self> {
        schema.validate()?;
        clients.sort_by_key(|c| c.client_id);
        for w in clients.windows(2) {
            if w[0].client_id == w[1].client_id {
                return Err(Error::invalid(format!(
                    "duplicate client id {}",
                    w[0].client_id
                )));
            }
        }
        for c in &clients {
            for i in c.interactions() {
                if i.client_id != c.client_id {
                    return Err(Error::invalid(format!(
                        "interaction of client {} stored under client {}",
                        i.client_id, c.client_id
                    )));
                }
                i.check(&schema)?;
            }
        }
        let item_popularity = count_popularity(&schema, &clients);
        Ok(Self {
            schema,
            clients,
            item_popularity,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn client(&self, id: ClientId) -> Option<&ClientDataset> {
        self.clients
            .binary_search_by_key(&id, |c| c.client_id)
            .ok()
            .map(|i| &self.clients[i])
    }

    pub fn n_interactions(&self) -> usize {
        self.clients
            .iter()
            .map(|c| c.train.len() + c.test.len())
            .sum()
    }

    pub fn recount_popularity(&self) -> Vec<u64> {
        count_popularity(&self.schema, &self.clients)
    }

    /// Writes every interaction in the CSV layout `load_csv` reads.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        self.write_csv_to(&mut out)?;
        let mut f = File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<&str> = vec!["client_id", ITEM_FIELD, "label", "timestamp"];
        header.extend(
            self.schema
                .sparse_fields
                .iter()
                .filter(|f| f.name != ITEM_FIELD)
                .map(|f| f.name.as_str()),
        );
        header.extend(self.schema.dense_fields.iter().map(String::as_str));
        wr.write_record(&header)?;
        let slots = self.schema.slots();
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for c in &self.clients {
            for i in c.interactions() {
                row.clear();
                row.push(i.client_id.to_string());
                row.push(i.item_id.to_string());
                row.push(i.label.to_string());
                row.push(i.timestamp.to_string());
                for slot in &slots {
                    match slot {
                        SparseSlot::Item => {}
                        SparseSlot::Single(k) => row.push(i.sparse_values[*k].to_string()),
                        SparseSlot::History => row.push(
                            i.history
                                .iter()
                                .map(u32::to_string)
                                .collect::<Vec<_>>()
                                .join("|"),
                        ),
                    }
                }
                row.extend(i.dense_values.iter().map(f64::to_string));
                wr.write_record(&row)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

fn count_popularity(schema: &FeatureSchema, clients: &[ClientDataset]) -> Vec<u64> {
    let mut pop = vec![0u64; schema.n_items() as usize];
    for i in clients.iter().flat_map(ClientDataset::interactions) {
        if i.is_click() {
            pop[i.item_id as usize] += 1;
        }
    }
    pop
}

enum Column {
    Client,
    Item,
    Label,
    Timestamp,
    Single(usize),
    History,
    Dense(usize),
}

/// Loads a CSV file, groups rows by client and applies the temporal split.
pub fn load_csv(path: &Path, schema: &FeatureSchema, opts: &LoadOptions) -> Result<Dataset> {
    schema.validate()?;
    opts.split.validate()?;
    let file = File::open(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }

    let slots = schema.slots();
    let mut columns = Vec::with_capacity(headers.len());
    for name in headers.iter() {
        let col = match name {
            "client_id" => Column::Client,
            ITEM_FIELD => Column::Item,
            "label" => Column::Label,
            "timestamp" => Column::Timestamp,
            other => {
                if let Some(pos) = schema.sparse_fields.iter().position(|f| f.name == other) {
                    match slots[pos] {
                        SparseSlot::Single(k) => Column::Single(k),
                        SparseSlot::History => Column::History,
                        SparseSlot::Item => unreachable!(),
                    }
                } else if let Some(d) = schema.dense_fields.iter().position(|f| f == other) {
                    Column::Dense(d)
                } else {
                    return Err(Error::Schema(format!("unknown column `{other}`")));
                }
            }
        };
        columns.push(col);
    }
    let mut required: Vec<&str> = vec!["client_id", ITEM_FIELD, "label", "timestamp"];
    required.extend(schema.sparse_fields.iter().map(|f| f.name.as_str()));
    required.extend(schema.dense_fields.iter().map(String::as_str));
    for r in required {
        if !headers.iter().any(|h| h == r) {
            return Err(Error::Schema(format!("missing column `{r}`")));
        }
    }

    let n_single = schema.extra_single_fields().count();
    let mut grouped: BTreeMap<ClientId, Vec<Interaction>> = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    let mut n_rows = 0usize;
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            }
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut it = Interaction {
            client_id: ClientId(0),
            item_id: 0,
            sparse_values: vec![0; n_single],
            history: Vec::new(),
            dense_values: vec![0.0; schema.dense_fields.len()],
            label: 0,
            timestamp: 0,
        };
        for (col, raw) in columns.iter().zip(record.iter()) {
            let raw = raw.trim();
            let int = |s: &str| -> std::result::Result<u64, String> {
                s.parse::<u64>()
                    .map_err(|e| format!("bad integer `{s}`: {e}"))
            };
            match col {
                Column::Client => it.client_id = ClientId(int(raw).map_err(err)?),
                Column::Item => it.item_id = parse_index(raw).map_err(err)?,
                Column::Label => {
                    it.label = if opts.rating_to_click {
                        let r: f64 = raw
                            .parse()
                            .map_err(|e| err(format!("bad rating `{raw}`: {e}")))?;
                        u8::from(r >= CLICK_RATING)
                    } else {
                        match raw {
                            "0" => 0,
                            "1" => 1,
                            _ => return Err(err(format!("label must be 0 or 1, got `{raw}`"))),
                        }
                    }
                }
                Column::Timestamp => {
                    it.timestamp = raw
                        .parse()
                        .map_err(|e| err(format!("bad timestamp `{raw}`: {e}")))?
                }
                Column::Single(k) => it.sparse_values[*k] = parse_index(raw).map_err(err)?,
                Column::History => {
                    if !raw.is_empty() {
                        it.history = raw
                            .split('|')
                            .map(parse_index)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(err)?;
                    }
                }
                Column::Dense(d) => {
                    let v: f64 = raw
                        .parse()
                        .map_err(|e| err(format!("bad dense value `{raw}`: {e}")))?;
                    let v = if opts.log_dense { v.ln_1p() } else { v };
                    if !v.is_finite() {
                        return Err(err(format!("non-finite dense value `{raw}`")));
                    }
                    it.dense_values[*d] = v;
                }
            }
        }
        it.check(schema).map_err(|e| err(e.to_string()))?;
        grouped.entry(it.client_id).or_default().push(it);
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let clients = grouped
        .into_iter()
        .map(|(id, rows)| opts.split.split(id, rows))
        .collect();
    Dataset::new(schema.clone(), clients)
}

fn parse_index(s: &str) -> std::result::Result<u32, String> {
    s.trim()
        .parse::<u32>()
        .map_err(|e| format!("bad index `{s}`: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> FeatureSchema {
        FeatureSchema {
            sparse_fields: vec![
                SparseField::single(ITEM_FIELD, 10),
                SparseField::single("genre", 4),
                SparseField::multi("history", 10),
            ],
            dense_fields: vec!["price".into()],
        }
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const HEADER: &str = "client_id,item_id,label,timestamp,genre,history,price\n";

    #[test]
    fn one_client_five_rows_splits_four_one() {
        let body = "7,1,1,50,0,,1.5\n7,2,0,10,1,1,2.0\n7,3,1,20,2,1|2,0.5\n7,4,0,30,3,,1\n7,5,1,40,0,3,9\n";
        let f = write(&(HEADER.to_string() + body));
        let ds = load_csv(f.path(), &schema(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.clients.len(), 1);
        let c = &ds.clients[0];
        assert_eq!(c.train.len(), 4);
        assert_eq!(c.test.len(), 1);
        assert_eq!(c.test[0].timestamp, 50);
        assert_eq!(c.train[1].history, vec![1, 2]);
        assert_eq!(ds.item_popularity[1], 1);
        assert_eq!(ds.item_popularity[2], 0);
    }

    #[test]
    fn index_equal_to_cardinality_is_rejected() {
        let f = write(&(HEADER.to_string() + "1,10,1,0,0,,1.0\n"));
        let err = load_csv(f.path(), &schema(), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn history_out_of_range_rejected() {
        let f = write(&(HEADER.to_string() + "1,1,1,0,0,3|10,1.0\n"));
        assert!(load_csv(f.path(), &schema(), &LoadOptions::default()).is_err());
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write(&(HEADER.to_string() + "1,1,1,0,0,,1.0\n1,x,1,0,0,,1.0\n"));
        match load_csv(f.path(), &schema(), &LoadOptions::default()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_and_missing_columns() {
        let f = write("client_id,item_id,label,timestamp,genre,history,price,extra\n");
        let e = load_csv(f.path(), &schema(), &LoadOptions::default()).unwrap_err();
        assert!(e.to_string().contains("unknown column `extra`"));
        let f = write("client_id,item_id,label,timestamp,genre,history\n1,1,1,0,0,,\n");
        let e = load_csv(f.path(), &schema(), &LoadOptions::default()).unwrap_err();
        assert!(e.to_string().contains("missing column `price`"));
    }

    #[test]
    fn empty_file_errors() {
        let f = write("");
        assert!(matches!(
            load_csv(f.path(), &schema(), &LoadOptions::default()),
            Err(Error::EmptyFile(_))
        ));
        let f = write(HEADER);
        assert!(matches!(
            load_csv(f.path(), &schema(), &LoadOptions::default()),
            Err(Error::EmptyFile(_))
        ));
    }

    #[test]
    fn rating_to_click_marks_five_stars() {
        let body = "1,1,5.0,0,0,,1\n1,2,4.5,1,0,,1\n2,3,5,2,0,,1\n2,3,3,3,0,,1\n3,4,0.5,4,0,,1\n";
        let f = write(&(HEADER.to_string() + body));
        let opts = LoadOptions {
            rating_to_click: true,
            ..Default::default()
        };
        let ds = load_csv(f.path(), &schema(), &opts).unwrap();
        let positives = ds
            .clients
            .iter()
            .flat_map(ClientDataset::interactions)
            .filter(|i| i.is_click())
            .count();
        assert_eq!(positives, 2);
    }

    #[test]
    fn log_dense_applies_ln1p() {
        let f = write(&(HEADER.to_string() + "1,1,1,0,0,,99\n"));
        let opts = LoadOptions {
            log_dense: true,
            ..Default::default()
        };
        let ds = load_csv(f.path(), &schema(), &opts).unwrap();
        assert!((ds.clients[0].train[0].dense_values[0] - 100f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_interaction_client_keeps_it_in_train() {
        let f = write(&(HEADER.to_string() + "4,1,1,0,0,,1\n"));
        let ds = load_csv(f.path(), &schema(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.clients[0].train.len(), 1);
        assert!(ds.clients[0].test.is_empty());
    }

    #[test]
    fn schema_validation() {
        let mut s = schema();
        s.sparse_fields.push(SparseField::multi("other", 3));
        assert!(s.validate().is_err());
        let mut s = schema();
        s.dense_fields.push("genre".into());
        assert!(s.validate().is_err());
        let mut s = schema();
        s.sparse_fields[1].cardinality = 0;
        assert!(s.validate().is_err());
        let s = FeatureSchema {
            sparse_fields: vec![SparseField::single("x", 3)],
            dense_fields: vec![],
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn round_trip_through_csv() {
        let body = "1,1,1,5,0,,1.25\n1,2,0,5,1,1,2.0\n1,3,1,7,2,1|2,0.1\n2,4,0,1,3,,-3.5e-7\n";
        let f = write(&(HEADER.to_string() + body));
        let ds = load_csv(f.path(), &schema(), &LoadOptions::default()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        ds.write_csv(out.path()).unwrap();
        let again = load_csv(out.path(), &schema(), &LoadOptions::default()).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn split_keeps_temporal_order() {
        let p = SplitPolicy::default();
        assert_eq!(p.n_test(1), 0);
        assert_eq!(p.n_test(2), 1);
        assert_eq!(p.n_test(5), 1);
        assert_eq!(p.n_test(10), 2);
        assert_eq!(SplitPolicy { test_fraction: 0.0 }.n_test(10), 0);
    }
}
