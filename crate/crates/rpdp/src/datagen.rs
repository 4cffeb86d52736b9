//! Federated dataset construction: synthetic Gaussian-cluster benchmarks,
//! CSV ingestion for tabular data, and IID / label-sharded partitioning.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sampling::RngStream;

/// Per-feature affine transform fitted on the train split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureScale {
    pub mean: f64,
    pub std: f64,
}

impl FeatureScale {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// One client's shard: z-scored features, labels, per-record budgets, and
/// disjoint train/test index sets covering every record.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub budgets: Vec<f64>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub scaler: Vec<FeatureScale>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub clients: Vec<ClientShard>,
    pub n_features: usize,
    pub n_classes: usize,
}

impl FederatedDataset {
    /// Replace per-record budgets, one vector per client.
    pub fn assign_budgets(&mut self, budgets: Vec<Vec<f64>>) -> Result<()> {
        if budgets.len() != self.clients.len() {
            return Err(Error::Data("budget vectors do not match client count".into()));
        }
        for (shard, b) in self.clients.iter_mut().zip(budgets) {
            if b.len() != shard.len() {
                return Err(Error::Data("budget vector does not match shard size".into()));
            }
            if b.iter().any(|eps| !eps.is_finite() || *eps <= 0.0) {
                return Err(Error::Data("budgets must be positive".into()));
            }
            shard.budgets = b;
        }
        Ok(())
    }

    pub fn total_records(&self) -> usize {
        self.clients.iter().map(ClientShard::len).sum()
    }
}

/// Split indices, fit the scaler on the train rows, and z-score the whole
/// shard. Constant features pass through unscaled with a warning so the
/// dimension is preserved.
fn build_shard(
    features: Vec<Vec<f64>>,
    labels: Vec<u32>,
    train_fraction: f64,
    stream: &mut RngStream,
) -> Result<ClientShard> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Data(format!("shard needs at least 2 records, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Data(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let d = features[0].len();

    let mut order: Vec<usize> = (0..n).collect();
    stream.shuffle(&mut order);
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let scaler: Vec<FeatureScale> = (0..d)
        .map(|j| {
            let mean = train_idx.iter().map(|&i| features[i][j]).sum::<f64>() / n_train as f64;
            let var = train_idx.iter().map(|&i| (features[i][j] - mean).powi(2)).sum::<f64>()
                / n_train as f64;
            let std = var.sqrt();
            if std < 1e-12 {
                eprintln!(
                    "warning: feature {j} is constant on the train split; passing through unscaled"
                );
                FeatureScale { mean: 0.0, std: 1.0 }
            } else {
                FeatureScale { mean, std }
            }
        })
        .collect();

    let features = features
        .into_iter()
        .map(|row| row.iter().zip(&scaler).map(|(x, s)| s.apply(*x)).collect())
        .collect();

    let budgets = vec![1.0; n];
    Ok(ClientShard {
        features,
        labels,
        budgets,
        train_idx,
        test_idx,
        scaler,
    })
}

/// Synthetic benchmark: one Gaussian cluster of unit spread per class,
/// class centroids placed `separation` apart from the origin along random
/// unit directions. Larger separation makes the classes easier to tell
/// apart; separation 0 makes them indistinguishable.
pub fn generate_synthetic(
    n_clients: usize,
    n_per_client: usize,
    n_features: usize,
    n_classes: usize,
    separation: f64,
    train_fraction: f64,
    stream: &mut RngStream,
) -> Result<FederatedDataset> {
    if n_clients == 0 || n_per_client < 2 || n_features == 0 || n_classes < 2 {
        return Err(Error::Data(
            "need n_clients >= 1, n_per_client >= 2, n_features >= 1, n_classes >= 2".into(),
        ));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::Data(format!("separation must be nonnegative, got {separation}")));
    }

    let mut centroids = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let dir: Vec<f64> = (0..n_features).map(|_| stream.normal()).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        centroids.push(dir.into_iter().map(|x| separation * x / norm).collect::<Vec<f64>>());
    }

    let mut clients = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let mut features = Vec::with_capacity(n_per_client);
        let mut labels = Vec::with_capacity(n_per_client);
        for _ in 0..n_per_client {
            let y = stream.index(n_classes);
            let x: Vec<f64> =
                centroids[y].iter().map(|c| c + stream.normal()).collect();
            features.push(x);
            labels.push(y as u32);
        }
        clients.push(build_shard(features, labels, train_fraction, stream)?);
    }

    Ok(FederatedDataset {
        clients,
        n_features,
        n_classes,
    })
}

/// Raw rows parsed out of one CSV file.
struct CsvTable {
    features: Vec<Vec<f64>>,
    raw_labels: Vec<i64>,
    budgets: Option<Vec<f64>>,
}

fn parse_csv(path: &Path, label_column: &str) -> Result<CsvTable> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: file is empty", path.display())))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_col = columns
        .iter()
        .position(|c| *c == label_column)
        .ok_or_else(|| Error::Data(format!("{}: no column named '{label_column}'", path.display())))?;
    let epsilon_col = columns.iter().position(|c| *c == "epsilon");

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    let mut budgets = epsilon_col.map(|_| Vec::new());

    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::Data(format!(
                "{}: line {}: expected {} fields, found {}",
                path.display(),
                line_no + 1,
                columns.len(),
                cells.len()
            )));
        }
        let parse = |col: usize| -> Result<f64> {
            cells[col].parse::<f64>().map_err(|_| {
                Error::Data(format!(
                    "{}: line {}: column '{}' has non-numeric value '{}'",
                    path.display(),
                    line_no + 1,
                    columns[col],
                    cells[col]
                ))
            })
        };
        let label = parse(label_col)?;
        if label.fract() != 0.0 {
            return Err(Error::Data(format!(
                "{}: line {}: label '{label}' is not an integer",
                path.display(),
                line_no + 1
            )));
        }
        raw_labels.push(label as i64);
        if let (Some(col), Some(buf)) = (epsilon_col, budgets.as_mut()) {
            let eps = parse(col)?;
            if eps <= 0.0 || eps.is_nan() {
                return Err(Error::Data(format!(
                    "{}: line {}: epsilon must be positive, got {eps}",
                    path.display(),
                    line_no + 1
                )));
            }
            buf.push(eps);
        }
        let mut row = Vec::with_capacity(columns.len() - 1);
        for col in 0..columns.len() {
            if col != label_col && Some(col) != epsilon_col {
                row.push(parse(col)?);
            }
        }
        features.push(row);
    }

    if features.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok(CsvTable {
        features,
        raw_labels,
        budgets,
    })
}

/// Load one client per CSV file. Files carry a header row, numeric
/// features, an integer label column, and optionally a positive `epsilon`
/// budget column. Distinct label values across all files are mapped to
/// contiguous class ids in ascending order.
pub fn load_csv<P: AsRef<Path>>(
    paths: &[P],
    label_column: &str,
    train_fraction: f64,
    stream: &mut RngStream,
) -> Result<FederatedDataset> {
    if paths.is_empty() {
        return Err(Error::Data("no CSV paths given".into()));
    }
    let tables: Vec<CsvTable> = paths
        .iter()
        .map(|p| parse_csv(p.as_ref(), label_column))
        .collect::<Result<_>>()?;

    let n_features = tables[0].features[0].len();
    if tables.iter().any(|t| t.features.iter().any(|r| r.len() != n_features)) {
        return Err(Error::Data("feature dimensions differ across files".into()));
    }

    let mut classes: Vec<i64> = tables.iter().flat_map(|t| t.raw_labels.iter().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Data("need at least 2 distinct label values".into()));
    }
    let class_id = |raw: i64| classes.binary_search(&raw).expect("label is present") as u32;

    let mut clients = Vec::with_capacity(tables.len());
    for table in tables {
        let labels: Vec<u32> = table.raw_labels.iter().map(|&r| class_id(r)).collect();
        let mut shard = build_shard(table.features, labels, train_fraction, stream)?;
        if let Some(budgets) = table.budgets {
            shard.budgets = budgets;
        }
        clients.push(shard);
    }

    Ok(FederatedDataset {
        n_features,
        n_classes: classes.len(),
        clients,
    })
}

/// Pool rows from several CSV files and repartition them into `n_clients`
/// shards. Budgets come along only when every file carries an `epsilon`
/// column.
pub fn load_csv_pooled<P: AsRef<Path>>(
    paths: &[P],
    label_column: &str,
    n_clients: usize,
    mode: PartitionMode,
    train_fraction: f64,
    stream: &mut RngStream,
) -> Result<FederatedDataset> {
    if paths.is_empty() {
        return Err(Error::Data("no CSV paths given".into()));
    }
    let tables: Vec<CsvTable> = paths
        .iter()
        .map(|p| parse_csv(p.as_ref(), label_column))
        .collect::<Result<_>>()?;

    let mut classes: Vec<i64> = tables.iter().flat_map(|t| t.raw_labels.iter().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Data("need at least 2 distinct label values".into()));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let all_budgeted = tables.iter().all(|t| t.budgets.is_some());
    let mut budgets = all_budgeted.then(Vec::new);
    for table in tables {
        for raw in &table.raw_labels {
            labels.push(classes.binary_search(raw).expect("label is present") as u32);
        }
        if let (Some(out), Some(b)) = (budgets.as_mut(), table.budgets) {
            out.extend(b);
        }
        features.extend(table.features);
    }
    partition(features, labels, budgets, n_clients, mode, train_fraction, stream)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    Iid,
    NonIid,
}

/// Split a pooled dataset into client shards. IID deals a uniform random
/// permutation into equal parts; NonIID sorts by label, cuts the pool into
/// 2·n_clients contiguous slices, and deals two slices to each client, so
/// a client sees at most the labels spanned by its two slices.
pub fn partition(
    features: Vec<Vec<f64>>,
    labels: Vec<u32>,
    budgets: Option<Vec<f64>>,
    n_clients: usize,
    mode: PartitionMode,
    train_fraction: f64,
    stream: &mut RngStream,
) -> Result<FederatedDataset> {
    let n = features.len();
    if n_clients == 0 {
        return Err(Error::Data("need at least one client".into()));
    }
    if labels.len() != n || budgets.as_ref().is_some_and(|b| b.len() != n) {
        return Err(Error::Data("pool arrays have mismatched lengths".into()));
    }
    if n < 2 * n_clients {
        return Err(Error::Data(format!(
            "pool of {n} records is too small for {n_clients} clients"
        )));
    }
    let n_features = features.first().map_or(0, Vec::len);
    if n_features == 0 {
        return Err(Error::Data("pool has no features".into()));
    }

    let groups: Vec<Vec<usize>> = match mode {
        PartitionMode::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            stream.shuffle(&mut order);
            chunk_evenly(&order, n_clients)
        }
        PartitionMode::NonIid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (labels[i], i));
            let shards = chunk_evenly(&order, 2 * n_clients);
            let mut shard_ids: Vec<usize> = (0..2 * n_clients).collect();
            stream.shuffle(&mut shard_ids);
            (0..n_clients)
                .map(|c| {
                    let mut g = shards[shard_ids[2 * c]].clone();
                    g.extend_from_slice(&shards[shard_ids[2 * c + 1]]);
                    g
                })
                .collect()
        }
    };

    let n_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut clients = Vec::with_capacity(n_clients);
    for group in groups {
        let f: Vec<Vec<f64>> = group.iter().map(|&i| features[i].clone()).collect();
        let l: Vec<u32> = group.iter().map(|&i| labels[i]).collect();
        let mut shard = build_shard(f, l, train_fraction, stream)?;
        if let Some(b) = &budgets {
            shard.budgets = group.iter().map(|&i| b[i]).collect();
        }
        clients.push(shard);
    }

    Ok(FederatedDataset {
        clients,
        n_features,
        n_classes,
    })
}

fn chunk_evenly(order: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let n = order.len();
    let base = n / parts;
    let rem = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < rem);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    out
}

/// Render a shard's records as CSV text (used by tests and examples).
pub fn shard_to_csv(shard: &ClientShard, with_epsilon: bool) -> String {
    let d = shard.scaler.len();
    let mut out = String::new();
    for j in 0..d {
        let _ = write!(out, "f{j},");
    }
    out.push_str(if with_epsilon { "label,epsilon\n" } else { "label\n" });
    for i in 0..shard.len() {
        for x in &shard.features[i] {
            let _ = write!(out, "{x},");
        }
        if with_epsilon {
            let _ = writeln!(out, "{},{}", shard.labels[i], shard.budgets[i]);
        } else {
            let _ = writeln!(out, "{}", shard.labels[i]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{derive_stream, Label};

    fn stream(tag: &'static str) -> RngStream {
        derive_stream(7, &[Label::Text(tag)])
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(3, 20, 4, 2, 3.0, 0.66, &mut stream("gen")).unwrap();
        let b = generate_synthetic(3, 20, 4, 2, 3.0, 0.66, &mut stream("gen")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_shapes_and_split() {
        let ds = generate_synthetic(4, 50, 6, 3, 2.0, 0.66, &mut stream("shape")).unwrap();
        assert_eq!(ds.clients.len(), 4);
        assert_eq!(ds.n_features, 6);
        assert_eq!(ds.n_classes, 3);
        for shard in &ds.clients {
            assert_eq!(shard.len(), 50);
            assert_eq!(shard.train_idx.len(), 33); // round(0.66 * 50)
            assert_eq!(shard.test_idx.len(), 17);
            let mut all: Vec<usize> = shard.train_idx.iter().chain(&shard.test_idx).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..50).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_separation_leaves_class_means_indistinct() {
        let ds = generate_synthetic(1, 4000, 3, 2, 0.0, 0.66, &mut stream("flat")).unwrap();
        let shard = &ds.clients[0];
        for j in 0..3 {
            let mut means = [0.0_f64; 2];
            let mut counts = [0_usize; 2];
            for i in 0..shard.len() {
                means[shard.labels[i] as usize] += shard.features[i][j];
                counts[shard.labels[i] as usize] += 1;
            }
            let gap = (means[0] / counts[0] as f64 - means[1] / counts[1] as f64).abs();
            assert!(gap < 0.2, "class means separated by {gap} with zero separation");
        }
    }

    #[test]
    fn train_statistics_are_zero_mean_unit_variance() {
        let ds = generate_synthetic(2, 300, 5, 2, 4.0, 0.66, &mut stream("zs")).unwrap();
        for shard in &ds.clients {
            for j in 0..5 {
                let n = shard.train_idx.len() as f64;
                let mean = shard.train_idx.iter().map(|&i| shard.features[i][j]).sum::<f64>() / n;
                let var = shard
                    .train_idx
                    .iter()
                    .map(|&i| (shard.features[i][j] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                assert!(mean.abs() < 1e-9, "train mean {mean}");
                assert!((var - 1.0).abs() < 1e-9, "train variance {var}");
            }
        }
    }

    #[test]
    fn csv_round_trip_with_budgets() {
        let ds = generate_synthetic(1, 30, 3, 2, 2.0, 0.66, &mut stream("csv")).unwrap();
        let dir = std::env::temp_dir().join("rpdp_csv_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("client0.csv");
        fs::write(&path, shard_to_csv(&ds.clients[0], true)).unwrap();

        let loaded = load_csv(&[&path], "label", 0.66, &mut stream("csv-load")).unwrap();
        assert_eq!(loaded.clients[0].len(), 30);
        assert_eq!(loaded.n_features, 3);
        assert_eq!(loaded.clients[0].budgets, ds.clients[0].budgets);
    }

    #[test]
    fn csv_errors_are_descriptive() {
        let dir = std::env::temp_dir().join("rpdp_csv_errs");
        fs::create_dir_all(&dir).unwrap();

        let missing = dir.join("missing.csv");
        fs::write(&missing, "a,b\n1,2\n").unwrap();
        let err = load_csv(&[&missing], "label", 0.66, &mut stream("e1")).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");

        let empty = dir.join("empty.csv");
        fs::write(&empty, "").unwrap();
        assert!(load_csv(&[&empty], "label", 0.66, &mut stream("e2")).is_err());

        let bad = dir.join("bad.csv");
        fs::write(&bad, "a,label\n1,0\nx,1\n2,0\n1,1\n").unwrap();
        let err = load_csv(&[&bad], "label", 0.66, &mut stream("e3")).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn pooled_csv_load_repartitions_and_keeps_budgets() {
        let dir = std::env::temp_dir().join("rpdp_csv_pool");
        fs::create_dir_all(&dir).unwrap();
        let mut paths = Vec::new();
        for file in 0..2 {
            let ds = generate_synthetic(1, 40, 2, 2, 2.0, 0.66, &mut stream("pool-gen")).unwrap();
            let mut shard = ds.clients.into_iter().next().unwrap();
            shard.budgets = (0..shard.len()).map(|i| 0.5 + i as f64).collect();
            let path = dir.join(format!("part{file}.csv"));
            fs::write(&path, shard_to_csv(&shard, true)).unwrap();
            paths.push(path);
        }

        let pooled = load_csv_pooled(&paths, "label", 4, PartitionMode::Iid, 0.66, &mut stream("pool"))
            .unwrap();
        assert_eq!(pooled.clients.len(), 4);
        assert_eq!(pooled.total_records(), 80);
        // Budgets from the epsilon columns survive the repartition.
        let mut budgets: Vec<f64> = pooled.clients.iter().flat_map(|s| s.budgets.clone()).collect();
        budgets.sort_by(f64::total_cmp);
        let mut expect: Vec<f64> = (0..40).map(|i| 0.5 + i as f64).collect();
        expect.extend((0..40).map(|i| 0.5 + i as f64));
        expect.sort_by(f64::total_cmp);
        assert_eq!(budgets, expect);

        let sharded =
            load_csv_pooled(&paths, "label", 4, PartitionMode::NonIid, 0.66, &mut stream("pool-ni"))
                .unwrap();
        for shard in &sharded.clients {
            let mut distinct = shard.labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            assert!(distinct.len() <= 2);
        }
    }

    fn balanced_pool(n: usize, classes: u32) -> (Vec<Vec<f64>>, Vec<u32>) {
        let features = (0..n).map(|i| vec![i as f64, (i % 7) as f64]).collect();
        let labels = (0..n).map(|i| (i as u32) % classes).collect();
        (features, labels)
    }

    #[test]
    fn non_iid_clients_hold_at_most_two_labels() {
        let (features, labels) = balanced_pool(10_000, 10);
        let ds = partition(features, labels, None, 10, PartitionMode::NonIid, 0.66, &mut stream("ni"))
            .unwrap();
        for shard in &ds.clients {
            let mut distinct: Vec<u32> = shard.labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            assert!(distinct.len() <= 2, "client holds {} labels", distinct.len());
        }
        assert_eq!(ds.total_records(), 10_000);
    }

    #[test]
    fn iid_shards_match_pool_frequencies() {
        let (features, labels) = balanced_pool(10_000, 10);
        let ds = partition(features, labels, None, 10, PartitionMode::Iid, 0.66, &mut stream("iid"))
            .unwrap();
        for shard in &ds.clients {
            assert_eq!(shard.len(), 1000);
            for class in 0..10_u32 {
                let count = shard.labels.iter().filter(|l| **l == class).count() as f64;
                // Pool frequency 0.1; 3σ multinomial band for n = 1000.
                let sigma = (1000.0_f64 * 0.1 * 0.9).sqrt();
                assert!((count - 100.0).abs() <= 3.0 * sigma, "class {class}: {count}");
            }
        }
    }

    #[test]
    fn single_client_partition_is_the_pool() {
        let (features, labels) = balanced_pool(40, 2);
        let ds = partition(
            features.clone(),
            labels.clone(),
            None,
            1,
            PartitionMode::Iid,
            0.66,
            &mut stream("one"),
        )
        .unwrap();
        assert_eq!(ds.clients.len(), 1);
        assert_eq!(ds.clients[0].len(), 40);
    }

    #[test]
    fn partition_rejects_tiny_pools() {
        let (features, labels) = balanced_pool(10, 2);
        assert!(partition(features, labels, None, 8, PartitionMode::Iid, 0.66, &mut stream("tiny"))
            .is_err());
    }
}
