"""Tabular datasets: schemas, unknown-aware encoding, splits, CSV, synthetic data.

Cells are raw values (float, category string, or the UNKNOWN sentinel).
Encoding maps a dataset to a dense float matrix: numeric features become a
standardized value column plus a presence indicator, categorical features a
one-hot block that is all-zero when the cell is unknown.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .nn import sigmoid

KINDS = ("numeric", "categorical")

# Logit scale for the synthetic generator: ||w|| of the latent score vector.
LOGIT_SCALE = 4.0

# Noise multiplier on the small client's unique feature views. Kept well
# below 1 so those views stay informative while the shared views degrade.
SMALL_UNIQUE_NOISE = 0.25


class _Unknown:
    """Singleton sentinel for a missing/unavailable cell value."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNKNOWN"

    def __reduce__(self):
        # keeps identity through pickle (worker pools)
        return (_Unknown, ())


UNKNOWN = _Unknown()


@dataclass
class Feature:
    name: str
    kind: str
    categories: list | None = None


@dataclass
class FeatureSchema:
    features: list

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate feature names in schema: {names}")
        for f in self.features:
            if f.kind not in KINDS:
                raise DataError(f"feature {f.name!r}: unknown kind {f.kind!r}")
            if f.kind == "categorical" and not f.categories:
                raise DataError(f"categorical feature {f.name!r} needs >= 1 category")

    def __len__(self):
        return len(self.features)

    @property
    def names(self):
        return tuple(f.name for f in self.features)

    def by_name(self):
        return {f.name: f for f in self.features}


@dataclass
class Dataset:
    schema: FeatureSchema
    rows: list  # list of cell lists, one per row
    labels: np.ndarray  # {0,1} per row

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.rows) != self.labels.shape[0]:
            raise DataError(
                f"{len(self.rows)} rows but {self.labels.shape[0]} labels"
            )
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError("labels must be 0 or 1")
        width = len(self.schema)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise DataError(f"row {i} has {len(row)} cells, schema has {width}")

    @property
    def n_rows(self):
        return len(self.rows)

    def class_counts(self):
        n1 = int(self.labels.sum())
        return (self.n_rows - n1, n1)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.schema, [self.rows[int(i)] for i in idx], self.labels[idx])


@dataclass
class EncodedMatrix:
    x: np.ndarray  # (n, d) float64
    labels: np.ndarray
    column_map: dict  # feature name -> (start, stop)
    column_labels: list
    schema: FeatureSchema
    stats: dict  # numeric feature name -> (mean, sd)


@dataclass
class SyntheticSpec:
    latent_dim: int = 12
    n_small: int = 1000
    n_large: int = 8000
    prevalence_target: float = 0.08
    n_common: int = 6
    n_unique_small: int = 6
    n_unique_large: int = 2
    noise_sd: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.n_small < 1 or self.n_large < 1:
            raise ConfigError("client sizes must be >= 1")
        if not (0.0 < self.prevalence_target < 0.5):
            raise ConfigError(
                f"prevalence_target must lie in (0, 0.5), got {self.prevalence_target}"
            )
        if self.n_common < 1:
            raise ConfigError("n_common must be >= 1 (the shared model needs features)")
        if self.n_unique_small < 0 or self.n_unique_large < 0:
            raise ConfigError("unique feature counts must be >= 0")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")


def stratified_split_indices(labels, train_frac, seed):
    """Per-class row split; returns sorted (train_idx, test_idx).

    Train count per class is floor(train_frac*n_c + 0.5), nudged so that both
    splits keep at least one row of each class with >= 2 rows; a singleton
    class goes entirely to train.
    """
    labels = np.asarray(labels)
    if not (0.0 < train_frac < 1.0):
        raise ConfigError(f"train_frac must lie in (0, 1), got {train_frac}")
    counts = (int(np.sum(labels == 0)), int(np.sum(labels == 1)))
    if counts[0] == 0 or counts[1] == 0:
        raise DataError(f"stratified split needs both classes, got counts {counts}")
    rng = np.random.default_rng(seed)
    train_parts, test_parts = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        n_c = idx.size
        t = int(np.floor(train_frac * n_c + 0.5))
        t = min(max(t, 1), n_c - 1) if n_c >= 2 else 1
        perm = rng.permutation(n_c)
        train_parts.append(idx[perm[:t]])
        test_parts.append(idx[perm[t:]])
    train = np.sort(np.concatenate(train_parts))
    test = np.sort(np.concatenate(test_parts))
    return train, test


def stratified_split(ds, train_frac, seed):
    """Split a Dataset into (train, test) preserving class ratios."""
    train_idx, test_idx = stratified_split_indices(ds.labels, train_frac, seed)
    return ds.subset(train_idx), ds.subset(test_idx)


def numeric_stats(ds):
    """(mean, sd) of the known cells of each numeric feature; sd 0 maps to 1."""
    stats = {}
    for j, feat in enumerate(ds.schema.features):
        if feat.kind != "numeric":
            continue
        vals = np.array(
            [row[j] for row in ds.rows if row[j] is not UNKNOWN], dtype=np.float64
        )
        if vals.size == 0:
            stats[feat.name] = (0.0, 1.0)
            continue
        sd = float(vals.std())
        stats[feat.name] = (float(vals.mean()), sd if sd > 0.0 else 1.0)
    return stats


def encode(ds, stats=None):
    """Encode a Dataset as a dense float matrix.

    `stats` carries the standardization statistics; pass the training split's
    numeric_stats() when encoding validation/test data to avoid leakage.
    Defaults to the dataset's own statistics.
    """
    if stats is None:
        stats = numeric_stats(ds)
    n = ds.n_rows
    blocks, column_labels = [], []
    column_map = {}
    start = 0
    for j, feat in enumerate(ds.schema.features):
        if feat.kind == "numeric":
            if feat.name not in stats:
                raise DataError(f"no statistics for numeric feature {feat.name!r}")
            mean, sd = stats[feat.name]
            block = np.zeros((n, 2))
            for i, row in enumerate(ds.rows):
                cell = row[j]
                if cell is UNKNOWN:
                    continue
                block[i, 0] = (float(cell) - mean) / sd
                block[i, 1] = 1.0
            labels_j = [feat.name, f"{feat.name}::present"]
        else:
            cats = feat.categories
            cat_index = {c: k for k, c in enumerate(cats)}
            block = np.zeros((n, len(cats)))
            for i, row in enumerate(ds.rows):
                cell = row[j]
                if cell is UNKNOWN:
                    continue
                if cell not in cat_index:
                    raise DataError(
                        f"feature {feat.name!r}: value {cell!r} not in categories"
                    )
                block[i, cat_index[cell]] = 1.0
            labels_j = [f"{feat.name}={c}" for c in cats]
        blocks.append(block)
        column_labels.extend(labels_j)
        column_map[feat.name] = (start, start + block.shape[1])
        start += block.shape[1]
    x = np.hstack(blocks) if blocks else np.zeros((n, 0))
    return EncodedMatrix(
        x=x,
        labels=ds.labels.copy(),
        column_map=column_map,
        column_labels=column_labels,
        schema=ds.schema,
        stats=dict(stats),
    )


def decode(mat):
    """Inverse of encode(): recovers raw cells, mapping absent blocks to UNKNOWN."""
    rows = []
    for i in range(mat.x.shape[0]):
        cells = []
        for feat in mat.schema.features:
            start, stop = mat.column_map[feat.name]
            block = mat.x[i, start:stop]
            if feat.kind == "numeric":
                if block[1] == 0.0:
                    cells.append(UNKNOWN)
                else:
                    mean, sd = mat.stats[feat.name]
                    cells.append(float(block[0]) * sd + mean)
            else:
                hot = np.flatnonzero(block == 1.0)
                cells.append(UNKNOWN if hot.size == 0 else feat.categories[int(hot[0])])
        rows.append(cells)
    return Dataset(mat.schema, rows, mat.labels.copy())


def _unit_rows(rng, k, dim):
    if k == 0:
        return np.zeros((0, dim))
    m = rng.normal(size=(k, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _split_score_vector(w, common_proj):
    """Scale w to LOGIT_SCALE with its energy split evenly across the span
    of the shared views and their orthogonal complement; returns the scaled
    w and an orthonormal basis (rows) of the complement."""
    d = w.size
    q, _ = np.linalg.qr(common_proj.T, mode="complete")
    k = min(common_proj.shape[0], d)
    hidden_basis = q[:, k:].T
    w_vis = q[:, :k] @ (q[:, :k].T @ w)
    w_hid = w - w_vis
    if hidden_basis.shape[0] == 0 or np.linalg.norm(w_hid) == 0 or np.linalg.norm(w_vis) == 0:
        return LOGIT_SCALE * w / np.linalg.norm(w), hidden_basis
    half = LOGIT_SCALE / np.sqrt(2.0)
    w = half * w_vis / np.linalg.norm(w_vis) + half * w_hid / np.linalg.norm(w_hid)
    return w, hidden_basis


def _complement_views(rng, k, hidden_basis, dim):
    """k unit views favouring the subspace the shared views miss: a random
    rotation of the complement basis, padded with plain unit rows if the
    complement is too small."""
    n_hid = hidden_basis.shape[0]
    take = min(k, n_hid)
    rows = np.zeros((0, dim))
    if take > 0:
        r, _ = np.linalg.qr(rng.normal(size=(n_hid, n_hid)))
        rows = (r @ hidden_basis)[:take]
    if k > take:
        rows = np.vstack([rows, _unit_rows(rng, k - take, dim)])
    return rows


def _tune_intercept(scores, u, target, tol=0.01, max_iter=100):
    # empirical prevalence is a monotone step function of the intercept
    lo, hi = -30.0, 30.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        g = float(np.mean(u < sigmoid(scores + mid)))
        if abs(g - target) <= tol:
            return mid
        if g < target:
            lo = mid
        else:
            hi = mid
    raise DataError(
        f"could not tune intercept to prevalence {target} +/- {tol} in {max_iter} steps"
    )


def generate_synthetic(spec):
    """Seeded two-client generator: (client_small, client_large).

    Rows share a latent z ~ N(0, I); labels are Bernoulli(sigmoid(w.z + b))
    with b tuned per client so empirical prevalence hits the target. The
    first n_common columns are identical linear views of z for both clients
    (identity axes first, then random unit directions) plus noise_sd noise.
    Unique columns are client-specific views with SMALL_UNIQUE_NOISE x the
    noise for the small client. So that those views carry real signal a model
    restricted to the shared columns cannot recover, w splits its squared
    norm evenly between the span of the shared views and its orthogonal
    complement, and the small client's unique views are (randomly rotated)
    orthonormal directions inside that complement.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.latent_dim
    w = rng.normal(size=d)

    n_ident = min(spec.n_common, d)
    common_proj = np.vstack(
        [np.eye(d)[:n_ident], _unit_rows(rng, spec.n_common - n_ident, d)]
    )
    w, hidden_basis = _split_score_vector(w, common_proj)
    small_proj = _complement_views(rng, spec.n_unique_small, hidden_basis, d)
    large_proj = _unit_rows(rng, spec.n_unique_large, d)

    def build_client(n, unique_proj, unique_prefix, unique_noise_factor):
        z = rng.normal(size=(n, d))
        k_u = unique_proj.shape[0]
        x_common = z @ common_proj.T + spec.noise_sd * rng.normal(size=(n, spec.n_common))
        x_unique = z @ unique_proj.T + unique_noise_factor * spec.noise_sd * rng.normal(
            size=(n, k_u)
        )
        u = rng.uniform(size=n)
        b = _tune_intercept(z @ w, u, spec.prevalence_target)
        y = (u < sigmoid(z @ w + b)).astype(np.int64)
        names = [f"c{j:02d}" for j in range(spec.n_common)] + [
            f"{unique_prefix}{j:02d}" for j in range(k_u)
        ]
        schema = FeatureSchema([Feature(name, "numeric") for name in names])
        x = np.hstack([x_common, x_unique])
        rows = [[float(v) for v in x[i]] for i in range(n)]
        return Dataset(schema, rows, y)

    small = build_client(spec.n_small, small_proj, "su", SMALL_UNIQUE_NOISE)
    large = build_client(spec.n_large, large_proj, "lu", 1.0)
    return small, large


def load_schema(path):
    """Read a schema file; returns (FeatureSchema, label_column_name)."""
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise DataError(f"schema file {path}: {exc}") from None
    if not isinstance(doc, dict) or "label" not in doc or "features" not in doc:
        raise DataError("schema file must be an object with 'label' and 'features'")
    feats = []
    for entry in doc["features"]:
        name, kind = entry.get("name"), entry.get("kind")
        if not name or kind not in KINDS:
            raise DataError(f"schema feature {entry!r}: need a name and a valid kind")
        cats = entry.get("categories")
        feats.append(Feature(name, kind, list(cats) if cats is not None else None))
    return FeatureSchema(feats), str(doc["label"])


def save_schema(schema, label_name, path):
    doc = {"label": label_name, "features": []}
    for f in schema.features:
        entry = {"name": f.name, "kind": f.kind}
        if f.kind == "categorical":
            entry["categories"] = list(f.categories)
        doc["features"].append(entry)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_csv(path, schema_path):
    """Ingest a header-first CSV against a schema file.

    Empty cells and the literal token "UNKNOWN" load as the UNKNOWN sentinel.
    Row numbers in errors count data rows from 1.
    """
    schema, label_name = load_schema(schema_path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file, expected a header row")
        col_of = {name: i for i, name in enumerate(header)}
        missing = [f.name for f in schema.features if f.name not in col_of]
        if label_name not in col_of:
            missing.append(label_name)
        if missing:
            raise DataError(f"{path}: missing columns: {', '.join(missing)}")
        rows, labels = [], []
        for rownum, rec in enumerate(reader, start=1):
            if len(rec) < len(header):
                raise DataError(f"row {rownum}: expected {len(header)} cells, got {len(rec)}")
            cells = []
            for feat in schema.features:
                raw = rec[col_of[feat.name]]
                if raw == "" or raw == "UNKNOWN":
                    cells.append(UNKNOWN)
                elif feat.kind == "numeric":
                    try:
                        cells.append(float(raw))
                    except ValueError:
                        raise DataError(
                            f"row {rownum}: feature {feat.name!r}: "
                            f"cannot parse numeric value {raw!r}"
                        ) from None
                else:
                    if raw not in feat.categories:
                        raise DataError(
                            f"row {rownum}: feature {feat.name!r}: "
                            f"value {raw!r} not in categories"
                        )
                    cells.append(raw)
            raw_label = rec[col_of[label_name]]
            try:
                y = int(raw_label)
            except ValueError:
                y = -1
            if y not in (0, 1):
                raise DataError(f"row {rownum}: label must be 0 or 1, got {raw_label!r}")
            rows.append(cells)
            labels.append(y)
    return Dataset(schema, rows, np.asarray(labels, dtype=np.int64))


def save_csv(ds, path, label_name="label"):
    """Write a Dataset as CSV; UNKNOWN cells are written as the literal token."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(list(ds.schema.names) + [label_name])
        for row, y in zip(ds.rows, ds.labels):
            cells = []
            for feat, cell in zip(ds.schema.features, row):
                if cell is UNKNOWN:
                    cells.append("UNKNOWN")
                elif feat.kind == "numeric":
                    cells.append(repr(float(cell)))
                else:
                    cells.append(cell)
            writer.writerow(cells + [int(y)])
