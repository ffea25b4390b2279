"""Loss-fusion training over heterogeneous client features, plus baselines.

Clients share only a subset of features. The shared ("global") subset is
trained federally; afterwards each client trains a local main net over all
of its features while a one-layer prune net, reading the frozen shared
model's last hidden layer, adds a second loss term weighted by a learnable
scalar beta:

    total = l_main + beta * l_prune

Both terms are class-weighted BCE against the same labels. The gradient of
the total loss in beta is l_prune itself (nonnegative), so under plain sgd
beta decays monotonically — the shared signal fades out as the local net
takes over. Inference uses the main net alone; the prune net, beta, and the
shared model never touch the prediction path.

Baselines: purely local training, the shared federated model on common
features only, and a centralized model over the pooled union schema with
unavailable features marked unknown.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import UNKNOWN, Dataset, Feature, FeatureSchema, encode, numeric_stats
from .errors import ConfigError, DataError, ShapeError
from .nn import (
    AdamState,
    ModelParams,
    TrainConfig,
    _loss_and_grads,
    class_balanced_weights,
    derive_seed,
    forward,
    init_params,
    optimizer_step,
    predict_probs,
    train_classifier,
    weighted_bce_loss,
)

DEFAULT_HIDDEN_DIMS = (64, 32)


# ---------------------------------------------------------------------------
# feature grouping

@dataclass
class FeatureGrouping:
    global_features: list  # lexicographic intersection of all client schemas
    local_features: dict  # client_id -> that client's features, schema order
    unique_features: dict  # client_id -> local minus global, schema order


def group_features(schemas):
    """Split per-client schemas into shared and client-unique feature sets.

    Features match by name; a name carrying different kinds (or different
    category lists) on different clients is a conflict.
    """
    if len(schemas) < 2:
        raise ConfigError("feature grouping needs >= 2 client schemas")
    by_name = {}
    for cid in sorted(schemas):
        for f in schemas[cid].features:
            if f.name not in by_name:
                by_name[f.name] = (cid, f)
                continue
            other_cid, other = by_name[f.name]
            if other.kind != f.kind:
                raise DataError(
                    f"feature {f.name!r}: kind {f.kind!r} on client {cid!r} "
                    f"conflicts with {other.kind!r} on {other_cid!r}"
                )
            if f.kind == "categorical" and list(f.categories) != list(other.categories):
                raise DataError(
                    f"feature {f.name!r}: category lists differ between "
                    f"{cid!r} and {other_cid!r}"
                )
    common = set.intersection(*(set(s.names) for s in schemas.values()))
    if not common:
        raise DataError("no features shared by every client; joint training impossible")
    return FeatureGrouping(
        global_features=sorted(common),
        local_features={cid: list(s.names) for cid, s in schemas.items()},
        unique_features={
            cid: [n for n in s.names if n not in common] for cid, s in schemas.items()
        },
    )


def select_feature_columns(mat, names):
    """Encoded columns of the named features, in the given feature order.

    Returns (x, column_labels); the labels identify the layout so remote
    participants can verify they encode the shared features identically.
    """
    cols, labels = [], []
    for name in names:
        if name not in mat.column_map:
            raise ShapeError(f"feature {name!r} not present in encoded matrix")
        start, stop = mat.column_map[name]
        cols.append(mat.x[:, start:stop])
        labels.extend(mat.column_labels[start:stop])
    return np.hstack(cols), labels


# ---------------------------------------------------------------------------
# fusion model

@dataclass
class FusionConfig:
    train: TrainConfig
    main_hidden_dims: tuple = DEFAULT_HIDDEN_DIMS
    beta0: float = 1.0
    beta_max: float = 10.0
    beta_optimizer: str = "sgd"  # "sgd" | "adam"
    beta_lr: float = 0.01
    freeze_beta: bool = False

    def __post_init__(self):
        self.main_hidden_dims = tuple(int(d) for d in self.main_hidden_dims)
        if any(d < 1 for d in self.main_hidden_dims):
            raise ConfigError(f"hidden dims must be >= 1, got {self.main_hidden_dims}")
        if self.beta_max <= 0:
            raise ConfigError(f"beta_max must be positive, got {self.beta_max}")
        if not (0.0 <= self.beta0 <= self.beta_max):
            raise ConfigError(f"beta0 must lie in [0, {self.beta_max}], got {self.beta0}")
        if self.beta_optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown beta optimizer {self.beta_optimizer!r}")
        if self.beta_lr <= 0:
            raise ConfigError(f"beta_lr must be positive, got {self.beta_lr}")


@dataclass
class _BetaOptState:
    step: int = 0
    m: float = 0.0
    v: float = 0.0


@dataclass
class FusionState:
    global_model: ModelParams  # frozen; never updated here
    main_net: ModelParams
    prune_net: ModelParams  # exactly one layer: embedding width -> 1, sigmoid
    beta: float
    main_opt: AdamState | None = None
    prune_opt: AdamState | None = None
    beta_opt: _BetaOptState = field(default_factory=_BetaOptState)


def extract_embeddings(global_model, x_global):
    """Last-hidden-layer activations of the (frozen) shared model, per row."""
    x = getattr(x_global, "x", x_global)
    if len(global_model.layers) < 2:
        raise ShapeError("shared model has no hidden layer to read embeddings from")
    _, hidden = forward(global_model, x)
    return hidden[-1]


def init_fusion_state(global_model, local_input_dim, cfg):
    """Fresh FusionState; main-net init is seeded exactly like local training."""
    if len(global_model.layers) < 2:
        raise ShapeError("shared model needs at least one hidden layer")
    h = global_model.layers[-2].weights.shape[0]
    dims = [int(local_input_dim), *cfg.main_hidden_dims, 1]
    activations = ["relu"] * (len(dims) - 2) + ["sigmoid"]
    main_net = init_params(dims, activations, cfg.train.rng_seed)
    prune_net = init_params([h, 1], ["sigmoid"], derive_seed(cfg.train.rng_seed, "prune"))
    return FusionState(
        global_model=global_model.copy(),
        main_net=main_net,
        prune_net=prune_net,
        beta=float(cfg.beta0),
    )


def fusion_loss(main_probs, prune_probs, labels, class_weights, beta):
    """Returns (total, l_main, l_prune) with total = l_main + beta * l_prune."""
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    l_main = weighted_bce_loss(main_probs, labels, class_weights)
    l_prune = weighted_bce_loss(prune_probs, labels, class_weights)
    return l_main + beta * l_prune, l_main, l_prune


def beta_step(beta, l_prune, lr, beta_max):
    """One sgd step on beta; d(total)/d(beta) = l_prune, clamped to [0, beta_max]."""
    return float(min(max(beta - lr * l_prune, 0.0), beta_max))


def _beta_update(state, l_prune, cfg):
    if cfg.beta_optimizer == "sgd":
        return beta_step(state.beta, l_prune, cfg.beta_lr, cfg.beta_max), state.beta_opt
    b1, b2, eps = cfg.train.adam_beta1, cfg.train.adam_beta2, cfg.train.adam_eps
    opt = state.beta_opt
    t = opt.step + 1
    m = b1 * opt.m + (1.0 - b1) * l_prune
    v = b2 * opt.v + (1.0 - b2) * l_prune**2
    step = cfg.beta_lr * (m / (1.0 - b1**t)) / (np.sqrt(v / (1.0 - b2**t)) + eps)
    beta = float(min(max(state.beta - step, 0.0), cfg.beta_max))
    return beta, _BetaOptState(t, m, v)


def fusion_train(state, x_local, x_global, labels, class_weights, cfg):
    """Train main net, prune net, and beta jointly; returns (state, trace).

    Per batch: the frozen shared model embeds the common features, the prune
    net scores the embedding, the main net scores the full local row. The
    total loss backpropagates into the main net (plain BCE gradient), into
    the prune net (scaled by beta), and into beta (gradient = batch l_prune).
    The shared model is never touched. The trace records per-epoch mean
    l_main, mean l_prune, and end-of-epoch beta.

    Batch order and main-net updates replay plain local training bit for bit:
    with beta frozen at zero this IS baseline_localized under the same seed.
    """
    x_local = np.asarray(x_local, dtype=np.float64)
    x_global = getattr(x_global, "x", x_global)
    x_global = np.asarray(x_global, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x_local.ndim != 2 or x_global.ndim != 2:
        raise ShapeError("feature matrices must be 2-d")
    if not (x_local.shape[0] == x_global.shape[0] == y.shape[0]):
        raise ShapeError(
            f"row misalignment: local {x_local.shape[0]}, "
            f"shared {x_global.shape[0]}, labels {y.shape[0]}"
        )
    n = x_local.shape[0]
    tcfg = cfg.train
    rng = np.random.default_rng(derive_seed(tcfg.rng_seed, "shuffle"))
    trace = []
    for _ in range(tcfg.epochs):
        order = rng.permutation(n)
        main_losses, prune_losses = [], []
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            l_main, g_main = _loss_and_grads(
                state.main_net, x_local[idx], y[idx], class_weights
            )
            emb = extract_embeddings(state.global_model, x_global[idx])
            l_prune, g_prune = _loss_and_grads(
                state.prune_net, emb, y[idx], class_weights
            )
            g_prune = [(state.beta * gw, state.beta * gb) for gw, gb in g_prune]
            state.main_net, state.main_opt = optimizer_step(
                state.main_net, g_main, state.main_opt, tcfg
            )
            state.prune_net, state.prune_opt = optimizer_step(
                state.prune_net, g_prune, state.prune_opt, tcfg
            )
            if not cfg.freeze_beta:
                state.beta, state.beta_opt = _beta_update(state, l_prune, cfg)
            main_losses.append(l_main)
            prune_losses.append(l_prune)
        trace.append(
            {
                "l_main": float(np.mean(main_losses)),
                "l_prune": float(np.mean(prune_losses)),
                "beta": state.beta,
            }
        )
    return state, trace


def predict_fused(state, x_local):
    """Inference comes from the main net alone."""
    return predict_probs(state.main_net, x_local)


# ---------------------------------------------------------------------------
# baselines

def baseline_localized(x, y, class_weights, cfg, hidden_dims=DEFAULT_HIDDEN_DIMS):
    """Plain training on the client's own feature group; (params, losses)."""
    x = np.asarray(x, dtype=np.float64)
    dims = [x.shape[1], *hidden_dims, 1]
    return train_classifier(x, y, class_weights, dims, cfg)


def baseline_hfl_predict(global_model, x_global):
    """The federated shared model scored on the common features only."""
    x = getattr(x_global, "x", x_global)
    return predict_probs(global_model, x)


def union_schema(schemas):
    """Union of feature sets in first-seen order; conflicting kinds are errors."""
    feats, seen = [], {}
    for schema in schemas:
        for f in schema.features:
            if f.name in seen:
                other = seen[f.name]
                if other.kind != f.kind:
                    raise DataError(
                        f"feature {f.name!r}: kind {f.kind!r} conflicts with {other.kind!r}"
                    )
                if f.kind == "categorical" and list(f.categories) != list(other.categories):
                    raise DataError(f"feature {f.name!r}: category lists differ")
                continue
            seen[f.name] = f
            cats = list(f.categories) if f.categories is not None else None
            feats.append(Feature(f.name, f.kind, cats))
    return FeatureSchema(feats)


def align_to_schema(ds, schema):
    """Re-shape rows onto a wider schema, filling absent features with UNKNOWN."""
    pos = {name: j for j, name in enumerate(ds.schema.names)}
    rows = [
        [row[pos[f.name]] if f.name in pos else UNKNOWN for f in schema.features]
        for row in ds.rows
    ]
    return Dataset(schema, rows, ds.labels.copy())


def pool_datasets(datasets):
    """Concatenate datasets over their union schema (absent cells UNKNOWN)."""
    if len(datasets) < 2:
        raise ConfigError("pooling needs >= 2 datasets")
    schema = union_schema([d.schema for d in datasets])
    aligned = [align_to_schema(d, schema) for d in datasets]
    rows = [row for a in aligned for row in a.rows]
    labels = np.concatenate([a.labels for a in aligned])
    return Dataset(schema, rows, labels)


def baseline_centralized(train_sets, test_sets, cfg,
                         hidden_dims=DEFAULT_HIDDEN_DIMS, cb_beta=0.999):
    """One model over the pooled union-schema data; per-client test scores.

    Training rows from every client are pooled (missing features UNKNOWN),
    standardization statistics and class weights come from the pooled
    training split, and each client's test split is scored separately.
    Returns (per_client_probs, params).
    """
    if len(train_sets) != len(test_sets):
        raise ConfigError("need one test split per training split")
    pooled = pool_datasets(train_sets)
    stats = numeric_stats(pooled)
    enc = encode(pooled, stats)
    weights = class_balanced_weights(pooled.class_counts(), cb_beta)
    dims = [enc.x.shape[1], *hidden_dims, 1]
    params, _ = train_classifier(enc.x, enc.labels, weights, dims, cfg)
    probs = []
    for ts in test_sets:
        aligned = align_to_schema(ts, pooled.schema)
        enc_t = encode(aligned, stats)
        probs.append(predict_probs(params, enc_t.x))
    return probs, params
