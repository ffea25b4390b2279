"""Config-driven experiment runner.

One JSON config describes the data source (synthetic two-client generator or
CSV files), the federated schedule, the fusion/baseline training setup, and
the seed sweep. Each seed runs the full pipeline: per-client stratified
split, feature grouping, federated training on the shared features, fused
local training, the three baselines, and per-client test metrics. Artifacts
land in out/<run-id>/: the resolved config, per-seed samples, the aggregate
report, and per-seed training traces (including the beta curves).

Seed bookkeeping: every stochastic stage derives its own child seed from the
sweep seed via derive_seed, so runs are reproducible and stages are
independent. The fused model's main net deliberately shares its seed with
the localized baseline: the two loss terms touch disjoint parameters, so
under a shared seed the fused main net replays localized training exactly,
and the artifacts make that visible rather than masking it with seed drift.
"""

import copy
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from multiprocessing import get_context
from pathlib import Path

from .data import (
    SyntheticSpec,
    encode,
    generate_synthetic,
    load_csv,
    numeric_stats,
    stratified_split,
)
from .errors import ConfigError, FedFusionError
from .evaluation import (
    FUSED_METHOD,
    MetricSample,
    aggregate_report,
    auprc,
    auroc,
    save_report_json,
    save_samples_csv,
)
from .federated import FedClient, FedConfig, run_federated
from .fusion import (
    FusionConfig,
    baseline_centralized,
    baseline_hfl_predict,
    baseline_localized,
    fusion_train,
    group_features,
    init_fusion_state,
    predict_fused,
    select_feature_columns,
)
from .nn import TrainConfig, class_balanced_weights, derive_seed, predict_probs

DEFAULT_CONFIG = {
    "data": {
        "kind": "synthetic",
        "latent_dim": 12,
        "n_small": 1000,
        "n_large": 8000,
        "prevalence_target": 0.08,
        "n_common": 6,
        "n_unique_small": 6,
        "n_unique_large": 2,
        "noise_sd": 3.0,
        "seed": 2024,
    },
    "seeds": list(range(30)),
    "train_frac": 0.7,
    "cb_beta": 0.999,
    "transport": "inproc",
    "out_dir": "out",
    "workers": 1,
    "fed": {
        "rounds": 5,
        "local_epochs": 2,
        "hidden_dims": [64, 32],
        "learning_rate": 1e-3,
        "batch_size": 64,
        "optimizer": "adam",
    },
    "fusion": {
        "epochs": 15,
        "batch_size": 64,
        "learning_rate": 1e-3,
        "optimizer": "adam",
        "main_hidden_dims": [64, 32],
        "beta0": 1.0,
        "beta_max": 10.0,
        "beta_optimizer": "sgd",
        "beta_lr": 0.01,
        "freeze_beta": False,
    },
}


@dataclass
class ExperimentConfig:
    data: dict
    seeds: list
    fed: FedConfig
    fusion: FusionConfig
    train_frac: float = 0.7
    cb_beta: float = 0.999
    transport: str = "inproc"
    out_dir: str = "out"
    workers: int = 1

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not (0.0 < self.train_frac < 1.0):
            raise ConfigError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        if not (0.0 <= self.cb_beta < 1.0):
            raise ConfigError(f"cb_beta must lie in [0, 1), got {self.cb_beta}")
        if self.transport not in ("inproc", "tcp"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


def _check_keys(doc, allowed, where):
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")


def _merge_config_doc(user_doc):
    doc = copy.deepcopy(DEFAULT_CONFIG)
    _check_keys(user_doc, DEFAULT_CONFIG, "config")
    for key, value in user_doc.items():
        if key == "data":
            kind = value.get("kind", "synthetic")
            if kind == "synthetic":
                merged = dict(DEFAULT_CONFIG["data"])
                merged.update(value)
                _check_keys(merged, DEFAULT_CONFIG["data"], "data")
                doc["data"] = merged
            elif kind == "csv":
                doc["data"] = copy.deepcopy(value)
            else:
                raise ConfigError(f"unknown data kind {kind!r}")
        elif key in ("fed", "fusion"):
            _check_keys(value, DEFAULT_CONFIG[key], key)
            doc[key].update(value)
        else:
            doc[key] = value
    return doc


def _validate_csv_data(doc):
    _check_keys(doc, ("kind", "clients"), "data")
    clients = doc.get("clients")
    if not isinstance(clients, list) or len(clients) < 2:
        raise ConfigError("csv data needs a 'clients' list with >= 2 entries")
    ids = []
    for entry in clients:
        _check_keys(entry, ("id", "csv", "schema"), "client")
        for field in ("id", "csv", "schema"):
            if field not in entry:
                raise ConfigError(f"csv client entry missing {field!r}")
        ids.append(entry["id"])
        for path_key in ("csv", "schema"):
            if not Path(entry[path_key]).exists():
                raise ConfigError(f"client {entry['id']!r}: no such file {entry[path_key]!r}")
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate client ids: {sorted(ids)}")


def config_from_dict(user_doc):
    """Resolve a (possibly partial) config document into an ExperimentConfig."""
    doc = _merge_config_doc(user_doc)
    if doc["data"]["kind"] == "synthetic":
        SyntheticSpec(**{k: v for k, v in doc["data"].items() if k != "kind"})
        n_clients = 2
    else:
        _validate_csv_data(doc["data"])
        n_clients = len(doc["data"]["clients"])

    fed_doc = doc["fed"]
    fed = FedConfig(
        rounds=fed_doc["rounds"],
        local_epochs=fed_doc["local_epochs"],
        train=TrainConfig(
            learning_rate=fed_doc["learning_rate"],
            batch_size=fed_doc["batch_size"],
            optimizer=fed_doc["optimizer"],
        ),
        expected_clients=n_clients,
        hidden_dims=tuple(fed_doc["hidden_dims"]),
    )
    fus_doc = doc["fusion"]
    fusion = FusionConfig(
        train=TrainConfig(
            learning_rate=fus_doc["learning_rate"],
            epochs=fus_doc["epochs"],
            batch_size=fus_doc["batch_size"],
            optimizer=fus_doc["optimizer"],
        ),
        main_hidden_dims=tuple(fus_doc["main_hidden_dims"]),
        beta0=fus_doc["beta0"],
        beta_max=fus_doc["beta_max"],
        beta_optimizer=fus_doc["beta_optimizer"],
        beta_lr=fus_doc["beta_lr"],
        freeze_beta=fus_doc["freeze_beta"],
    )
    return ExperimentConfig(
        data=doc["data"],
        seeds=doc["seeds"],
        fed=fed,
        fusion=fusion,
        train_frac=doc["train_frac"],
        cb_beta=doc["cb_beta"],
        transport=doc["transport"],
        out_dir=doc["out_dir"],
        workers=doc["workers"],
    )


def config_to_dict(cfg):
    """The fully-resolved config document (inverse of config_from_dict)."""
    return {
        "data": copy.deepcopy(cfg.data),
        "seeds": list(cfg.seeds),
        "train_frac": cfg.train_frac,
        "cb_beta": cfg.cb_beta,
        "transport": cfg.transport,
        "out_dir": cfg.out_dir,
        "workers": cfg.workers,
        "fed": {
            "rounds": cfg.fed.rounds,
            "local_epochs": cfg.fed.local_epochs,
            "hidden_dims": list(cfg.fed.hidden_dims),
            "learning_rate": cfg.fed.train.learning_rate,
            "batch_size": cfg.fed.train.batch_size,
            "optimizer": cfg.fed.train.optimizer,
        },
        "fusion": {
            "epochs": cfg.fusion.train.epochs,
            "batch_size": cfg.fusion.train.batch_size,
            "learning_rate": cfg.fusion.train.learning_rate,
            "optimizer": cfg.fusion.train.optimizer,
            "main_hidden_dims": list(cfg.fusion.main_hidden_dims),
            "beta0": cfg.fusion.beta0,
            "beta_max": cfg.fusion.beta_max,
            "beta_optimizer": cfg.fusion.beta_optimizer,
            "beta_lr": cfg.fusion.beta_lr,
            "freeze_beta": cfg.fusion.freeze_beta,
        },
    }


def load_config(path, overrides=None):
    """Load a JSON config file and apply CLI-style scalar overrides."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"no such config file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if overrides:
        doc.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(doc)


def config_run_id(cfg):
    """Digest of the scientific config; out_dir and workers don't matter."""
    doc = config_to_dict(cfg)
    doc.pop("out_dir")
    doc.pop("workers")
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def load_datasets(cfg):
    """Materialize the per-client datasets described by cfg.data."""
    doc = cfg.data
    if doc["kind"] == "synthetic":
        spec = SyntheticSpec(**{k: v for k, v in doc.items() if k != "kind"})
        small, large = generate_synthetic(spec)
        return {"small": small, "large": large}
    return {entry["id"]: load_csv(entry["csv"], entry["schema"]) for entry in doc["clients"]}


def run_seed(cfg, datasets, seed):
    """All four methods for one sweep seed; returns (samples, trace_doc)."""
    grouping = group_features({cid: ds.schema for cid, ds in datasets.items()})
    order = sorted(datasets)

    splits, encoded, weights = {}, {}, {}
    for cid in order:
        tr, te = stratified_split(datasets[cid], cfg.train_frac, derive_seed(seed, "split", cid))
        stats = numeric_stats(tr)
        splits[cid] = (tr, te)
        encoded[cid] = (encode(tr, stats), encode(te, stats))
        weights[cid] = class_balanced_weights(tr.class_counts(), cfg.cb_beta)

    fed_cfg = replace(cfg.fed, train=replace(cfg.fed.train, rng_seed=derive_seed(seed, "fed")))
    fed_clients = []
    for cid in order:
        x_global, labels = select_feature_columns(encoded[cid][0], grouping.global_features)
        fed_clients.append(
            FedClient(cid, x_global, splits[cid][0].labels, weights[cid], labels)
        )
    global_model, fed_history = run_federated(fed_clients, fed_cfg, cfg.transport)

    samples = []
    trace_doc = {"seed": seed, "fed_history": fed_history, "fusion": {}}
    for cid in order:
        enc_tr, enc_te = encoded[cid]
        y_te = splits[cid][1].labels
        xg_tr, _ = select_feature_columns(enc_tr, grouping.global_features)
        xg_te, _ = select_feature_columns(enc_te, grouping.global_features)
        local_seed = derive_seed(seed, "local", cid)

        loc_cfg = replace(cfg.fusion.train, rng_seed=local_seed)
        loc_params, _ = baseline_localized(
            enc_tr.x, splits[cid][0].labels, weights[cid], loc_cfg,
            cfg.fusion.main_hidden_dims,
        )
        samples.append(_sample("localized", cid, seed, predict_probs(loc_params, enc_te.x), y_te))

        samples.append(_sample("hfl", cid, seed, baseline_hfl_predict(global_model, xg_te), y_te))

        fus_cfg = replace(cfg.fusion, train=replace(cfg.fusion.train, rng_seed=local_seed))
        state = init_fusion_state(global_model, enc_tr.x.shape[1], fus_cfg)
        state, trace = fusion_train(
            state, enc_tr.x, xg_tr, splits[cid][0].labels, weights[cid], fus_cfg
        )
        trace_doc["fusion"][cid] = trace
        samples.append(_sample(FUSED_METHOD, cid, seed, predict_fused(state, enc_te.x), y_te))

    cen_cfg = replace(cfg.fusion.train, rng_seed=derive_seed(seed, "central"))
    cen_probs, _ = baseline_centralized(
        [splits[cid][0] for cid in order],
        [splits[cid][1] for cid in order],
        cen_cfg,
        cfg.fusion.main_hidden_dims,
        cfg.cb_beta,
    )
    for cid, probs in zip(order, cen_probs):
        samples.append(_sample("centralized", cid, seed, probs, splits[cid][1].labels))
    return samples, trace_doc


def _sample(method, cid, seed, probs, labels):
    return MetricSample(method, cid, seed, auroc(probs, labels), auprc(probs, labels))


def _seed_task(args):
    cfg, datasets, seed = args
    try:
        return run_seed(cfg, datasets, seed)
    except FedFusionError as exc:
        raise type(exc)(f"seed {seed}: {exc}") from exc


def run_experiment(cfg, log=None):
    """Run the configured sweep and write all artifacts; returns (report, out_dir)."""
    say = log or (lambda msg: None)
    datasets = load_datasets(cfg)
    run_id = config_run_id(cfg)
    out = Path(cfg.out_dir) / run_id
    (out / "traces").mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
    say(f"run {run_id}: {len(cfg.seeds)} seeds, transport {cfg.transport}")

    seeds = sorted(cfg.seeds)
    tasks = [(cfg, datasets, seed) for seed in seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(
            max_workers=cfg.workers, mp_context=get_context("fork")
        ) as pool:
            results = list(pool.map(_seed_task, tasks))
    else:
        results = [_seed_task(t) for t in tasks]

    samples = []
    for seed, (seed_samples, trace_doc) in zip(seeds, results):
        samples.extend(seed_samples)
        with open(out / "traces" / f"seed_{seed}.json", "w", encoding="utf-8") as f:
            json.dump(trace_doc, f, indent=2, sort_keys=True)
            f.write("\n")
        say(f"seed {seed} done")

    report = aggregate_report(samples)
    save_samples_csv(samples, out / "samples.csv")
    save_report_json(report, out / "report.json")
    say(f"artifacts in {out}")
    return report, out
