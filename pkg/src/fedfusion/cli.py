"""Command-line front end.

Subcommands: run (full sweep from a JSON config), serve/join (one federated
session over TCP, one process per party), gen (synthetic CSVs), report
(re-aggregate a samples.csv). Exit codes: 0 success, 2 bad config or usage,
3 protocol/codec failure, 4 data or metric failure.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_csv,
    numeric_stats,
    encode,
    save_csv,
    save_schema,
    stratified_split,
)
from .errors import (
    CodecError,
    ConfigError,
    DataError,
    MetricError,
    ProtocolError,
    ReportError,
)
from .evaluation import (
    FUSED_METHOD,
    aggregate_report,
    load_samples_csv,
    save_report_json,
)
from .federated import (
    FedClient,
    encode_params,
    join_federated,
    serve_federated,
)
from .fusion import select_feature_columns
from .harness import (
    config_from_dict,
    load_config,
    run_experiment,
)
from .nn import class_balanced_weights, derive_seed


def _parse_seeds(text):
    """Comma list of ints; 'a:b' tokens expand to range(a, b)."""
    seeds = []
    for token in text.split(","):
        token = token.strip()
        if ":" in token:
            lo, hi = token.split(":", 1)
            seeds.extend(range(int(lo), int(hi)))
        elif token:
            seeds.append(int(token))
    return seeds


def _experiment_config(args, skip=()):
    overrides = {}
    for key in ("train_frac", "cb_beta", "transport", "out_dir", "workers"):
        value = getattr(args, key, None)
        if value is not None and key not in skip:
            overrides[key] = value
    if getattr(args, "seeds", None) is not None:
        overrides["seeds"] = _parse_seeds(args.seeds)
    if args.config is not None:
        return load_config(args.config, overrides)
    return config_from_dict(overrides)


def _print_report(report):
    print(f"seeds: {len(report.seeds)}")
    for (method, client), vals in sorted(report.aggregates.items()):
        print(
            f"{method:>11s}  client={client:<8s} "
            f"auroc {vals['auroc_mean']:.4f} +/- {vals['auroc_sd']:.4f}  "
            f"auprc {vals['auprc_mean']:.4f} +/- {vals['auprc_sd']:.4f}"
        )
    for (client, baseline, metric), vals in sorted(report.comparisons.items()):
        print(
            f"{FUSED_METHOD} vs {baseline:<11s} client={client:<8s} {metric}: "
            f"t={vals['t']:+.4f} p={vals['p']:.3e}"
        )


def _cmd_run(args):
    cfg = _experiment_config(args)
    report, out = run_experiment(cfg, log=print if args.verbose else None)
    _print_report(report)
    print(f"artifacts: {out}")
    return 0


def _cmd_gen(args):
    spec = SyntheticSpec(
        latent_dim=args.latent_dim,
        n_small=args.n_small,
        n_large=args.n_large,
        prevalence_target=args.prevalence,
        n_common=args.n_common,
        n_unique_small=args.n_unique_small,
        n_unique_large=args.n_unique_large,
        noise_sd=args.noise_sd,
        seed=args.seed,
    )
    small, large = generate_synthetic(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in (("small", small), ("large", large)):
        save_csv(ds, out / f"{name}.csv")
        save_schema(ds.schema, "label", out / f"{name}.schema.json")
        print(f"{name}: {ds.n_rows} rows -> {out / (name + '.csv')}")
    return 0


def _fed_session_pieces(args):
    """Shared serve/join plumbing: config plus the derived session seed."""
    # join's --train-frac may legitimately be 1.0, which the sweep config
    # rejects, so it stays out of the override set and is read back directly.
    cfg = _experiment_config(args, skip=("train_frac",))
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    fed = replace(
        cfg.fed, train=replace(cfg.fed.train, rng_seed=derive_seed(seed, "fed"))
    )
    return cfg, fed, seed


def _write_model(params, path):
    Path(path).write_bytes(encode_params(params))
    print(f"model -> {path}")


def _cmd_serve(args):
    cfg, fed, _ = _fed_session_pieces(args)
    if args.expected_clients is not None:
        fed = replace(fed, expected_clients=args.expected_clients)

    def on_listening(port):
        print(f"listening on {args.host}:{port}", flush=True)

    params, history = serve_federated(fed, args.host, args.port, on_listening)
    for round_no, losses in enumerate(history):
        line = " ".join(f"{cid}={loss:.4f}" for cid, loss in sorted(losses.items()))
        print(f"round {round_no}: {line}")
    _write_model(params, args.out)
    return 0


def _cmd_join(args):
    cfg, fed, seed = _fed_session_pieces(args)
    ds = load_csv(args.csv, args.schema)
    train_frac = args.train_frac if args.train_frac is not None else cfg.train_frac
    if train_frac >= 1.0:
        train = ds
    else:
        train, _ = stratified_split(ds, train_frac, derive_seed(seed, "split", args.client_id))
    mat = encode(train, numeric_stats(train))
    x_global, labels = select_feature_columns(mat, sorted(_split_names(args.global_features)))
    weights = class_balanced_weights(train.class_counts(), cfg.cb_beta)
    client = FedClient(args.client_id, x_global, train.labels, weights, labels)
    params = join_federated(args.host, args.port, client, fed.train)
    print(f"client {args.client_id}: session complete ({train.n_rows} training rows)")
    if args.out is not None:
        _write_model(params, args.out)
    return 0


def _split_names(text):
    names = [t.strip() for t in text.split(",") if t.strip()]
    if not names:
        raise ConfigError("--global-features must name at least one feature")
    return names


def _cmd_report(args):
    samples = load_samples_csv(args.samples)
    report = aggregate_report(samples)
    save_report_json(report, args.out)
    _print_report(report)
    print(f"report -> {args.out}")
    return 0


def _add_config_flags(p, scalars=True):
    p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    if scalars:
        p.add_argument("--train-frac", dest="train_frac", type=float)
        p.add_argument("--cb-beta", dest="cb_beta", type=float)
        p.add_argument("--seeds", help="comma list; a:b expands to a range")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedfusion", description="federated training with local loss fusion"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a full seed sweep and write artifacts")
    _add_config_flags(p)
    p.add_argument("--transport", choices=["inproc", "tcp"])
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("gen", help="write synthetic client CSVs and schemas")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--latent-dim", type=int, default=12)
    p.add_argument("--n-small", type=int, default=1000)
    p.add_argument("--n-large", type=int, default=8000)
    p.add_argument("--prevalence", type=float, default=0.08)
    p.add_argument("--n-common", type=int, default=6)
    p.add_argument("--n-unique-small", type=int, default=6)
    p.add_argument("--n-unique-large", type=int, default=2)
    p.add_argument("--noise-sd", type=float, default=3.0)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("serve", help="host one federated session over TCP")
    _add_config_flags(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--seed", type=int, help="sweep seed (default: first config seed)")
    p.add_argument("--expected-clients", dest="expected_clients", type=int)
    p.add_argument("--out", default="global_model.bin", help="final model file")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("join", help="join a federated session as one client")
    _add_config_flags(p, scalars=False)
    p.add_argument("--cb-beta", dest="cb_beta", type=float)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--client-id", dest="client_id", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument(
        "--global-features",
        dest="global_features",
        required=True,
        help="comma list of features shared by every client",
    )
    p.add_argument("--seed", type=int, help="sweep seed (default: first config seed)")
    p.add_argument(
        "--train-frac",
        dest="train_frac",
        type=float,
        help="training fraction; 1.0 trains on every row",
    )
    p.add_argument("--out", help="optional path for the final model")
    p.set_defaults(func=_cmd_join)

    p = sub.add_parser("report", help="aggregate a samples.csv into report.json")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ProtocolError, CodecError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return 3
    except (DataError, MetricError, ReportError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
