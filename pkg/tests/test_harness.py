import dataclasses
import json
import subprocess
import sys
import time

import pytest

from fedfusion.cli import main as cli_main
from fedfusion.errors import ConfigError
from fedfusion.evaluation import load_samples_csv
from fedfusion.harness import (
    DEFAULT_CONFIG,
    config_from_dict,
    config_run_id,
    config_to_dict,
    load_config,
    load_datasets,
    run_experiment,
    run_seed,
)

TINY = {
    "data": {"kind": "synthetic", "n_small": 240, "n_large": 600, "seed": 9},
    "seeds": [1],
    "fed": {"rounds": 2, "local_epochs": 1},
    "fusion": {"epochs": 3},
}


def tiny_cfg(tmp_path, **extra):
    doc = {**TINY, "out_dir": str(tmp_path / "out"), **extra}
    return config_from_dict(doc)


# ---------------------------------------------------------------- config


def test_defaults_resolve():
    cfg = config_from_dict({})
    assert cfg.seeds == list(range(30))
    assert cfg.data["noise_sd"] == 3.0
    assert cfg.fed.rounds == 5
    assert cfg.fusion.main_hidden_dims == (64, 32)
    assert cfg.transport == "inproc"


def test_partial_blocks_merge_over_defaults():
    cfg = config_from_dict({"fusion": {"epochs": 40}, "data": {"noise_sd": 1.5}})
    assert cfg.fusion.train.epochs == 40
    assert cfg.fusion.train.batch_size == DEFAULT_CONFIG["fusion"]["batch_size"]
    assert cfg.data["noise_sd"] == 1.5
    assert cfg.data["latent_dim"] == 12


def test_config_roundtrip_dict():
    cfg = config_from_dict({"seeds": [3, 1], "train_frac": 0.8})
    again = config_from_dict(config_to_dict(cfg))
    assert again == cfg


@pytest.mark.parametrize(
    "doc,fragment",
    [
        ({"seeds": []}, "nonempty"),
        ({"seeds": [1, 1]}, "distinct"),
        ({"train_frac": 1.0}, "train_frac"),
        ({"transport": "carrier-pigeon"}, "transport"),
        ({"workers": 0}, "workers"),
        ({"cb_beta": 1.0}, "cb_beta"),
        ({"typo_key": 1}, "typo_key"),
        ({"fed": {"bogus": 1}}, "bogus"),
        ({"data": {"kind": "parquet"}}, "parquet"),
        ({"data": {"kind": "csv", "clients": []}}, "clients"),
    ],
)
def test_config_rejects(doc, fragment):
    with pytest.raises(ConfigError, match=fragment):
        config_from_dict(doc)


def test_csv_config_checks_files(tmp_path):
    doc = {
        "data": {
            "kind": "csv",
            "clients": [
                {"id": "a", "csv": str(tmp_path / "a.csv"), "schema": str(tmp_path / "a.json")},
                {"id": "b", "csv": str(tmp_path / "b.csv"), "schema": str(tmp_path / "b.json")},
            ],
        }
    }
    with pytest.raises(ConfigError, match="no such file"):
        config_from_dict(doc)


def test_load_config_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seeds": [0, 1], "train_frac": 0.6}))
    cfg = load_config(path, {"train_frac": 0.8, "workers": None})
    assert cfg.train_frac == 0.8
    assert cfg.seeds == [0, 1]
    with pytest.raises(ConfigError, match="no such config"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_run_id_ignores_plumbing_but_not_science(tmp_path):
    base = tiny_cfg(tmp_path)
    moved = dataclasses.replace(base, out_dir=str(tmp_path / "elsewhere"), workers=4)
    assert config_run_id(base) == config_run_id(moved)
    other = config_from_dict({**TINY, "data": {**TINY["data"], "noise_sd": 1.23}})
    assert config_run_id(base) != config_run_id(other)


# ---------------------------------------------------------------- running


def test_single_seed_run_shape_and_artifacts(tmp_path):
    cfg = tiny_cfg(tmp_path)
    report, out = run_experiment(cfg)
    # 4 methods x 2 clients x 1 seed
    assert len(report.samples) == 8
    assert {s.method for s in report.samples} == {"localized", "hfl", "centralized", "fused"}
    assert {s.client_id for s in report.samples} == {"small", "large"}
    assert report.comparisons == {}  # single seed: no tests

    assert (out / "config.json").exists()
    assert (out / "samples.csv").exists()
    assert (out / "report.json").exists()
    trace = json.loads((out / "traces" / "seed_1.json").read_text())
    assert set(trace["fusion"]) == {"small", "large"}
    betas = [e["beta"] for e in trace["fusion"]["small"]]
    assert len(betas) == 3
    assert all(b2 <= b1 for b1, b2 in zip(betas, betas[1:]))
    assert len(trace["fed_history"]) == 2

    # the echoed config reproduces the configuration object exactly
    echoed = json.loads((out / "config.json").read_text())
    assert config_from_dict(echoed) == cfg


def test_rerun_is_bitwise_reproducible(tmp_path):
    cfg = tiny_cfg(tmp_path)
    _, out1 = run_experiment(cfg)
    first = (out1 / "samples.csv").read_bytes()
    _, out2 = run_experiment(cfg)
    assert out2 == out1  # same run id
    assert (out2 / "samples.csv").read_bytes() == first


def test_worker_pool_matches_sequential(tmp_path):
    cfg = tiny_cfg(tmp_path, seeds=[0, 1, 2])
    report_seq, out = run_experiment(cfg)
    par = dataclasses.replace(cfg, workers=2, out_dir=str(tmp_path / "out2"))
    report_par, _ = run_experiment(par)
    assert [
        (s.method, s.client_id, s.seed, s.auroc, s.auprc) for s in report_seq.samples
    ] == [(s.method, s.client_id, s.seed, s.auroc, s.auprc) for s in report_par.samples]


def test_fused_main_net_matches_localized_in_sweep(tmp_path):
    # the two loss terms touch disjoint parameters and the seeds are shared,
    # so per (client, seed) the fused and localized rows must coincide
    cfg = tiny_cfg(tmp_path, seeds=[0, 1])
    report, _ = run_experiment(cfg)
    rows = {(s.method, s.client_id, s.seed): s for s in report.samples}
    for (method, cid, seed), s in rows.items():
        if method == "fused":
            twin = rows[("localized", cid, seed)]
            assert s.auroc == twin.auroc and s.auprc == twin.auprc


def test_csv_mode_end_to_end(tmp_path):
    rc = cli_main(
        ["gen", "--out-dir", str(tmp_path / "d"), "--n-small", "240",
         "--n-large", "600", "--seed", "9"]
    )
    assert rc == 0
    doc = {
        **TINY,
        "data": {
            "kind": "csv",
            "clients": [
                {"id": "small", "csv": str(tmp_path / "d" / "small.csv"),
                 "schema": str(tmp_path / "d" / "small.schema.json")},
                {"id": "large", "csv": str(tmp_path / "d" / "large.csv"),
                 "schema": str(tmp_path / "d" / "large.schema.json")},
            ],
        },
        "out_dir": str(tmp_path / "out"),
    }
    cfg = config_from_dict(doc)
    report, _ = run_experiment(cfg)
    # CSV serialization preserves values exactly and the client ids match the
    # synthetic ones, so every derived seed agrees: the runs must coincide
    synth = tiny_cfg(tmp_path, out_dir=str(tmp_path / "out_s"))
    report_s, _ = run_experiment(synth)
    assert [(s.method, s.client_id, s.seed, s.auroc, s.auprc) for s in report.samples] == [
        (s.method, s.client_id, s.seed, s.auroc, s.auprc) for s in report_s.samples
    ]


def test_run_seed_smoke_against_loaded_data(tmp_path):
    cfg = tiny_cfg(tmp_path)
    datasets = load_datasets(cfg)
    samples, trace = run_seed(cfg, datasets, 5)
    assert len(samples) == 8
    assert all(0.0 <= s.auroc <= 1.0 for s in samples)
    assert trace["seed"] == 5


# ---------------------------------------------------------------- cli


def test_cli_run_and_report(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**TINY, "seeds": [0, 1]}))
    rc = cli_main(["run", "--config", str(path), "--out-dir", str(tmp_path / "out")])
    assert rc == 0
    shown = capsys.readouterr().out
    assert "fused" in shown and "artifacts:" in shown
    run_dirs = list((tmp_path / "out").iterdir())
    assert len(run_dirs) == 1
    samples = load_samples_csv(run_dirs[0] / "samples.csv")
    assert len(samples) == 16

    rc = cli_main(
        ["report", "--samples", str(run_dirs[0] / "samples.csv"),
         "--out", str(tmp_path / "again.json")]
    )
    assert rc == 0
    assert json.loads((tmp_path / "again.json").read_text()) == json.loads(
        (run_dirs[0] / "report.json").read_text()
    )


def test_cli_exit_codes(tmp_path, capsys):
    assert cli_main(["run", "--config", str(tmp_path / "nope.json")]) == 2
    assert cli_main(["report", "--samples", str(tmp_path / "nope.csv")]) == 4
    capsys.readouterr()


def test_cli_gen_is_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert cli_main(["gen", "--out-dir", str(tmp_path / sub), "--n-small", "60",
                         "--n-large", "80", "--seed", "3"]) == 0
    for name in ("small.csv", "large.csv", "small.schema.json", "large.schema.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_serve_join_processes(tmp_path):
    data = tmp_path / "d"
    assert cli_main(["gen", "--out-dir", str(data), "--n-small", "120",
                     "--n-large", "200", "--seed", "4"]) == 0
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"fed": {"rounds": 2, "local_epochs": 1}}))
    env_cmd = [sys.executable, "-m", "fedfusion.cli"]

    serve = subprocess.Popen(
        env_cmd + ["serve", "--config", str(cfg_path), "--port", "0",
                   "--out", str(tmp_path / "server.bin")],
        stdout=subprocess.PIPE, text=True,
    )
    try:
        line = serve.stdout.readline()
        assert "listening on" in line
        port = line.rsplit(":", 1)[1].strip()
        common = ",".join(f"c{j:02d}" for j in range(6))
        joins = [
            subprocess.Popen(
                env_cmd + ["join", "--config", str(cfg_path), "--port", port,
                           "--client-id", cid,
                           "--csv", str(data / f"{name}.csv"),
                           "--schema", str(data / f"{name}.schema.json"),
                           "--global-features", common,
                           "--train-frac", "1.0",
                           "--out", str(tmp_path / f"{cid}.bin")]
            )
            for cid, name in (("small", "small"), ("large", "large"))
        ]
        for p in joins:
            assert p.wait(timeout=60) == 0
        assert serve.wait(timeout=60) == 0
    finally:
        serve.kill()
        serve.stdout.close()

    server_model = (tmp_path / "server.bin").read_bytes()
    assert server_model == (tmp_path / "small.bin").read_bytes()
    assert server_model == (tmp_path / "large.bin").read_bytes()
    assert len(server_model) > 0


def test_cli_join_refused_connection_exits_3(tmp_path):
    data = tmp_path / "d"
    assert cli_main(["gen", "--out-dir", str(data), "--n-small", "60",
                     "--n-large", "80", "--seed", "4"]) == 0
    rc = subprocess.run(
        [sys.executable, "-m", "fedfusion.cli", "join", "--port", "1",
         "--client-id", "x", "--csv", str(data / "small.csv"),
         "--schema", str(data / "small.schema.json"),
         "--global-features", "c00", "--train-frac", "1.0"],
        capture_output=True, text=True,
    )
    assert rc.returncode == 3
    assert "cannot reach server" in rc.stderr


def test_default_config_run_time_budget_is_plausible(tmp_path):
    # one default-config seed must stay well under the 10-minute budget / 30
    cfg = config_from_dict({"seeds": [0], "out_dir": str(tmp_path / "out")})
    datasets = load_datasets(cfg)
    t0 = time.perf_counter()
    samples, _ = run_seed(cfg, datasets, 0)
    assert time.perf_counter() - t0 < 20.0
    assert len(samples) == 8
