"""CLI and config-file tests: exit codes, file outputs, determinism of the
emitted CSVs, and the verify report (including a gradient-corruption
mutation check)."""

import json

import numpy as np
import pytest

import splitsim.nn
from splitsim import harness
from splitsim.cli import main
from splitsim.config import ConfigError, load_config

MINIMAL_CONFIG = """\
[meta]
schema = 1

[data]
kind = gaussian-mixture-classify
n = 600
classes = 4
dim = 8
partition = dirichlet
alpha = 0.5

[model]
hidden = 12,10
activation = relu
cut = 2

[run]
strategy = cycle-sfl
clients = 4
rounds = 5
batch_size = 8
attendance = 0.5
lr_client = 1e-3
lr_server = 1e-3
optimizer = adam
eval_every = 5
seed = 0

[cycle]
server_epochs = 1
server_batch_size = 8
pass_mode = epoch-passes
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(MINIMAL_CONFIG)
    return path


# -- config parsing ------------------------------------------------------------

def test_load_minimal_config(config_file):
    full = load_config(config_file)
    assert full.run.strategy == "cycle-sfl"
    assert full.run.n_clients == 4
    assert full.run.cycle.server_epochs == 1
    assert full.data.alpha == 0.5
    assert len(full.run.layers) == 6  # 2 hidden blocks + head + softmax


def test_unknown_key_is_named(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text(MINIMAL_CONFIG + "\nbatch_sise = 32\n")
    with pytest.raises(ConfigError, match="batch_sise"):
        load_config(path)


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text(MINIMAL_CONFIG + "\n[extra]\nkey = 1\n")
    with pytest.raises(ConfigError, match="extra"):
        load_config(path)


def test_unknown_strategy_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text(MINIMAL_CONFIG.replace("strategy = cycle-sfl", "strategy = magic"))
    with pytest.raises(ConfigError, match="magic"):
        load_config(path)


def test_schema_version_checked(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text(MINIMAL_CONFIG.replace("schema = 1", "schema = 9"))
    with pytest.raises(ConfigError, match="schema"):
        load_config(path)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.cfg")


def test_seed_override(config_file):
    assert load_config(config_file, seed_override=3).run.seed == 3


# -- run subcommand --------------------------------------------------------------

def test_cmd_run_writes_outputs(config_file, tmp_path):
    out = tmp_path / "out"
    code = main(["run", "--config", str(config_file), "--out", str(out)])
    assert code == 0
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0].startswith("seed,round,strategy,split,loss,accuracy")
    assert len(metrics) > 1
    assert (out / "events.jsonl").exists()
    assert (out / "cost.json").exists()
    assert (out / "partition_manifest.csv").exists()
    assert (out / "checkpoints" / "server.ckpt").exists()
    cost = json.loads((out / "cost.json").read_text())
    assert cost["peak_server_replicas"] == 1  # cycle strategy


def test_cmd_run_is_deterministic(config_file, tmp_path):
    main(["run", "--config", str(config_file), "--out", str(tmp_path / "a")])
    main(["run", "--config", str(config_file), "--out", str(tmp_path / "b")])
    assert ((tmp_path / "a" / "metrics.csv").read_bytes()
            == (tmp_path / "b" / "metrics.csv").read_bytes())


def test_cmd_run_malformed_config_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(MINIMAL_CONFIG + "\nbatch_sise = 32\n")
    code = main(["run", "--config", str(path), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "batch_sise" in capsys.readouterr().err


def test_cmd_run_missing_config_exits_2(tmp_path, capsys):
    code = main(["run", "--config", str(tmp_path / "nope.cfg"),
                 "--out", str(tmp_path / "o")])
    assert code == 2


def test_cmd_run_divergence_exits_3(tmp_path, capsys):
    path = tmp_path / "diverge.cfg"
    path.write_text(MINIMAL_CONFIG
                    .replace("lr_client = 1e-3", "lr_client = 1e18")
                    .replace("lr_server = 1e-3", "lr_server = 1e18")
                    .replace("optimizer = adam", "optimizer = sgd"))
    out = tmp_path / "o"
    with np.errstate(all="ignore"):
        code = main(["run", "--config", str(path), "--out", str(out)])
    assert code == 3
    assert (out / "diagnostic.json").exists()
    assert (out / "checkpoints" / "server.ckpt").exists()


def test_cmd_run_plots_flag(config_file, tmp_path):
    out = tmp_path / "o"
    main(["run", "--config", str(config_file), "--out", str(out), "--plots"])
    assert (out / "run_curves.png").exists()


# -- toy / ablate / bench ---------------------------------------------------------

def test_cmd_toy_emits_csv_and_figure(tmp_path):
    out = tmp_path / "toy"
    code = main(["toy", "--out", str(out), "--resolution", "20"])
    assert code == 0
    lines = (out / "toy.csv").read_text().splitlines()
    assert lines[0] == "w_c,w_s,x,y,eta,step_e2e,step_cycle,holds"
    assert all(line.endswith("true") for line in lines[1:])
    assert (out / "toy_steps.png").exists()


def test_cmd_ablate_cut_axis(config_file, tmp_path):
    out = tmp_path / "ab"
    code = main(["ablate", "--config", str(config_file), "--axis", "cut",
                 "--values", "1,2,3,4,5", "--seeds", "0", "--out", str(out),
                 "--no-plots"])
    assert code == 0
    lines = (out / "ablation_cut.csv").read_text().splitlines()
    assert len(lines) == 1 + 5  # header + one row per cut index


def test_cmd_ablate_epochs_grid_with_duplicates_deduplicated(config_file, tmp_path):
    code = main(["ablate", "--config", str(config_file), "--axis", "epochs",
                 "--values", "1,2,4,8,8", "--seeds", "0",
                 "--out", str(tmp_path / "ab"), "--no-plots"])
    assert code == 0
    lines = (tmp_path / "ab" / "ablation_epochs.csv").read_text().splitlines()
    assert len(lines) == 1 + 4  # the 1/2/4/8 grid, duplicate 8 dropped
    values = [line.split(",")[1] for line in lines[1:]]
    assert values == ["1", "2", "4", "8"]


def test_cmd_ablate_cut_out_of_range(config_file, tmp_path, capsys):
    code = main(["ablate", "--config", str(config_file), "--axis", "cut",
                 "--values", "99", "--seeds", "0", "--out", str(tmp_path / "ab")])
    assert code == 2
    assert "out of range" in capsys.readouterr().err


def test_cmd_ablate_epochs_requires_cycle_strategy(config_file, tmp_path, capsys):
    path = config_file.parent / "psl.cfg"
    path.write_text(MINIMAL_CONFIG.replace("strategy = cycle-sfl", "strategy = psl"))
    code = main(["ablate", "--config", str(path), "--axis", "epochs",
                 "--values", "1,2", "--seeds", "0", "--out", str(tmp_path / "ab")])
    assert code == 2
    assert "cycle" in capsys.readouterr().err


def test_cmd_bench_grid(tmp_path):
    manifest = tmp_path / "bench.cfg"
    manifest.write_text(MINIMAL_CONFIG + """
[bench]
strategies = sflv1, cycle-sfl
seeds = 0, 1
accuracy_threshold = 0.3
""")
    out = tmp_path / "bench"
    code = main(["bench", "--manifest", str(manifest), "--out", str(out)])
    assert code == 0
    results = (out / "results.csv").read_text().splitlines()
    assert len(results) == 1 + 2  # header + one row per strategy
    assert (out / "convergence.csv").exists()
    assert (out / "metrics_all.csv").exists()
    assert (out / "bench_curves.png").exists()
    assert (out / "bench_final.png").exists()
    cells = list((out / "cells").glob("*.csv"))
    assert len(cells) == 4


def test_bench_seed_aggregation_hand_arithmetic():
    mean, std = harness.mean_std([0.80, 0.82, 0.84])
    assert mean == pytest.approx(0.82, rel=1e-12)
    assert std == pytest.approx(0.02, rel=1e-12)


def test_bench_all_eight_strategies_emit_one_row_each(tmp_path):
    manifest = tmp_path / "all.cfg"
    manifest.write_text(
        MINIMAL_CONFIG.replace("rounds = 5", "rounds = 3")
        + """
[bench]
strategies = seq-sl, psl, sflv1, sflv2, sglr, cycle-psl, cycle-sfl, cycle-sglr
seeds = 0
accuracy_threshold = 0.3
""")
    from splitsim.config import load_config
    result = harness.bench(load_config(manifest, allow_bench=True),
                           tmp_path / "out", plots=False)
    assert len(result.results_rows) == 8
    assert [row["strategy"] for row in result.results_rows] == [
        "seq-sl", "psl", "sflv1", "sflv2", "sglr",
        "cycle-psl", "cycle-sfl", "cycle-sglr"]


# -- verify -----------------------------------------------------------------------

def test_cmd_verify_passes_and_reports_suites(tmp_path, capsys):
    report_path = tmp_path / "verify.json"
    code = main(["verify", "--json", str(report_path)])
    assert code == 0
    report = json.loads(report_path.read_text())
    assert report["passed"] is True
    assert len(report["suites"]) >= 5
    out = capsys.readouterr().out
    assert out.count("PASS") >= 5


def test_cmd_verify_catches_corrupted_backward(monkeypatch, capsys):
    true_backward = splitsim.nn.backward

    def corrupted(tape, d_output):
        grads, d_input = true_backward(tape, d_output)
        for g in grads.layers:
            if g is not None:
                g[0][...] *= 1.001  # subtle scale bug
        return grads, d_input

    monkeypatch.setattr(splitsim.nn, "backward", corrupted)
    code = main(["verify"])
    assert code == 1
    err = capsys.readouterr().err
    assert "gradient-exactness" in err
