import csv
import json

import numpy as np
import pytest

from mfcdgm import cli
from mfcdgm.config import ConfigError, parse_config
from mfcdgm.model import MfcpSpec, terminal_value
from mfcdgm.network import Architecture, DivergenceError, init_params, save_checkpoint, unpack
from mfcdgm.oracle.forward import evaluate_cost, zero_policy
from mfcdgm.solver import sample_batch, sampled_uniform_loss

TINY = """
# tiny run
problem.d = 2
arch.width = 8
arch.depth = 2
train.epochs = 4
train.samples = 200
train.lr = 3e-3
seed = 1
"""


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert cli.main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root


def test_train_artifacts(trained):
    run = trained / "run"
    rows = read_csv(run / "loss.csv")
    assert rows[0] == ["epoch", "pde_loss", "terminal_loss", "combined_loss", "seconds"]
    assert len(rows) == 4 + 1
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seed"] == 1
    assert manifest["config"]["train.epochs"] == 4
    assert manifest["version"]
    assert set(manifest["files"]) == {"loss.csv", "checkpoint.txt", "config.txt"}
    for f in manifest["files"]:
        assert (run / f).exists()


def test_train_reproducible(trained, tmp_path):
    cfg = trained / "tiny.cfg"
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    a = [r[:4] for r in read_csv(trained / "run" / "loss.csv")]
    b = [r[:4] for r in read_csv(tmp_path / "again" / "loss.csv")]
    assert a == b
    assert (trained / "run" / "checkpoint.txt").read_bytes() == (tmp_path / "again" / "checkpoint.txt").read_bytes()


def test_seed_flag_overrides(trained, tmp_path):
    assert cli.main(["train", "--config", str(trained / "tiny.cfg"), "--out", str(tmp_path / "s"), "--seed", "5"]) == 0
    assert json.loads((tmp_path / "s" / "manifest.json").read_text())["seed"] == 5


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("problem.d = 2\narch.colour = red\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "arch.colour" in capsys.readouterr().err


def test_bad_value_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("train.epochs = many\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "train.epochs" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_divergence_exit_3(trained, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise DivergenceError("divergence at epoch 2: non-finite parameters", 2)

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--config", str(trained / "tiny.cfg"), "--out", str(tmp_path / "d")]) == 3


def test_config_parsing():
    cfg = parse_config("problem.d = 3\nproblem.c = 1,2,3;2,1,1;1,1,1\nproblem.T = 0.5\ntrain.tolerance = none\nout = here\n")
    spec = cfg.spec()
    assert spec.d == 3 and spec.T == 0.5 and spec.cost_matrix[0, 2] == 3.0
    assert cfg.training().tolerance is None and cfg.out == "here"
    with pytest.raises(ConfigError):
        parse_config("problem.d = 3\nproblem.c = 1,2;2,1\n")
    with pytest.raises(ConfigError):
        parse_config("no equals sign here\n")


def test_surface(trained, tmp_path):
    run = trained / "run"
    assert cli.main(["surface", "--checkpoint", str(run / "checkpoint.txt"), "--resolution", "101", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "surface.csv")
    assert rows[0] == ["t", "eta1", "value"]
    assert len(rows) == 101 * 101 + 1


def test_surface_terminal_slice_matches_terminal_loss(trained, tmp_path):
    from mfcdgm.network import load_checkpoint

    ck = trained / "run" / "checkpoint.txt"
    cli.main(["surface", "--checkpoint", str(ck), "--resolution", "401", "--out", str(tmp_path)])
    data = np.array(read_csv(tmp_path / "surface.csv")[1:], dtype=float)
    last = data[data[:, 0] == 1.0]
    m = np.column_stack([last[:, 1], 1 - last[:, 1]])
    surface_gap = np.abs(last[:, 2] - terminal_value(MfcpSpec(d=2), m)).max()
    arch, theta, _ = load_checkpoint(ck)
    batch = sample_batch(MfcpSpec(d=2), 20000, np.random.default_rng(0))
    sampled = sampled_uniform_loss(MfcpSpec(d=2), arch, theta, batch).terminal
    assert sampled <= surface_gap + 1e-4
    assert surface_gap - sampled < 1e-2


def test_surface_of_constant_network(tmp_path):
    arch = Architecture(d=3, depth=2, width=4)
    theta = np.zeros(arch.n_params)
    unpack(arch, theta)["b_out"][:] = 0.25
    save_checkpoint(tmp_path / "c.txt", arch, theta, 1.0)
    assert cli.main(["surface", "--checkpoint", str(tmp_path / "c.txt"), "--resolution", "7", "--out", str(tmp_path)]) == 0
    data = np.array(read_csv(tmp_path / "surface.csv")[1:], dtype=float)
    assert data.shape == (49, 4)
    np.testing.assert_array_equal(data[:, -1], 0.25)
    assert cli.main(["surface", "--checkpoint", str(tmp_path / "c.txt"), "--d", "2", "--out", str(tmp_path)]) == 2


def test_compare_untrained_and_mismatch(tmp_path, capsys):
    arch = Architecture(d=2, depth=2, width=6)
    save_checkpoint(tmp_path / "u.txt", arch, init_params(arch, 0), 1.0)
    assert cli.main(["compare", "--checkpoint", str(tmp_path / "u.txt"), "--h", "0.02", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "comparison.csv")
    assert rows[0] == ["sup_gap", "mean_gap", "nodes", "band"]
    sup, mean, nodes = float(rows[1][0]), float(rows[1][1]), int(rows[1][2])
    assert sup >= mean >= 0 and nodes >= 1
    assert "sup gap" in capsys.readouterr().out

    arch3 = Architecture(d=3, depth=2, width=6)
    save_checkpoint(tmp_path / "d3.txt", arch3, init_params(arch3, 0), 1.0)
    assert cli.main(["compare", "--checkpoint", str(tmp_path / "d3.txt"), "--d", "2", "--out", str(tmp_path)]) == 2
    # CFL violations from the oracle surface as configuration errors
    assert cli.main(["compare", "--checkpoint", str(tmp_path / "u.txt"), "--h", "0.02", "--steps", "5", "--out", str(tmp_path)]) == 2


def test_compare_report_counts_interior_nodes():
    from mfcdgm.oracle.grid import solve_grid_hjb

    arch = Architecture(d=2, depth=1, width=2)
    grid = solve_grid_hjb(MfcpSpec(d=2), 80, 0.05)
    rep = cli.compare_to_grid(arch, np.zeros(arch.n_params), grid, band=0.05)
    assert rep.nodes == 19  # eta in {0.05, ..., 0.95}
    assert rep.sup_gap == pytest.approx(np.nanmax(np.abs(grid.values[:, 1:-1])))


def test_nagent_single_trajectory(trained, tmp_path):
    ck = trained / "run" / "checkpoint.txt"
    assert cli.main(["nagent", "--checkpoint", str(ck), "--n-list", "1", "--reps", "1", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "nagent.csv")
    assert rows[0] == ["N", "mean_cost", "stderr", "reference", "gap"]
    assert rows[1][0] == "1" and float(rows[1][2]) == 0.0


def test_nagent_zero_policy(trained, tmp_path):
    ck = trained / "run" / "checkpoint.txt"
    args = ["nagent", "--checkpoint", str(ck), "--n-list", "10,100", "--reps", "20", "--zero-policy", "--m0", "0.7,0.3", "--initial", "quantized", "--out", str(tmp_path)]
    assert cli.main(args) == 0
    exact = evaluate_cost(MfcpSpec(d=2), np.array([0.7, 0.3]), zero_policy(2))
    for row in read_csv(tmp_path / "nagent.csv")[1:]:
        assert abs(float(row[1]) - exact) <= 3 * float(row[2]) + 1e-12
    assert cli.main(["nagent", "--checkpoint", str(ck), "--m0", "0.7,0.4", "--out", str(tmp_path)]) == 2
    assert cli.main(["nagent", "--checkpoint", str(ck), "--n-list", "10,x", "--out", str(tmp_path)]) == 2


def test_oracle_command(tmp_path, monkeypatch):
    monkeypatch.setenv("DGM_THREADS", "1")
    assert cli.main(["oracle", "--d", "2", "--h", "0.05", "--every", "20", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "grid.csv")
    assert rows[0] == ["t", "eta1", "value"]
    assert len(rows) == 1 + 5 * 21
    assert json.loads((tmp_path / "manifest.json").read_text())["files"] == ["grid.csv"]
    assert cli.main(["oracle", "--d", "5", "--out", str(tmp_path)]) == 2
