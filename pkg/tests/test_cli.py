import csv
import json

import numpy as np
import pytest
from scipy import stats

from dfmol.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from dfmol.config import DEFAULTS, ConfigError, RunConfig
from dfmol.datasets import AtomCountSampler, fit_atom_count_sampler, generate_toy_dataset, toy_templates
from dfmol.metrics import evaluate_batch, load_ring_library
from dfmol.molgraph import check_stability, data_path, default_vocabulary, load_molecules, load_patterns, toy_vocabulary

TINY_CONFIG = {
    "variant": "ctmc",
    "model": {"blocks": 1, "scalar_dim": 8, "vector_dim": 2, "edge_dim": 4, "rbf_dim": 4},
    "train": {"steps": 6, "batch": 4, "checkpoint_every": 3},
}


# --- datasets and atom counts ------------------------------------------------


def test_toy_dataset_without_jitter_is_the_templates():
    mols = generate_toy_dataset(8, np.random.default_rng(0), jitter=0.0)
    assert mols == toy_templates()
    assert [m.n_atoms for m in mols] == [4, 6, 6, 7, 7, 8, 9, 9]
    vocab = toy_vocabulary()
    assert all(check_stability(m, vocab).molecule_stable for m in generate_toy_dataset(40, np.random.default_rng(1)))


def test_toy_dataset_seed_determinism():
    a = generate_toy_dataset(16, np.random.default_rng(3))
    assert a == generate_toy_dataset(16, np.random.default_rng(3))
    assert a != generate_toy_dataset(16, np.random.default_rng(4))
    with pytest.raises(ValueError):
        generate_toy_dataset(0, np.random.default_rng(0))


def test_atom_count_sampler_reproduces_histogram():
    data = generate_toy_dataset(80, np.random.default_rng(0))
    sampler = fit_atom_count_sampler(data)
    draws = sampler.sample(10_000, np.random.default_rng(5))
    observed = np.array([(draws == s).sum() for s in sampler.sizes])
    assert set(np.unique(draws)) <= set(sampler.sizes.tolist())
    assert stats.chisquare(observed, sampler.probs * draws.size).pvalue > 0.001


def test_atom_count_sampler_edge_cases():
    single = fit_atom_count_sampler(toy_templates()[:1])
    assert np.all(single.sample(50, np.random.default_rng(0)) == 4)
    half = AtomCountSampler([3, 5], [0.5, 0.5])
    draws = half.sample(10_000, np.random.default_rng(1))
    assert (draws == 3).mean() == pytest.approx(0.5, abs=0.02)
    assert np.array_equal(half.sample(20, np.random.default_rng(2)), half.sample(20, np.random.default_rng(2)))
    assert AtomCountSampler.from_json(half.to_json()).sizes.tolist() == [3, 5]
    with pytest.raises(ValueError):
        AtomCountSampler([3], [0.5])
    with pytest.raises(ValueError):
        fit_atom_count_sampler([])


# --- config ------------------------------------------------------------------


def test_config_defaults_and_overrides():
    cfg = RunConfig.from_dict({"variant": "dirichlet", "schedule": {"a": {"kind": "linear"}}})
    v = cfg.flow_variant()
    assert v.tag == "dirichlet" and v.schedules["a"].kind == "linear"
    assert cfg.train_config().loss_weights == tuple(DEFAULTS["loss"]["weights"])
    assert RunConfig.from_dict(cfg.to_json()).to_json() == cfg.to_json()


@pytest.mark.parametrize(
    "bad",
    [
        {"variants": "ctmc"},
        {"model": {"layers": 3}},
        {"schedule": {"q": {"kind": "linear"}}},
        {"schedule": {"a": {"kind": "linear", "slope": 1}}},
        {"variant": "gaussian"},
        {"seed": -1},
        {"seed": 2**64},
        {"elements": ["C", "Xe"]},
        {"train": {"lr": 0}},
        {"model": 3},
    ],
)
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


# --- commands ----------------------------------------------------------------


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "toy.jsonl"
    rings = root / "rings.txt"
    assert main(["gen-toy", "--out", str(data), "--n-mols", "24", "--seed", "1", "--ring-library", str(rings)]) == EXIT_OK
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    run = root / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out-dir", str(run)]) == EXIT_OK
    return root, data, rings, run


def test_gen_toy_output(workspace):
    root, data, rings, _ = workspace
    mols = load_molecules(data)
    assert mols == generate_toy_dataset(24, np.random.default_rng(1))
    assert len(load_ring_library(rings)) == 4
    rep = evaluate_batch(mols, default_vocabulary())
    assert rep.pct_mols_stable[0] == 100.0


def test_train_outputs(workspace):
    _, _, _, run = workspace
    assert {p.name for p in run.iterdir()} >= {"config.json", "last.ckpt", "model.ckpt", "loss.csv"}
    rows = list(csv.DictReader((run / "loss.csv").open()))
    assert [r["step"] for r in rows] == [str(k) for k in range(1, 7)]
    assert set(rows[0]) == {"step", "total", "x", "a", "c", "e"}
    assert json.loads((run / "config.json").read_text())["train"]["steps"] == 6


def test_train_is_bit_reproducible(workspace, tmp_path):
    root, data, _, run = workspace
    assert main(["train", "--config", str(root / "config.json"), "--data", str(data), "--out-dir", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "loss.csv").read_bytes() == (run / "loss.csv").read_bytes()
    assert (tmp_path / "model.ckpt").read_bytes() == (run / "model.ckpt").read_bytes()


def test_sample_determinism_and_trajectories(workspace, tmp_path):
    _, _, _, run = workspace
    ckpt = str(run / "model.ckpt")
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    tdir = tmp_path / "traj"
    assert main(["sample", "--checkpoint", ckpt, "--out", str(a), "--n-mols", "3", "--n-steps", "40", "--seed", "7", "--record-trajectories", str(tdir)]) == EXIT_OK
    assert main(["sample", "--checkpoint", ckpt, "--out", str(b), "--n-mols", "3", "--n-steps", "40", "--seed", "7"]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert len(load_molecules(a)) == 3
    files = sorted(tdir.glob("traj_*.jsonl"))
    assert len(files) == 3
    assert all(len(f.read_text().splitlines()) == 41 for f in files)

    out = tmp_path / "analysis"
    assert main(["analyze", "--traj-dir", str(tdir), "--out-dir", str(out)]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["variant"] == "ctmc" and summary["n_trajectories"] == 3
    for m in ("a", "c", "e"):
        rows = list(csv.reader((out / f"assignment_cdf_{m}.csv").open()))
        assert rows[0] == ["t", "cdf_state", "cdf_pred"] and float(rows[-1][1]) == 1.0


def test_sample_errors(workspace, tmp_path):
    _, _, _, run = workspace
    ckpt = str(run / "model.ckpt")
    out = str(tmp_path / "x.jsonl")
    assert main(["sample", "--checkpoint", ckpt, "--out", out, "--variant", "continuous"]) == EXIT_DATA
    # a grid too coarse for the remasking rate
    assert main(["sample", "--checkpoint", ckpt, "--out", out, "--n-mols", "1", "--n-steps", "10"]) == EXIT_NUMERIC
    assert main(["sample", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", out]) == EXIT_DATA


def test_eval_matches_library(workspace, tmp_path):
    _, data, rings, _ = workspace
    out = tmp_path / "report.json"
    args = ["eval", "--mols", str(data), "--default-alerts", "--rings", str(rings), "--ref", str(data), "--repeats", "3", "--out", str(out)]
    assert main(args) == EXIT_OK
    vocab = default_vocabulary()
    mols = load_molecules(data, vocab)
    direct = evaluate_batch(mols, vocab, load_patterns(data_path("alerts.txt")), load_ring_library(rings), repeats=3, reference=mols)
    assert json.loads(out.read_text()) == json.loads(json.dumps(direct.to_json()))


def test_eval_with_empty_alert_file(workspace, tmp_path):
    _, data, _, _ = workspace
    empty = tmp_path / "alerts.txt"
    empty.write_text("# nothing here\n")
    out = tmp_path / "r.json"
    assert main(["eval", "--mols", str(data), "--alerts", str(empty), "--out", str(out)]) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["alerts_per_mol"] == "absent" and rep["pct_mols_stable"]["mean"] == 100.0


def test_exit_codes(workspace, tmp_path):
    root, data, _, _ = workspace
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["train", "--config", str(bad_cfg), "--data", str(data), "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    assert main(["gen-toy", "--out", str(tmp_path / "t.jsonl"), "--n-mols", "0"]) == EXIT_CONFIG
    assert main(["no-such-command"]) == EXIT_CONFIG
    broken = tmp_path / "broken.jsonl"
    broken.write_text("{not a molecule\n")
    assert main(["eval", "--mols", str(broken)]) == EXIT_DATA
    assert main(["analyze", "--traj-dir", str(tmp_path / "empty"), "--out-dir", str(tmp_path / "o")]) == EXIT_DATA
    (tmp_path / "empty").mkdir()
    assert main(["analyze", "--traj-dir", str(tmp_path / "empty"), "--out-dir", str(tmp_path / "o")]) == EXIT_DATA
