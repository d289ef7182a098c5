import hashlib
import io
import json
import os

import numpy as np
import pytest

from isloss.bench import build_pairs
from isloss.cli import main
from isloss.io import far_label, load_model, read_pairs, save_model, write_pairs
from isloss.training import init_params

TINY = {
    "seed": 7,
    "train_population": "a",
    "populations": [
        {"name": "a", "class_count": 2, "samples_per_class": 12, "class_center_spread": 2.0,
         "within_class_noise": 0.3, "shift": 0.0, "n_inputs": 4},
        {"name": "b", "class_count": 2, "samples_per_class": 12, "class_center_spread": 2.0,
         "within_class_noise": 0.6, "shift": [0.5, 0.5, 0.0, 0.0]},
    ],
    "train": {"epochs": 5, "batch_size": 8, "embedding_dim": 3},
    "pairs": {"positives_per_class": 20, "negatives_total": 40, "hard_k": 3},
}


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


def digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_weights_uniform():
    code, text = run("weights", "--losses", "1,1,1", "--temp", "0.5", "--kind", "is")
    assert code == 0
    lines = text.splitlines()
    assert lines[0] == "0.3333,0.3333,0.3333"
    assert lines[1] == "kl,0.000000"


def test_weights_logis_proportional():
    code, text = run("weights", "--losses", "1,2,3", "--temp", "1", "--kind", "logis")
    assert code == 0 and text.splitlines()[0] == "0.1667,0.3333,0.5000"


def test_weights_validation(capsys):
    code, _ = run("weights", "--losses", "1,2,3", "--temp", "0", "--kind", "logis")
    assert code == 2
    assert "temperature must be positive" in capsys.readouterr().err
    assert run("weights", "--losses", "1,,3", "--temp", "1")[0] == 2
    assert run("weights", "--losses", "1,2", "--temp", "1", "--kind", "nope")[0] == 2


def parse_oracle(text):
    rows = {}
    for line in text.splitlines()[1:]:
        parts = line.split(",")
        rows[parts[0]] = parts[1:]
    return rows


def test_oracle_zero_budget_uniform():
    code, text = run("oracle", "--losses", "1,2,3", "--budget", "0")
    rows = parse_oracle(text)
    assert code == 0
    for m in ("grid", "projected-ascent", "closed-form"):
        assert rows[m][4] == "0.333333;0.333333;0.333333"
    assert float(rows["delta_grid"][0]) == 0.0


def test_oracle_grid_close_to_closed_form():
    code, text = run("oracle", "--losses", "1,2,3", "--budget", "0.2", "--method", "grid")
    assert code == 0
    assert 0.0 <= float(parse_oracle(text)["delta_grid"][0]) < 1e-3


def test_oracle_point_mass_flag():
    code, text = run("oracle", "--losses", "1,2,3", "--budget", "1.5")
    rows = parse_oracle(text)
    assert code == 0 and rows["grid"][2] == "point-mass" and "note" in rows
    assert run("oracle", "--losses", "1,2,3", "--budget", "-1")[0] == 2


def test_train_missing_config(tmp_path):
    assert run("train", str(tmp_path / "missing.json"))[0] == 1


def test_train_rejects_unknown_keys(tmp_path):
    bad = dict(TINY, colour="blue")
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert run("train", str(path), "--out-dir", str(tmp_path / "o"))[0] == 2
    assert not (tmp_path / "o").exists()


def test_train_and_eval_outputs(config, tmp_path):
    out = tmp_path / "o"
    code, _ = run("train", config, "--out-dir", str(out))
    assert code == 0
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,mean_loss,aggregate_loss,lr,kl_concentration"
    assert len(trace) == 6
    top = (out / "top_weights.csv").read_text().splitlines()
    assert top[0] == "epoch,sample_id,class_id,weight" and len(top) == 1 + 5 * 10

    code, _ = run("eval", str(out / "model.txt"), config, "--out-dir", str(out))
    assert code == 0
    report = (out / "report.csv").read_text().splitlines()
    assert report[0] == "test_population,accuracy,thr_mean,tar@far1e-2,tar@far1e-3"
    assert [r.split(",")[0] for r in report[1:]] == ["a", "b"]
    hard = (out / "hard_pairs_b.csv").read_text().splitlines()
    assert len(hard) - 1 == 2 * 3
    pairs = read_pairs(out / "pairs_a.csv")
    assert len(pairs) == 2 * 20 + 40


def test_outputs_are_byte_identical(config, tmp_path):
    hashes = []
    for run_id in range(2):
        out = tmp_path / f"o{run_id}"
        assert run("train", config, "--out-dir", str(out))[0] == 0
        assert run("eval", str(out / "model.txt"), config, "--out-dir", str(out))[0] == 0
        hashes.append({name: digest(out / name) for name in sorted(os.listdir(out))})
    assert hashes[0] == hashes[1]


def test_seed_flag_changes_outputs(config, tmp_path):
    run("train", config, "--out-dir", str(tmp_path / "x"))
    run("--seed", "8", "train", config, "--out-dir", str(tmp_path / "y"))
    assert digest(tmp_path / "x" / "trace.csv") != digest(tmp_path / "y" / "trace.csv")


def test_eval_failure_leaves_no_outputs(config, tmp_path):
    out = tmp_path / "o"
    bad_model = tmp_path / "m.txt"
    save_model(init_params(5, 3, 2, np.random.default_rng(0)), bad_model)  # wrong input dimension
    assert run("eval", str(bad_model), config, "--out-dir", str(out))[0] == 2
    assert not out.exists() or os.listdir(out) == []
    assert run("eval", str(tmp_path / "nope.txt"), config)[0] == 1


def test_model_roundtrip_exact(tmp_path):
    params = init_params(5, 3, 4, np.random.default_rng(1))
    save_model(params, tmp_path / "m.txt")
    back = load_model(tmp_path / "m.txt")
    np.testing.assert_array_equal(back.projection, params.projection)
    np.testing.assert_array_equal(back.class_weights, params.class_weights)
    (tmp_path / "bad.txt").write_text("something else\n")
    with pytest.raises(ValueError):
        load_model(tmp_path / "bad.txt")


def test_pairs_roundtrip(tmp_path):
    pairs = build_pairs(np.repeat(np.arange(4), 5), 3, 20, seed=2)
    write_pairs(pairs, tmp_path / "p.csv")
    first = (tmp_path / "p.csv").read_text().splitlines()[0].split(",")
    assert len(first) == 4 and first[2] in {"0", "1"}
    back = read_pairs(tmp_path / "p.csv")
    for f in ("a", "b", "label", "fold"):
        np.testing.assert_array_equal(getattr(back, f), getattr(pairs, f))


def test_far_label():
    assert [far_label(v) for v in (1e-2, 1e-3, 0.05, 0.1)] == ["1e-2", "1e-3", "5e-2", "1e-1"]
