import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from stqrng.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_NONPOSITIVE, EXIT_NUMERICAL, EXIT_OK, main
from stqrng.config import ConfigError, RunConfig, load_config
from stqrng.extractor import read_bits, seed_length, split_output


@pytest.fixture(scope="module")
def cache(tmp_path_factory):
    return str(tmp_path_factory.mktemp("certificates"))


@pytest.fixture(scope="module")
def seed_file(tmp_path_factory):
    # stands in for an external trusted source; never derived from the simulation generator
    p = tmp_path_factory.mktemp("seed") / "seed.bin"
    p.write_bytes(np.random.default_rng(2024).integers(0, 256, 1_200_000, dtype=np.uint8).tobytes())
    return str(p)


def _config(tmp_path, obj, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


# -- configuration --------------------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    obj = {
        "params": {"eta": 0.8, "gamma": 0.2},
        "budget": {"eps_s": 1e-6},
        "simulate": {"seed": 3, "n": 1000, "deviation": {"kind": "efficiency_shift", "value": -0.05}},
        "sweep": {"eta": [0.7, 0.8]},
        "device": {"ratio": 0.5},
        "workers": 2,
    }
    cfg = RunConfig.from_json(obj)
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.to_json() == cfg.to_json()
    assert cfg.simulate.deviation.value == -0.05 and cfg.params.eta == 0.8


@pytest.mark.parametrize("obj", [
    {"bogus": 1},
    {"params": {"eta": 1.5}},
    {"params": {"gama": 0.1}},
    {"simulate": {"block_size": 12}},
    {"budget": {"eps_s": 1e-7, "eps_1": 1e-7}},
    {"device": {"ratio": 0.6, "phase_limit": 100.0}},
])
def test_config_rejected(obj):
    with pytest.raises(ConfigError):
        RunConfig.from_json(obj)


def test_unknown_key_exit_code(tmp_path):
    assert main(["rate", "-c", _config(tmp_path, {"params": {"unknown": 1}})]) == EXIT_CONFIG


def test_unreadable_config(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    assert main(["rate", "-c", str(tmp_path / "bad.json")]) == EXIT_CONFIG


def test_relative_paths_follow_config(tmp_path):
    cfg = load_config(_config(tmp_path, {"extract": {"seed_file": "s.bin"}, "paths": {"out_dir": "out"}}))
    assert cfg.extract.seed_file == str(tmp_path / "s.bin")
    assert cfg.paths.out_dir == str(tmp_path / "out")
    cfg = load_config(_config(tmp_path, {"extract": {"seed_file": "/abs/s.bin"}}))
    assert cfg.extract.seed_file == "/abs/s.bin"


# -- rate / sweep ----------------------------------------------------------------------------------


def test_rate_reference_point(tmp_path, cache):
    assert main(["rate", "-o", str(tmp_path), "--cache", cache]) == EXIT_OK
    rep = json.loads((tmp_path / "rate.json").read_text())["report"]
    for key in ("h", "beta", "ell_out", "ell_in", "r_net"):
        assert key in rep
    assert 0 < rep["r_net"] <= rep["h"]
    rows = list(csv.DictReader(open(tmp_path / "rate.csv")))
    assert len(rows) == 1 and float(rows[0]["r_net"]) == pytest.approx(rep["r_net"])


def test_rate_nonpositive_status(tmp_path, cache):
    cfg = _config(tmp_path, {"params": {"eta": 0.6}})
    assert main(["rate", "-c", cfg, "-o", str(tmp_path / "o"), "--cache", cache]) == EXIT_NONPOSITIVE
    rep = json.loads((tmp_path / "o" / "rate.json").read_text())["report"]
    assert rep["r_net"] <= 0 and "nonpositive_rate" in rep["flags"]


def test_numerical_failure_status(tmp_path):
    cfg = _config(tmp_path, {"sdp": {"max_iter": 2}})
    assert main(["rate", "-c", cfg, "-o", str(tmp_path / "o")]) == EXIT_NUMERICAL


def test_sweep_writes_points_and_csv(tmp_path, cache):
    cfg = _config(tmp_path, {"sweep": {"eta": [0.8, 1.0], "n": [1e9, 3e10]}})
    assert main(["sweep", "-c", cfg, "-o", str(tmp_path / "o"), "--cache", cache, "-j", "2"]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "o" / "sweep.csv")))
    assert len(rows) == 4
    assert len(list((tmp_path / "o" / "points").glob("point-*.json"))) == 4
    by = {(float(r["eta"]), float(r["n"])): float(r["r_net"]) for r in rows}
    assert by[(1.0, 3e10)] >= by[(0.8, 3e10)] and by[(0.8, 3e10)] >= by[(0.8, 1e9)]


# -- simulate / certify / extract -----------------------------------------------------------------


def test_simulate_accept_and_files(tmp_path):
    cfg = _config(tmp_path, {"simulate": {"n": 100_000, "seed": 1}})
    assert main(["simulate", "-c", cfg, "-o", str(tmp_path / "o")]) == EXIT_OK
    summ = json.loads((tmp_path / "o" / "transcript.json").read_text())
    assert summ["accepted"] and summ["n"] == 100_000
    assert len(read_bits(tmp_path / "o" / "raw.bin")) == 700_000


def test_simulate_abort_status(tmp_path):
    cfg = _config(tmp_path, {"simulate": {"n": 100_000, "deviation": {"kind": "fixed_outcome", "value": 1}}})
    assert main(["simulate", "-c", cfg, "-o", str(tmp_path / "o")]) == EXIT_ABORT


def test_simulate_streaming_flag(tmp_path):
    cfg = _config(tmp_path, {"simulate": {"n": 100_000, "seed": 1, "block_size": 40_000}})
    assert main(["simulate", "-c", cfg, "-o", str(tmp_path / "a")]) == EXIT_OK
    assert main(["simulate", "-c", cfg, "-o", str(tmp_path / "b"), "--streaming"]) == EXIT_OK
    assert (tmp_path / "a" / "raw.bin").read_bytes() == (tmp_path / "b" / "raw.bin").read_bytes()


def _certify(tmp_path, name, cache, seed_file, extra=(), **sim):
    obj = {"simulate": {"n": 1_000_000, "seed": 7, **sim}, "extract": {"seed_file": seed_file}}
    cfg = _config(tmp_path, obj, f"{name}.json")
    out = tmp_path / name
    return main(["certify", "-c", cfg, "-o", str(out), "--cache", cache, *extra]), out


def test_certify_honest_run(tmp_path, cache, seed_file):
    code, out = _certify(tmp_path, "a", cache, seed_file)
    assert code == EXIT_OK
    v = json.loads((out / "verdict.json").read_text())
    assert v["accepted"] and v["certified"]
    ell, n_raw = v["ell"], v["raw_bits"]
    assert n_raw == 7_000_000 and ell == v["ell_certified"] > 0
    s_len = seed_length(n_raw, ell)
    K = read_bits(out / "K.bin", ell + s_len)
    z, s = split_output(K, ell)
    assert np.array_equal(s, read_bits(seed_file)[:s_len])


def test_certify_replay_and_workers(tmp_path, cache, seed_file):
    a = _certify(tmp_path, "a", cache, seed_file, block_size=250_000)
    b = _certify(tmp_path, "b", cache, seed_file, block_size=250_000)
    c = _certify(tmp_path, "c", cache, seed_file, ("-j", "2"), block_size=250_000)
    assert a[0] == b[0] == c[0] == EXIT_OK
    k = [(o / "K.bin").read_bytes() for _, o in (a, b, c)]
    assert k[0] == k[1] == k[2]


def test_certify_abort_leaves_no_output(tmp_path, cache, seed_file):
    code, out = _certify(tmp_path, "x", cache, seed_file, deviation={"kind": "fixed_outcome", "value": 1})
    assert code == EXIT_ABORT
    assert not (out / "K.bin").exists()
    assert json.loads((out / "verdict.json").read_text())["accepted"] is False


def test_certify_requires_seed_file(tmp_path, cache):
    cfg = _config(tmp_path, {"simulate": {"n": 1_000_000}})
    assert main(["certify", "-c", cfg, "-o", str(tmp_path / "o"), "--cache", cache]) == EXIT_CONFIG


def test_extract_command_matches_library(tmp_path, seed_file):
    from stqrng.extractor import extract, write_bits

    rng = np.random.default_rng(0)
    r = rng.integers(0, 2, 10_001).astype(np.uint8)
    write_bits(tmp_path / "r.bin", r)
    args = ["extract", "--input", str(tmp_path / "r.bin"), "--input-bits", "10001", "--seed-file", seed_file,
            "--out-len", "4000", "--output", str(tmp_path / "k.bin")]
    assert main(args) == EXIT_OK
    s = read_bits(seed_file)[:seed_length(10_001, 4000)]
    K = read_bits(tmp_path / "k.bin", 4000 + len(s))
    assert np.array_equal(K[:4000], extract(r, s, 4000)) and np.array_equal(K[4000:], s)


def test_extract_missing_arguments(tmp_path):
    assert main(["extract", "-o", str(tmp_path)]) == EXIT_CONFIG


# -- device / calibrate-delta -----------------------------------------------------------------------


def test_device_families(tmp_path):
    assert main(["device", "-o", str(tmp_path)]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "device_curves.csv")))
    assert sorted({float(r["r"]) for r in rows}) == [0.2, 0.4, 0.6, 0.8, 1.0]
    summ = json.loads((tmp_path / "device_summary.json").read_text())
    assert summ["default_criterion"] == "equal_intensity"
    assert abs(summ["equal_intensity"]["ratio"] - 0.6) <= 0.05
    assert "ratio" in summ["min_ripple"]


def test_device_lossless_symmetric_is_flat(tmp_path):
    cfg = _config(tmp_path, {"device": {"loss_slope": 0.0, "ratios": [1.0]}})
    assert main(["device", "-c", cfg, "-o", str(tmp_path / "o")]) == EXIT_OK
    inten = [float(r["intensity"]) for r in csv.DictReader(open(tmp_path / "o" / "device_curves.csv"))]
    assert max(inten) - min(inten) < 1e-12


def test_calibrate_delta(tmp_path):
    assert main(["calibrate-delta", "-o", str(tmp_path)]) == EXIT_OK
    obj = json.loads((tmp_path / "delta.json").read_text())
    assert obj["completeness"]["total"] <= 1e-3


def test_console_script_exit_code(tmp_path):
    cfg = _config(tmp_path, {"nope": 0})
    res = subprocess.run([sys.executable, "-m", "stqrng.cli", "rate", "-c", cfg], capture_output=True, text=True)
    assert res.returncode == EXIT_CONFIG and "config error" in res.stderr
