import json
import struct
from dataclasses import replace

import numpy as np
import pytest

from halrp import metrics
from halrp.checkpoint import MAGIC, CheckpointError, _checksum, load_checkpoint, read_extra, save_checkpoint
from halrp.engine import ExperimentConfig, evaluate_row, predict, run_sequence
from halrp.tasks import gen_permuted, gen_synthetic

CFG = ExperimentConfig(epochs=4, warmup_epochs=1, lr=0.05, batch_size=32, hidden=(10, 6), seed=1)


@pytest.fixture(scope="module")
def seq():
    return gen_permuted(gen_synthetic(3, 12, 60, seed=2), 3, seed=3)


@pytest.fixture(scope="module")
def run(seq):
    return run_sequence(CFG, seq)


def _header(raw):
    (n,) = struct.unpack_from("<I", raw, len(MAGIC))
    return json.loads(raw[len(MAGIC) + 4:len(MAGIC) + 4 + n])


def test_round_trip_is_bit_exact(tmp_path, run, seq):
    state, A, _ = run
    a, b = tmp_path / "a.halrp", tmp_path / "b.halrp"
    save_checkpoint(a, state, extra={"note": "x"})
    loaded = load_checkpoint(a)
    save_checkpoint(b, loaded, extra={"note": "x"})
    assert a.read_bytes() == b.read_bytes()
    assert read_extra(a) == {"note": "x"}
    assert loaded.config == state.config
    np.testing.assert_array_equal(np.isnan(loaded.history), np.isnan(state.history))
    assert np.array_equal(loaded.history[-1], state.history[-1])
    for t in state.tasks:
        for i, lp in state.tasks[t].layers.items():
            other = loaded.tasks[t].layers[i]
            for x, y in ((lp.r, other.r), (lp.s, other.s), (lp.low_rank.U, other.low_rank.U),
                         (lp.low_rank.sigma, other.low_rank.sigma), (lp.low_rank.V, other.low_rank.V)):
                assert x.tobytes() == y.tobytes()
    x = seq[2].test.inputs
    for t in range(3):
        assert np.array_equal(predict(loaded, t, x), predict(state, t, x))
    assert np.array_equal(evaluate_row(loaded, [d.test for d in seq]), A[-1])


def test_reference_state_round_trip(tmp_path, seq):
    for mode in ("stl", "seq_finetune"):
        state, A, _ = run_sequence(replace(CFG, mode=mode), seq)
        path = tmp_path / f"{mode}.halrp"
        save_checkpoint(path, state)
        loaded = load_checkpoint(path)
        assert np.array_equal(evaluate_row(loaded, [d.test for d in seq]), A[-1])


def test_corruption_detected(tmp_path, run):
    path = tmp_path / "c.halrp"
    save_checkpoint(path, run[0])
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_version_mismatch(tmp_path, run):
    path = tmp_path / "v.halrp"
    save_checkpoint(path, run[0])
    raw = path.read_bytes()
    header = _header(raw)
    old = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    header["version"] = 99
    new = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<I", len(new)) + new + raw[len(MAGIC) + 4 + len(old):-8]
    path.write_bytes(body + struct.pack("<Q", _checksum(body)))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_size_accounting_matches_increment_report(tmp_path, run):
    state = run[0]
    path = tmp_path / "s.halrp"
    save_checkpoint(path, state)
    table = _header(path.read_bytes())["arrays"]
    factor_entries = sum(int(np.prod(e["shape"])) for e in table
                         if e["name"].startswith("task") and e["name"].split(".")[1].rstrip("0123456789")
                         in ("r", "s", "U", "sigma", "V"))
    rep = metrics.increment_report(state)
    assert factor_entries == round(rep["total"] * rep["base_size"])
