import numpy as np
import pytest

from vlbind.backend import CaptureSpec
from vlbind.io import list_tensors, load_tensor, load_trace, read_csv, save_tensor, save_trace, sha256_file, write_csv
from vlbind.scenegen import build_prompt


def test_tensor_round_trip(tmp_path):
    a = np.arange(12.0).reshape(3, 4)
    paths = save_tensor(tmp_path, "acts/L3", a, {"layer": 3, "cells": (1, 2)})
    assert [p.suffix for p in paths] == [".npy", ".json"]
    b, meta = load_tensor(tmp_path, "acts/L3")
    np.testing.assert_array_equal(a, b)
    assert meta["layer"] == 3 and meta["cells"] == [1, 2] and meta["shape"] == [3, 4]
    assert list_tensors(tmp_path) == ["acts/L3"]


def test_sidecar_mismatch_is_caught(tmp_path):
    save_tensor(tmp_path, "x", np.zeros(3))
    np.save(tmp_path / "x.npy", np.zeros(4))
    with pytest.raises(ValueError):
        load_tensor(tmp_path, "x")


def test_trace_round_trip(tmp_path, backend, ds2):
    inst = build_prompt(ds2[0], "scene_description")
    tr = backend.run_forward(inst, capture=CaptureSpec({"residual", "head_output"}, (1, 4), (0, -1))).trace
    save_trace(tr, tmp_path)
    back = load_trace(tmp_path)
    assert back.keys() == tr.keys() and back.trial_id == tr.trial_id
    for k in tr.keys():
        np.testing.assert_array_equal(back.get(*k), tr.get(*k))
        assert back.entry(*k).positions == tr.entry(*k).positions


def test_csv_and_hash(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["x", "y"], [(1, 0.1), (2, 1 / 3)])
    rows = read_csv(p)
    assert float(rows[1]["y"]) == 1 / 3
    q = write_csv(tmp_path / "b.csv", ["x", "y"], [(1, 0.1), (2, 1 / 3)])
    assert sha256_file(p) == sha256_file(q)
