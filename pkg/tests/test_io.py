import json

import numpy as np
import pytest

from mlblue.coupling import GroupMomentSet, mlmc_structure, optimal_scalar_weights
from mlblue.io import (
    MAGIC,
    ConfigError,
    dumps,
    load_document,
    load_structure,
    read_arrays,
    read_ensemble,
    read_ensemble_csv,
    read_weights,
    write_arrays,
    write_document,
    write_ensemble,
    write_weights,
)
from mlblue.synthetic import FieldHierarchySpec, sample_ensemble


def test_dumps_is_sorted_and_plain():
    text = dumps({"b": np.float64(1.5), "a": np.arange(2), "c": float("inf")})
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [0, 1], "b": 1.5, "c": "inf"}


def test_document_roundtrip(tmp_path, three_level):
    path = tmp_path / "s.json"
    write_document(path, {"structure": three_level.to_dict()})
    assert load_document(path)["schema_version"] == 1
    assert load_structure(path) == three_level


def test_yaml_input(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text("L: 2\ngroups: [[1], [1, 2]]\nm: [4, 2]\n")
    assert load_structure(path).m == (4, 2)


def test_bad_documents(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_document(p)
    p.write_text('{"schema_version": 9}')
    with pytest.raises(ConfigError, match="schema_version"):
        load_document(p)
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_document(p)
    with pytest.raises(ConfigError):
        load_document(tmp_path / "missing.json")


def test_binary_layout(tmp_path, rng):
    a = rng.standard_normal((3, 2))
    path = tmp_path / "a.bin"
    write_arrays(path, "test", [("a", a), ("b", np.arange(4.0))], {"k": 1})
    raw = path.read_bytes()
    assert raw.startswith(MAGIC)
    kind, meta, arrays = read_arrays(path)
    assert kind == "test" and meta == {"k": 1}
    np.testing.assert_array_equal(arrays["a"], a)
    np.testing.assert_array_equal(arrays["b"], np.arange(4.0))


def test_not_a_container(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"hello")
    with pytest.raises(ConfigError):
        read_arrays(p)


def test_ensemble_roundtrip(tmp_path):
    spec = FieldHierarchySpec(4, (1, np.inf), (0.2, 0.1))
    s = mlmc_structure(2, m=(3, 2))
    e = sample_ensemble(spec, s, 8)
    write_ensemble(tmp_path / "e.bin", e)
    back = read_ensemble(tmp_path / "e.bin")
    assert back.structure == s and back.seed == 8
    for x, y in zip(e.groups, back.groups):
        np.testing.assert_array_equal(x, y)
    write_arrays(tmp_path / "w.bin", "weights", [])
    with pytest.raises(ConfigError):
        read_ensemble(tmp_path / "w.bin")


def test_weights_roundtrip(tmp_path, three_level):
    w = optimal_scalar_weights(three_level, GroupMomentSet((np.eye(1), np.eye(2) + 0.5, np.eye(2) + 0.5)))
    write_weights(tmp_path / "w.bin", w)
    meta, betas = read_weights(tmp_path / "w.bin")
    assert meta["flavor"] == "scalar" and meta["variance"] == w.variance
    for x, y in zip(w.betas, betas):
        np.testing.assert_array_equal(x, y)


def test_csv_import(tmp_path):
    s = mlmc_structure(2)
    rows = ["group,member,level,value"]
    rows += ["1,1,1,0.5", "1,2,1,1.5"]
    rows += ["2,1,1,2.0", "2,1,2,3.0"]
    (tmp_path / "e.csv").write_text("\n".join(rows) + "\n")
    e = read_ensemble_csv(tmp_path / "e.csv", s)
    assert e.m == (2, 1)
    np.testing.assert_array_equal(e.groups[1], [[2.0, 3.0]])


def test_csv_errors(tmp_path):
    s = mlmc_structure(2)
    p = tmp_path / "e.csv"
    p.write_text("1,1,1,0.5\n2,1,2,3.0\n")
    with pytest.raises(ConfigError, match="missing"):
        read_ensemble_csv(p, s)
    p.write_text("1,1,2,0.5\n2,1,1,1.0\n2,1,2,3.0\n")
    with pytest.raises(ConfigError, match="not in group"):
        read_ensemble_csv(p, s)
    p.write_text("1,1,1,0.5\n")
    with pytest.raises(ConfigError, match="group 2"):
        read_ensemble_csv(p, s)
