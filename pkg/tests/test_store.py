import numpy as np
import pytest

from prl.composition import CompositionTable
from prl.errors import ArtifactError, ChecksumError, ParseError, ValidationError
from prl.ingest import EmbeddingMatrix
from prl.phenotype import ClusterModel, Partition
from prl.stats import ModelFit
from prl.store import (
    decode_artifact,
    encode_artifact,
    load_artifact,
    persist_artifact,
    read_checksum,
    sidecar_path,
)


def _examples(rng):
    return {
        "embeddings": EmbeddingMatrix(["a", "b", "c"], rng.normal(size=(3, 4)).astype(np.float32)),
        "model": ClusterModel(rng.normal(size=(5, 3)), [0, 1, -1, 1, 0], k_assign=3, n_clusters=2, tile_ids=list("vwxyz")),
        "model_noids": ClusterModel(rng.normal(size=(2, 2)).astype(np.float32), [0, 0], k_assign=1),
        "partition": Partition([0, 1, 1, 2], gamma=0.7, seed=3, artifact_flags=np.array([False, True, False]),
                               node_ids=["t0", "t1", "t2", "t3"], modularity_trace=[0.1, 0.3, 0.3]),
        "partition_implicit": Partition([0, 0], artifact_flags=np.array([False])),
        "composition": CompositionTable(["P1", "P2"], [[0.25, 0.75], [1 / 3, 2 / 3]], [0, 4]),
        "fit": ModelFit(["cluster_0", "cluster_1"], np.array([0.5, -1 / 3]), np.array([0.1, 0.2]),
                        np.array([1e-7, 0.09]), True, 6, -12.5, "logistic", 0.01, 0.02, 1.0, 1e-10),
        "cox": ModelFit(["x"], np.array([1.0]), np.array([0.1]), np.array([0.5]), True, 4, -3.0, "cox"),
        "json": {"b": [1, 2.5, None], "a": "x"},
    }


def _equal(a, b):
    if isinstance(a, dict):
        assert a == b
        return
    for key, va in vars(a).items():
        if key.startswith("_") or key == "loglik_trace":
            continue
        vb = getattr(b, key)
        if isinstance(va, np.ndarray):
            assert va.dtype == np.asarray(vb).dtype or va.dtype.kind == "b"
            np.testing.assert_array_equal(va, vb)
        elif isinstance(va, float) and np.isnan(va):
            assert np.isnan(vb), key
        else:
            assert va == vb, key


@pytest.mark.parametrize("name", ["embeddings", "model", "model_noids", "partition", "partition_implicit",
                                  "composition", "fit", "cox", "json"])
def test_round_trip(name, tmp_path, rng):
    obj = _examples(rng)[name]
    path = tmp_path / name
    d1 = persist_artifact(obj, path)
    _equal(obj, load_artifact(path))
    assert read_checksum(path) == d1
    # same content, same bytes, same checksum
    assert persist_artifact(load_artifact(path), tmp_path / "again") == d1
    assert encode_artifact(decode_artifact(encode_artifact(obj))) == encode_artifact(obj)


def test_corruption_detected(tmp_path, rng):
    path = tmp_path / "p"
    persist_artifact(_examples(rng)["partition"], path)
    path.write_bytes(path.read_bytes().replace(b"t3\t", b"u3\t"))
    with pytest.raises(ChecksumError):
        load_artifact(path)
    assert load_artifact(path, verify=False).node_ids[-1] == "u3"


def test_missing_files(tmp_path, rng):
    with pytest.raises(ArtifactError, match="not found"):
        load_artifact(tmp_path / "nope")
    path = tmp_path / "j"
    persist_artifact({"a": 1}, path)
    (tmp_path / "j.sha256").unlink()
    with pytest.raises(ArtifactError, match="sidecar"):
        load_artifact(path)
    assert sidecar_path(path).endswith("j.sha256")


def test_unencodable_and_garbage():
    with pytest.raises(ValidationError):
        encode_artifact(3.5)
    with pytest.raises(ParseError):
        decode_artifact(b"\xff\xfe garbage")
    with pytest.raises(ParseError):
        decode_artifact(b"PRLM\x01")
