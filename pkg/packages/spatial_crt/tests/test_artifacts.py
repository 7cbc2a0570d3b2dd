"""Tests for JSON artifacts, manifests and the clustering cache."""

import concurrent.futures
import json

import numpy as np
import pytest

from spatial_crt.artifacts import (
    ClusteringCache,
    RunManifest,
    clusters_document,
    draw_document,
    dumps,
    file_digest,
    manifest_timestamp,
    read_clusters,
    read_draw,
    read_outcomes,
    write_json,
)
from spatial_crt.design import AssignmentDraw
from spatial_crt.errors import InputValidationError
from spatial_crt.geometry import PointSet


def test_dumps_is_sorted_and_null_safe():
    text = dumps({"b": np.float64(1.5), "a": [np.int64(2), float("nan")], "c": np.array([1, 0])})

    assert text.endswith("\n")
    assert list(json.loads(text)) == ["a", "b", "c"]
    assert json.loads(text) == {"a": [2, None], "b": 1.5, "c": [1, 0]}


def test_manifest_timestamp_from_source_date_epoch(monkeypatch):
    assert manifest_timestamp() is None
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert manifest_timestamp() == "1970-01-01T00:00:00Z"
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "yesterday")
    assert manifest_timestamp() is None


def test_manifest_records_input_digests(tmp_path):
    points = tmp_path / "points.csv"
    points.write_text("id,x\na,0\n")
    manifest = RunManifest.create("cluster", {"k": 1}, seed=3, inputs={"points": points})

    data = manifest.to_dict()
    assert data["inputs"]["points"] == file_digest(points)
    assert data["inputs"]["points"].startswith("sha256:")
    assert data["seed"] == 3
    assert data["timestamp"] is None


def test_clusters_round_trip(tmp_path, line4_clustering):
    ps = PointSet(np.array([[0.0], [1.0], [10.0], [11.0]]), labels=["u0", "u1", "u2", "u3"])
    doc = clusters_document(ps, line4_clustering, 0.5, 0.5, RunManifest.create("cluster", {}))
    path = tmp_path / "clusters.json"
    write_json(path, doc)

    ps2, c2, raw = read_clusters(path)

    assert ps2.labels == ["u0", "u1", "u2", "u3"]
    assert c2.assignment.tolist() == [0, 0, 1, 1]
    assert raw["r_n"] == 0.5
    assert path.read_text() == dumps(doc)


def test_read_clusters_rejects_inconsistent_documents(tmp_path, line4, line4_clustering):
    doc = clusters_document(line4, line4_clustering, 0.5, 0.5, RunManifest.create("cluster", {}))
    doc["assignment"] = [0, 0, 1]
    path = tmp_path / "clusters.json"
    write_json(path, doc)
    with pytest.raises(InputValidationError):
        read_clusters(path)

    doc["kind"] = "draw"
    write_json(path, doc)
    with pytest.raises(InputValidationError):
        read_clusters(path)


def test_draw_round_trip(tmp_path):
    draw = AssignmentDraw(W=[1, 0], D=[1, 0, 0, 0])
    path = tmp_path / "draw.json"
    write_json(path, draw_document(draw, 0.5, 0.4, 7, 2, RunManifest.create("assign", {})))

    again, doc = read_draw(path)

    assert again.W.tolist() == [1, 0]
    assert again.D.tolist() == [1, 0, 0, 0]
    assert (doc["p"], doc["q"], doc["seed"], doc["replication"]) == (0.5, 0.4, 7, 2)


def test_read_draw_rejects_bad_values(tmp_path, fixtures_dir):
    doc = json.loads((fixtures_dir / "line4" / "draw.json").read_text())
    doc["D"] = [2, 0, 0, 0]
    path = tmp_path / "draw.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(InputValidationError):
        read_draw(path)

    doc["D"] = [1, 0, 0, 0]
    doc["n"] = 5
    path.write_text(json.dumps(doc))
    with pytest.raises(InputValidationError):
        read_draw(path)


def test_read_outcomes_aligns_by_id(fixtures_dir):
    ps = PointSet.from_csv(fixtures_dir / "line4" / "points.csv")
    Y = read_outcomes(fixtures_dir / "line4" / "outcomes.csv", ps)
    assert Y.tolist() == [4.0, 2.0, 1.0, 0.0]


def test_read_outcomes_errors(tmp_path, fixtures_dir):
    ps = PointSet.from_csv(fixtures_dir / "line4" / "points.csv")
    cases = {
        "missing.csv": "id,y\nu0,1\nu1,2\nu2,3\n",
        "extra.csv": "id,y\nu0,1\nu1,2\nu2,3\nu3,4\nu9,5\n",
        "dup.csv": "id,y\nu0,1\nu0,2\nu2,3\nu3,4\n",
        "header.csv": "unit,y\nu0,1\nu1,2\nu2,3\nu3,4\n",
        "text.csv": "id,y\nu0,a\nu1,2\nu2,3\nu3,4\n",
    }
    for name, text in cases.items():
        path = tmp_path / name
        path.write_text(text)
        with pytest.raises(InputValidationError):
            read_outcomes(path, ps)


def test_cache_hit_and_miss(tmp_path, line4):
    cache = ClusteringCache(tmp_path / "cache")
    first = cache.get_or_compute(line4, 2, seed=0)
    second = cache.get_or_compute(line4, 2, seed=0)

    assert (cache.misses, cache.hits) == (1, 1)
    assert second.medoids.tolist() == first.medoids.tolist()
    assert second.assignment.tolist() == first.assignment.tolist()

    cache.get_or_compute(line4, 2, seed=1)
    assert cache.misses == 2


def test_cache_counts_every_lookup_across_threads(tmp_path, line4):
    cache = ClusteringCache(tmp_path)
    cache.get_or_compute(line4, 2, seed=0)

    with concurrent.futures.ThreadPoolExecutor(max_workers=8) as executor:
        results = list(executor.map(lambda _: cache.get_or_compute(line4, 2, seed=0), range(200)))

    assert (cache.misses, cache.hits) == (1, 200)
    assert all(c.medoids.tolist() == results[0].medoids.tolist() for c in results)


def test_inconsistent_cache_entry_is_a_miss(tmp_path, line4):
    cache = ClusteringCache(tmp_path)
    cache.get_or_compute(line4, 2, seed=0)
    entry = tmp_path / f"{cache.get_cache_key(line4, 2, 0)}.json"
    data = json.loads(entry.read_text())
    data["radii"] = [1.0]
    entry.write_text(json.dumps(data))

    assert cache.get_cached_result(line4, 2, 0) is None


def test_corrupt_cache_entry_is_a_miss(tmp_path, line4):
    cache = ClusteringCache(tmp_path)
    cache.get_or_compute(line4, 2, seed=0)
    entry = tmp_path / f"{cache.get_cache_key(line4, 2, 0)}.json"
    entry.write_text("{not json")

    assert cache.get_cached_result(line4, 2, 0) is None
    c = cache.get_or_compute(line4, 2, seed=0)
    assert c.k == 2
    assert cache.misses == 2


def test_cache_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SPATIAL_CRT_CACHE_DIR", str(tmp_path / "env-cache"))
    cache = ClusteringCache()
    assert cache.cache_dir == tmp_path / "env-cache"
    assert cache.cache_dir.is_dir()
