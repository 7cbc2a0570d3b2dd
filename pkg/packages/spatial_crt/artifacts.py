"""Run manifests, deterministic JSON artifacts and the clustering cache."""

import enum
import hashlib
import json
import logging
import math
import os
import tempfile
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from . import __version__
from .clustering import Clustering, k_medoids
from .design import AssignmentDraw
from .errors import InputValidationError
from .geometry import PointSet
from .validator import ArtifactValidator

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
CACHE_ENV_VAR = "SPATIAL_CRT_CACHE_DIR"
DEFAULT_CACHE_DIR = Path.home() / ".cache" / "spatial-crt"

PathLike = Union[str, Path]


def manifest_timestamp() -> Optional[str]:
    """UTC time from SOURCE_DATE_EPOCH, or None so reruns stay identical."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if not epoch:
        return None
    try:
        return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    except ValueError:
        logger.warning("Ignoring malformed SOURCE_DATE_EPOCH=%r", epoch)
        return None


def file_digest(path: PathLike) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            sha.update(block)
    return f"sha256:{sha.hexdigest()}"


@dataclass
class RunManifest:
    """What produced an artifact: subcommand, resolved config, seed, inputs."""

    subcommand: str
    config: Dict[str, Any]
    seed: Optional[int] = None
    inputs: Dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__
    timestamp: Optional[str] = field(default_factory=manifest_timestamp)

    @classmethod
    def create(
        cls,
        subcommand: str,
        config: Dict[str, Any],
        seed: Optional[int] = None,
        inputs: Optional[Dict[str, PathLike]] = None,
    ) -> "RunManifest":
        digests = {name: file_digest(path) for name, path in sorted((inputs or {}).items())}
        return cls(subcommand=subcommand, config=config, seed=seed, inputs=digests)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subcommand": self.subcommand,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "tool_version": self.tool_version,
            "timestamp": self.timestamp,
        }


def to_jsonable(obj: Any) -> Any:
    """Plain JSON types; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return obj


def dumps(data: Any) -> str:
    """Sorted keys, two-space indent, trailing newline."""
    return json.dumps(to_jsonable(data), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def write_json(path: PathLike, data: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps(data))


def _read_document(path: PathLike, kind: str) -> Dict[str, Any]:
    result = ArtifactValidator().validate_file(Path(path), kind)
    if not result["valid"]:
        raise InputValidationError(f"{path}: invalid {kind} file: {'; '.join(result['errors'])}")
    with open(path) as f:
        return json.load(f)


def clusters_document(
    ps: PointSet, c: Clustering, r_n: float, rn_multiplier: float, manifest: RunManifest
) -> Dict[str, Any]:
    doc = {
        "kind": "clusters",
        "schema_version": SCHEMA_VERSION,
        "points": ps.to_dict(),
        "r_n": r_n,
        "rn_multiplier": rn_multiplier,
        "manifest": manifest.to_dict(),
    }
    doc.update(c.to_dict())
    return doc


def read_clusters(path: PathLike) -> Tuple[PointSet, Clustering, Dict[str, Any]]:
    """Load clusters.json; returns the point set, clustering and raw document."""
    doc = _read_document(path, "clusters")
    ps = PointSet.from_dict(doc["points"])
    c = Clustering.from_dict(doc)
    if c.n != ps.n:
        raise InputValidationError(f"{path}: assignment covers {c.n} units but {ps.n} points are listed")
    return ps, c, doc


def draw_document(
    draw: AssignmentDraw, p: float, q: float, seed: int, replication: int, manifest: RunManifest
) -> Dict[str, Any]:
    return {
        "kind": "draw",
        "schema_version": SCHEMA_VERSION,
        "k": draw.k,
        "n": draw.n,
        "W": draw.W.tolist(),
        "D": draw.D.tolist(),
        "p": p,
        "q": q,
        "seed": seed,
        "replication": replication,
        "manifest": manifest.to_dict(),
    }


def read_draw(path: PathLike) -> Tuple[AssignmentDraw, Dict[str, Any]]:
    doc = _read_document(path, "draw")
    draw = AssignmentDraw(W=np.asarray(doc["W"]), D=np.asarray(doc["D"]))
    if draw.k != doc["k"] or draw.n != doc["n"]:
        raise InputValidationError(f"{path}: W/D lengths disagree with k/n")
    return draw, doc


def read_outcomes(path: PathLike, ps: PointSet) -> np.ndarray:
    """Outcomes CSV with columns ``id,y``, aligned to the point set's unit order."""
    try:
        frame = pd.read_csv(path, dtype={"id": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputValidationError(f"cannot read outcomes CSV {path}: {e}") from e
    frame.columns = [str(col).strip() for col in frame.columns]
    if list(frame.columns[:2]) != ["id", "y"]:
        raise InputValidationError(f"{path}: header must be 'id,y'")
    if frame["id"].duplicated().any():
        raise InputValidationError(f"{path}: duplicate unit ids")
    labels = ps.labels if ps.labels is not None else [str(i) for i in range(ps.n)]
    series = frame.set_index("id")["y"]
    missing = [label for label in labels if label not in series.index]
    if missing or len(series) != ps.n:
        raise InputValidationError(
            f"{path}: outcomes must list each of the {ps.n} units exactly once"
            + (f" (missing {missing[:5]})" if missing else "")
        )
    try:
        y = series.loc[labels].to_numpy(dtype=float)
    except (TypeError, ValueError) as e:
        raise InputValidationError(f"{path}: non-numeric outcome: {e}") from e
    if not np.all(np.isfinite(y)):
        raise InputValidationError(f"{path}: outcomes must be finite")
    return y


class ClusteringCache:
    """k-medoids results stored as JSON, keyed by the inputs' SHA-256 digest.

    Unreadable or corrupt entries are treated as misses.
    """

    def __init__(self, cache_dir: Optional[PathLike] = None):
        self.cache_dir = Path(cache_dir or os.environ.get(CACHE_ENV_VAR) or DEFAULT_CACHE_DIR)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def get_cache_key(self, ps: PointSet, k: int, seed: int) -> str:
        sha = hashlib.sha256()
        sha.update(np.ascontiguousarray(ps.coords, dtype="<f8").tobytes())
        sha.update(f"|{ps.dim}|{ps.metric.value}|{int(k)}|{int(seed)}|{SCHEMA_VERSION}".encode())
        return f"kmedoids-{sha.hexdigest()}"

    def get_cached_result(self, ps: PointSet, k: int, seed: int) -> Optional[Clustering]:
        cache_file = self.cache_dir / f"{self.get_cache_key(ps, k, seed)}.json"
        if not cache_file.exists():
            return None
        try:
            with open(cache_file) as f:
                clustering = Clustering.from_dict(json.load(f))
        except (json.JSONDecodeError, OSError, KeyError, TypeError, ValueError) as e:
            logger.debug("Ignoring unreadable cache entry %s: %s", cache_file, e)
            return None
        if clustering.n != ps.n or clustering.k != int(k):
            return None
        return clustering

    def cache_result(self, ps: PointSet, k: int, seed: int, clustering: Clustering) -> None:
        cache_file = self.cache_dir / f"{self.get_cache_key(ps, k, seed)}.json"
        try:
            fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
            with os.fdopen(fd, "w") as f:
                f.write(dumps(clustering.to_dict()))
            os.replace(tmp, cache_file)
        except OSError as e:
            logger.debug("Could not write cache entry %s: %s", cache_file, e)

    def get_or_compute(self, ps: PointSet, k: int, seed: int) -> Clustering:
        cached = self.get_cached_result(ps, k, seed)
        if cached is not None:
            with self._lock:
                self.hits += 1
            logger.debug("clustering cache hit (k=%d, n=%d)", k, ps.n)
            return cached
        with self._lock:
            self.misses += 1
        clustering = k_medoids(ps, k, seed=seed)
        self.cache_result(ps, k, seed, clustering)
        return clustering
