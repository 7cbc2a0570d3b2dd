"""Point sets, metrics, r-neighborhoods and region volume."""

import enum
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .errors import InputValidationError

logger = logging.getLogger(__name__)

# Relative slack for the kd-tree candidate query; candidates are re-checked
# against the exact metric so the returned set is always exactly {rho <= r}.
_QUERY_SLACK = 1e-9

_ROW_BLOCK = 512


class Metric(str, enum.Enum):
    """Supported distance functions."""

    EUCLIDEAN = "euclidean"
    CHEBYSHEV = "chebyshev"

    @property
    def minkowski_p(self) -> float:
        return 2.0 if self is Metric.EUCLIDEAN else np.inf


def _metric_distance(a: np.ndarray, b: np.ndarray, metric: Metric) -> np.ndarray:
    diff = np.abs(a - b)
    if metric is Metric.EUCLIDEAN:
        return np.sqrt(np.sum(diff * diff, axis=-1))
    return np.max(diff, axis=-1)


@dataclass(frozen=True, eq=False)
class PointSet:
    """Immutable set of unit locations in d-dimensional space.

    Unit ids are the row positions 0..n-1. ``labels`` keeps the identifiers
    found in the input file so artifacts can report the re-indexing.
    """

    coords: np.ndarray
    metric: Metric = Metric.EUCLIDEAN
    labels: Optional[List[str]] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        coords = np.array(self.coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, np.newaxis]
        if coords.ndim != 2 or coords.shape[0] < 1 or coords.shape[1] < 1:
            raise InputValidationError(
                "a point set needs at least one unit and one coordinate axis"
            )
        if not np.all(np.isfinite(coords)):
            raise InputValidationError("coordinates must be finite numbers")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "metric", Metric(self.metric))
        if self.labels is not None:
            if len(self.labels) != coords.shape[0]:
                raise InputValidationError("labels must match the number of units")
            if len(set(self.labels)) != len(self.labels):
                raise InputValidationError("unit ids must be unique")
            object.__setattr__(self, "labels", [str(x) for x in self.labels])

    @property
    def n(self) -> int:
        return int(self.coords.shape[0])

    @property
    def dim(self) -> int:
        return int(self.coords.shape[1])

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.coords)

    def _check_id(self, i: int) -> int:
        if isinstance(i, (bool, np.bool_)) or not isinstance(i, (int, np.integer)):
            raise InputValidationError(f"unit id must be an integer, got {i!r}")
        if not 0 <= int(i) < self.n:
            raise InputValidationError(f"unit id {i} outside 0..{self.n - 1}")
        return int(i)

    def distance(self, i: int, j: int) -> float:
        i, j = self._check_id(i), self._check_id(j)
        return float(_metric_distance(self.coords[i], self.coords[j], self.metric))

    def distances_from(self, i: int) -> np.ndarray:
        """Distances from unit ``i`` to every unit."""
        i = self._check_id(i)
        return _metric_distance(self.coords, self.coords[i], self.metric)

    def pair_distances(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Element-wise rho(a[t], b[t]) for two aligned id arrays."""
        return _metric_distance(self.coords[a], self.coords[b], self.metric)

    def distance_matrix(self) -> np.ndarray:
        """Dense n x n distance matrix, filled in row blocks."""
        out = np.empty((self.n, self.n), dtype=float)
        for start in range(0, self.n, _ROW_BLOCK):
            stop = min(start + _ROW_BLOCK, self.n)
            out[start:stop] = _metric_distance(
                self.coords[start:stop, np.newaxis, :],
                self.coords[np.newaxis, :, :],
                self.metric,
            )
        return out

    def neighborhood(self, i: int, r: float) -> np.ndarray:
        """Sorted ids of units within distance ``r`` of unit ``i`` (inclusive)."""
        i = self._check_id(i)
        r = _check_radius(r)
        candidates = self.tree.query_ball_point(
            self.coords[i], r * (1 + _QUERY_SLACK) + _QUERY_SLACK, p=self.metric.minkowski_p
        )
        return self._exact_filter(i, np.asarray(candidates, dtype=np.intp), r)

    def neighborhoods(self, r: float) -> List[np.ndarray]:
        """r-neighborhoods of all units, in unit order."""
        r = _check_radius(r)
        candidates = self.tree.query_ball_point(
            self.coords, r * (1 + _QUERY_SLACK) + _QUERY_SLACK, p=self.metric.minkowski_p
        )
        return [
            self._exact_filter(i, np.asarray(cand, dtype=np.intp), r)
            for i, cand in enumerate(candidates)
        ]

    def neighborhood_bruteforce(self, i: int, r: float) -> np.ndarray:
        """Reference pairwise scan; must agree with :meth:`neighborhood`."""
        r = _check_radius(r)
        return np.flatnonzero(self.distances_from(i) <= r)

    def _exact_filter(self, i: int, candidates: np.ndarray, r: float) -> np.ndarray:
        if candidates.size == 0:
            return candidates
        dist = _metric_distance(self.coords[candidates], self.coords[i], self.metric)
        return np.sort(candidates[dist <= r])

    def diameter(self) -> float:
        """Largest pairwise distance."""
        if self.n == 1:
            return 0.0
        return float(max(self.distances_from(i).max() for i in range(self.n)))

    def rescale(self, unit_length: float) -> "PointSet":
        """Express coordinates in multiples of ``unit_length``."""
        if not unit_length > 0:
            raise InputValidationError("unit length must be positive")
        return PointSet(self.coords / float(unit_length), self.metric, self.labels)

    @classmethod
    def from_csv(
        cls, path: Union[str, Path], metric: Union[str, Metric] = Metric.EUCLIDEAN
    ) -> "PointSet":
        """Load ``id,x,y[,z...]`` rows; ids are re-indexed 0..n-1 in file order."""
        try:
            frame = pd.read_csv(path, dtype={"id": str})
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise InputValidationError(f"cannot read points CSV {path}: {e}") from e
        return cls._from_frame(frame, metric, str(path))

    @classmethod
    def from_json(
        cls, path: Union[str, Path], metric: Union[str, Metric] = Metric.EUCLIDEAN
    ) -> "PointSet":
        """Load a list of ``{"id": ..., "x": ..., "y": ...}`` records.

        A top-level object with a ``units`` list is accepted as well.
        """
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise InputValidationError(f"cannot read points JSON {path}: {e}") from e
        if isinstance(data, dict):
            data = data.get("units")
        if not isinstance(data, list) or not all(isinstance(x, dict) for x in data):
            raise InputValidationError(
                f"{path}: expected a list of point records with an 'id' field"
            )
        frame = pd.DataFrame.from_records(data)
        if "id" in frame.columns:
            frame["id"] = frame["id"].astype(str)
        return cls._from_frame(frame, metric, str(path))

    @classmethod
    def load(
        cls, path: Union[str, Path], metric: Union[str, Metric] = Metric.EUCLIDEAN
    ) -> "PointSet":
        if Path(path).suffix.lower() == ".json":
            return cls.from_json(path, metric)
        return cls.from_csv(path, metric)

    @classmethod
    def _from_frame(
        cls, frame: pd.DataFrame, metric: Union[str, Metric], source: str
    ) -> "PointSet":
        columns = [str(c).strip() for c in frame.columns]
        frame.columns = columns
        if not columns or columns[0] != "id" or len(columns) < 2:
            raise InputValidationError(
                f"{source}: header must be 'id' followed by coordinate columns"
            )
        if frame.empty:
            raise InputValidationError(f"{source}: no units found")
        try:
            coords = frame[columns[1:]].to_numpy(dtype=float)
        except (TypeError, ValueError) as e:
            raise InputValidationError(f"{source}: non-numeric coordinate: {e}") from e
        labels = frame["id"].astype(str).tolist()
        try:
            metric = Metric(metric)
        except ValueError as e:
            raise InputValidationError(f"unknown metric {metric!r}") from e
        logger.debug("Loaded %d units in %d dimensions from %s", len(labels), coords.shape[1], source)
        return cls(coords, metric, labels)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metric": self.metric.value,
            "ids": list(self.labels) if self.labels is not None else None,
            "coords": self.coords.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PointSet":
        return cls(np.asarray(data["coords"], dtype=float), Metric(data["metric"]), data.get("ids"))


def _check_radius(r: float) -> float:
    r = float(r)
    if not r >= 0:
        raise InputValidationError(f"radius must be nonnegative, got {r}")
    return r


def distance(ps: PointSet, i: int, j: int) -> float:
    return ps.distance(i, j)


def neighborhood(ps: PointSet, i: int, r: float) -> np.ndarray:
    return ps.neighborhood(i, r)


VOLUME_POLICY = "bounding_box: axis-aligned box of the coordinates, zero-extent axes count as 1"


def region_volume(ps: PointSet, method: str = "bounding_box") -> float:
    """Volume of the study region in the point set's unit of length.

    Only the axis-aligned bounding box is supported; axes with zero extent
    count as one unit cell.
    """
    if method != "bounding_box":
        raise InputValidationError(f"unsupported volume method {method!r}")
    extents = np.ptp(ps.coords, axis=0)
    if np.any(extents <= 0):
        logger.warning(
            "region volume: %d of %d axes have zero extent and count as 1",
            int(np.sum(extents <= 0)),
            extents.size,
        )
    extents = np.where(extents > 0, extents, 1.0)
    return float(np.prod(extents))

