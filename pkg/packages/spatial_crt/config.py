"""Simulation configuration: cascading load, validation and grid expansion."""

import copy
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from .errors import InputValidationError
from .estimators import EstimandKind
from .simulation import DGPSpec, OutcomeModel, TruthMethod
from .validator import ArtifactValidator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

# increasing domain keeps alpha_n = 1; infill shrinks the region with n
DEFAULT_SIMULATION_CONFIG: Dict[str, Any] = {
    "reps": 1000,
    "seed": 20240601,
    "threads": 1,
    "models": ["cliff_ord", "ma"],
    "estimands": ["D", "I", "T", "O"],
    "regimes": [
        {"name": "increasing", "n": [250, 500, 1000], "alpha_n": [1.0, 1.0, 1.0]},
        {"name": "infill", "n": [250, 500, 1000], "alpha_n": [0.9, 0.8, 0.7]},
    ],
    "design": {"p": 0.7, "q": 0.6, "gamma_tilde": 2.0, "rn_multiplier": 0.5},
    "truth": {"method": "monte_carlo", "inner_draws": 2000},
    "dgp": {"self_loop": True, "redraw_population": False},
    "inference": {"level": 0.95},
}


class SimulationConfigLoader:
    """Loads simulation configs with cascading precedence: defaults, file, overrides."""

    def __init__(self, validator: Optional[ArtifactValidator] = None):
        self.validator = validator or ArtifactValidator()

    def load_config(
        self,
        config_path: Optional[Union[str, Path]] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> Dict[str, Any]:
        """
        Load configuration with cascading inheritance.

        Args:
            config_path: Optional JSON or TOML file
            overrides: Values from the command line (``None`` entries ignored)

        Returns:
            Merged and validated configuration dictionary

        Raises:
            InputValidationError: unreadable file or schema violation
        """
        config = copy.deepcopy(DEFAULT_SIMULATION_CONFIG)

        if config_path is not None:
            config = self._deep_merge(config, self._load_file(Path(config_path)))

        if overrides:
            config = self._deep_merge(config, self._prune(overrides))

        result = self.validator.validate_data(config, "simulation-config")
        if not result["valid"]:
            raise InputValidationError("invalid simulation config: " + "; ".join(result["errors"]))
        for regime in config["regimes"]:
            if len(regime["n"]) != len(regime["alpha_n"]):
                raise InputValidationError(
                    f"regime {regime['name']!r}: n and alpha_n must have the same length"
                )
        return config

    def _load_file(self, file_path: Path) -> Dict[str, Any]:
        """Load a JSON or TOML file (chosen by suffix)."""
        try:
            if file_path.suffix.lower() == ".toml":
                with open(file_path, "rb") as f:
                    data = tomllib.load(f)
            else:
                with open(file_path, encoding="utf-8") as f:
                    data = json.load(f)
        except (OSError, json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
            raise InputValidationError(f"cannot read config {file_path}: {e}") from e
        if not isinstance(data, dict):
            raise InputValidationError(f"{file_path}: config must be a table/object")
        data.pop("$schema", None)
        logger.debug("Loaded simulation config from %s", file_path)
        return data

    def _prune(self, overrides: Dict[str, Any]) -> Dict[str, Any]:
        pruned = {}
        for key, value in overrides.items():
            if isinstance(value, dict):
                value = self._prune(value)
                if value:
                    pruned[key] = value
            elif value is not None:
                pruned[key] = value
        return pruned

    def _deep_merge(self, base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
        """Deep merge two dictionaries."""
        result = base.copy()

        for key, value in override.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._deep_merge(result[key], value)
            else:
                result[key] = value

        return result


def cell_seed(seed: int, regime_index: int, size_index: int) -> int:
    """Per-(regime, n) seed; both outcome models of a cell share the population."""
    state = np.random.SeedSequence([int(seed), int(regime_index), int(size_index)]).generate_state(1)
    return int(state[0])


@dataclass
class SimulationConfig:
    """A validated simulation grid."""

    raw: Dict[str, Any]

    @property
    def reps(self) -> int:
        return int(self.raw["reps"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def threads(self) -> int:
        return int(self.raw["threads"])

    @property
    def estimands(self) -> List[EstimandKind]:
        return [EstimandKind.parse(q) for q in self.raw["estimands"]]

    @property
    def truth_method(self) -> TruthMethod:
        return TruthMethod(self.raw["truth"]["method"])

    @property
    def inner_draws(self) -> int:
        return int(self.raw["truth"]["inner_draws"])

    @property
    def level(self) -> float:
        return float(self.raw["inference"]["level"])

    def cells(self) -> List[DGPSpec]:
        """Expand regimes x sizes x models into simulation cells."""
        design = self.raw["design"]
        dgp = self.raw["dgp"]
        cells = []
        for r_idx, regime in enumerate(self.raw["regimes"]):
            for s_idx, (n, alpha) in enumerate(zip(regime["n"], regime["alpha_n"])):
                for model in self.raw["models"]:
                    cells.append(
                        DGPSpec(
                            model=OutcomeModel.parse(model),
                            n=int(n),
                            alpha_n=float(alpha),
                            p=float(design["p"]),
                            q=float(design["q"]),
                            gamma_tilde=float(design["gamma_tilde"]),
                            seed=cell_seed(self.seed, r_idx, s_idx),
                            regime=str(regime["name"]),
                            rn_multiplier=float(design["rn_multiplier"]),
                            self_loop=bool(dgp["self_loop"]),
                            redraw_population=bool(dgp["redraw_population"]),
                        )
                    )
        return cells

    @classmethod
    def load(
        cls,
        config_path: Optional[Union[str, Path]] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> "SimulationConfig":
        return cls(SimulationConfigLoader().load_config(config_path, overrides))
