"""Schema validation for run artifacts and simulation configurations."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from jsonschema import Draft7Validator

logger = logging.getLogger(__name__)


class ArtifactValidator:
    """Validates artifacts against the JSON schemas bundled with the package."""

    def __init__(self, schemas_dir: Optional[Path] = None):
        """Initialize validator.

        Args:
            schemas_dir: Directory containing schema files
        """
        self.schemas_dir = schemas_dir or Path(__file__).parent / "schemas"
        self.schemas = self._load_schemas()

    def _load_schemas(self) -> Dict[str, Dict[str, Any]]:
        """Load all schema files."""
        schemas = {}
        if not self.schemas_dir.exists():
            return schemas

        for schema_file in sorted(self.schemas_dir.glob("*.json")):
            try:
                with open(schema_file) as f:
                    schemas[schema_file.stem] = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                logger.warning("Failed to load schema %s: %s", schema_file, e)

        return schemas

    def validate_data(self, data: Any, kind: str) -> Dict[str, Any]:
        """Validate an in-memory document against the schema named ``kind``.

        Args:
            data: Parsed JSON document
            kind: Schema name (file stem), e.g. ``clusters`` or ``draw``

        Returns:
            Validation result with valid, errors, warnings fields
        """
        result: Dict[str, Any] = {"valid": True, "errors": [], "warnings": []}

        if kind not in self.schemas:
            result["valid"] = False
            result["errors"].append(f"Schema not found: {kind}")
            return result

        validator = Draft7Validator(self.schemas[kind])
        for error in sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path)):
            where = "/".join(str(p) for p in error.absolute_path) or "<root>"
            result["valid"] = False
            result["errors"].append(f"{where}: {error.message}")

        if isinstance(data, dict) and "kind" in data and data["kind"] != kind:
            result["warnings"].append(f"Document declares kind {data['kind']!r}, validated as {kind!r}")

        return result

    def validate_file(self, file_path: Path, kind: Optional[str] = None) -> Dict[str, Any]:
        """Validate a single artifact file.

        The schema is taken from ``kind`` or from the document's own ``kind``
        field.
        """
        result: Dict[str, Any] = {"valid": True, "errors": [], "warnings": []}

        if not file_path.exists():
            result["valid"] = False
            result["errors"].append(f"File not found: {file_path}")
            return result

        try:
            with open(file_path) as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            result["valid"] = False
            result["errors"].append(f"Invalid JSON: {e}")
            return result
        except OSError as e:
            result["valid"] = False
            result["errors"].append(f"Failed to read file: {e}")
            return result

        kind = kind or (data.get("kind") if isinstance(data, dict) else None)
        if not kind:
            result["valid"] = False
            result["errors"].append("No 'kind' field and no schema requested")
            return result

        return self.validate_data(data, kind)
