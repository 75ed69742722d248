"""ModelWeights container: a JSON manifest of named float64 arrays.

Layout::

    {
      "format": "wcmorph-weights",
      "version": 1,
      "seed": 7,
      "hyperparameters": {...},
      "parameters": [
        {"name": "conv.0.weight", "shape": [16, 1, 5, 5], "data": "<base64 of little-endian f8>"},
        ...
      ]
    }

Parameters keep their insertion order; hyperparameter keys are sorted, so
equal weights always serialize to identical bytes.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError

FORMAT_NAME = "wcmorph-weights"
FORMAT_VERSION = 1


@dataclass
class ModelWeights:
    arrays: dict[str, np.ndarray]
    seed: int | None = None
    hyperparameters: dict = field(default_factory=dict)

    def to_json(self) -> str:
        records = [
            {
                "name": name,
                "shape": list(arr.shape),
                "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
            }
            for name, arr in self.arrays.items()
        ]
        doc = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "seed": self.seed,
            "hyperparameters": self.hyperparameters,
            "parameters": records,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ModelWeights":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"weights file is not valid JSON: {exc}") from exc
        if doc.get("format") != FORMAT_NAME:
            raise FormatError(f"not a weights file (format={doc.get('format')!r})")
        if doc.get("version") != FORMAT_VERSION:
            raise FormatError(f"unsupported weights version {doc.get('version')!r}, expected {FORMAT_VERSION}")
        arrays = {}
        for rec in doc["parameters"]:
            raw = base64.b64decode(rec["data"])
            shape = tuple(rec["shape"])
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
            if arr.size != int(np.prod(shape)):
                raise FormatError(f"{rec['name']}: {arr.size} values for shape {shape}")
            arrays[rec["name"]] = arr.reshape(shape)
        return cls(arrays=arrays, seed=doc.get("seed"), hyperparameters=doc.get("hyperparameters", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "ModelWeights":
        return cls.from_json(Path(path).read_text())
