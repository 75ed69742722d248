"""Worst-case embeddings on the unit hypersphere.

For two embeddings ``z1, z2`` the worst-case embedding minimises the larger
of its two dissimilarities to them. With angular dissimilarity on the sphere
that is the normalised sum ``(z1 + z2) / ||z1 + z2||``, which sits at half
the angle from each endpoint; with Euclidean distance on raw vectors it is
the plain midpoint.
"""

from __future__ import annotations

import csv
import enum
from pathlib import Path

import numpy as np

from .errors import DegeneratePairError, FormatError, InvariantError

UNIT_TOL = 1e-9
ANTIPODAL_TOL = 1e-9
DEFAULT_DIM = 16


class Dissimilarity(str, enum.Enum):
    ANGLE = "angle"
    EUCLIDEAN = "euclidean"


def check_unit(z: np.ndarray, tol: float = UNIT_TOL) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise InvariantError(f"embedding is not unit-norm (norm={np.max(np.abs(norms - 1.0)) + 1.0:.12g})")
    return z


def angle(z1: np.ndarray, z2: np.ndarray) -> np.ndarray | float:
    """Angle in radians between unit vectors, row-wise for 2-d input."""
    z1, z2 = check_unit(z1), check_unit(z2)
    # 2 atan2(|a-b|, |a+b|) stays accurate near 0 and pi, where arccos does not
    out = 2.0 * np.arctan2(np.linalg.norm(z1 - z2, axis=-1), np.linalg.norm(z1 + z2, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def dissimilarity(z: np.ndarray, w: np.ndarray, kind: Dissimilarity | str = Dissimilarity.ANGLE):
    kind = Dissimilarity(kind)
    if kind is Dissimilarity.ANGLE:
        return angle(z, w)
    d = np.linalg.norm(np.asarray(z, dtype=np.float64) - np.asarray(w, dtype=np.float64), axis=-1)
    return float(d) if np.ndim(d) == 0 else d


def eq1_objective(z: np.ndarray, z1: np.ndarray, z2: np.ndarray, kind: Dissimilarity | str = Dissimilarity.ANGLE):
    """``max(d(z, z1), d(z, z2))``; ``z`` may be a batch of candidates."""
    return np.maximum(dissimilarity(z, z1, kind), dissimilarity(z, z2, kind))


def worst_case_embedding(z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    z1, z2 = check_unit(z1), check_unit(z2)
    s = z1 + z2
    norm = np.linalg.norm(s, axis=-1, keepdims=True)
    if np.any(norm <= ANTIPODAL_TOL):
        raise DegeneratePairError("antipodal embeddings have no unique worst case")
    return s / norm


def euclidean_worst_case(z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    """Minimiser of the max Euclidean distance over all of R^n: the midpoint."""
    return (np.asarray(z1, dtype=np.float64) + np.asarray(z2, dtype=np.float64)) / 2.0


def worst_case_score(z1: np.ndarray, z2: np.ndarray) -> float:
    """Angle from the worst-case embedding to either endpoint (half the pair angle)."""
    worst_case_embedding(z1, z2)
    return angle(z1, z2) / 2.0


def sample_sphere(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def slerp(z1: np.ndarray, z2: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Points along the shorter great-circle arc from ``z1`` (t=0) to ``z2`` (t=1)."""
    theta = angle(z1, z2)
    ts = np.asarray(ts, dtype=np.float64)[:, None]
    if theta < 1e-12:
        return np.repeat(np.asarray(z1, dtype=np.float64)[None], len(ts), axis=0)
    s = np.sin(theta)
    pts = (np.sin((1 - ts) * theta) * z1 + np.sin(ts * theta) * z2) / s
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def brute_force_worst_case(
    z1: np.ndarray, z2: np.ndarray, n_samples: int = 100_000, seed: int = 0, arc_points: int = 2001
) -> tuple[np.ndarray, float]:
    """Direct search for the angular worst case, independent of the closed form.

    Candidates are an evenly spaced sweep along the arc between ``z1`` and
    ``z2`` plus ``n_samples`` uniform points on the sphere.
    """
    if n_samples < 1000:
        raise ValueError("brute force search needs at least 1000 samples")
    z1, z2 = check_unit(z1), check_unit(z2)
    rng = np.random.default_rng(seed)
    cands = np.concatenate(
        [
            np.stack([z1, z2]),
            slerp(z1, z2, np.linspace(0.0, 1.0, arc_points)),
            sample_sphere(n_samples, z1.shape[-1], rng),
        ]
    )
    # arccos is decreasing, so the largest angle is the smallest cosine
    worst_cos = np.clip(cands @ np.stack([z1, z2]).T, -1.0, 1.0).min(axis=1)
    best = int(np.argmax(worst_cos))
    return cands[best], float(np.arccos(worst_cos[best]))


def save_embeddings(path: str | Path, ids: list, embeddings: np.ndarray) -> None:
    """Write ``id,dim0..dimN`` CSV with full float precision."""
    embeddings = check_unit(np.atleast_2d(embeddings))
    dim = embeddings.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"dim{i}" for i in range(dim)])
        for ident, row in zip(ids, embeddings):
            w.writerow([ident] + [repr(float(v)) for v in row])


def load_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["id"] or any(h != f"dim{i}" for i, h in enumerate(rows[0][1:])):
        raise FormatError(f"{path}: expected header id,dim0..dimN")
    ids = [r[0] for r in rows[1:]]
    arr = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    if arr.size:
        check_unit(arr)
    return ids, arr.reshape(len(ids), len(rows[0]) - 1)
