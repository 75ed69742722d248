"""Procedural synthetic faces: identities, nuisance variation, dataset I/O.

Each identity is 12 numbers in [0, 1]; index meaning::

    0 face half-width      4 eye radius        8 brow offset
    1 face half-height     5 nose length       9 skin tone
    2 eye spacing          6 mouth width      10 feature (eye/brow) tone
    3 eye height           7 mouth curvature  11 hair tone

Faces are pre-aligned and rendered with soft (anti-aliased) edges on a
32x32 single-channel canvas.
"""

from __future__ import annotations

import csv
import hashlib
import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

N_PARAMS = 12
IMAGE_SIZE = 32
MANIFEST_HEADER = "# wcmorph-dataset v1"


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: int
    params: tuple

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        if p.shape != (N_PARAMS,):
            raise ValueError(f"identity needs {N_PARAMS} parameters, got {p.shape}")
        if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
            raise ValueError("identity parameters must lie in [0, 1]")


@dataclass(frozen=True)
class Nuisance:
    shift_x: float = 0.0
    shift_y: float = 0.0
    brightness: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not (-2.0 <= self.shift_x <= 2.0 and -2.0 <= self.shift_y <= 2.0):
            raise ValueError("shift must lie in [-2, 2] px")
        if not -0.1 <= self.brightness <= 0.1:
            raise ValueError("brightness must lie in [-0.1, 0.1]")
        if not 0.0 <= self.noise_sigma <= 0.02:
            raise ValueError("noise sigma must lie in [0, 0.02]")

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "Nuisance":
        return cls(
            shift_x=float(rng.uniform(-2.0, 2.0)),
            shift_y=float(rng.uniform(-2.0, 2.0)),
            brightness=float(rng.uniform(-0.1, 0.1)),
            noise_sigma=float(rng.uniform(0.0, 0.02)),
        )


def _coverage(signed_dist: np.ndarray) -> np.ndarray:
    """Soft inside-coverage from a signed distance in pixels (negative inside)."""
    return np.clip(0.5 - signed_dist, 0.0, 1.0)


def _ellipse_sd(X, Y, cx, cy, ax, ay):
    r = np.sqrt(((X - cx) / ax) ** 2 + ((Y - cy) / ay) ** 2)
    return (r - 1.0) * min(ax, ay)


def _segment_sd(X, Y, x0, y0, x1, y1, half_thickness):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((X - x0) * dx + (Y - y0) * dy) / (dx * dx + dy * dy + 1e-12), 0.0, 1.0)
    return np.hypot(X - (x0 + t * dx), Y - (y0 + t * dy)) - half_thickness


def _paint(canvas, cover, tone):
    canvas *= 1.0 - cover
    canvas += cover * tone


def _window(size: int, x_lo, x_hi, y_lo, y_hi) -> tuple[slice, slice]:
    """Pixel rows and columns whose centres may fall in a box (in face units).

    Coverage is exactly zero outside a shape's box, so painting only the
    window leaves every other pixel untouched.
    """
    scale = size / 32.0

    def span(lo, hi):
        a = int(np.floor(lo * scale - 0.5)) - 1
        b = int(np.ceil(hi * scale - 0.5)) + 2
        return slice(min(max(a, 0), size), min(max(b, 0), size))

    return span(y_lo, y_hi), span(x_lo, x_hi)


def _paint_ellipse(img, X, Y, cx, cy, ax, ay, tone):
    pad = 0.5 / min(ax, ay)
    w = _window(img.shape[0], cx - ax * (1 + pad), cx + ax * (1 + pad), cy - ay * (1 + pad), cy + ay * (1 + pad))
    _paint(img[w], _coverage(_ellipse_sd(X[w], Y[w], cx, cy, ax, ay)), tone)


def _paint_segments(img, X, Y, xs, ys, half_thickness, tone):
    """Paint the polyline through ``xs, ys`` (one segment per consecutive pair)."""
    r = half_thickness + 0.5
    w = _window(img.shape[0], min(xs) - r, max(xs) + r, min(ys) - r, max(ys) + r)
    xs, ys = np.asarray(xs, dtype=np.float64)[:, None, None], np.asarray(ys, dtype=np.float64)[:, None, None]
    sd = _segment_sd(X[w], Y[w], xs[:-1], ys[:-1], xs[1:], ys[1:], half_thickness).min(axis=0)
    _paint(img[w], _coverage(sd), tone)


@functools.cache
def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates in units of a 32-pixel face."""
    scale = size / 32.0
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    X, Y = xs / scale, ys / scale
    X.flags.writeable = Y.flags.writeable = False
    return X, Y


def render_identity(spec: IdentitySpec, nuisance: Nuisance = Nuisance(), seed: int = 0, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render one face as a ``(size, size)`` array in [0, 1]."""
    p = np.asarray(spec.params, dtype=np.float64)
    X, Y = _grid(size)
    cx = 16.0 + nuisance.shift_x
    cy = 16.5 + nuisance.shift_y

    face_w = 8.0 + 4.0 * p[0]
    face_h = 10.0 + 3.5 * p[1]
    skin = 0.45 + 0.4 * p[9]
    feature = 0.02 + 0.25 * p[10]
    hair = 0.05 + 0.6 * p[11]

    img = np.full((size, size), 0.12)
    # hair: a slightly larger ellipse that only shows above the forehead
    hair_cover = _coverage(_ellipse_sd(X, Y, cx, cy - 1.0, face_w + 1.2, face_h + 1.2))
    hair_cover *= np.clip(cy - 0.35 * face_h - Y + 0.5, 0.0, 1.0)
    _paint(img, hair_cover, hair)
    face_cover = _coverage(_ellipse_sd(X, Y, cx, cy, face_w, face_h))
    face_cover *= 1.0 - hair_cover
    _paint(img, face_cover, skin)

    eye_dx = 2.6 + 2.6 * p[2]
    eye_y = cy - 0.8 - 3.2 * p[3]
    eye_r = 0.9 + 1.3 * p[4]
    brow_y = eye_y - eye_r - 0.8 - 2.0 * p[8]
    for side in (-1.0, 1.0):
        ex = cx + side * eye_dx
        _paint_ellipse(img, X, Y, ex, eye_y, eye_r * 1.25, eye_r, feature)
        brow_end = brow_y - 0.3 * side * (p[8] - 0.5)
        _paint_segments(img, X, Y, [ex - eye_r - 0.6, ex + eye_r + 0.6], [brow_y, brow_end], 0.55, feature)

    nose_top = eye_y + 0.8
    nose_len = 2.0 + 4.0 * p[5]
    _paint_segments(img, X, Y, [cx, cx + 0.4], [nose_top, nose_top + nose_len], 0.6, skin - 0.2)

    mouth_y = min(nose_top + nose_len + 2.2, cy + face_h - 1.8)
    mouth_hw = 1.0 + 5.5 * p[6]
    curve = (p[7] - 0.5) * 0.5
    mx = np.linspace(-mouth_hw, mouth_hw, 9)
    my = mouth_y + curve * (mx * mx - mouth_hw * mouth_hw / 3.0) / max(mouth_hw, 1.0)
    _paint_segments(img, X, Y, cx + mx, my, 0.8, 0.6 * feature + 0.1)

    img = img + nuisance.brightness
    if nuisance.noise_sigma > 0:
        img = img + np.random.default_rng(seed).normal(0.0, nuisance.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class Record:
    record_id: int
    identity_id: int
    split: str
    nuisance: Nuisance
    seed: int
    image: np.ndarray = field(repr=False)


@dataclass
class Dataset:
    identities: dict[int, IdentitySpec]
    records: list[Record]
    seed: int | None = None

    def split(self, name: str) -> "Dataset":
        recs = [r for r in self.records if r.split == name]
        ids = {r.identity_id for r in recs}
        return Dataset({k: v for k, v in self.identities.items() if k in ids}, recs, self.seed)

    def identity_ids(self, split: str | None = None) -> list[int]:
        return sorted({r.identity_id for r in self.records if split is None or r.split == split})

    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.records])

    def labels(self) -> np.ndarray:
        return np.array([r.identity_id for r in self.records])

    def by_identity(self) -> dict[int, list[Record]]:
        out: dict[int, list[Record]] = {}
        for r in self.records:
            out.setdefault(r.identity_id, []).append(r)
        return out


def generate_dataset(
    n_identities: int = 120,
    images_per_identity: int = 10,
    train_fraction: float = 100 / 120,
    seed: int = 0,
) -> Dataset:
    """Draw identities and nuisances from one seeded generator and render them.

    The split is by identity: the first ``round(n * train_fraction)``
    identities of a seeded permutation are training identities.
    """
    if n_identities < 4:
        raise ValueError("need at least 4 identities")
    if images_per_identity < 2:
        raise ValueError("need at least 2 images per identity")
    n_train = int(round(n_identities * train_fraction))
    if n_train < 2:
        raise ValueError("training split needs at least 2 identities")
    if n_train >= n_identities:
        raise ValueError("validation split would be empty")
    rng = np.random.default_rng(seed)
    identities = {i: IdentitySpec(i, tuple(float(v) for v in rng.uniform(0.0, 1.0, N_PARAMS))) for i in range(n_identities)}
    order = rng.permutation(n_identities)
    train_ids = {int(i) for i in order[:n_train]}
    records = []
    for ident in range(n_identities):
        split = "train" if ident in train_ids else "validation"
        for _ in range(images_per_identity):
            nuisance = Nuisance.draw(rng)
            rec_seed = int(rng.integers(0, 2**31 - 1))
            image = render_identity(identities[ident], nuisance, rec_seed)
            records.append(Record(len(records), ident, split, nuisance, rec_seed, image))
    return Dataset(identities, records, seed)


# -- on-disk format ------------------------------------------------------------


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary 8-bit PGM (P5)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    pixels = np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    """The value an image takes after a PGM round trip."""
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255) / 255.0


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write identities.csv, manifest.csv and one PGM per record."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with open(directory / "identities.csv", "w", newline="") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["identity_id"] + [f"p{i}" for i in range(N_PARAMS)])
        for ident, spec in sorted(dataset.identities.items()):
            w.writerow([ident] + [repr(float(v)) for v in spec.params])
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        fh.write(f"# seed={dataset.seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "identity_id", "split", "shift_x", "shift_y", "brightness", "noise_sigma", "seed", "image"])
        for r in dataset.records:
            name = f"images/{r.record_id:05d}.pgm"
            write_pgm(directory / name, r.image)
            n = r.nuisance
            w.writerow([r.record_id, r.identity_id, r.split, repr(n.shift_x), repr(n.shift_y), repr(n.brightness), repr(n.noise_sigma), r.seed, name])
    return manifest


def _data_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise FormatError(f"{path}: missing header {MANIFEST_HEADER!r}")
    rows = list(csv.reader(line for line in lines[1:] if not line.startswith("#")))
    return rows[0], rows[1:]


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    _, id_rows = _data_rows(directory / "identities.csv")
    identities = {int(r[0]): IdentitySpec(int(r[0]), tuple(float(v) for v in r[1:])) for r in id_rows}
    header, rows = _data_rows(directory / "manifest.csv")
    col = {name: i for i, name in enumerate(header)}
    seed_line = [ln for ln in (directory / "manifest.csv").read_text().splitlines() if ln.startswith("# seed=")]
    seed = int(seed_line[0].split("=", 1)[1]) if seed_line and seed_line[0].split("=", 1)[1] != "None" else None
    records = []
    for r in rows:
        nuisance = Nuisance(float(r[col["shift_x"]]), float(r[col["shift_y"]]), float(r[col["brightness"]]), float(r[col["noise_sigma"]]))
        records.append(
            Record(
                int(r[col["record_id"]]),
                int(r[col["identity_id"]]),
                r[col["split"]],
                nuisance,
                int(r[col["seed"]]),
                read_pgm(directory / r[col["image"]]),
            )
        )
    return Dataset(identities, records, seed)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- morph pair selection --------------------------------------------------------


@dataclass
class MorphPair:
    """Two identities to morph: enrollment images x1, x2 and held-out probes."""

    pair_id: int
    identity_1: int
    identity_2: int
    enroll_1: Record
    enroll_2: Record
    probe_1: Record
    probe_2: Record
    angle: float

    @property
    def x1(self) -> np.ndarray:
        return self.enroll_1.image

    @property
    def x2(self) -> np.ndarray:
        return self.enroll_2.image


def identity_angles(validation: Dataset, fr) -> tuple[list[int], np.ndarray]:
    """Angle matrix between normalised per-identity mean embeddings."""
    groups = validation.by_identity()
    ids = sorted(groups)
    means = []
    for ident in ids:
        z = fr.embed(np.stack([r.image for r in groups[ident]]))
        m = z.mean(axis=0)
        means.append(m / np.linalg.norm(m))
    means = np.stack(means)
    return ids, np.arccos(np.clip(means @ means.T, -1.0, 1.0))


def select_morph_pairs(validation: Dataset, fr, k: int = 50) -> list[MorphPair]:
    """The ``k`` most similar identity pairs under ``fr``, closest first.

    Each identity enrolls with its first record and is probed with its second.
    """
    groups = validation.by_identity()
    if len(groups) < 2:
        raise ValueError("pair selection needs at least two validation identities")
    if any(len(recs) < 2 for recs in groups.values()):
        raise ValueError("every identity needs an enrollment and a probe image")
    ids, ang = identity_angles(validation, fr)
    iu, ju = np.triu_indices(len(ids), k=1)
    if k < 1 or k > len(iu):
        raise ValueError(f"requested {k} pairs but only {len(iu)} identity pairs exist")
    order = np.lexsort((ju, iu, ang[iu, ju]))[:k]
    pairs = []
    for pid, o in enumerate(order):
        a, b = ids[iu[o]], ids[ju[o]]
        pairs.append(MorphPair(pid, a, b, groups[a][0], groups[b][0], groups[a][1], groups[b][1], float(ang[iu[o], ju[o]])))
    return pairs
