"""Toy face-recognition encoders, verification and threshold calibration.

An FR model maps a 32x32 image to a unit vector. Two images match when the
angle between their embeddings is at most the decision threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import sphere
from .autodiff import Adam, BatchNorm, Conv2d, Linear, Module, ModelWeights, Tensor, backward, ops
from .errors import DimensionError, FormatError
from .synth import IMAGE_SIZE, Dataset, Nuisance, quantize, render_identity

log = logging.getLogger(__name__)

WIDTHS = {"white": (16, 32, 64), "black": (24, 48, 96)}
LEAK = 0.02
IMPOSTOR_CAP = 20_000
FMR_LIMIT = 1e-3


class Encoder(Module):
    """Three stride-2 conv blocks, then a bias-free projection to ``out_dim``."""

    def __init__(self, widths: tuple, out_dim: int, rng: np.random.Generator, in_channels: int = 1, size: int = IMAGE_SIZE):
        chans = (in_channels,) + tuple(widths)
        self.convs = [Conv2d(chans[i], chans[i + 1], 5, 2, 2, rng) for i in range(len(widths))]
        self.norms = [BatchNorm(w) for w in widths]
        final = size // 2 ** len(widths)
        self.proj = Linear(widths[-1] * final * final, out_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv, bn in zip(self.convs, self.norms):
            h = ops.leaky_relu(bn(conv(h)), LEAK)
        h = h.reshape(h.shape[0], -1)
        return ops.l2_normalize(self.proj(h))


class FrModel:
    def __init__(self, embedding_dim: int = sphere.DEFAULT_DIM, arch: str = "white", seed: int = 0):
        if arch not in WIDTHS:
            raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(WIDTHS)}")
        self.embedding_dim = embedding_dim
        self.arch = arch
        self.seed = seed
        self.encoder = Encoder(WIDTHS[arch], embedding_dim, np.random.default_rng(seed))
        self.encoder.eval()
        self.history: list[float] = []

    @property
    def tag(self) -> str:
        return f"fr-{self.arch}-d{self.embedding_dim}-s{self.seed}"

    def forward(self, x: Tensor) -> Tensor:
        """Graph-building forward pass on ``(N, 1, H, W)``; uses the current train/eval mode."""
        return self.encoder(x)

    def embed(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Unit embeddings for ``(H, W)``, ``(N, H, W)`` or ``(N, 1, H, W)`` images."""
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise DimensionError(f"FR expects {IMAGE_SIZE}x{IMAGE_SIZE} single-channel images, got {x.shape}")
        self.encoder.eval()
        out = np.concatenate([self.encoder(Tensor(x[i : i + batch_size])).data for i in range(0, len(x), batch_size)])
        return out[0] if single else out

    def weights(self) -> ModelWeights:
        return ModelWeights(
            self.encoder.state(),
            seed=self.seed,
            hyperparameters={"kind": "fr", "arch": self.arch, "embedding_dim": self.embedding_dim, "history": self.history},
        )

    @classmethod
    def from_weights(cls, w: ModelWeights) -> "FrModel":
        hp = w.hyperparameters
        if hp.get("kind") != "fr":
            raise FormatError("weights are not an FR model")
        model = cls(hp["embedding_dim"], hp["arch"], w.seed)
        model.encoder.load_state(w.arrays)
        model.history = list(hp.get("history", []))
        return model


def _as_batch(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    return x[:, None] if x.ndim == 3 else x


def train_fr(
    train: Dataset,
    epochs: int = 120,
    seed: int = 0,
    embedding_dim: int = sphere.DEFAULT_DIM,
    arch: str = "white",
    batch_size: int = 64,
    lr: float = 1e-3,
    scale: float = 32.0,
    margin: float = 0.8,
    augment: bool = True,
) -> FrModel:
    """Train with a normalised-softmax identity head (cosine logits with an
    additive margin), then discard the head.

    With ``augment`` every epoch after the first re-renders each training
    record from its identity with a fresh nuisance draw, so the encoder sees
    many more shifts and lighting changes than the stored images hold.
    """
    ids = train.identity_ids()
    if len(ids) < 2:
        raise ValueError("FR training needs at least two identities")
    class_of = {ident: k for k, ident in enumerate(ids)}
    x_all = _as_batch(train.images())
    y_all = np.array([class_of[i] for i in train.labels()])
    rng = np.random.default_rng(seed)
    model = FrModel(embedding_dim, arch, seed)
    head = Tensor(rng.normal(0.0, 0.01, size=(len(ids), embedding_dim)), requires_grad=True)
    params = dict(model.encoder.named_parameters())
    params["head"] = head
    opt = Adam(params, alpha=lr, beta1=0.0, beta2=0.9)
    model.encoder.train()
    n = len(x_all)
    specs = [train.identities[r.identity_id] for r in train.records]
    x_epoch = x_all
    for epoch in range(epochs):
        if augment and epoch > 0:
            x_epoch = _as_batch(np.stack([quantize(render_identity(sp, Nuisance.draw(rng), int(rng.integers(2**31 - 1)))) for sp in specs]))
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            z = model.forward(Tensor(x_epoch[idx]))
            cos = z @ ops.transpose(ops.l2_normalize(head))
            onehot = np.zeros(cos.shape)
            onehot[np.arange(len(idx)), y_all[idx]] = margin
            loss = ops.cross_entropy((cos - onehot) * scale, y_all[idx])
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        model.history.append(total / count)
        log.info("fr[%s] epoch %d loss %.4f", arch, epoch + 1, total / count)
    model.encoder.eval()
    return model


# -- verification ----------------------------------------------------------------


@dataclass(frozen=True)
class DecisionThreshold:
    t: float
    fmr_at_t: float
    fnmr_at_t: float
    calibration_set: str = ""

    def to_text(self) -> str:
        return (
            "# wcmorph-threshold v1\n"
            f"t={self.t!r}\nfmr_at_t={self.fmr_at_t!r}\nfnmr_at_t={self.fnmr_at_t!r}\ncalibration_set={self.calibration_set}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "DecisionThreshold":
        lines = text.splitlines()
        if not lines or lines[0] != "# wcmorph-threshold v1":
            raise FormatError("not a threshold file (expected '# wcmorph-threshold v1' header)")
        kv = dict(line.split("=", 1) for line in lines[1:] if "=" in line and not line.startswith("#"))
        return cls(float(kv["t"]), float(kv["fmr_at_t"]), float(kv["fnmr_at_t"]), kv.get("calibration_set", ""))


def verify(fr: FrModel, x_a: np.ndarray, x_b: np.ndarray, t: DecisionThreshold | float) -> dict:
    """Match iff the embedding angle is at most ``t`` (boundary inclusive)."""
    t_val = t.t if isinstance(t, DecisionThreshold) else float(t)
    za, zb = fr.embed(x_a), fr.embed(x_b)
    theta = sphere.angle(za, zb)
    return {"match": bool(theta <= t_val), "theta": theta}


def score_sets(fr: FrModel, dataset: Dataset, seed: int = 0, impostor_cap: int = IMPOSTOR_CAP) -> dict[str, np.ndarray]:
    """All same-identity pair angles, and cross-identity pair angles (a seeded
    sample when there are more than ``impostor_cap``)."""
    z = fr.embed(dataset.images()) if dataset.records else np.zeros((0, fr.embedding_dim))
    labels = dataset.labels()
    iu, ju = np.triu_indices(len(labels), k=1)
    same = labels[iu] == labels[ju]
    if not np.any(same):
        raise ValueError("no genuine pairs: every identity needs at least two images")
    cos = np.clip(np.sum(z[iu] * z[ju], axis=1), -1.0, 1.0)
    angles = np.arccos(cos)
    genuine = angles[same]
    impostor = angles[~same]
    if len(impostor) > impostor_cap:
        pick = np.sort(np.random.default_rng(seed).choice(len(impostor), impostor_cap, replace=False))
        impostor = impostor[pick]
    return {"genuine": genuine, "impostor": impostor}


def fmr(impostor: np.ndarray, t: float) -> float:
    return float(np.count_nonzero(np.asarray(impostor) <= t)) / len(impostor)


def fnmr(genuine: np.ndarray, t: float) -> float:
    return float(np.count_nonzero(np.asarray(genuine) > t)) / len(genuine)


def calibrate_threshold(genuine, impostor, calibration_set: str = "", fmr_limit: float = FMR_LIMIT) -> DecisionThreshold:
    """Largest threshold among the sorted impostor scores, their midpoints and
    a point just below the smallest impostor score, with FMR < ``fmr_limit``.

    FNMR is non-increasing in t, so the largest admissible t minimises it.
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    if genuine.size == 0 or imp.size == 0:
        raise ValueError("calibration needs non-empty genuine and impostor score sets")
    cands = np.concatenate([[np.nextafter(imp[0], -np.inf)], imp, (imp[:-1] + imp[1:]) / 2.0])
    cands = np.unique(cands)
    accepted = np.searchsorted(imp, cands, side="right")
    ok = accepted / imp.size < fmr_limit
    t = float(cands[ok][-1])
    return DecisionThreshold(t, fmr(imp, t), fnmr(genuine, t), calibration_set)


def equal_error_rate(genuine, impostor) -> float:
    """min over thresholds of max(FMR, FNMR), swept over every observed score."""
    genuine = np.sort(np.asarray(genuine, dtype=np.float64))
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    ts = np.unique(np.concatenate([genuine, imp, [-1.0]]))
    f_m = np.searchsorted(imp, ts, side="right") / imp.size
    f_nm = 1.0 - np.searchsorted(genuine, ts, side="right") / genuine.size
    return float(np.min(np.maximum(f_m, f_nm)))
