"""Decoder-based approximations of worst-case morphs.

A supporting encoder compresses the non-identity content of an image into a
small spatial map. The decoder takes a worst-case embedding together with
that map and renders an image. Training pairs every sample in a batch with
its cyclic neighbour, asks the decoder to reproduce the sample itself, and
pulls the FR embedding of the output towards the pair's worst case.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import sphere
from .autodiff import Adam, BatchNorm, Conv2d, Linear, ModelWeights, Module, Tensor, UntiedBias, backward, frozen, ops
from .errors import DimensionError, FormatError
from .fr import FrModel
from .synth import IMAGE_SIZE, Dataset

log = logging.getLogger(__name__)

LEAK = 0.02
GAMMA1 = 1.0
GAMMA2 = 0.1
ENC_WIDTHS = (16, 32, 8)
Z_CHANNELS = 56
DEC_WIDTHS = (32, 16)
HIDDEN = 128
REFINE_STEP = 0.05
REFINE_ITERS = 200

KINDS = ("blend", "worst_case_approx", "improved_approx", "theoretical")


class SupportEncoder(Module):
    """Stride-2 conv stack: 32x32x1 -> 4x4x8."""

    def __init__(self, rng: np.random.Generator, widths: tuple = ENC_WIDTHS):
        chans = (1,) + tuple(widths)
        self.convs = [Conv2d(chans[i], chans[i + 1], 5, 2, 2, rng) for i in range(len(widths))]
        self.norms = [BatchNorm(w) for w in widths]

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv, bn in zip(self.convs, self.norms):
            h = ops.leaky_relu(bn(conv(h)), LEAK)
        return h


class Decoder(Module):
    """FC -> FC -> concat with the encoder map -> upsample/conv stack -> sigmoid.

    The final convolution has no batch norm; it is followed by a per-pixel
    (untied) bias and a sigmoid.
    """

    def __init__(self, embedding_dim: int, rng: np.random.Generator, mean_image: np.ndarray | None = None, enc_channels: int = ENC_WIDTHS[-1]):
        self.side = IMAGE_SIZE // 8
        self.fc1 = Linear(embedding_dim, HIDDEN, rng)
        self.fc2 = Linear(HIDDEN, Z_CHANNELS * self.side * self.side, rng)
        c0 = Z_CHANNELS + enc_channels
        c1, c2 = DEC_WIDTHS
        self.up1 = Conv2d(c0, c1, 3, 1, 1, rng)
        self.bn1 = BatchNorm(c1)
        self.up2 = Conv2d(c1, c2, 3, 1, 1, rng)
        self.bn2 = BatchNorm(c2)
        self.conv3 = Conv2d(c2, c2, 3, 1, 1, rng)
        self.bn3 = BatchNorm(c2)
        self.up4 = Conv2d(c2, 1, 3, 1, 1, rng)
        if mean_image is None:
            init = np.zeros((1, IMAGE_SIZE, IMAGE_SIZE))
        else:
            m = np.clip(np.asarray(mean_image, dtype=np.float64).reshape(1, IMAGE_SIZE, IMAGE_SIZE), 1e-3, 1 - 1e-3)
            init = np.log(m / (1.0 - m))
        self.out_bias = UntiedBias((1, IMAGE_SIZE, IMAGE_SIZE), init)

    def forward(self, z: Tensor, enc_map: Tensor) -> Tensor:
        h = ops.leaky_relu(self.fc1(z), LEAK)
        h = ops.leaky_relu(self.fc2(h), LEAK)
        h = h.reshape(h.shape[0], Z_CHANNELS, self.side, self.side)
        h = ops.concat([h, enc_map], axis=1)
        h = ops.leaky_relu(self.bn1(self.up1(ops.upsample_nearest(h, 2))), LEAK)
        h = ops.leaky_relu(self.bn2(self.up2(ops.upsample_nearest(h, 2))), LEAK)
        h = ops.leaky_relu(self.bn3(self.conv3(h)), LEAK)
        h = self.up4(ops.upsample_nearest(h, 2))
        return ops.sigmoid(self.out_bias(h))


class MorphModel:
    def __init__(
        self,
        embedding_dim: int = sphere.DEFAULT_DIM,
        seed: int = 0,
        mean_image: np.ndarray | None = None,
        gamma1: float = GAMMA1,
        gamma2: float = GAMMA2,
        fr_tag: str = "",
    ):
        rng = np.random.default_rng(seed)
        self.embedding_dim = embedding_dim
        self.seed = seed
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.fr_tag = fr_tag
        self.encoder = SupportEncoder(rng)
        self.decoder = Decoder(embedding_dim, rng, mean_image)
        self.history: list[dict] = []
        self.eval()

    def train(self) -> None:
        self.encoder.train()
        self.decoder.train()

    def eval(self) -> None:
        self.encoder.eval()
        self.decoder.eval()

    def parameters(self) -> dict[str, Tensor]:
        params = {f"enc.{k}": v for k, v in self.encoder.named_parameters().items()}
        params.update({f"dec.{k}": v for k, v in self.decoder.named_parameters().items()})
        return params

    def encode(self, images: np.ndarray) -> np.ndarray:
        self.encoder.eval()
        return self.encoder(Tensor(_as_batch(images))).data

    def decode(self, z: np.ndarray, enc_map: np.ndarray) -> np.ndarray:
        self.decoder.eval()
        return self.decoder(Tensor(np.atleast_2d(z)), Tensor(enc_map)).data

    def weights(self) -> ModelWeights:
        arrays = {f"enc.{k}": v for k, v in self.encoder.state().items()}
        arrays.update({f"dec.{k}": v for k, v in self.decoder.state().items()})
        hp = {
            "kind": "morpher",
            "embedding_dim": self.embedding_dim,
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
            "fr_tag": self.fr_tag,
            "history": self.history,
        }
        return ModelWeights(arrays, seed=self.seed, hyperparameters=hp)

    @classmethod
    def from_weights(cls, w: ModelWeights) -> "MorphModel":
        hp = w.hyperparameters
        if hp.get("kind") != "morpher":
            raise FormatError("weights are not a morph model")
        m = cls(hp["embedding_dim"], w.seed, None, hp["gamma1"], hp["gamma2"], hp.get("fr_tag", ""))
        m.encoder.load_state({k[4:]: v for k, v in w.arrays.items() if k.startswith("enc.")})
        m.decoder.load_state({k[4:]: v for k, v in w.arrays.items() if k.startswith("dec.")})
        m.history = list(hp.get("history", []))
        return m


@dataclass
class MorphResult:
    kind: str
    z_star: np.ndarray
    z_morph: np.ndarray
    latent_loss: float
    image: np.ndarray | None = None
    pixel_loss: float | None = None
    enc_source: str | None = None
    pair_id: int | None = None
    latent: np.ndarray | None = field(default=None, repr=False)
    enc_map: np.ndarray | None = field(default=None, repr=False)
    target: np.ndarray | None = field(default=None, repr=False)


def _as_batch(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
        raise DimensionError(f"expected {IMAGE_SIZE}x{IMAGE_SIZE} single-channel images, got {x.shape}")
    return x


def compute_loss(x_target, x_morph, z_morph, z_star, gamma1: float = GAMMA1, gamma2: float = GAMMA2) -> dict[str, Tensor]:
    """Weighted sum of pixel MSE and the mean angle between FR embeddings.

    Accepts tensors (for training) or arrays; batches are averaged.
    """
    l_pixel = ops.mse_loss(x_morph, x_target)
    l_latent = ops.angle(z_morph, z_star).mean()
    return {"L": l_pixel * gamma1 + l_latent * gamma2, "L_pixel": l_pixel, "L_latent": l_latent}


def cyclic_partner(n: int) -> np.ndarray:
    """Index of each sample's partner: i -> i+1, last -> first."""
    if n < 2:
        raise ValueError("pairing needs a batch of at least 2")
    return np.roll(np.arange(n), -1)


def train_morpher(
    fr: FrModel,
    train: Dataset,
    epochs: int = 160,
    batch_size: int = 64,
    seed: int = 0,
    lr: float = 1e-3,
    gamma1: float = GAMMA1,
    gamma2: float = GAMMA2,
) -> MorphModel:
    """Fit encoder and decoder; FR weights stay fixed."""
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2 so every sample has a partner")
    x_all = _as_batch(train.images())
    model = MorphModel(fr.embedding_dim, seed, x_all.mean(axis=0), gamma1, gamma2, fr.tag)
    z_all = fr.embed(x_all)
    params = model.parameters()
    opt = Adam(params, alpha=lr, beta1=0.0, beta2=0.9)
    rng = np.random.default_rng(seed)
    n = len(x_all)
    fr.encoder.eval()
    model.train()
    with frozen(fr.encoder):
        for epoch in range(epochs):
            order = rng.permutation(n)
            sums = np.zeros(3)
            count = 0
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                if len(idx) < 2:
                    continue
                x = x_all[idx]
                z = z_all[idx]
                z_star = sphere.worst_case_embedding(z, z[cyclic_partner(len(idx))])
                xt = Tensor(x)
                x_morph = model.decoder(Tensor(z_star), model.encoder(xt))
                z_morph = fr.forward(x_morph)
                losses = compute_loss(xt, x_morph, z_morph, Tensor(z_star), gamma1, gamma2)
                opt.zero_grad()
                backward(losses["L"])
                opt.step()
                sums += len(idx) * np.array([losses[k].item() for k in ("L", "L_pixel", "L_latent")])
                count += len(idx)
            rec = dict(zip(("L", "L_pixel", "L_latent"), (sums / count).tolist()))
            model.history.append(rec)
            log.info("morpher epoch %d  L=%.5f  L_pixel=%.5f  L_latent=%.4f", epoch + 1, *(sums / count))
    model.eval()
    return model


def generate_morphs(m: MorphModel, fr: FrModel, x1s: np.ndarray, x2s: np.ndarray, enc_source: str = "one", pair_ids=None) -> list[MorphResult]:
    """Batched :func:`generate_morph`."""
    if enc_source not in ("one", "two"):
        raise ValueError("enc_source must be 'one' or 'two'")
    x1s, x2s = _as_batch(x1s), _as_batch(x2s)
    z1, z2 = fr.embed(x1s), fr.embed(x2s)
    z_star = sphere.worst_case_embedding(z1, z2)
    source = x1s if enc_source == "one" else x2s
    enc_map = m.encode(source)
    images = m.decode(z_star, enc_map)
    z_morph = fr.embed(images)
    lat = sphere.angle(z_morph, z_star)
    pix = np.mean((images - source) ** 2, axis=(1, 2, 3))
    ids = list(pair_ids) if pair_ids is not None else [None] * len(x1s)
    return [
        MorphResult(
            "worst_case_approx",
            z_star[i],
            z_morph[i],
            float(lat[i]),
            images[i, 0],
            float(pix[i]),
            enc_source,
            ids[i],
            latent=z_star[i].copy(),
            enc_map=enc_map[i],
            target=source[i, 0],
        )
        for i in range(len(x1s))
    ]


def generate_morph(m: MorphModel, fr: FrModel, x1: np.ndarray, x2: np.ndarray, enc_source: str = "one") -> MorphResult:
    """Decode the pair's worst-case embedding with encoder features from x1
    (``enc_source='one'``) or x2 (``'two'``)."""
    return generate_morphs(m, fr, x1, x2, enc_source)[0]


def refine_latents(
    m: MorphModel, fr: FrModel, results: list[MorphResult], n_iters: int = REFINE_ITERS, step: float = REFINE_STEP
) -> list[MorphResult]:
    """Gradient descent on the decoder's latent input, all networks frozen.

    The target stays at each result's original worst-case embedding. After
    every step the latent is projected back onto the unit sphere. Each result
    keeps its best iterate, starting from the input itself, so the returned
    latent loss never exceeds the input's.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be positive")
    if not results:
        return []
    out = [replace(r, kind="improved_approx") for r in results]
    if step == 0:
        return out
    for r in results:
        if r.latent is None or r.enc_map is None:
            raise ValueError("refinement needs decoder-produced results (latent and encoder map)")
    target = Tensor(np.stack([r.z_star for r in results]))
    enc = Tensor(np.stack([r.enc_map for r in results]))
    latent = np.stack([r.latent for r in results])
    best = np.array([r.latent_loss for r in results])
    m.eval()
    fr.encoder.eval()
    with frozen(m.decoder, fr.encoder):
        for it in range(n_iters + 1):
            z = Tensor(latent, requires_grad=True)
            img = m.decoder(z, enc)
            zm = fr.forward(img)
            ang = ops.angle(zm, target)
            better = np.flatnonzero(ang.data < best)
            for i in better:
                best[i] = ang.data[i]
                out[i] = replace(
                    out[i], image=img.data[i, 0].copy(), z_morph=zm.data[i].copy(), latent_loss=float(ang.data[i]), latent=latent[i].copy()
                )
            if it == n_iters:
                break
            backward(ang.sum())
            latent = latent - step * z.grad
            latent = latent / np.linalg.norm(latent, axis=1, keepdims=True)
    for i, r in enumerate(out):
        if r.target is not None and r.image is not results[i].image:
            r.pixel_loss = float(np.mean((r.image - r.target) ** 2))
    return out


def refine_latent(m: MorphModel, fr: FrModel, result: MorphResult, n_iters: int = REFINE_ITERS, step: float = REFINE_STEP) -> MorphResult:
    return refine_latents(m, fr, [result], n_iters, step)[0]


def blend_baseline(fr: FrModel, x1: np.ndarray, x2: np.ndarray, alpha: float = 0.5, pair_id=None) -> MorphResult:
    """Pixel-wise ``(1 - alpha) x1 + alpha x2`` on pre-aligned faces."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    image = (1.0 - alpha) * x1 + alpha * x2
    z1, z2, zm = fr.embed(np.stack([x1, x2, image]))
    z_star = sphere.worst_case_embedding(z1, z2)
    return MorphResult("blend", z_star, zm, sphere.angle(zm, z_star), image, None, None, pair_id)


def theoretical_worst_case(fr: FrModel, x1: np.ndarray, x2: np.ndarray, pair_id=None) -> MorphResult:
    """The worst-case embedding itself, with no image behind it."""
    z1, z2 = fr.embed(np.stack([np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)]))
    z_star = sphere.worst_case_embedding(z1, z2)
    return MorphResult("theoretical", z_star, z_star, 0.0, None, None, None, pair_id)
