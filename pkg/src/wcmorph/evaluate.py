"""Morph attack scoring, MMPMR and vulnerability reports.

A morph attacks a pair of identities. It succeeds against an FR system when
it matches the probe images of both identities, so each morph is scored by
the larger of its two probe angles.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import sphere
from .errors import FormatError
from .fr import DecisionThreshold, FrModel, score_sets
from .morph import MorphResult
from .synth import Dataset, MorphPair

log = logging.getLogger(__name__)

N_BINS = 64
REPORT_FORMAT = "wcmorph-report"
REPORT_VERSION = 1
# panels drawn in the histogram figure, in order
PANEL_KINDS = ("blend", "worst_case_approx", "improved_approx", "theoretical")


@dataclass(frozen=True)
class MorphAttackScore:
    pair_id: int
    kind: str
    theta1: float
    theta2: float
    enc_source: str | None = None
    max_theta: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "max_theta", max(self.theta1, self.theta2))

    @property
    def label(self) -> str:
        return group_label(self.kind, self.enc_source)


def group_label(kind: str, enc_source: str | None) -> str:
    """Report key for a morph set: decoder morphs built from the second
    identity's support encoding are reported separately."""
    return f"{kind}:{enc_source}" if enc_source not in (None, "one") else kind


def _pair_index(pairs: Mapping[int, MorphPair] | Sequence[MorphPair]) -> dict[int, MorphPair]:
    if isinstance(pairs, Mapping):
        return dict(pairs)
    return {p.pair_id: p for p in pairs}


def attack_scores(fr: FrModel, morphs: Iterable[MorphResult], pairs) -> list[MorphAttackScore]:
    """Angles between each morph and the probes of both contributing identities.

    Image morphs are embedded with ``fr``. The theoretical kind has no image:
    its z* is recomputed from ``fr``'s enrollment embeddings, which also serve
    as its probes.
    """
    index = _pair_index(pairs)
    morphs = list(morphs)
    for m in morphs:
        if m.pair_id not in index:
            raise ValueError(f"no probes for pair {m.pair_id!r}")
        p = index[m.pair_id]
        if p.probe_1 is None or p.probe_2 is None:
            raise ValueError(f"pair {m.pair_id} is missing a probe image")
        if m.kind != "theoretical" and m.image is None:
            raise ValueError(f"{m.kind} morph for pair {m.pair_id} has no image")
    if not morphs:
        return []
    used = sorted({m.pair_id for m in morphs})
    enroll = fr.embed(np.stack([img for pid in used for img in (index[pid].x1, index[pid].x2)]))
    probe = fr.embed(np.stack([img for pid in used for img in (index[pid].probe_1.image, index[pid].probe_2.image)]))
    row = {pid: i for i, pid in enumerate(used)}
    image_morphs = [m for m in morphs if m.kind != "theoretical"]
    z_img = fr.embed(np.stack([m.image for m in image_morphs])) if image_morphs else np.zeros((0, fr.embedding_dim))
    z_of = {id(m): z for m, z in zip(image_morphs, z_img)}

    out = []
    for m in morphs:
        i = row[m.pair_id]
        if m.kind == "theoretical":
            z1, z2 = enroll[2 * i], enroll[2 * i + 1]
            zs = sphere.worst_case_embedding(z1, z2)
            t1, t2 = sphere.angle(zs, z1), sphere.angle(zs, z2)
        else:
            z = z_of[id(m)]
            t1, t2 = sphere.angle(z, probe[2 * i]), sphere.angle(z, probe[2 * i + 1])
        out.append(MorphAttackScore(int(m.pair_id), m.kind, float(t1), float(t2), m.enc_source))
    return out


def _threshold_value(t) -> float:
    return t.t if isinstance(t, DecisionThreshold) else float(t)


def mmpmr(scores: Sequence[MorphAttackScore] | np.ndarray, t) -> float:
    """Percentage of morphs whose larger probe angle is at most ``t``."""
    max_theta = np.array([s.max_theta for s in scores] if not isinstance(scores, np.ndarray) else scores, dtype=np.float64)
    if max_theta.size == 0:
        raise ValueError("MMPMR of an empty score list is undefined")
    return 100.0 * np.count_nonzero(max_theta <= _threshold_value(t)) / max_theta.size


def bin_edges(bins: int = N_BINS) -> np.ndarray:
    return np.linspace(0.0, np.pi, bins + 1)


def histogram(angles, bins: int = N_BINS) -> np.ndarray:
    """Counts over ``bins`` equal bins of [0, pi], closed on the right
    (the first bin also holds 0)."""
    a = np.asarray(angles, dtype=np.float64)
    if np.any((a < 0) | (a > np.pi)):
        raise ValueError("angles must lie in [0, pi]")
    idx = np.clip(np.searchsorted(bin_edges(bins), a, side="left") - 1, 0, bins - 1)
    return np.bincount(idx, minlength=bins).astype(np.int64)


def mmpmr_from_histogram(counts: np.ndarray, t: float, bins: int | None = None) -> float:
    """MMPMR from binned max angles: the mass of every bin whose upper edge is
    at most ``t``. Exact when ``t`` is a positive bin edge (the first bin
    also holds exact zeros, which no histogram count can separate)."""
    counts = np.asarray(counts)
    total = counts.sum()
    if total == 0:
        raise ValueError("MMPMR of an empty histogram is undefined")
    upper = bin_edges(bins or len(counts))[1:]
    return 100.0 * counts[upper <= _threshold_value(t)].sum() / total


# -- reports ---------------------------------------------------------------------


@dataclass
class VulnerabilityReport:
    fr_tag: str
    threshold: DecisionThreshold
    genuine_hist: np.ndarray
    impostor_hist: np.ndarray
    kind_hist: dict[str, np.ndarray]
    mmpmr_by_kind: dict[str, float]
    n_by_kind: dict[str, int]
    warnings: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    bins: int = N_BINS
    genuine: np.ndarray = field(default=None, repr=False)
    impostor: np.ndarray = field(default=None, repr=False)
    scores: list[MorphAttackScore] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "fr_tag": self.fr_tag,
            "meta": self.meta,
            "threshold": {
                "t": self.threshold.t,
                "fmr_at_t": self.threshold.fmr_at_t,
                "fnmr_at_t": self.threshold.fnmr_at_t,
                "calibration_set": self.threshold.calibration_set,
            },
            "bins": self.bins,
            "histograms": {
                "genuine": self.genuine_hist.tolist(),
                "impostor": self.impostor_hist.tolist(),
                "max_theta": {k: v.tolist() for k, v in self.kind_hist.items()},
            },
            "n_by_kind": self.n_by_kind,
            "mmpmr_by_kind": self.mmpmr_by_kind,
            "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VulnerabilityReport":
        """Rebuild from :meth:`to_dict` output; raw score arrays are not kept."""
        th = data["threshold"]
        h = data["histograms"]
        return cls(
            fr_tag=data["fr_tag"],
            threshold=DecisionThreshold(th["t"], th["fmr_at_t"], th["fnmr_at_t"], th["calibration_set"]),
            genuine_hist=np.array(h["genuine"], dtype=np.int64),
            impostor_hist=np.array(h["impostor"], dtype=np.int64),
            kind_hist={k: np.array(v, dtype=np.int64) for k, v in h["max_theta"].items()},
            mmpmr_by_kind=dict(data["mmpmr_by_kind"]),
            n_by_kind=dict(data["n_by_kind"]),
            warnings=list(data["warnings"]),
            meta=dict(data["meta"]),
            bins=data["bins"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def scores_csv(self) -> str:
        """Raw angles, one ``kind,angle`` row each (``max_theta`` for morphs)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "angle"])
        for name, values in (("genuine", self.genuine), ("impostor", self.impostor)):
            w.writerows((name, repr(float(v))) for v in values)
        w.writerows((s.label, repr(s.max_theta)) for s in self.scores)
        return buf.getvalue()

    def attacks_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair_id", "kind", "enc_source", "theta1", "theta2", "max_theta"])
        for s in self.scores:
            w.writerow([s.pair_id, s.kind, s.enc_source or "", repr(s.theta1), repr(s.theta2), repr(s.max_theta)])
        return buf.getvalue()


def read_report(text: str) -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"report is not valid JSON: {exc}") from exc
    if data.get("format") != REPORT_FORMAT or data.get("version") != REPORT_VERSION:
        raise FormatError(f"expected {REPORT_FORMAT} version {REPORT_VERSION}")
    return data


def build_report(
    fr: FrModel,
    threshold: DecisionThreshold,
    dataset: Dataset,
    morph_sets: Mapping[str, Sequence[MorphResult]],
    pairs,
    seed: int = 0,
    bins: int = N_BINS,
    meta: dict | None = None,
) -> VulnerabilityReport:
    """Genuine/impostor histograms of ``dataset`` plus per-kind max-angle
    histograms and MMPMR of the given morph sets under ``fr``."""
    sets = score_sets(fr, dataset, seed=seed)
    warnings = []
    scores: list[MorphAttackScore] = []
    for name in sorted(morph_sets):
        morphs = list(morph_sets[name])
        if not morphs:
            msg = f"no morphs of kind {name!r}; omitted"
            log.warning(msg)
            warnings.append(msg)
            continue
        scores.extend(attack_scores(fr, morphs, pairs))
    by_label: dict[str, list[float]] = {}
    for s in scores:
        by_label.setdefault(s.label, []).append(s.max_theta)
    labels = sorted(by_label)
    return VulnerabilityReport(
        fr_tag=fr.tag,
        threshold=threshold,
        genuine_hist=histogram(sets["genuine"], bins),
        impostor_hist=histogram(sets["impostor"], bins),
        kind_hist={k: histogram(by_label[k], bins) for k in labels},
        mmpmr_by_kind={k: mmpmr(np.array(by_label[k]), threshold) for k in labels},
        n_by_kind={k: len(by_label[k]) for k in labels},
        warnings=warnings,
        meta=dict(meta or {}),
        bins=bins,
        genuine=sets["genuine"],
        impostor=sets["impostor"],
        scores=scores,
    )


def cross_system_eval(
    morph_sets: Mapping[str, Sequence[MorphResult]],
    pairs,
    systems: Mapping[str, tuple[FrModel, DecisionThreshold]],
    dataset: Dataset,
    seed: int = 0,
    bins: int = N_BINS,
    meta: dict | None = None,
) -> dict[str, VulnerabilityReport]:
    """The same morph images evaluated under several FR systems, e.g.
    ``{"white": (fr_w, t_w), "black": (fr_b, t_b)}``."""
    return {
        role: build_report(fr, th, dataset, morph_sets, pairs, seed=seed, bins=bins, meta={**(meta or {}), "role": role})
        for role, (fr, th) in systems.items()
    }


# -- figure ----------------------------------------------------------------------

_COLORS = {"genuine": "#1f77b4", "impostor": "#d62728", "morph": "#2ca02c"}


def render_svg(report: VulnerabilityReport, width: int = 300, height: int = 180) -> str:
    """Self-contained SVG: one panel of genuine vs impostor angles, then one
    panel per morph kind overlaying its max angles; the threshold is dashed."""
    panels = [("genuine / impostor", None)] + [(k, report.kind_hist[k]) for k in PANEL_KINDS if k in report.kind_hist]
    pad = 30
    total_w = width * len(panels)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{height + 20}" font-family="sans-serif" font-size="10">',
        f'<text x="4" y="12">{report.fr_tag}  t={report.threshold.t:.4f}</text>',
    ]

    def density(counts):
        c = np.asarray(counts, dtype=np.float64)
        return c / c.sum() if c.sum() else c

    g, imp = density(report.genuine_hist), density(report.impostor_hist)
    for p, (title, counts) in enumerate(panels):
        x0, y0 = p * width + pad, 20
        pw, ph = width - 2 * pad, height - pad
        series = [("genuine", g), ("impostor", imp)]
        if counts is not None:
            series.append(("morph", density(counts)))
        top = max(float(s.max()) for _, s in series) or 1.0
        out.append(f'<g><text x="{x0}" y="{y0 + 10}">{title}</text>')
        out.append(f'<rect x="{x0}" y="{y0 + 14}" width="{pw}" height="{ph - 14}" fill="none" stroke="#999"/>')
        bw = pw / report.bins
        for name, s in series:
            for i, v in enumerate(s):
                if v <= 0:
                    continue
                h = (ph - 14) * v / top
                out.append(
                    f'<rect x="{x0 + i * bw:.2f}" y="{y0 + ph - h:.2f}" width="{bw:.2f}" height="{h:.2f}" '
                    f'fill="{_COLORS[name]}" fill-opacity="0.45"/>'
                )
        tx = x0 + pw * report.threshold.t / np.pi
        out.append(f'<line x1="{tx:.2f}" y1="{y0 + 14}" x2="{tx:.2f}" y2="{y0 + ph}" stroke="black" stroke-dasharray="3,2"/>')
        if counts is not None:
            out.append(f'<text x="{x0}" y="{y0 + ph + 12}">MMPMR {report.mmpmr_by_kind[title]:.1f}%</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
