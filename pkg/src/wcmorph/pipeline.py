"""Stage runner: every stage reads its inputs from and writes its outputs to
one run directory, so stages can be re-run independently.

Layout of a run directory::

    config.txt                      effective configuration
    data/                           dataset manifest and PGM images
    fr_white.json, fr_black.json    FR weights
    threshold_<role>.txt            calibrated decision thresholds
    scores_<role>.csv               genuine/impostor angles (kind,angle)
    morpher.json                    encoder/decoder weights
    morphs/                         pairs, morph arrays, sidecar CSV, PGMs
    refined/                        refined decoder morphs, same layout
    eval/report_<role>.json         vulnerability reports (+ CSV score dumps)
    report/                         SVG histograms and an MMPMR summary
"""

from __future__ import annotations

import csv
import io
import logging
import time
from pathlib import Path

import numpy as np

from . import evaluate, fr as frmod, morph, synth
from .autodiff import ModelWeights
from .config import RunConfig
from .errors import FormatError, StageDependencyError

log = logging.getLogger(__name__)

ROLES = ("white", "black")
STAGES = ("gen-data", "train-fr", "calibrate", "train-morpher", "morph", "refine", "evaluate", "report")
MORPHS_FORMAT = "wcmorph-morphs v1"
PAIRS_HEADER = "# wcmorph-pairs v1"
SUMMARY_HEADER = "# wcmorph-summary v1"


class Run:
    """Paths and artifact I/O for one run directory."""

    def __init__(self, out: str | Path, config: RunConfig):
        self.out = Path(out)
        self.config = config

    # paths
    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    def fr_path(self, role: str) -> Path:
        return self.out / f"fr_{role}.json"

    def threshold_path(self, role: str) -> Path:
        return self.out / f"threshold_{role}.txt"

    @property
    def morpher_path(self) -> Path:
        return self.out / "morpher.json"

    def report_path(self, role: str) -> Path:
        return self.out / "eval" / f"report_{role}.json"

    @property
    def summary_path(self) -> Path:
        return self.out / "report" / "summary.txt"

    def meta(self) -> dict:
        return {"config_hash": self.config.hash, "seed": self.config.seed}

    # loading with dependency checks
    def require(self, path: Path) -> Path:
        if not path.exists():
            raise StageDependencyError(path)
        return path

    def dataset(self) -> synth.Dataset:
        self.require(self.data_dir / "manifest.csv")
        return synth.load_dataset(self.data_dir)

    def fr(self, role: str) -> frmod.FrModel:
        return frmod.FrModel.from_weights(ModelWeights.load(self.require(self.fr_path(role))))

    def threshold(self, role: str) -> frmod.DecisionThreshold:
        return frmod.DecisionThreshold.from_text(self.require(self.threshold_path(role)).read_text())

    def morpher(self) -> morph.MorphModel:
        return morph.MorphModel.from_weights(ModelWeights.load(self.require(self.morpher_path)))

    def roles_present(self) -> list[str]:
        return [r for r in ROLES if self.fr_path(r).exists()]


# -- morph set storage -----------------------------------------------------------


def save_pairs(path: Path, pairs: list[synth.MorphPair]) -> None:
    buf = io.StringIO()
    buf.write(PAIRS_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair_id", "identity_1", "identity_2", "enroll_1", "enroll_2", "probe_1", "probe_2", "angle"])
    for p in pairs:
        w.writerow([p.pair_id, p.identity_1, p.identity_2, p.enroll_1.record_id, p.enroll_2.record_id, p.probe_1.record_id, p.probe_2.record_id, repr(p.angle)])
    path.write_text(buf.getvalue())


def load_pairs(path: Path, dataset: synth.Dataset) -> list[synth.MorphPair]:
    lines = path.read_text().splitlines()
    if not lines or lines[0] != PAIRS_HEADER:
        raise FormatError(f"{path}: missing header {PAIRS_HEADER!r}")
    rec = {r.record_id: r for r in dataset.records}
    rows = list(csv.reader(lines[2:]))
    return [
        synth.MorphPair(int(r[0]), int(r[1]), int(r[2]), rec[int(r[3])], rec[int(r[4])], rec[int(r[5])], rec[int(r[6])], float(r[7]))
        for r in rows
    ]


def save_morphs(path: Path, results: list[morph.MorphResult]) -> None:
    """Exact float arrays of a morph set (images, latents, encoder maps)."""
    n = len(results)
    first = next((r for r in results if r.enc_map is not None), None)
    enc_shape = first.enc_map.shape if first is not None else (0,)
    d = results[0].z_star.shape[0] if results else 0
    arrays = {
        "format": np.array(MORPHS_FORMAT),
        "kind": np.array([r.kind for r in results], dtype="U32"),
        "enc_source": np.array([r.enc_source or "" for r in results], dtype="U8"),
        "pair_id": np.array([r.pair_id for r in results], dtype=np.int64),
        "z_star": np.stack([r.z_star for r in results]) if n else np.zeros((0, d)),
        "z_morph": np.stack([r.z_morph for r in results]) if n else np.zeros((0, d)),
        "latent_loss": np.array([r.latent_loss for r in results], dtype=np.float64),
        "pixel_loss": np.array([np.nan if r.pixel_loss is None else r.pixel_loss for r in results]),
        "has_image": np.array([r.image is not None for r in results]),
        "image": np.stack([r.image if r.image is not None else np.zeros((synth.IMAGE_SIZE,) * 2) for r in results]),
        "latent": np.stack([r.latent if r.latent is not None else np.full(d, np.nan) for r in results]),
        "enc_map": np.stack([r.enc_map if r.enc_map is not None else np.zeros(enc_shape) for r in results]),
        "target": np.stack([r.target if r.target is not None else np.zeros((synth.IMAGE_SIZE,) * 2) for r in results]),
    }
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_morphs(path: Path) -> list[morph.MorphResult]:
    with np.load(path) as z:
        if "format" not in z.files or str(z["format"]) != MORPHS_FORMAT:
            raise FormatError(f"{path}: expected {MORPHS_FORMAT!r}")
        a = {k: z[k] for k in z.files}
    out = []
    for i in range(len(a["kind"])):
        decoded = not np.isnan(a["latent"][i]).any()
        out.append(
            morph.MorphResult(
                kind=str(a["kind"][i]),
                z_star=a["z_star"][i],
                z_morph=a["z_morph"][i],
                latent_loss=float(a["latent_loss"][i]),
                image=a["image"][i] if a["has_image"][i] else None,
                pixel_loss=None if np.isnan(a["pixel_loss"][i]) else float(a["pixel_loss"][i]),
                enc_source=str(a["enc_source"][i]) or None,
                pair_id=int(a["pair_id"][i]),
                latent=a["latent"][i] if decoded else None,
                enc_map=a["enc_map"][i] if decoded else None,
                target=a["target"][i] if decoded else None,
            )
        )
    return out


def write_morph_dir(directory: Path, results: list[morph.MorphResult], scores: list[evaluate.MorphAttackScore]) -> None:
    """Morph arrays, one PGM per image and the sidecar CSV."""
    images = directory / "images"
    images.mkdir(parents=True, exist_ok=True)
    save_morphs(directory / "morphs.npz", results)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair_id", "kind", "enc_source", "image", "L_pixel", "L_latent", "theta1", "theta2"])
    for r, s in zip(results, scores):
        name = ""
        if r.image is not None:
            name = f"images/{r.kind}_{r.enc_source or 'na'}_{r.pair_id:03d}.pgm"
            synth.write_pgm(directory / name, r.image)
        pix = "" if r.pixel_loss is None else repr(r.pixel_loss)
        w.writerow([r.pair_id, r.kind, r.enc_source or "", name, pix, repr(r.latent_loss), repr(s.theta1), repr(s.theta2)])
    (directory / "morphs.csv").write_text(buf.getvalue())


# -- stages ----------------------------------------------------------------------


def _threshold_text(th: frmod.DecisionThreshold, run: Run) -> str:
    return th.to_text() + f"config_hash={run.config.hash}\nseed={run.config.seed}\n"


def stage_gen_data(run: Run, **_) -> None:
    c = run.config
    ds = synth.generate_dataset(c.n_identities, c.images_per_identity, c.train_identities / c.n_identities, c.stage_seed("data"))
    synth.save_dataset(ds, run.data_dir)


def stage_train_fr(run: Run, role: str = "white", **_) -> None:
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}")
    c = run.config
    train = run.dataset().split("train")
    model = frmod.train_fr(
        train,
        epochs=c.fr_epochs,
        seed=c.stage_seed(f"fr_{role}"),
        embedding_dim=c.embedding_dim,
        arch=role,
        batch_size=c.batch_size,
        lr=c.fr_lr,
        scale=c.fr_scale,
        margin=c.fr_margin,
    )
    w = model.weights()
    w.hyperparameters.update(run.meta())
    w.save(run.fr_path(role))


def stage_calibrate(run: Run, role: str | None = None, **_) -> None:
    """Calibrate the requested role, or every trained FR (white required)."""
    roles = [role] if role else (run.roles_present() or ["white"])
    val = run.dataset().split("validation")
    for r in roles:
        model = run.fr(r)
        sets = frmod.score_sets(model, val, seed=run.config.stage_seed("scores"), impostor_cap=run.config.impostor_cap)
        th = frmod.calibrate_threshold(sets["genuine"], sets["impostor"], calibration_set=f"validation:{run.config.hash}")
        run.threshold_path(r).write_text(_threshold_text(th, run))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "angle"])
        for kind in ("genuine", "impostor"):
            w.writerows((kind, repr(float(a))) for a in sets[kind])
        (run.out / f"scores_{r}.csv").write_text(buf.getvalue())
        log.info("calibrated %s: t=%.4f FMR=%.5f FNMR=%.4f", r, th.t, th.fmr_at_t, th.fnmr_at_t)


def stage_train_morpher(run: Run, **_) -> None:
    c = run.config
    fr_white = run.fr("white")
    train = run.dataset().split("train")
    m = morph.train_morpher(
        fr_white, train, epochs=c.morpher_epochs, batch_size=c.batch_size, seed=c.stage_seed("morpher"), lr=c.morpher_lr, gamma1=c.gamma1, gamma2=c.gamma2
    )
    w = m.weights()
    w.hyperparameters.update(run.meta())
    w.save(run.morpher_path)


def stage_morph(run: Run, **_) -> None:
    """Blend, decoder (both encoder sources) and theoretical morphs for the
    selected pairs."""
    fr_white = run.fr("white")
    m = run.morpher()
    val = run.dataset().split("validation")
    pairs = synth.select_morph_pairs(val, fr_white, run.config.pairs)
    directory = run.out / "morphs"
    directory.mkdir(parents=True, exist_ok=True)
    save_pairs(directory / "pairs.csv", pairs)
    x1 = np.stack([p.x1 for p in pairs])
    x2 = np.stack([p.x2 for p in pairs])
    ids = [p.pair_id for p in pairs]
    results = [morph.blend_baseline(fr_white, a, b, pair_id=i) for a, b, i in zip(x1, x2, ids)]
    for source in ("one", "two"):
        results += morph.generate_morphs(m, fr_white, x1, x2, source, ids)
    results += [morph.theoretical_worst_case(fr_white, a, b, pair_id=i) for a, b, i in zip(x1, x2, ids)]
    write_morph_dir(directory, results, evaluate.attack_scores(fr_white, results, pairs))


def stage_refine(run: Run, **_) -> None:
    fr_white = run.fr("white")
    m = run.morpher()
    morphs = load_morphs(run.require(run.out / "morphs" / "morphs.npz"))
    pairs = load_pairs(run.require(run.out / "morphs" / "pairs.csv"), run.dataset())
    approx = [r for r in morphs if r.kind == "worst_case_approx"]
    refined = morph.refine_latents(m, fr_white, approx, n_iters=run.config.iters, step=run.config.step)
    write_morph_dir(run.out / "refined", refined, evaluate.attack_scores(fr_white, refined, pairs))


def _morph_sets(run: Run) -> dict[str, list[morph.MorphResult]]:
    results = load_morphs(run.require(run.out / "morphs" / "morphs.npz"))
    results += load_morphs(run.require(run.out / "refined" / "morphs.npz"))
    sets: dict[str, list[morph.MorphResult]] = {k: [] for k in morph.KINDS}
    for r in results:
        sets[r.kind].append(r)
    return sets


def stage_evaluate(run: Run, **_) -> None:
    roles = run.roles_present() or ["white"]
    systems = {r: (run.fr(r), run.threshold(r)) for r in roles}
    val = run.dataset().split("validation")
    pairs = load_pairs(run.require(run.out / "morphs" / "pairs.csv"), val)
    reports = evaluate.cross_system_eval(
        _morph_sets(run), pairs, systems, val, seed=run.config.stage_seed("scores"), bins=run.config.bins, meta=run.meta()
    )
    (run.out / "eval").mkdir(exist_ok=True)
    for role, rep in reports.items():
        run.report_path(role).write_text(rep.to_json())
        (run.out / "eval" / f"scores_{role}.csv").write_text(rep.scores_csv())
        (run.out / "eval" / f"attacks_{role}.csv").write_text(rep.attacks_csv())


def stage_report(run: Run, **_) -> None:
    roles = [r for r in ROLES if run.report_path(r).exists()]
    if not roles:
        raise StageDependencyError(run.report_path("white"))
    (run.out / "report").mkdir(exist_ok=True)
    reports = {r: evaluate.VulnerabilityReport.from_dict(evaluate.read_report(run.report_path(r).read_text())) for r in roles}
    kinds = sorted({k for rep in reports.values() for k in rep.mmpmr_by_kind})
    lines = [SUMMARY_HEADER, f"# config_hash={run.config.hash} seed={run.config.seed}", "MMPMR (%) at each system's calibrated threshold", ""]
    lines.append("system".ljust(30) + "".join(k.rjust(24) for k in kinds))
    for role, rep in reports.items():
        cells = "".join(f"{rep.mmpmr_by_kind[k]:.1f}".rjust(24) if k in rep.mmpmr_by_kind else "-".rjust(24) for k in kinds)
        lines.append(f"{role} ({rep.fr_tag})".ljust(30) + cells)
        (run.out / "report" / f"histograms_{role}.svg").write_text(evaluate.render_svg(rep))
    run.summary_path.write_text("\n".join(lines) + "\n")


_STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "train-fr": stage_train_fr,
    "calibrate": stage_calibrate,
    "train-morpher": stage_train_morpher,
    "morph": stage_morph,
    "refine": stage_refine,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_stage(command: str, config: RunConfig, out: str | Path, role: str | None = None) -> Run:
    if command not in _STAGE_FUNCS:
        raise ValueError(f"unknown stage {command!r}; choose from {STAGES}")
    run = Run(out, config)
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "config.txt").write_text(config.to_text())
    start = time.perf_counter()
    kwargs = {"role": role} if role else {}
    _STAGE_FUNCS[command](run, **kwargs)
    log.info("%s finished in %.1f s", command, time.perf_counter() - start)
    return run


def run_all(config: RunConfig, out: str | Path, roles=ROLES) -> Run:
    """Every stage in order, training one FR per role."""
    run_stage("gen-data", config, out)
    for role in roles:
        run_stage("train-fr", config, out, role=role)
    for command in ("calibrate", "train-morpher", "morph", "refine", "evaluate", "report"):
        run = run_stage(command, config, out)
    return run
