import json
import os
import time
from pathlib import Path

import pytest

from wcmorph import pipeline
from wcmorph.config import RunConfig

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def record_criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        _CRITERIA[number] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def _run_default(out: Path) -> tuple[pipeline.Run, dict]:
    """Every stage of the default configuration, timing each one.

    With ``WCMORPH_ACCEPTANCE_DIR`` set, a finished run in that directory
    with the same config hash is reused together with its recorded timings.
    """
    config = RunConfig()
    times_path = out / "stage_times.json"
    if times_path.exists():
        saved = json.loads(times_path.read_text())
        if saved.get("config_hash") == config.hash:
            return pipeline.Run(out, config), saved["seconds"]
    seconds = {}
    steps = [("gen-data", None), ("train-fr", "white"), ("train-fr", "black")]
    steps += [(s, None) for s in ("calibrate", "train-morpher", "morph", "refine", "evaluate", "report")]
    for command, role in steps:
        start = time.perf_counter()
        run = pipeline.run_stage(command, config, out, role=role)
        seconds[command + (f":{role}" if role else "")] = time.perf_counter() - start
    times_path.write_text(json.dumps({"config_hash": config.hash, "seconds": seconds}, indent=1))
    return run, seconds


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The seeded default run shared by the acceptance criteria."""
    cached = os.environ.get("WCMORPH_ACCEPTANCE_DIR")
    out = Path(cached) if cached else tmp_path_factory.mktemp("default_run")
    out.mkdir(parents=True, exist_ok=True)
    return _run_default(out)
