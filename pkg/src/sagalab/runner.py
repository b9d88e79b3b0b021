"""Experiment runner: runs, sweeps and CSV reports.

A run writes into its output directory:

- ``records.jsonl``: one JSON object per generated latent, in (method, prompt,
  seed, sample) order.  Byte-identical across reruns of the same config.
- ``metrics.csv``: per (method, prompt) scores.
- ``config.resolved.json``: the fully defaulted config.
- ``metadata.json``: timestamps, wall times and worker count.
- ``images/`` when ``output.images`` is set.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io as _io
import itertools
import json
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import config as C
from .io import atomic_write_text, emit_image
from .metrics import box_alignment, tiam_score
from .sampler import Pipeline, replace_method, resolve

THREADS_ENV = "SAGA_LAB_THREADS"
RECORDS = "records.jsonl"
RESOLVED = "config.resolved.json"
DONE = "done.json"

GRID_ALIASES = {
    "momentum": "optim.momentum",
    "lr": "optim.lr",
    "steps": "optim.steps",
    "batch": "optim.batch",
    "step-index": "method.step_index",
    "cutoff": "method.cutoff",
    "guidance-lr": "method.guidance_lr",
    "cfg": "method.cfg",
    "method": "method.method",
    "cov": "method.cov",
}


def worker_count(requested: int | None = None) -> int:
    """Requested count, capped by ``SAGA_LAB_THREADS`` when set."""
    n = requested or os.cpu_count() or 1
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise C.ConfigError(f"expected a positive integer, got {env!r}", THREADS_ENV) from None
        if cap < 1:
            raise C.ConfigError(f"expected a positive integer, got {env!r}", THREADS_ENV)
        n = min(n, cap)
    return max(1, n)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":")) + "\n"


class RecordSink:
    """Append-only JSON-lines file; each record lands in a single flushed write."""

    def __init__(self, path, truncate: bool = True):
        self.path = Path(path)
        self._fh = open(self.path, "w" if truncate else "a", encoding="utf-8")

    def append(self, record: dict) -> None:
        self._fh.write(_dump_line(record))
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{n}: bad record ({exc.msg})") from None
    return out


def record_latent(rec: dict) -> np.ndarray:
    return np.array(rec["z0"], dtype=np.float64).reshape(rec["shape"])


# -- summaries ------------------------------------------------------------------------


SUMMARY_FIELDS = ("n_images", "tiam", "box_alignment", "final_loss", "max_std_excess", "solver_calls")


def summarize(records: list[dict], prompts: dict, library) -> dict:
    """Scores for a set of records.

    ``max_std_excess`` is the largest ``std(mu) - sigma_ref`` seen at any
    optimizer step; blank for methods without a learned prior.
    """
    items = [(prompts[r["prompt"]], record_latent(r)) for r in records]
    row = {"n_images": len(items), "tiam": tiam_score(items, library)}
    boxed = all(p.boxes is not None for p, _ in items)
    row["box_alignment"] = box_alignment(items, library) if boxed else ""
    priors = [r["prior"] for r in records if r.get("prior")]
    finals = [p["losses"][-1] for p in priors if p["losses"]]
    row["final_loss"] = float(np.mean(finals)) if finals else ""
    excess = [max(p["mu_std_trace"]) - p["sigma_ref"] for p in priors if p["mu_std_trace"]]
    row["max_std_excess"] = float(max(excess)) if excess else ""
    row["solver_calls"] = float(np.mean([r["solver_calls"] for r in records]))
    return row


def write_csv(path, fields, rows) -> None:
    buf = _io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


# -- run ------------------------------------------------------------------------------


@dataclass
class RunResult:
    out_dir: Path
    n_records: int
    metrics: list[dict]
    wall_time: float


def _resolved_payload(cfg: C.ExperimentConfig) -> dict:
    return {"base_dir": str(cfg.base_dir.resolve()), "config": cfg.data}


def load_resolved(run_dir) -> C.ExperimentConfig:
    path = Path(run_dir) / RESOLVED
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise C.ConfigError(f"cannot read resolved config ({exc.strerror})", "", path) from None
    return C.build_config(payload["config"], payload["base_dir"], path)


def run_experiment(cfg: C.ExperimentConfig, methods=None, out_dir=None, workers: int | None = None,
                   log=None) -> RunResult:
    """Generate every (method, prompt, seed) cell of ``cfg`` and write the run directory.

    Args:
        cfg: Parsed config.
        methods: Method names to run instead of ``method.method``.
        out_dir: Output directory; defaults to ``output.dir``.
        workers: Worker threads before the ``SAGA_LAB_THREADS`` cap.
        log: Optional callable receiving progress lines.
    """
    started = time.perf_counter()
    started_at = _now()
    schedule = C.build_schedule(cfg)
    prompts = C.load_prompts(cfg)
    base = C.pipeline_config(cfg)
    methods = list(methods) if methods else [base.method]
    pcfgs = []
    for m in methods:
        try:
            pc = replace_method(base, m)
            resolve(pc, schedule)
        except ValueError as exc:
            raise cfg.fail(str(exc), "method") from None
        pcfgs.append(pc)
    backend = C.build_backend(cfg, schedule, prompts)
    library = backend.library if hasattr(backend, "library") else C.build_library(cfg, prompts)
    optim = C.optim_config(cfg)
    seeds = C.seeds_of(cfg)
    n_workers = worker_count(workers)

    out = Path(out_dir) if out_dir is not None else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / RESOLVED, json.dumps(_resolved_payload(cfg), indent=1, sort_keys=True))
    images = bool(cfg.data["output"]["images"])
    if images:
        (out / "images").mkdir(exist_ok=True)

    cells = [(pc, p, s) for pc in pcfgs for p in prompts for s in seeds]

    def work(cell):
        pc, p, s = cell
        return Pipeline(schedule, backend, optim).generate(p, pc, s)

    by_group: dict[tuple[str, str], list[dict]] = {}
    timings = []
    n_records = 0
    with RecordSink(out / RECORDS) as sink:
        if n_workers == 1:
            results = map(work, cells)
            pool = None
        else:
            pool = ThreadPoolExecutor(max_workers=n_workers)
            results = pool.map(work, cells)
        try:
            for (pc, p, s), recs in zip(cells, results):
                for r in recs:
                    d = r.to_dict()
                    d["entities"] = list(p.entities)
                    sink.append(d)
                    n_records += 1
                    by_group.setdefault((pc.method, p.prompt_id), []).append(d)
                    timings.append({"method": pc.method, "prompt": p.prompt_id, "seed": s, "sample": r.sample,
                                    "wall_time": r.wall_time})
                    if images:
                        sigma = r.prior["sigma_ref"] if r.prior else float(np.std(r.z0)) or 1.0
                        emit_image(r.z0, out / "images" / f"{pc.method}_{p.prompt_id}_s{s}_{r.sample}.ppm", sigma)
                if log:
                    log(f"{pc.method} {p.prompt_id} seed {s}: {len(recs)} record(s)")
        finally:
            if pool is not None:
                pool.shutdown(cancel_futures=True)

    lookup = {p.prompt_id: p for p in prompts}
    rows = []
    for pc in pcfgs:
        for p in prompts:
            row = {"method": pc.method, "prompt": p.prompt_id, "entities": len(p.entities)}
            row.update(summarize(by_group[(pc.method, p.prompt_id)], lookup, library))
            rows.append(row)
    write_csv(out / "metrics.csv", ("method", "prompt", "entities") + SUMMARY_FIELDS, rows)
    wall = time.perf_counter() - started
    meta = {"started": started_at, "finished": _now(), "wall_time": wall, "workers": n_workers,
            "config_digest": cfg.digest(), "config_source": cfg.source, "python": platform.python_version(),
            "numpy": np.__version__, "cells": timings}
    atomic_write_text(out / "metadata.json", json.dumps(meta, indent=1))
    return RunResult(out, n_records, rows, wall)


# -- sweep ----------------------------------------------------------------------------


def _number(text: str):
    v = C.parse_value(text)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"{text!r} is not a number")
    return v


def parse_grid(spec: str) -> tuple[str, str, list]:
    """Parse ``name=values`` into ``(name, dotted key, values)``.

    Values are ``start:stop`` (integers, inclusive), ``start:stop:step``
    (inclusive when ``stop`` lies on the lattice) or a comma list.
    """
    if "=" not in spec:
        raise ValueError(f"grid {spec!r} is not of the form name=values")
    name, text = (s.strip() for s in spec.split("=", 1))
    key = GRID_ALIASES.get(name, name)
    if not text:
        raise ValueError(f"grid {name!r} has no values")
    if ":" in text:
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"bad range {text!r}")
        start, stop = _number(parts[0]), _number(parts[1])
        step = _number(parts[2]) if len(parts) == 3 else 1
        if step <= 0:
            raise ValueError(f"range step must be positive in {text!r}")
        if stop < start:
            raise ValueError(f"empty range {text!r}")
        n = int(np.floor((stop - start) / step + 1e-9))
        ints = all(isinstance(v, int) for v in (start, stop, step))
        values = [start + i * step if ints else round(start + i * step, 12) for i in range(n + 1)]
    else:
        values = [C.parse_value(v.strip()) for v in text.split(",")]
    if len(set(map(json.dumps, values))) != len(values):
        raise ValueError(f"grid {name!r} repeats values")
    return name, key, values


@dataclass
class SweepResult:
    out_dir: Path
    rows: list[dict]
    ran: int
    skipped: int


def cell_config(cfg: C.ExperimentConfig, assignments: dict) -> C.ExperimentConfig:
    overrides = [f"{k}={json.dumps(v)}" for k, v in assignments.items()]
    return C.build_config(copy.deepcopy(cfg.data), cfg.base_dir, cfg.source, overrides)


def cell_hash(cfg: C.ExperimentConfig, methods) -> str:
    data = {k: v for k, v in cfg.data.items() if k != "output"}
    data["_methods"] = list(methods) if methods else None
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def sweep_experiment(cfg: C.ExperimentConfig, grids: list[str], methods=None, out_dir=None,
                     workers: int | None = None, log=None) -> SweepResult:
    """Run the Cartesian product of ``grids``; cells already marked done are skipped."""
    if not grids:
        raise C.ConfigError("sweep needs at least one --grid", "grid", cfg.source)
    axes = []
    for g in grids:
        try:
            axes.append(parse_grid(g))
        except ValueError as exc:
            raise C.ConfigError(str(exc), "grid", cfg.source) from None
    names = [a[0] for a in axes]
    if len(set(names)) != len(names):
        raise C.ConfigError("grid names must be distinct", "grid", cfg.source)
    # Validate every cell before running any of them.
    cells = []
    for combo in itertools.product(*[a[2] for a in axes]):
        assign = {a[1]: v for a, v in zip(axes, combo)}
        ccfg = cell_config(cfg, assign)
        cells.append((dict(zip(names, combo)), ccfg, cell_hash(ccfg, methods)))
        schedule = C.build_schedule(ccfg)
        base = C.pipeline_config(ccfg)
        for m in methods or [base.method]:
            try:
                resolve(replace_method(base, m), schedule)
            except ValueError as exc:
                raise ccfg.fail(f"cell {dict(zip(names, combo))}: {exc}", "method") from None
    out = Path(out_dir) if out_dir is not None else cfg.output_dir
    (out / "cells").mkdir(parents=True, exist_ok=True)
    rows, ran, skipped = [], 0, 0
    for i, (params, ccfg, h) in enumerate(cells):
        cdir = out / "cells" / h
        done = cdir / DONE
        if done.is_file():
            row = json.loads(done.read_text(encoding="utf-8"))
            skipped += 1
        else:
            res = run_experiment(ccfg, methods, cdir, workers)
            recs = read_records(cdir / RECORDS)
            prompts = {p.prompt_id: p for p in C.load_prompts(ccfg)}
            library = C.build_library(ccfg, list(prompts.values()))
            row = {"cell": i, "hash": h, **params, "n_records": res.n_records}
            row.update(summarize(recs, prompts, library))
            atomic_write_text(done, json.dumps(row))
            ran += 1
        rows.append(row)
        if log:
            log(f"cell {i + 1}/{len(cells)} {params}: tiam {row['tiam']}")
    fields = ["cell", "hash"] + names + ["n_records"] + list(SUMMARY_FIELDS)
    write_csv(out / "sweep.csv", fields, rows)
    return SweepResult(out, rows, ran, skipped)


# -- report ---------------------------------------------------------------------------


REPORT_FIELDS = ("run", "method", "entities") + SUMMARY_FIELDS


def report(in_dir, out_path=None) -> list[dict]:
    """Aggregate every run under ``in_dir`` into rows keyed by run, method and entity count."""
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise FileNotFoundError(f"no such directory: {in_dir}")
    paths = sorted(in_dir.rglob(RECORDS))
    if not paths:
        raise FileNotFoundError(f"no {RECORDS} found under {in_dir}")
    rows = []
    for path in paths:
        run_dir = path.parent
        cfg = load_resolved(run_dir)
        prompts = {p.prompt_id: p for p in C.load_prompts(cfg)}
        library = C.build_library(cfg, list(prompts.values()))
        groups: dict[tuple[str, int], list[dict]] = {}
        for rec in read_records(path):
            if rec["prompt"] not in prompts:
                raise ValueError(f"{path}: record for unknown prompt {rec['prompt']!r}")
            key = (rec["method"], len(prompts[rec["prompt"]].entities))
            groups.setdefault(key, []).append(rec)
        label = str(run_dir.relative_to(in_dir)) if run_dir != in_dir else "."
        for (method, ents) in sorted(groups):
            rows.append({"run": label, "method": method, "entities": ents,
                         **summarize(groups[(method, ents)], prompts, library)})
    write_csv(Path(out_path) if out_path else in_dir / "summary.csv", REPORT_FIELDS, rows)
    return rows
