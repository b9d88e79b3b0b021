"""Strict JSON experiment configuration.

A config file is a JSON object with ``"schema": 1`` and the blocks
``schedule``, ``backend``, ``method``, ``optim``, ``prompts``, ``seeds`` and
``output``.  Every block is optional and falls back to the defaults below;
any key not present in the defaults is rejected before work starts.
Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backend.analytic import AnalyticBackend
from .backend.scenes import NeglectModel, PromptSpec, build_scene_dataset, make_prompts
from .optim import CovSpec, OptimConfig
from .sampler import PipelineConfig
from .schedule import Schedule, make_schedule

SCHEMA = 1

DEFAULTS = {
    "schema": SCHEMA,
    "schedule": {"kind": "vp-diffusion", "t_max": 1000, "grid": None, "beta_start": 1e-4, "beta_end": 0.02},
    "backend": {
        "kind": "analytic",
        "vocab": 8,
        "shape": [4, 16, 16],
        "blob_sigma": 1.5,
        "k": 8,
        "amplitude": 1.0,
        "attention_gain": 0.1,
        "neglect": {"rate": 0.5, "mode": "mix", "faint_amplitude": 0.2, "mix_weight": 0.8},
        "weight_concentration": None,
        "margin": 1,
        "place_in_boxes": True,
        "library_seed": 0,
        "weights": None,
        "train": {"epochs": 5, "lr": 3e-3, "batch": 10, "seed": 0, "n_scenes": 400, "n_validation": 50,
                  "width": 16, "heads": 2, "hidden": 32, "uncond_rate": 0.1},
    },
    "method": {"method": "saga", "step_index": None, "cutoff": None, "guidance_lr": 20.0, "cfg": 1.0,
               "n_samples": 1, "cov": "fixed", "cov_shared": True},
    "optim": {"steps": 50, "lr": 20.0, "momentum": 0.4, "batch": 10, "rescale": True, "cov_lr": None},
    "prompts": {"generate": {"n": 8, "entities": 2, "seed": 1, "boxes": False, "box_side": None}},
    "seeds": [0],
    "output": {"dir": "runs/default", "images": False},
    "verify": {"mixture": "asymmetric", "a_values": [0.2, 0.1, 0.05, 0.025], "t": 200.0, "orders": [3, 4],
               "mc_samples": 1000000, "mc_seed": 0},
}

# Blocks whose value is free-form rather than a fixed key set.
_OPEN = {("schedule", "grid"), ("prompts",), ("seeds",), ("backend", "shape"), ("backend", "weights"),
         ("backend", "weight_concentration"), ("verify", "a_values"), ("verify", "orders")}


class ConfigError(ValueError):
    """Invalid configuration; carries the file and the offending key."""

    def __init__(self, message: str, key: str = "", path=None):
        self.key = key
        self.path = None if path is None else str(path)
        where = ": ".join(p for p in (self.path, key) if p)
        super().__init__(f"{where}: {message}" if where else message)


def _merge(defaults, user, trail: tuple[str, ...], path):
    if trail in _OPEN or not isinstance(defaults, dict):
        return copy.deepcopy(user)
    if not isinstance(user, dict):
        raise ConfigError("expected an object", ".".join(trail), path)
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if key not in defaults:
            known = ", ".join(sorted(defaults))
            raise ConfigError(f"unknown key (expected one of: {known})", ".".join(trail + (key,)), path)
        out[key] = _merge(defaults[key], value, trail + (key,), path)
    return out


def parse_value(text: str):
    """JSON value if ``text`` parses as JSON, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str, path=None) -> None:
    """Apply ``dotted.key=value`` to the raw config dict in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value", "", path)
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}", key, path)
    node = raw
    for i, part in enumerate(parts[:-1]):
        child = node.get(part)
        if child is None:
            child = {}
            node[part] = child
        if not isinstance(child, dict):
            raise ConfigError("cannot descend into a non-object value", ".".join(parts[:i + 1]), path)
        node = child
    node[parts[-1]] = parse_value(text)


@dataclass
class ExperimentConfig:
    data: dict
    base_dir: Path
    source: str | None = None

    def __getitem__(self, key):
        return self.data[key]

    def resolve_path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def output_dir(self) -> Path:
        return self.resolve_path(self.data["output"]["dir"])

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def fail(self, message: str, key: str) -> ConfigError:
        return ConfigError(message, key, self.source)


def build_config(raw: dict, base_dir=".", source=None, overrides=()) -> ExperimentConfig:
    """Merge ``raw`` over the defaults, apply overrides and validate."""
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object", "", source)
    raw = copy.deepcopy(raw)
    for item in overrides:
        apply_override(raw, item, source)
    if raw.get("schema", SCHEMA) != SCHEMA:
        raise ConfigError(f"unsupported schema {raw.get('schema')!r} (expected {SCHEMA})", "schema", source)
    data = _merge(DEFAULTS, raw, (), source)
    cfg = ExperimentConfig(data, Path(base_dir), None if source is None else str(source))
    validate(cfg)
    return cfg


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config ({exc.strerror})", "", path) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", "", path) from None
    return build_config(raw, path.parent, path, overrides)


def validate(cfg: ExperimentConfig) -> None:
    """Type and range checks that do not need any heavy construction."""
    d = cfg.data
    try:
        build_schedule(cfg)
    except (TypeError, ValueError) as exc:
        raise cfg.fail(str(exc), "schedule") from None
    b = d["backend"]
    if b["kind"] not in ("analytic", "learned"):
        raise cfg.fail(f"unknown backend kind {b['kind']!r}", "backend.kind")
    shape = b["shape"]
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(v, int) and v > 0 for v in shape)):
        raise cfg.fail("shape must be three positive integers [C, H, W]", "backend.shape")
    for key in ("vocab", "k", "margin", "library_seed"):
        if not isinstance(b[key], int) or isinstance(b[key], bool):
            raise cfg.fail("expected an integer", f"backend.{key}")
    try:
        NeglectModel(**b["neglect"])
    except (TypeError, ValueError) as exc:
        raise cfg.fail(str(exc), "backend.neglect") from None
    if b["kind"] == "learned":
        if not b["weights"]:
            raise cfg.fail("learned backend needs a weights path", "backend.weights")
    try:
        pipeline_config(cfg)
    except (TypeError, ValueError) as exc:
        raise cfg.fail(str(exc), "method") from None
    try:
        optim_config(cfg)
    except (TypeError, ValueError) as exc:
        raise cfg.fail(str(exc), "optim") from None
    seeds_of(cfg)
    out = d["output"]
    if not isinstance(out["dir"], str) or not out["dir"]:
        raise cfg.fail("output directory must be a nonempty string", "output.dir")
    _prompt_source(cfg)
    _validate_verify(cfg)


def _validate_verify(cfg: ExperimentConfig) -> None:
    from .verification import MIXTURES

    v = cfg.data["verify"]
    if v["mixture"] not in MIXTURES:
        raise cfg.fail(f"unknown mixture {v['mixture']!r}; expected one of {sorted(MIXTURES)}", "verify.mixture")
    a = v["a_values"]
    if not (isinstance(a, list) and len(a) >= 4 and all(isinstance(x, (int, float)) and 0 < x < 1 for x in a)):
        raise cfg.fail("need at least four a values in (0, 1)", "verify.a_values")
    if not (isinstance(v["orders"], list) and v["orders"] and all(k in (3, 4) for k in v["orders"])):
        raise cfg.fail("orders must be a nonempty list drawn from 3 and 4", "verify.orders")
    if not isinstance(v["mc_samples"], int) or v["mc_samples"] < 10:
        raise cfg.fail("need at least 10 Monte Carlo samples", "verify.mc_samples")


def build_schedule(cfg: ExperimentConfig) -> Schedule:
    s = cfg.data["schedule"]
    return make_schedule(s["kind"], int(s["t_max"]), s["grid"], float(s["beta_start"]), float(s["beta_end"]))


def pipeline_config(cfg: ExperimentConfig) -> PipelineConfig:
    m = cfg.data["method"]
    return PipelineConfig(m["method"], m["step_index"], m["cutoff"], float(m["guidance_lr"]), float(m["cfg"]),
                          int(m["n_samples"]), CovSpec.parse(str(m["cov"]), bool(m["cov_shared"])))


def optim_config(cfg: ExperimentConfig) -> OptimConfig:
    o = cfg.data["optim"]
    return OptimConfig(int(o["steps"]), float(o["lr"]), float(o["momentum"]), int(o["batch"]), bool(o["rescale"]),
                       None if o["cov_lr"] is None else float(o["cov_lr"]))


def seeds_of(cfg: ExperimentConfig) -> list[int]:
    seeds = cfg.data["seeds"]
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        if seeds < 1:
            raise cfg.fail("seed count must be positive", "seeds")
        return list(range(seeds))
    if isinstance(seeds, list) and seeds and all(isinstance(s, int) and not isinstance(s, bool) and s >= 0
                                                 for s in seeds):
        if len(set(seeds)) != len(seeds):
            raise cfg.fail("seeds must be distinct", "seeds")
        return list(seeds)
    raise cfg.fail("seeds must be a positive count or a nonempty list of nonnegative integers", "seeds")


_GENERATE_KEYS = {"n", "entities", "seed", "boxes", "box_side", "prefix"}


def _prompt_source(cfg: ExperimentConfig):
    p = cfg.data["prompts"]
    if isinstance(p, list):
        return "inline", p
    if isinstance(p, dict) and len(p) == 1 and "path" in p:
        path = cfg.resolve_path(p["path"])
        if not path.is_file():
            raise cfg.fail(f"prompt file {path} does not exist", "prompts.path")
        return "path", path
    if isinstance(p, dict) and len(p) == 1 and "generate" in p:
        g = p["generate"]
        if not isinstance(g, dict):
            raise cfg.fail("expected an object", "prompts.generate")
        unknown = set(g) - _GENERATE_KEYS
        if unknown:
            raise cfg.fail(f"unknown key(s) {sorted(unknown)}", "prompts.generate")
        return "generate", g
    raise cfg.fail("prompts must be a list, {\"path\": ...} or {\"generate\": {...}}", "prompts")


def load_prompts(cfg: ExperimentConfig) -> list[PromptSpec]:
    kind, src = _prompt_source(cfg)
    try:
        if kind == "generate":
            g = {"n": 8, "entities": 2, "seed": 1, "boxes": False, "box_side": None, "prefix": "p"} | src
            shape = cfg.data["backend"]["shape"]
            return make_prompts(int(g["n"]), int(g["entities"]), int(cfg.data["backend"]["vocab"]),
                                np.random.default_rng(int(g["seed"])), hw=(shape[1], shape[2]),
                                boxes=bool(g["boxes"]), prefix=str(g["prefix"]), box_side=g["box_side"])
        items = src if kind == "inline" else json.loads(Path(src).read_text(encoding="utf-8"))
        if not isinstance(items, list) or not items:
            raise ValueError("expected a nonempty list of prompts")
        prompts = [PromptSpec.from_dict(x) for x in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise cfg.fail(f"bad prompt list: {exc}", "prompts") from None
    ids = [p.prompt_id for p in prompts]
    if len(set(ids)) != len(ids):
        raise cfg.fail("prompt ids must be unique", "prompts")
    return prompts


def build_library(cfg: ExperimentConfig, prompts: list[PromptSpec]):
    b = cfg.data["backend"]
    lib_prompts = prompts if b["place_in_boxes"] else [p.without_boxes() for p in prompts]
    try:
        lib, _ = build_scene_dataset(int(b["vocab"]), tuple(b["shape"]), float(b["blob_sigma"]), lib_prompts,
                                     int(b["k"]), np.random.default_rng(int(b["library_seed"])),
                                     amplitude=float(b["amplitude"]), neglect=NeglectModel(**b["neglect"]),
                                     weight_concentration=b["weight_concentration"],
                                     attention_gain=float(b["attention_gain"]), margin=int(b["margin"]))
    except ValueError as exc:
        raise cfg.fail(str(exc), "backend") from None
    # Criteria and metrics look prompts up by id, so keep the boxed prompt objects.
    for p in prompts:
        lib.entries[p.prompt_id].prompt = p
    return lib


def build_backend(cfg: ExperimentConfig, schedule: Schedule, prompts: list[PromptSpec]):
    """Analytic backend over the config's library, or a learned backend from its weights file."""
    b = cfg.data["backend"]
    if b["kind"] == "analytic":
        return AnalyticBackend(build_library(cfg, prompts), schedule)
    from .backend.learned import LearnedBackend
    from .io import FormatError, load_weights

    path = cfg.resolve_path(b["weights"])
    if not path.is_file():
        raise cfg.fail(f"weights file {path} does not exist", "backend.weights")
    try:
        weights = load_weights(path)
    except FormatError as exc:
        raise cfg.fail(str(exc), "backend.weights") from None
    if weights.schedule_kind != schedule.kind:
        raise cfg.fail(f"weights were trained for {weights.schedule_kind}, config uses {schedule.kind}",
                       "backend.weights")
    for p in prompts:
        bad = [e for e in p.entities if e >= weights.vocab]
        if bad:
            raise cfg.fail(f"prompt {p.prompt_id} uses entities {bad} outside the trained vocabulary",
                           "prompts")
    return LearnedBackend(weights, schedule)
