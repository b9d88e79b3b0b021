"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime error or failed check.
Errors go to standard error with the config path and key when known.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import runner

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# Expected log-log decay slopes for the bundled mixtures.
SLOPE_BANDS = {"asymmetric": (2.7, 3.3), "symmetric": (3.7, 4.3)}
EXACT_TOL = 1e-10
CUMULANT_TOL = 1e-8
MC_TOL = 0.05
GRAD_TOL = 1e-4


class CheckFailed(RuntimeError):
    """A verification command ran but its check did not pass."""


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=1))


def _load(args) -> C.ExperimentConfig:
    return C.load_config(args.config, getattr(args, "override", None) or ())


def _methods(values) -> list[str] | None:
    if not values:
        return None
    out = []
    for v in values:
        out.extend(m.strip() for m in v.split(",") if m.strip())
    return out


def cmd_run(args) -> int:
    cfg = _load(args)
    log = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    res = runner.run_experiment(cfg, _methods(args.method), args.out, args.workers, log)
    print(f"wrote {res.n_records} records to {res.out_dir / runner.RECORDS}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    log = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    res = runner.sweep_experiment(cfg, args.grid, _methods(args.method), args.out, args.workers, log)
    print(f"{len(res.rows)} cells ({res.ran} run, {res.skipped} already done); "
          f"summary in {res.out_dir / 'sweep.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verification import MIXTURES, approx_error, cumulant_scaling_check, fit_decay_slope, \
        monte_carlo_cumulant_ratio

    cfg = _load(args)
    v = cfg.data["verify"]
    schedule = C.build_schedule(cfg)
    mix = MIXTURES[v["mixture"]]
    if args.check == "prop1":
        if len(mix.weights) == 1:
            errors = [approx_error(mix, schedule, t) for t in schedule.grid]
            worst = max(errors)
            _print_json({"check": "prop1", "mixture": mix.prompt_id, "schedule": schedule.kind,
                         "max_tv": worst, "tolerance": EXACT_TOL})
            if worst >= EXACT_TOL:
                raise CheckFailed(f"single-Gaussian TV {worst:.3e} is not below {EXACT_TOL}")
            return EXIT_OK
        fit = fit_decay_slope(mix, schedule, [float(a) for a in v["a_values"]])
        band = SLOPE_BANDS.get(mix.prompt_id)
        _print_json({"check": "prop1", "mixture": mix.prompt_id, "schedule": schedule.kind, "slope": fit.slope,
                     "residual": fit.residual, "a_values": list(fit.a_values), "tv": list(fit.errors),
                     "band": band})
        if band is not None and not (fit.slope is not None and band[0] <= fit.slope <= band[1]):
            raise CheckFailed(f"decay slope {fit.slope} outside {list(band)}")
        return EXIT_OK
    results = []
    ok = True
    t = float(v["t"])
    for k in v["orders"]:
        exact = cumulant_scaling_check(mix, schedule, t, k)
        entry = {"order": k, "t": t, "defined": exact.defined, "ratio": exact.ratio}
        if exact.defined:
            mc = monte_carlo_cumulant_ratio(mix, schedule, t, k, int(v["mc_samples"]),
                                            np.random.default_rng(int(v["mc_seed"])))
            entry["mc_ratio"] = mc
            ok &= abs(exact.ratio - 1.0) < CUMULANT_TOL and abs(mc - 1.0) < MC_TOL
        results.append(entry)
    _print_json({"check": "cumulants", "mixture": mix.prompt_id, "schedule": schedule.kind, "orders": results})
    if not ok:
        raise CheckFailed("cumulant ratios deviate from 1")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_composition, run_op_suite

    ops = run_op_suite(args.instances, args.seed)
    comp = check_composition(args.instances, args.seed)
    bad = sorted(name for name, err in ops.items() if not err < GRAD_TOL)
    if not comp.max_rel_error < GRAD_TOL:
        bad.append("composition")
    _print_json({"ops": ops, "composition": {"instances": comp.instances, "max_rel_error": comp.max_rel_error,
                                             "max_abs_error": comp.max_abs_error, "degenerate": comp.degenerate},
                 "tolerance": GRAD_TOL, "failed": bad})
    if bad:
        raise CheckFailed(f"gradient checks failed: {', '.join(bad)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .backend.learned import train_toy_backend
    from .io import save_weights

    cfg = _load(args)
    b = cfg.data["backend"]
    tr = b["train"]
    target = Path(args.out) if args.out else (cfg.resolve_path(b["weights"]) if b["weights"] else None)
    if target is None:
        raise cfg.fail("no weights path to write (set backend.weights or pass --out)", "backend.weights")
    schedule = C.build_schedule(cfg)
    prompts = C.load_prompts(cfg)
    lib_prompts = prompts if b["place_in_boxes"] else [p.without_boxes() for p in prompts]
    from .backend.scenes import NeglectModel, build_scene_dataset

    n_train, n_val = int(tr["n_scenes"]), int(tr["n_validation"])
    _, scenes = build_scene_dataset(int(b["vocab"]), tuple(b["shape"]), float(b["blob_sigma"]), lib_prompts,
                                    int(b["k"]), np.random.default_rng(int(b["library_seed"])),
                                    amplitude=float(b["amplitude"]), neglect=NeglectModel(**b["neglect"]),
                                    weight_concentration=b["weight_concentration"], n_scenes=n_train + n_val,
                                    attention_gain=float(b["attention_gain"]), margin=int(b["margin"]))
    lookup = {p.prompt_id: p for p in prompts}
    data = [(lookup[pid], z0) for pid, z0 in scenes]
    res = train_toy_backend(data[:n_train], schedule, int(tr["epochs"]), float(tr["lr"]), int(tr["batch"]),
                            int(tr["seed"]), vocab=int(b["vocab"]), width=int(tr["width"]), heads=int(tr["heads"]),
                            hidden=int(tr["hidden"]), uncond_rate=float(tr["uncond_rate"]),
                            validation=data[n_train:] or None)
    target.parent.mkdir(parents=True, exist_ok=True)
    save_weights(res.weights, target)
    _print_json({"weights": str(target), "params": res.weights.n_params(), "initial_loss": res.initial_loss,
                 "epoch_losses": res.losses, "val_loss": res.val_loss, "baseline": res.baseline})
    return EXIT_OK


def cmd_report(args) -> int:
    rows = runner.report(args.input, args.out)
    for r in rows:
        print(f"{r['run']}\t{r['method']}\t{r['entities']}\tn={r['n_images']}\ttiam={r['tiam']:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sagalab", description="Prompt-conditioned prior learning at desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def with_config(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config key set to a JSON value (repeatable)")

    p = sub.add_parser("run", help="generate records for every prompt and seed")
    with_config(p)
    p.add_argument("--method", action="append", help="method name(s), comma separated or repeated")
    p.add_argument("--out", help="output directory (default: output.dir)")
    p.add_argument("--workers", type=int, help="worker threads (capped by SAGA_LAB_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid of config variations")
    with_config(p)
    p.add_argument("--grid", action="append", default=[], metavar="NAME=VALUES",
                   help="e.g. momentum=0:0.9:0.1 or step-index=1:21 or lr=10,20")
    p.add_argument("--method", action="append")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="check the Gaussian approximation on 1-D mixtures")
    p.add_argument("check", choices=("prop1", "cumulants"))
    with_config(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference and complex-step gradient checks")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-backend", help="train the small learned denoiser")
    with_config(p)
    p.add_argument("--out", help="weights path (default: backend.weights)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="aggregate records into a CSV summary")
    p.add_argument("--in", dest="input", required=True, help="run or sweep directory")
    p.add_argument("--out", help="CSV path (default: <in>/summary.csv)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        where = f"{args.config}: " if getattr(args, "config", None) else ""
        print(f"error: {where}{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
