"""Command-line entry point.

One executable, six subcommands: ``mask`` (inspect a frame mask),
``forward`` (seeded forward pass), ``gradcheck`` (analytic vs numerical
gradients), ``converge`` (frame-count error sweep against the integral
reference), ``consistency`` (cross-count output gaps plus the triangle
bound), and ``ordertask`` (mask ablation on the synthetic order probe).

Every run is driven by one JSON config document (flags override leaf
keys, unknown keys are rejected) and is deterministic given config and
seed: data files are byte-identical across repeated runs. Timestamps
live only in ``meta.json``. The output directory resolves in the order
CCAM_OUT environment variable, ``--out``, config ``output_dir``, then
``ccam_out/<subcommand>``.

Exit codes: 0 success, 2 bad config or arguments, 3 numeric failure
(non-finite results), 4 I/O failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .consistency import convergence_run, cross_count_consistency, make_signal
from .gradcheck import (
    TrainingDivergedError,
    backward,
    finite_diff,
    make_order_dataset,
    train_order_probe,
)
from .masks import MaskRule, build_ccam_continuous, build_ccam_floor, build_full
from .projector import (
    PRNG_NAME,
    FrameEmbeddings,
    ProjectorConfig,
    forward_video,
    init_params,
)

__all__ = ["ConfigError", "NumericError", "ExperimentConfig", "load_config", "run", "main"]


class ConfigError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


_SCHEMA: dict = {
    "projector": {
        "n_queries": 1024,
        "model_dim": 32,
        "input_dim": 16,
        "n_heads": 8,
        "ffn_expansion": 4,
        "mask_rule": "ccam-floor",
        "use_tpe": False,
        "seed": 0,
    },
    "signal": {"tokens": 2, "channels": 16, "duration": 1.0, "max_harmonics": 7, "seed": 0},
    "forward": {"frames": 8, "tokens": 4, "seed": 0},
    "gradcheck": {
        "n_queries": 4,
        "frames": 3,
        "tokens": 2,
        "model_dim": 8,
        "input_dim": 5,
        "n_heads": 2,
        "seeds": 2,
        "step": 1e-5,
        "tolerance": 1e-4,
    },
    "ordertask": {
        "n_queries": 16,
        "model_dim": 16,
        "input_dim": 8,
        "n_heads": 4,
        "ffn_expansion": 4,
        "use_tpe": False,
        "seed": 0,
    },
    "dataset": {
        "n_examples": 2000,
        "frames": 8,
        "tokens": 1,
        "channels": 8,
        "sigma": 0.1,
        "seed": 0,
    },
    "training": {"epochs": 200, "lr": 0.05, "momentum": 0.9},
    "frame_counts": [8, 16, 32, 64, 128],
    "grid_points": 8192,
    "seed": None,
    "output_dir": None,
}

# Leaves whose default is None still carry a fixed type.
_NONE_LEAF_TYPES = {"seed": int, "output_dir": str}


def _check_leaf(key: str, value, default):
    if default is None:
        expected = _NONE_LEAF_TYPES[key.rsplit(".", 1)[-1]]
        if value is not None and not isinstance(value, expected):
            raise ConfigError(f"key '{key}' must be {expected.__name__} or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"key '{key}' must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key '{key}' must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{key}' must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"key '{key}' must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"key '{key}' must be a list of integers")
        return list(value)
    raise ConfigError(f"key '{key}' has unsupported type")


def _resolve(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a JSON object")
    resolved = copy.deepcopy(_SCHEMA)
    for key, value in raw.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key '{key}'")
        default = _SCHEMA[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"key '{key}' must be an object")
            for sub, sub_value in value.items():
                if sub not in default:
                    raise ConfigError(f"unknown key '{key}.{sub}'")
                resolved[key][sub] = _check_leaf(f"{key}.{sub}", sub_value, default[sub])
        else:
            resolved[key] = _check_leaf(key, value, default)
    rule = resolved["projector"]["mask_rule"]
    if rule not in [r.value for r in MaskRule]:
        raise ConfigError(f"key 'projector.mask_rule' must be one of {[r.value for r in MaskRule]}")
    return resolved


class ExperimentConfig:
    """Resolved run configuration with a reproducible content digest."""

    def __init__(self, values: dict):
        self.values = _resolve(values)

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values

    def __getitem__(self, key):
        return self.values[key]

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        canonical = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error at line {exc.lineno}: {exc.msg}") from exc
    return ExperimentConfig(raw)


# --- output helpers ---------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header, rows, digest: str, seed: int) -> None:
    lines = [f"# config_digest={digest} seed={seed}", ",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n")


def _write_reports(outdir: Path, subcommand: str, digest: str, seed: int, payload: dict,
                   started_at: str, duration_s: float) -> None:
    _write_json(outdir / "report.json", {
        "tool_version": __version__,
        "config_digest": digest,
        "seed": seed,
        "prng": PRNG_NAME,
        "subcommand": subcommand,
        "payload": payload,
    })
    _write_json(outdir / "meta.json", {
        "config_digest": digest,
        "seed": seed,
        "started_at": started_at,
        "duration_s": duration_s,
    })


def _ensure_finite(arr, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


def _resolve_outdir(args, cfg: ExperimentConfig, subcommand: str, required: bool) -> Path | None:
    env = os.environ.get("CCAM_OUT")
    if env:
        return Path(env)
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg["output_dir"]:
        return Path(cfg["output_dir"])
    return Path("ccam_out") / subcommand if required else None


def _master_seed(args, cfg: ExperimentConfig):
    if getattr(args, "seed", None) is not None:
        return args.seed
    return cfg["seed"]


def _section_seed(args, cfg: ExperimentConfig, section: str) -> int:
    master = _master_seed(args, cfg)
    return master if master is not None else cfg[section]["seed"]


def _projector_config(cfg: ExperimentConfig, section: str, seed: int, *,
                      mask_rule=None, use_tpe=None, input_dim=None) -> ProjectorConfig:
    sec = cfg[section]
    try:
        return ProjectorConfig(
            model_dim=sec["model_dim"],
            input_dim=sec["input_dim"] if input_dim is None else input_dim,
            n_queries=sec["n_queries"],
            n_heads=sec["n_heads"],
            ffn_expansion=sec.get("ffn_expansion", 4),
            mask_rule=mask_rule if mask_rule is not None else sec.get("mask_rule", "ccam-floor"),
            use_tpe=sec["use_tpe"] if use_tpe is None else use_tpe,
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _build_mask(rule: str, n_queries: int, n_frames: int):
    rule = MaskRule(rule)
    if rule == MaskRule.FULL:
        return build_full(n_queries, n_frames)
    if rule == MaskRule.CCAM_FLOOR:
        return build_ccam_floor(n_queries, n_frames)
    return build_ccam_continuous(n_queries, n_frames)


# --- subcommands ------------------------------------------------------------


def _cmd_mask(args, cfg: ExperimentConfig) -> int:
    started_at = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    queries = args.queries if args.queries is not None else cfg["projector"]["n_queries"]
    frames = args.frames if args.frames is not None else cfg["forward"]["frames"]
    rule = args.rule if args.rule is not None else cfg["projector"]["mask_rule"]
    mask = _build_mask(rule, queries, frames)

    for row in mask.bits:
        print(" ".join("1" if v else "0" for v in row))

    outdir = _resolve_outdir(args, cfg, "mask", required=False)
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
        digest = cfg.digest()
        seed = _master_seed(args, cfg) or 0
        header = ["query"] + [f"frame_{j}" for j in range(mask.n_frames)]
        rows = [[i, *map(int, mask.bits[i])] for i in range(mask.n_queries)]
        _write_csv(outdir / "mask.csv", header, rows, digest, seed)
        payload = {
            "rule": mask.rule.value,
            "n_queries": mask.n_queries,
            "n_frames": mask.n_frames,
            "visible_per_query": [int(v) for v in mask.bits.sum(axis=1)],
        }
        _write_reports(outdir, "mask", digest, seed, payload, started_at,
                       time.perf_counter() - t0)
    return 0


def _cmd_forward(args, cfg: ExperimentConfig) -> int:
    started_at = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    seed = _section_seed(args, cfg, "forward")
    pcfg = _projector_config(cfg, "projector", seed,
                             mask_rule=args.rule if args.rule is not None else None)
    n_frames = args.frames if args.frames is not None else cfg["forward"]["frames"]
    tokens = args.tokens if args.tokens is not None else cfg["forward"]["tokens"]

    params = init_params(pcfg)
    rng = np.random.default_rng(seed)
    frames = FrameEmbeddings(rng.normal(size=(n_frames, tokens, pcfg.input_dim)))
    mask = _build_mask(pcfg.mask_rule.value, pcfg.n_queries, n_frames)
    out = forward_video(params, frames, mask)
    _ensure_finite(out, "forward output")

    outdir = _resolve_outdir(args, cfg, "forward", required=True)
    outdir.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    header = [f"c{j}" for j in range(out.shape[1])]
    _write_csv(outdir / "output.csv", header, out.tolist(), digest, seed)
    payload = {
        "rows": int(out.shape[0]),
        "cols": int(out.shape[1]),
        "frobenius_norm": float(np.linalg.norm(out)),
        "mask_rule": pcfg.mask_rule.value,
        "n_frames": n_frames,
        "tokens_per_frame": tokens,
    }
    _write_reports(outdir, "forward", digest, seed, payload, started_at,
                   time.perf_counter() - t0)
    return 0


def _cmd_gradcheck(args, cfg: ExperimentConfig) -> int:
    started_at = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    sec = cfg["gradcheck"]
    master = _master_seed(args, cfg)
    base_seed = master if master is not None else 0
    tolerance, step = sec["tolerance"], sec["step"]

    rows = []
    worst = 0.0
    for rule in (MaskRule.FULL, MaskRule.CCAM_FLOOR, MaskRule.CCAM_CONTINUOUS):
        for use_tpe in (False, True):
            for offset in range(sec["seeds"]):
                seed = base_seed + offset
                pcfg = ProjectorConfig(
                    model_dim=sec["model_dim"], input_dim=sec["input_dim"],
                    n_queries=sec["n_queries"], n_heads=sec["n_heads"],
                    mask_rule=rule, use_tpe=use_tpe, seed=seed,
                )
                err = _gradcheck_case(pcfg, sec["frames"], sec["tokens"], step)
                worst = max(worst, err)
                rows.append([rule.value, use_tpe, seed, err])
    passed = worst < tolerance

    outdir = _resolve_outdir(args, cfg, "gradcheck", required=True)
    outdir.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    _write_csv(outdir / "gradcheck.csv", ["mask_rule", "use_tpe", "seed", "max_rel_error"],
               rows, digest, base_seed)
    payload = {"max_rel_error": worst, "tolerance": tolerance, "passed": passed,
               "cases": len(rows)}
    _write_reports(outdir, "gradcheck", digest, base_seed, payload, started_at,
                   time.perf_counter() - t0)
    return 0


def _gradcheck_case(pcfg: ProjectorConfig, n_frames: int, tokens: int, step: float) -> float:
    from .projector import add_tpe, forward_video as fwd

    rng = np.random.default_rng(pcfg.seed)
    params = init_params(pcfg)
    frames = FrameEmbeddings(rng.normal(size=(n_frames, tokens, pcfg.input_dim)))
    mask = _build_mask(pcfg.mask_rule.value, pcfg.n_queries, n_frames)
    upstream = rng.normal(size=(pcfg.n_queries, pcfg.model_dim))

    def loss(p, f, m):
        f_in = add_tpe(f) if pcfg.use_tpe else f
        return float((upstream * fwd(p, f_in, m)).sum())

    frames_in = add_tpe(frames) if pcfg.use_tpe else frames
    analytic = backward(params, frames_in, mask, upstream)
    numeric = finite_diff(params, frames, mask, loss, h=step)

    worst = 0.0
    for name, a in analytic.as_dict().items():
        n = getattr(numeric, name)
        sel = np.abs(a) > 1e-8
        if sel.any():
            worst = max(worst, float(np.max(np.abs(a[sel] - n[sel]) / np.abs(a[sel]))))
    return worst


def _signal_for(cfg: ExperimentConfig, seed: int):
    sec = cfg["signal"]
    if sec["channels"] != cfg["projector"]["input_dim"]:
        raise ConfigError(
            f"signal.channels ({sec['channels']}) must equal projector.input_dim "
            f"({cfg['projector']['input_dim']})"
        )
    return make_signal(sec["tokens"], sec["channels"], sec["duration"], seed,
                       max_harmonics=sec["max_harmonics"])


def _cmd_converge(args, cfg: ExperimentConfig) -> int:
    started_at = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    seed = _section_seed(args, cfg, "signal")
    counts = args.frame_counts if args.frame_counts else cfg["frame_counts"]
    grid = args.grid if args.grid is not None else cfg["grid_points"]

    params = init_params(_projector_config(cfg, "projector", seed))
    sig = _signal_for(cfg, seed)
    report = convergence_run(params, sig, counts, grid_points=grid)
    _ensure_finite(np.asarray(report.errors), "convergence errors")

    outdir = _resolve_outdir(args, cfg, "converge", required=True)
    outdir.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    _write_csv(outdir / "convergence.csv", ["frame_count", "error"],
               list(zip(report.frame_counts, report.errors)), digest, seed)
    payload = {
        "frame_counts": list(report.frame_counts),
        "errors": list(report.errors),
        "slope": report.slope,
        "grid_points": grid,
        "run_digest": report.config_digest,
    }
    _write_reports(outdir, "converge", digest, seed, payload, started_at,
                   time.perf_counter() - t0)
    return 0


def _cmd_consistency(args, cfg: ExperimentConfig) -> int:
    started_at = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    seed = _section_seed(args, cfg, "signal")
    counts = args.frame_counts if args.frame_counts else cfg["frame_counts"]
    grid = args.grid if args.grid is not None else cfg["grid_points"]

    params = init_params(_projector_config(cfg, "projector", seed))
    sig = _signal_for(cfg, seed)
    report = convergence_run(params, sig, counts, grid_points=grid)
    errors = dict(zip(report.frame_counts, report.errors))

    rows = []
    all_hold = True
    for a_idx in range(len(report.frame_counts)):
        for b_idx in range(a_idx + 1, len(report.frame_counts)):
            count_a, count_b = report.frame_counts[a_idx], report.frame_counts[b_idx]
            gap = cross_count_consistency(params, sig, count_a, count_b)
            bound = errors[count_a] + errors[count_b]
            holds = gap <= bound
            all_hold = all_hold and holds
            rows.append([count_a, count_b, gap, bound, holds])
    _ensure_finite(np.asarray([row[2] for row in rows]), "consistency gaps")

    outdir = _resolve_outdir(args, cfg, "consistency", required=True)
    outdir.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    _write_csv(outdir / "consistency.csv",
               ["count_a", "count_b", "discrepancy", "error_bound", "bound_holds"],
               rows, digest, seed)
    payload = {
        "frame_counts": list(report.frame_counts),
        "errors": list(report.errors),
        "triangle_bound_holds": all_hold,
        "grid_points": grid,
    }
    _write_reports(outdir, "consistency", digest, seed, payload, started_at,
                   time.perf_counter() - t0)
    return 0


def _cmd_ordertask(args, cfg: ExperimentConfig) -> int:
    started_at = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    seed = _section_seed(args, cfg, "ordertask")
    dataset_seed = _master_seed(args, cfg)
    dataset_seed = dataset_seed if dataset_seed is not None else cfg["dataset"]["seed"]

    dsec, tsec = cfg["dataset"], cfg["training"]
    use_tpe = args.tpe if args.tpe is not None else cfg["ordertask"]["use_tpe"]
    mask_rule = args.mask if args.mask is not None else "ccam-floor"
    pcfg = _projector_config(cfg, "ordertask", seed, mask_rule=mask_rule,
                             use_tpe=use_tpe, input_dim=dsec["channels"])

    data = make_order_dataset(dsec["n_examples"], dsec["frames"], dsec["tokens"],
                              dsec["channels"], dsec["sigma"], dataset_seed)
    epochs = args.epochs if args.epochs is not None else tsec["epochs"]
    lr = args.lr if args.lr is not None else tsec["lr"]
    report = train_order_probe(pcfg, data, MaskRule(mask_rule), epochs=epochs, lr=lr,
                               momentum=tsec["momentum"])

    outdir = _resolve_outdir(args, cfg, "ordertask", required=True)
    outdir.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    _write_csv(outdir / "loss_curve.csv", ["epoch", "loss"],
               list(enumerate(report.losses)), digest, seed)
    payload = {
        "mask_rule": report.mask_rule.value,
        "use_tpe": use_tpe,
        "train_accuracy": report.train_accuracy,
        "test_accuracy": report.test_accuracy,
        "final_loss": report.losses[-1],
        "epochs": report.epochs,
        "dataset_seed": report.dataset_seed,
    }
    _write_reports(outdir, "ordertask", digest, seed, payload, started_at,
                   time.perf_counter() - t0)
    return 0


# --- argument parsing -------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated integer list, got '{text}'") from exc


def _add_common(sub):
    sub.add_argument("--config", help="path to a JSON config document")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--seed", type=int, help="master seed overriding section seeds")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ccam", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"ccam {__version__}")
    subs = parser.add_subparsers(dest="subcommand", required=True)
    rules = [r.value for r in MaskRule]

    p = subs.add_parser("mask", help="print a frame mask as a 0/1 grid")
    _add_common(p)
    p.add_argument("--rule", choices=rules)
    p.add_argument("--queries", type=int)
    p.add_argument("--frames", type=int)
    p.set_defaults(handler=_cmd_mask)

    p = subs.add_parser("forward", help="seeded forward pass over random frames")
    _add_common(p)
    p.add_argument("--rule", choices=rules)
    p.add_argument("--frames", type=int)
    p.add_argument("--tokens", type=int)
    p.set_defaults(handler=_cmd_forward)

    p = subs.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    _add_common(p)
    p.set_defaults(handler=_cmd_gradcheck)

    p = subs.add_parser("converge", help="frame-count error sweep vs quadrature reference")
    _add_common(p)
    p.add_argument("--frames", dest="frame_counts", type=_int_list)
    p.add_argument("--grid", type=int)
    p.set_defaults(handler=_cmd_converge)

    p = subs.add_parser("consistency", help="cross-count output gaps and triangle bound")
    _add_common(p)
    p.add_argument("--frames", dest="frame_counts", type=_int_list)
    p.add_argument("--grid", type=int)
    p.set_defaults(handler=_cmd_consistency)

    p = subs.add_parser("ordertask", help="train the order probe under a mask rule")
    _add_common(p)
    p.add_argument("--mask", choices=rules)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tpe", action="store_const", const=True, default=None)
    p.set_defaults(handler=_cmd_ordertask)
    return parser


def run(argv=None) -> int:
    """Parse arguments, execute one subcommand, map failures to exit codes."""
    try:
        try:
            args = _build_parser().parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        cfg = load_config(args.config) if args.config else ExperimentConfig({})
        return args.handler(args, cfg)
    except ConfigError as exc:
        print(f"error: config: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (NumericError, TrainingDivergedError, FloatingPointError) as exc:
        print(f"error: numeric: {_one_line(exc)}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return 4
    except ValueError as exc:
        # Library-level validation failures stem from bad configuration.
        print(f"error: config: {_one_line(exc)}", file=sys.stderr)
        return 2


def _one_line(exc: Exception) -> str:
    return " ".join(str(exc).split())


def main() -> None:
    sys.exit(run(sys.argv[1:]))
