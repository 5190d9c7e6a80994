"""Command-line entry point: generate | train | eval | diagnose | bench-geometry.

Every command resolves one JSON run configuration (defaults, then
`--config`, then `--seed`, then `--set key=value` overrides), writes it to
`<out>/config.json` and exits with the error category's code on failure.
Passing that file back via `--config` reproduces the run.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DomainBounds, FeatureConfig, TrainConfig, from_dict, to_dict
from .diagnostics import (
    DiagnosticsReport,
    effective_sample_size,
    generalization_bound,
    lipschitz_constants,
    loss_lipschitz,
    mixing_estimate,
    monitor,
    tree_distortion_bench,
    write_bench_csv,
)
from .errors import DataFormatError, DomainError, GeoTKGError
from .evaluation import evaluate, temporal_split
from .graphstore import TemporalKG, feature_matrix, load_tsv, save_tsv
from .synthetic import PlantedConfig, generate_planted
from .temporal import F_MAX, clamp_scores, cloglog_prob
from .trainer import TrainTrace, maxent_coefficients, prepare_data, scores, train

log = logging.getLogger("geotkg")

IO_EXIT_CODE = 10
LOG_ENV = "GEOTKG_LOG_LEVEL"
COMMANDS = ("generate", "train", "eval", "diagnose", "bench-geometry")

DEFAULTS = {
    "seed": 0,
    "data": None,
    "checkpoint": None,
    "trace": None,
    "holdout": 0.2,
    "train": to_dict(TrainConfig()),
    "bounds": to_dict(DomainBounds()),
    "features": to_dict(FeatureConfig()),
    "planted": to_dict(PlantedConfig()),
    "diagnose": {"delta": 0.05, "L_feature": 1.0, "lipschitz_samples": 100_000, "n_boot": 200},
    "bench": {"depths": [3, 4, 5, 6, 7], "dim": 2},
}


# ---------------------------------------------------------------------------
# configuration


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_override(item: str):
    if "=" not in item:
        raise DomainError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{args.config}: invalid JSON ({exc})") from exc
        loaded.pop("command", None)
        loaded.pop("version", None)
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        cfg = _merge(cfg, loaded)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    for name in ("data", "checkpoint", "trace"):
        val = getattr(args, name, None)
        if val is not None:
            cfg[name] = val
    for item in args.set or ():
        cfg = _merge(cfg, _parse_override(item))
    cfg["train"]["seed"] = cfg["seed"]
    cfg["planted"]["seed"] = cfg["seed"]
    # validate every section by building it once
    from_dict(TrainConfig, cfg["train"])
    from_dict(DomainBounds, cfg["bounds"])
    from_dict(FeatureConfig, cfg["features"])
    from_dict(PlantedConfig, cfg["planted"])
    return cfg


def _echo(cfg: dict, command: str, out: Path):
    data = {"command": command, "version": __version__, **cfg}
    (out / "config.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _write_json(path: Path, obj):
    path.write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n")


def _meta_path(data_path) -> Path:
    return Path(str(data_path) + ".meta.json")


def _load_data(cfg) -> TemporalKG:
    path = cfg["data"]
    if not path:
        raise DomainError("this command needs --data")
    meta = _meta_path(path)
    counts = json.loads(meta.read_text()) if meta.exists() else {}
    return load_tsv(path, counts.get("n_entities"), counts.get("n_relations"))


def _split(kg, cfg):
    if cfg["holdout"] and cfg["holdout"] > 0:
        return temporal_split(kg, cfg["holdout"])
    return kg, None


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg, out: Path):
    kg, truth = generate_planted(from_dict(PlantedConfig, cfg["planted"]))
    data = out / "data.tsv"
    save_tsv(kg, data)
    _write_json(_meta_path(data), {"n_entities": kg.n_entities, "n_relations": kg.n_relations})
    _write_json(out / "truth.json", truth)
    log.info("wrote %d events to %s", len(kg), data)
    return {"events": len(kg), "data": str(data)}


def cmd_train(cfg, out: Path):
    kg = _load_data(cfg)
    kg_train, _ = _split(kg, cfg)
    tcfg = from_dict(TrainConfig, cfg["train"])
    bounds = from_dict(DomainBounds, cfg["bounds"])
    fcfg = from_dict(FeatureConfig, cfg["features"])
    params, trace = train(kg_train, tcfg, bounds=bounds, feat_cfg=fcfg)
    save_checkpoint(params, out / "checkpoint.bin", meta={"config": cfg})
    trace.to_csv(out / "trace.csv")
    trace.to_json(out / "trace.json")
    summary = {
        "iterations": len(trace) - 1,
        "final_J": float(trace.rows[-1]["J"]),
        "converged": trace.converged,
        "stopped_at_max_epochs": trace.stopped_at_max_epochs,
        "monotone_violations": int(sum(bool(r.get("violation", False)) for r in trace.rows)),
        "weights": params.weights,
    }
    _write_json(out / "train_summary.json", summary)
    return summary


def cmd_eval(cfg, out: Path):
    kg = _load_data(cfg)
    if not cfg["checkpoint"]:
        raise DomainError("eval needs --checkpoint")
    params, _ = load_checkpoint(cfg["checkpoint"])
    kg_train, kg_test = _split(kg, cfg)
    if kg_test is None:
        raise DomainError("eval needs a positive holdout fraction")
    metrics = evaluate(params, kg_train, kg_test, from_dict(FeatureConfig, cfg["features"]))
    _write_json(out / "metrics.json", metrics)
    return metrics


def _residual_series(params, kg_train, fcfg):
    """Time-major Y - p over every training (h, r, t) that ever fired."""
    triples = np.unique(kg_train.quadruples[:, :3], axis=0)
    bins = list(kg_train.widths)
    fired = {tuple(q) for q in kg_train.quadruples.tolist()}
    out = []
    for u in bins:
        S = feature_matrix(kg_train, u, fcfg)
        for r in range(kg_train.n_relations):
            sel = triples[triples[:, 1] == r]
            for h in np.unique(sel[:, 0]):
                tails = sel[sel[:, 0] == h, 2]
                f = scores(params, h, r, u, tails, S[h, tails])
                p = cloglog_prob(clamp_scores(f), kg_train.widths[u])
                y = np.array([(int(h), r, int(t), u) in fired for t in tails], dtype=float)
                out.append(y - p)
    return np.concatenate(out) if out else np.zeros(0)


def cmd_diagnose(cfg, out: Path):
    kg = _load_data(cfg)
    if not cfg["checkpoint"]:
        raise DomainError("diagnose needs --checkpoint")
    params, _ = load_checkpoint(cfg["checkpoint"])
    kg_train, _ = _split(kg, cfg)
    tcfg = from_dict(TrainConfig, cfg["train"])
    bounds = from_dict(DomainBounds, cfg["bounds"])
    fcfg = from_dict(FeatureConfig, cfg["features"])
    dcfg = cfg["diagnose"]
    notes = []

    trace = TrainTrace.from_json(cfg["trace"]) if cfg["trace"] else None
    flags = monitor(trace).to_dict() if trace is not None else None
    if trace is None:
        notes.append("no trace given: instability flags not computed")
    E = trace.rows[-1]["E"] if trace is not None else None
    empirical_risk = float(trace.rows[-1]["nll"]) if trace is not None else 0.0

    consts = lipschitz_constants(bounds, params, L_feature=dcfg["L_feature"], n_samples=dcfg["lipschitz_samples"], seed=cfg["seed"])
    S_last = feature_matrix(kg_train, max(kg_train.widths), fcfg)
    f_all = []
    tails = np.arange(kg_train.n_entities)
    for r in range(kg_train.n_relations):
        for h in range(kg_train.n_entities):
            f_all.append(scores(params, h, r, None, tails, S_last[h]))
    f_all = clamp_scores(np.concatenate(f_all)) if f_all else np.zeros(1)
    widths = np.array(list(kg_train.widths.values()))
    consts.F_min, consts.F_max = float(f_all.min()), float(min(f_all.max(), F_MAX))
    consts.delta_min, consts.delta_max = float(widths.min()), float(widths.max())
    consts.L_loss = loss_lipschitz(consts.delta_min, consts.delta_max, consts.F_min, consts.F_max)
    consts.N = len(kg_train)
    bound = float("nan")
    if consts.N >= 8:
        consts.m_block, consts.g_gap, consts.N_eff, _ = effective_sample_size(consts.N)
        bound = generalization_bound(consts, dcfg["delta"], empirical_risk)
    else:
        notes.append("fewer than 8 training events: no generalization bound")

    data = prepare_data(kg_train, tcfg, fcfg)
    _, _, _, stats = maxent_coefficients(params, data, tcfg)
    nondegen = {k: int(v) for k, v in vars(stats).items()}

    series = _residual_series(params, kg_train, fcfg)
    mixing = None
    try:
        mixing = mixing_estimate(series, n_boot=dcfg["n_boot"], seed=cfg["seed"]).to_dict()
    except DomainError as exc:
        notes.append(f"mixing estimate skipped: {exc}")

    report = DiagnosticsReport(
        distortion_energies=np.asarray(E).tolist() if E is not None else [],
        weights=params.weights.tolist(),
        constants=consts.to_dict(),
        bound=bound,
        flags=flags,
        mixing=mixing,
        nondegeneracy=nondegen,
        notes=notes,
    )
    _write_json(out / "diagnostics.json", report.to_dict())
    return {"bound": bound, "flags": flags, "notes": notes}


def cmd_bench_geometry(cfg, out: Path):
    bench = cfg["bench"]
    rows = tree_distortion_bench(bench["depths"], dim=bench["dim"], seed=cfg["seed"])
    write_bench_csv(rows, out / "bench.csv")
    return [vars(r) for r in rows]


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "bench-geometry": cmd_bench_geometry,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geotkg", description="Mixture-of-metrics temporal knowledge-graph toolkit.")
    parser.add_argument("--version", action="version", version=f"geotkg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "sample a planted-geometry dataset",
        "train": "train on the early bins of a dataset",
        "eval": "filtered MRR / Hits@k on the held-out bins",
        "diagnose": "bound constants, monitors and dependence estimates",
        "bench-geometry": "tree distortion benchmark (hyperbolic vs Euclidean)",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", help="JSON run configuration (a previous config.json works)")
        p.add_argument("--seed", type=int, help="seed for every random stream (unsigned 64-bit)")
        p.add_argument("--out", default=".", help="output directory (created if missing)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. train.lr=0.5")
        if name in ("train", "eval", "diagnose"):
            p.add_argument("--data", help="quadruple TSV")
        if name in ("eval", "diagnose"):
            p.add_argument("--checkpoint", help="checkpoint written by train")
        if name == "diagnose":
            p.add_argument("--trace", help="trace.json written by train")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise DomainError("--seed must be an unsigned 64-bit integer")
        cfg = resolve_config(args)
        out = ensure_dir(args.out)
        _echo(cfg, args.command, out)
        result = HANDLERS[args.command](cfg, out)
        print(json.dumps(_json_safe(result), sort_keys=True))
        return 0
    except GeoTKGError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error (IO): {exc}", file=sys.stderr)
        return IO_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
