"""Command-line front end.

Subcommands ``train``, ``sweep``, ``ablate``, ``bench`` and ``case-study``
all take ``--config`` plus any number of ``--set section.key=value``
overrides. Output lands in a timestamped run directory under
``$RDIFFBR_OUTPUT_ROOT`` (falling back to ``output.directory``).

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import itertools
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from . import __version__
from .backbone import load_backbone, save_backbone
from .config import (ConfigError, RunConfig, config_from_dict, load_config, parse_override,
                     set_path)
from .data import DataFormatError, compose_z_test
from .diffusion import load_approximator, save_approximator
from .evaluation import (CSV_FIELDS, VARIANTS, EvalReport, item_level_table, nearest_items,
                         timing_report)
from .experiment import (TrainedVariant, build_data, inference_settings, make_trainer,
                         replicate_seeds, schedule_of, sweep_seed, train_variant)
from .plotting import plot_ablation, plot_loss_curve, plot_rho_curves, plot_sensitivity

log = logging.getLogger("rdiffbr")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
OUTPUT_ENV = "RDIFFBR_OUTPUT_ROOT"
GRID_ALIASES = {"lambda": "training.lam", "lam": "training.lam", "delta": "approximator.delta",
                "d": "approximator.d", "T_prime": "training.T_prime", "depth": "approximator.depth",
                "hidden_size": "approximator.hidden_size"}
LOSS_FIELDS = ("epoch", "loss_total", "loss_br", "loss_diff", "n_skipped")
SWEEP_VARIANTS = ("backbone", "rdiffbr")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _resolve_config(args) -> RunConfig:
    overrides = dict(parse_override(s) for s in args.set or [])
    if args.config is not None:
        return load_config(args.config, overrides)
    tree: dict = {}
    for k, v in overrides.items():
        set_path(tree, k, v)
    return config_from_dict(tree)


def _run_dir(cfg: RunConfig, command: str, explicit: str | None) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        root = Path(os.environ.get(OUTPUT_ENV) or cfg.output.directory)
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        path = root / f"{command}-{stamp}-{cfg.digest()}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_snapshot(run: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    (run / "config.yaml").write_text(cfg.to_yaml(), encoding="utf-8")
    meta = {"version": __version__, "config_digest": cfg.digest()}
    meta.update(extra or {})
    with open(run / "run.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _tag(cfg: RunConfig, seed: int) -> str:
    return f"{cfg.digest()}-s{seed}"


def _write_loss_csv(path: Path, history) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_FIELDS)
        for h in history:
            w.writerow([h.epoch, repr(h.loss_total), repr(h.loss_br), repr(h.loss_diff), h.n_skipped])


def _ckpt_meta(cfg: RunConfig, seed: int, variant: str) -> dict:
    return {"variant": variant, "seed": seed, "config_digest": cfg.digest(),
            "schedule": asdict(cfg.schedule), "version": __version__}


def _save_variant(run: Path, cfg: RunConfig, seed: int, variant: str, tv: TrainedVariant) -> list[Path]:
    tag = _tag(cfg, seed)
    meta = _ckpt_meta(cfg, seed, variant)
    out = [run / f"{variant}-emb-{tag}.bin"]
    save_backbone(out[0], tv.backbone, meta)
    if tv.approx is not None:
        out.append(run / f"{variant}-approx-{tag}.bin")
        save_approximator(out[-1], tv.approx, meta)
    out.append(run / f"{variant}-loss-{tag}.csv")
    _write_loss_csv(out[-1], tv.history)
    return out


def _load_variant(ckpt: Path, cfg: RunConfig, seed: int, variant: str) -> TrainedVariant:
    """Find ``{variant}-emb-*-s{seed}.bin`` (and its approximator) in ``ckpt``."""
    hits = sorted(ckpt.glob(f"{variant}-emb-*-s{seed}.bin"))
    if len(hits) != 1:
        raise FileNotFoundError(
            f"expected one {variant} backbone checkpoint for seed {seed} in {ckpt}, found {len(hits)}")
    bb = load_backbone(hits[0])
    approx = None
    if variant != "backbone":
        ap_path = Path(str(hits[0]).replace(f"{variant}-emb-", f"{variant}-approx-"))
        approx = load_approximator(ap_path)
        with open(str(ap_path) + ".json", "r", encoding="utf-8") as fh:
            saved = json.load(fh).get("schedule")
        if saved is not None and saved != asdict(cfg.schedule):
            raise ConfigError("schedule", f"does not match the schedule stored with {ap_path.name}")
    return TrainedVariant(bb, approx, [])


def _trained(args, cfg, data, part, seed, variants) -> dict:
    if getattr(args, "checkpoint", None):
        return {v: _load_variant(Path(args.checkpoint), cfg, seed, v) for v in variants}
    return {v: train_variant(cfg, data, part, seed, v) for v in variants}


def _require_source(args) -> None:
    if not args.train_first and not args.checkpoint:
        raise ConfigError("--checkpoint", "pass --checkpoint DIR or --train-first")
    if args.train_first and args.checkpoint:
        raise ConfigError("--checkpoint", "--checkpoint and --train-first are exclusive")


def parse_rhos(text: str) -> list[int]:
    """``-4..5`` or a comma list such as ``-3,0,3``."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split("..", 1))
            if lo > hi:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError("--rhos", f"cannot parse {text!r}") from None


def parse_grid(specs) -> list[tuple[str, list]]:
    """``key=v1,v2`` entries into ``[(dotted_path, values)]``."""
    out = []
    for spec in specs or []:
        if "=" not in spec:
            raise ConfigError("--grid", f"expected key=v1,v2,..., got {spec!r}")
        key, raw = spec.split("=", 1)
        key = key.strip()
        path = GRID_ALIASES.get(key, key)
        if "." not in path:
            raise ConfigError("--grid", f"unknown grid key {key!r}")
        vals = [yaml.safe_load(v) for v in raw.split(",") if v.strip()]
        if not vals:
            raise ConfigError("--grid", f"empty value list for {key!r}")
        out.append((path, vals))
    return out


def grid_points(cfg: RunConfig, grid) -> list[tuple[dict, RunConfig]]:
    if not grid:
        return [({}, cfg)]
    keys = [k for k, _ in grid]
    points = []
    for combo in itertools.product(*(v for _, v in grid)):
        assign = dict(zip(keys, combo))
        try:
            points.append((assign, cfg.replace(**assign)))
        except ConfigError as exc:
            if "unknown" in str(exc):
                raise ConfigError("--grid", f"unknown grid key {exc.field!r}") from None
            raise
    return points


def _write_aggregate(path: Path, rows: list[dict], grid_keys: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(grid_keys) + list(CSV_FIELDS))
        for r in rows:
            w.writerow([r[k] for k in grid_keys] + [r["rho"], r["K"], r["variant"], r["seed"],
                                                     repr(r["recall"]), repr(r["ndcg"])])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    variants = [v.strip() for v in args.variants.split(",")]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError("--variants", f"unknown variant {bad[0]!r}")
    run = _run_dir(cfg, "train", args.run_dir)
    _write_snapshot(run, cfg, {"command": "train", "variants": variants,
                               "seeds": replicate_seeds(cfg)})
    for seed in replicate_seeds(cfg):
        data, part = build_data(cfg, seed)
        for v in variants:
            tv = train_variant(cfg, data, part, seed, v)
            paths = _save_variant(run, cfg, seed, v, tv)
            plot_loss_curve(tv.history, run / f"{v}-loss-{_tag(cfg, seed)}.png")
            log.info("wrote %s", ", ".join(p.name for p in paths))
    print(run)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    _require_source(args)
    grid = parse_grid(args.grid)
    if grid and args.checkpoint:
        raise ConfigError("--grid", "a grid needs --train-first (checkpoints fix the hyperparameters)")
    rhos = parse_rhos(args.rhos) if args.rhos else list(cfg.eval.rhos)
    points = grid_points(cfg, grid)
    run = _run_dir(cfg, "sweep", args.run_dir)
    grid_keys = [k for k, _ in grid]
    _write_snapshot(run, cfg, {"command": "sweep", "rhos": rhos, "grid": {k: v for k, v in grid},
                               "source": "checkpoint" if args.checkpoint else "train-first"})
    agg_rows = []
    for gi, (assign, pcfg) in enumerate(points):
        sub = run / f"grid-{gi:03d}" if grid else run
        sub.mkdir(exist_ok=True)
        if grid:
            (sub / "config.yaml").write_text(pcfg.to_yaml(), encoding="utf-8")
        point_report = EvalReport(metadata={"grid": assign, "config_digest": pcfg.digest()})
        for seed in replicate_seeds(pcfg):
            data, part = build_data(pcfg, seed)
            trained = _trained(args, pcfg, data, part, seed, SWEEP_VARIANTS)
            rep = sweep_seed(pcfg, seed, rhos, pcfg.eval.Ks, SWEEP_VARIANTS, trained)
            rep.metadata = {"grid": assign, "seed": seed, "config_digest": pcfg.digest(), "rhos": rhos}
            rep.write_csv(sub / f"report-{_tag(pcfg, seed)}.csv")
            rep.write_json(sub / f"report-{_tag(pcfg, seed)}.json")
            point_report.extend(rep)
        for r in point_report.rows:
            agg_rows.append({**{k: assign[k] for k in grid_keys}, **r})
        plot_rho_curves(point_report.rows, sub / "recall_vs_rho.png", "recall", max(pcfg.eval.Ks))
    _write_aggregate(run / "aggregate.csv", agg_rows, grid_keys)
    K = max(cfg.eval.Ks)
    if len(grid_keys) == 1 and len(points) > 1:
        plot_sensitivity(agg_rows, grid_keys[0], run / "sensitivity.png", "recall", K)
    elif not grid:
        plot_rho_curves(agg_rows, run / "ndcg_vs_rho.png", "ndcg", K)
    print(run)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    _require_source(args)
    rhos = parse_rhos(args.rhos)
    run = _run_dir(cfg, "ablate", args.run_dir)
    _write_snapshot(run, cfg, {"command": "ablate", "rhos": rhos,
                               "variant_overrides": {"rdiffbr_wo_r": {"approximator.delta": 1.0,
                                                                      "residual": False}}})
    total = EvalReport()
    for seed in replicate_seeds(cfg):
        data, part = build_data(cfg, seed)
        trained = _trained(args, cfg, data, part, seed, VARIANTS)
        rep = sweep_seed(cfg, seed, rhos, cfg.eval.Ks, VARIANTS, trained)
        rep.metadata = {"seed": seed, "config_digest": cfg.digest(), "rhos": rhos,
                        "rdiffbr_wo_r": {"delta": 1.0, "residual": False}}
        rep.write_csv(run / f"ablation-{_tag(cfg, seed)}.csv")
        rep.write_json(run / f"ablation-{_tag(cfg, seed)}.json")
        total.extend(rep)
    total.write_csv(run / "aggregate.csv")
    plot_ablation(total.rows, run / "ablation.png", "recall", max(cfg.eval.Ks))
    print(run)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    if args.epochs < 1:
        raise ConfigError("--epochs", "must be >= 1")
    run = _run_dir(cfg, "bench", args.run_dir)
    seed = cfg.training.seed
    _write_snapshot(run, cfg, {"command": "bench", "epochs_averaged": args.epochs,
                               "warmup": args.warmup, "seed": seed})
    data, part = build_data(cfg, seed)
    runners = {v: make_trainer(cfg, data, part, seed, v).train_epoch for v in SWEEP_VARIANTS}
    timing = timing_report(runners, args.epochs, warmup=args.warmup)
    timing["metadata"] = {"config_digest": cfg.digest(), "seed": seed, "warmup": args.warmup,
                          "n_users": data.n_users, "n_bundles": data.n_bundles,
                          "n_items": data.n_items, "n_train_interactions": len(data.x_train)}
    with open(run / f"timing-{_tag(cfg, seed)}.json", "w", encoding="utf-8") as fh:
        json.dump(timing, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(run)
    return EXIT_OK


def cmd_case_study(args) -> int:
    cfg = _resolve_config(args)
    _require_source(args)
    seed = cfg.training.seed
    data, part = build_data(cfg, seed)
    if not 0 <= args.bundle < data.n_bundles:
        raise ConfigError("--bundle", f"bundle {args.bundle} outside [0, {data.n_bundles})")
    if args.k < 1:
        raise ConfigError("--k", "must be >= 1")
    run = _run_dir(cfg, "case-study", args.run_dir)
    _write_snapshot(run, cfg, {"command": "case-study", "bundle": args.bundle, "k": args.k,
                               "rho": args.rho, "seed": seed})
    z_eval = compose_z_test(part, args.rho)
    current = z_eval.row_sets()[args.bundle]
    original = data.z_full.row_sets()[args.bundle]
    trained = _trained(args, cfg, data, part, seed, VARIANTS)
    sched, infer = schedule_of(cfg), inference_settings(cfg, seed)
    out = {"bundle": args.bundle, "rho": args.rho, "k": args.k, "seed": seed,
           "items_in_bundle": sorted(current), "items_in_full_bundle": sorted(original),
           "variants": {}}
    for v in VARIANTS:
        tv = trained[v]
        table = item_level_table(tv.backbone, tv.approx, z_eval, sched, infer)
        hits = nearest_items(table[args.bundle], tv.backbone.v_i, args.k)
        out["variants"][v] = [{"item": i, "cosine": c, "in_bundle": i in current,
                               "in_full_bundle": i in original} for i, c in hits]
    with open(run / f"case-{args.bundle}-{_tag(cfg, seed)}.json", "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(run)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdiffbr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. training.lam=0.5 (repeatable)")
        sp.add_argument("--run-dir", help="write here instead of a fresh timestamped directory")

    def source(sp):
        sp.add_argument("--train-first", action="store_true", help="train the models in this run")
        sp.add_argument("--checkpoint", help="directory written by `rdiffbr train`")

    sp = sub.add_parser("train", help="train and checkpoint models")
    common(sp)
    sp.add_argument("--variants", default=",".join(VARIANTS),
                    help="comma list from backbone,rdiffbr,rdiffbr_wo_r (default all three)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="rho sweep, optionally over a hyperparameter grid")
    common(sp)
    source(sp)
    sp.add_argument("--rhos", help="e.g. -4..5 or -3,0,3 (default eval.rhos)")
    sp.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                    help="grid axis; keys lambda, delta, d, T_prime, depth, hidden_size or a dotted path")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("ablate", help="backbone vs RDiffBR vs RDiffBR without residual")
    common(sp)
    source(sp)
    sp.add_argument("--rhos", default="-3,3")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bench", help="per-epoch training time of backbone and RDiffBR")
    common(sp)
    sp.add_argument("--epochs", type=int, default=5, help="epochs averaged per variant")
    sp.add_argument("--warmup", type=int, default=1, help="untimed epochs before timing")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("case-study", help="nearest items to one bundle's item-level embedding")
    common(sp)
    source(sp)
    sp.add_argument("--bundle", type=int, required=True)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--rho", type=int, default=-3)
    sp.set_defaults(func=cmd_case_study)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, DataFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
