"""``hmoetrack`` command line.

Subcommands:

  gen-data        render train/ and eval/ synthetic datasets
  make-missing    write per-video missing-modality schedules
  train           train one model
  eval            evaluate a checkpoint, optionally under a missing schedule
  ablate-masking  train video_level / none / random / tube and compare
  ablate-experts  train heterogeneous vs homogeneous expert banks and compare
  route-viz       expert-width routing analysis at rate 0 vs a missing rate

Every command writes ``resolved_config.json`` into its output directory.
Exit codes: 0 success, 1 runtime failure (one ``error:`` line on stderr),
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from hmoetrack import __version__
from hmoetrack.bench import KINDS, ModelTracker, ScheduleSpec, evaluate
from hmoetrack.errors import ConfigError, HmoeTrackError
from hmoetrack.hmoe import parse_experts
from hmoetrack.model import PRESETS, ModelConfig, TrackerModel, preset
from hmoetrack.plots import grouped_bars_svg, write_svg
from hmoetrack.rng import derived_seed
from hmoetrack.scenes import SceneSpec, load_dataset, make_dataset
from hmoetrack.train import (BUCKETS, STRATEGIES, TrainConfig, analyze_routing, mean_selected_width,
                             train, write_telemetry)

log = logging.getLogger("hmoetrack")

EXPERT_ABLATION = ("hetero", "homo:512", "homo:64", "homo:4")
N_TRAIN, N_EVAL = 200, 50


# ------------------------------------------------------------------- config plumbing


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    # a bare training config (as written by `train`) is accepted too
    if set(cfg) <= set(TrainConfig.__dataclass_fields__):
        return {"train": cfg}
    unknown = set(cfg) - {"train", "scene", "n_train", "n_eval", "preset"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _scene(cfg: dict) -> SceneSpec:
    spec = SceneSpec.from_dict(_merge(SceneSpec().to_dict(), cfg.get("scene", {})))
    spec.validate()
    return spec


def _train_config(args, cfg: dict, **overrides) -> TrainConfig:
    name = getattr(args, "preset", None) or cfg.get("preset", "default")
    base = TrainConfig(model=preset(name)).to_dict()
    merged = _merge(base, cfg.get("train", {}))
    tc = TrainConfig.from_dict(merged)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "alpha", None) is not None:
        changes["alpha"] = args.alpha
    if getattr(args, "strategy", None):
        changes["strategy"] = args.strategy
    if getattr(args, "experts", None):
        changes["model"] = replace(tc.model, expert_widths=parse_experts(args.experts))
    changes.update(overrides)
    tc = replace(tc, **changes)
    tc.validate()
    return tc


def _versions() -> dict:
    return {"hmoetrack": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _record(out: Path, args, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    meta = {"command": args.command, "argv": args.argv, "resolved": resolved, "versions": _versions()}
    (out / "resolved_config.json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=str))


def _dataset_dir(path: str | Path, split: str) -> Path:
    """Accept either a split directory or a gen-data root holding train/ and eval/."""
    path = Path(path)
    if (path / split / "manifest.json").exists():
        return path / split
    if (path / "manifest.json").exists():
        return path
    raise ConfigError(f"no dataset manifest in {path} or {path / split}")


def _schedule(args) -> ScheduleSpec:
    seed = args.seed if args.seed is not None else 0
    if args.missing is None:
        if args.rate:
            raise ConfigError("--rate needs --missing")
        return ScheduleSpec()
    return ScheduleSpec(args.missing, 0.5 if args.rate is None else args.rate, seed)


def _write_csv(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        w.writerows(rows)


# ------------------------------------------------------------------- commands


def cmd_gen_data(args) -> None:
    cfg = _read_config(args.config)
    seed = args.seed if args.seed is not None else 0
    spec = _scene(cfg)
    n_train = args.n_train if args.n_train is not None else int(cfg.get("n_train", N_TRAIN))
    n_eval = args.n_eval if args.n_eval is not None else int(cfg.get("n_eval", N_EVAL))
    out = Path(args.out)
    seeds = {"train": derived_seed(seed, "train"), "eval": derived_seed(seed, "eval")}
    make_dataset(spec, n_train, seeds["train"], out / "train")
    make_dataset(spec, n_eval, seeds["eval"], out / "eval")
    _record(out, args, {"seed": seed, "split_seeds": seeds, "n_train": n_train, "n_eval": n_eval,
                        "scene": spec.to_dict()})
    print(f"wrote {n_train} train and {n_eval} eval videos to {out}")


def cmd_make_missing(args) -> None:
    spec = _schedule(args)
    if spec.kind == "none":
        raise ConfigError("make-missing needs --missing {random,switched,prolonged}")
    root = _dataset_dir(args.dataset, "eval")
    manifest = json.loads((root / "manifest.json").read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(manifest["videos"]):
        sched = spec.for_video(i, int(v["length"]))
        (out / f"{v['name']}.json").write_text(sched.to_json())
    _record(out, args, {"dataset": str(root), "schedule": vars(spec) | {"label": spec.label}})
    print(f"wrote {len(manifest['videos'])} {spec.label} schedules to {out}")


def cmd_train(args) -> None:
    cfg = _read_config(args.config)
    overrides = {}
    if args.dataset:
        overrides["dataset"] = str(_dataset_dir(args.dataset, "train"))
    tc = _train_config(args, cfg, **overrides)
    out = Path(args.out)
    _record(out, args, {"train": tc.to_dict(), "config_hash": tc.hash()})
    _, runlog = train(tc, out)
    tot = runlog.totals()
    print(f"trained {len(tot)} steps in {runlog.wall_clock:.1f}s; final loss {tot[-1]:.4f}; "
          f"checkpoint {out / 'checkpoint'}")


def _evaluate_into(model: TrackerModel, seqs, spec: ScheduleSpec, out: Path, stem: str):
    report, records = evaluate(ModelTracker(model), seqs, spec)
    report.write(out, stem)
    write_telemetry(out / f"telemetry_{stem}.csv", records)
    return report, records


def cmd_eval(args) -> None:
    spec = _schedule(args)
    root = _dataset_dir(args.dataset, "eval")
    model = TrackerModel.load(args.checkpoint)
    seqs = load_dataset(root)
    out = Path(args.out)
    _record(out, args, {"checkpoint": str(args.checkpoint), "dataset": str(root),
                        "schedule": vars(spec) | {"label": spec.label}, "model": model.cfg.to_dict()})
    report, _ = _evaluate_into(model, seqs, spec, out, "metrics")
    print(f"{spec.label}: precision@20 {report.precision_at_20:.4f} success AUC {report.success_auc:.4f}")


def _ablation_data(args, cfg: dict, out: Path) -> tuple[Path, Path]:
    if args.dataset:
        return _dataset_dir(args.dataset, "train"), _dataset_dir(args.dataset, "eval")
    seed = args.seed if args.seed is not None else 0
    spec = _scene(cfg)
    data = out / "data"
    make_dataset(spec, int(cfg.get("n_train", N_TRAIN)), derived_seed(seed, "train"), data / "train")
    make_dataset(spec, int(cfg.get("n_eval", N_EVAL)), derived_seed(seed, "eval"), data / "eval")
    return data / "train", data / "eval"


def _ablate(args, variants: dict[str, dict], table: str, key: str) -> None:
    cfg = _read_config(args.config)
    out = Path(args.out)
    train_dir, eval_dir = _ablation_data(args, cfg, out)
    missing = _schedule(args) if args.missing else ScheduleSpec("random", args.rate or 0.5,
                                                                 args.seed if args.seed is not None else 0)
    configs = {name: _train_config(args, cfg, dataset=str(train_dir), **ch) for name, ch in variants.items()}
    _record(out, args, {"variants": {n: c.to_dict() for n, c in configs.items()},
                        "eval_dataset": str(eval_dir), "missing": vars(missing) | {"label": missing.label}})
    seqs = load_dataset(eval_dir)
    rows = []
    for name, tc in configs.items():
        run_dir = out / "runs" / name.replace(":", "_")
        model, runlog = train(tc, run_dir)
        for setting, spec in (("full", ScheduleSpec()), ("missing", missing)):
            report, _ = _evaluate_into(model, seqs, spec, run_dir, setting)
            rows.append({key: name, "setting": setting, "schedule": spec.label,
                         "precision": f"{report.precision_at_20:.6f}", "auc": f"{report.success_auc:.6f}",
                         "train_seconds": f"{runlog.wall_clock:.1f}"})
            log.info("%s %s P=%.4f AUC=%.4f", name, setting, report.precision_at_20, report.success_auc)
    _write_csv(out / table, (key, "setting", "schedule", "precision", "auc", "train_seconds"), rows)
    for r in rows:
        print(f"{r[key]:>12} {r['setting']:>8} P={r['precision']} AUC={r['auc']}")


def cmd_ablate_masking(args) -> None:
    _ablate(args, {s: {"strategy": s} for s in STRATEGIES}, "ablate_masking.csv", "strategy")


def cmd_ablate_experts(args) -> None:
    base = _train_config(args, _read_config(args.config))
    variants = {spec: {"model": replace(base.model, expert_widths=parse_experts(spec))}
                for spec in EXPERT_ABLATION}
    _ablate(args, variants, "ablate_experts.csv", "experts")


def cmd_route_viz(args) -> None:
    root = _dataset_dir(args.dataset, "eval")
    model = TrackerModel.load(args.checkpoint)
    seqs = load_dataset(root)
    seed = args.seed if args.seed is not None else 0
    rate = 0.5 if args.rate is None else args.rate
    settings = {"rate0": ScheduleSpec(), f"rate{rate:g}": ScheduleSpec(args.missing or "random", rate, seed)}
    out = Path(args.out)
    _record(out, args, {"checkpoint": str(args.checkpoint), "dataset": str(root),
                        "settings": {k: vars(v) for k, v in settings.items()}})
    widths = model.widths
    hist_rows, width_rows, bucket_counts = [], [], {b: [0] * len(widths) for b in BUCKETS}
    summary = {}
    for name, spec in settings.items():
        _, records = _evaluate_into(model, seqs, spec, out, name)
        mean_w = mean_selected_width(records)
        summary[name] = mean_w
        width_rows.append({"setting": name, "schedule": spec.label, "records": len(records),
                           "selections": sum(len(r.selected) for r in records), "mean_width": f"{mean_w:.6f}"})
        for st in analyze_routing(records, len(widths)):
            for n, c in enumerate(st.counts):
                bucket_counts[st.bucket][n] += c
                hist_rows.append({"setting": name, "bucket": st.bucket, "expert": n, "width": widths[n],
                                  "count": c})
    _write_csv(out / "route_hist.csv", ("setting", "bucket", "expert", "width", "count"), hist_rows)
    _write_csv(out / "route_widths.csv", ("setting", "schedule", "records", "selections", "mean_width"),
               width_rows)
    shares = []
    for b in BUCKETS:
        n = sum(bucket_counts[b])
        shares.append([c / n if n else 0.0 for c in bucket_counts[b]])
    write_svg(out / "route_hist.svg", grouped_bars_svg(
        [f"missing {b}" for b in BUCKETS], [f"w={w}" for w in widths], shares,
        title="Selected expert share per missing-rate bucket", ylabel="selection share"))
    base, missing = summary["rate0"], summary[f"rate{rate:g}"]
    report = {"mean_width": summary, "increase": missing > base, "delta": missing - base}
    (out / "route_report.json").write_text(json.dumps(report, indent=1))
    flag = "increase" if missing > base else "no increase"
    print(f"mean selected width: rate 0 -> {base:.2f}, rate {rate:g} -> {missing:.2f} ({flag})")


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hmoetrack", description="HMoE fusion tracking experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=False, dataset_required=False):
        sp.add_argument("--config", metavar="PATH", help="JSON config (sections: scene, train, preset, n_train, n_eval)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", metavar="DIR", required=True)
        if dataset:
            sp.add_argument("--dataset", metavar="DIR", required=dataset_required)

    def missing(sp):
        sp.add_argument("--missing", choices=KINDS)
        sp.add_argument("--rate", type=float)

    def training(sp):
        sp.add_argument("--alpha", type=float, help="clip mask ratio for video-level masking")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="model size preset")

    sp = sub.add_parser("gen-data", help="render train/ and eval/ datasets")
    common(sp)
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-eval", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("make-missing", help="write missing-modality schedules for a dataset")
    common(sp, dataset=True, dataset_required=True)
    missing(sp)
    sp.set_defaults(func=cmd_make_missing)

    sp = sub.add_parser("train", help="train one model")
    common(sp, dataset=True)
    training(sp)
    sp.add_argument("--strategy", choices=STRATEGIES)
    sp.add_argument("--experts", metavar="SPEC", help="hetero, hetero:D, homo:WIDTH or homo:WIDTHxCOUNT")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, dataset=True, dataset_required=True)
    sp.add_argument("--checkpoint", metavar="DIR", required=True)
    missing(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate-masking", help="compare the four masking strategies")
    common(sp, dataset=True)
    training(sp)
    missing(sp)
    sp.add_argument("--experts", metavar="SPEC")
    sp.set_defaults(func=cmd_ablate_masking)

    sp = sub.add_parser("ablate-experts", help="compare heterogeneous and homogeneous expert banks")
    common(sp, dataset=True)
    training(sp)
    missing(sp)
    sp.add_argument("--strategy", choices=STRATEGIES)
    sp.set_defaults(func=cmd_ablate_experts)

    sp = sub.add_parser("route-viz", help="expert-width routing analysis")
    common(sp, dataset=True, dataset_required=True)
    sp.add_argument("--checkpoint", metavar="DIR", required=True)
    missing(sp)
    sp.set_defaults(func=cmd_route_viz)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (HmoeTrackError, ValueError, OSError, KeyError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
