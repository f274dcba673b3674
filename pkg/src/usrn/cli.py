"""Command-line front end.

Subcommands cover the whole pipeline: gen-data, cluster, train, eval, ablate
and report. Every command validates its inputs before writing anything, never
mutates an input directory, and is idempotent: rerunning with the same inputs
rewrites byte-identical outputs.

Exit codes: 0 success, 2 configuration or data problem, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .clustering import BACKENDS, VARIANTS, build_taxonomy
from .errors import ConfigurationError, DataError, NumericalError, UsrnError
from .metrics import cbr
from .netcore import load_params
from .synthdata import (
    generate,
    load_dataset,
    load_spec,
    save_dataset,
    save_spec,
    split,
)
from .trainer import (
    LADDER,
    TrainConfig,
    evaluate,
    train,
    write_run,
)

_TRAIN_MODES = ("baseline", "usrn")


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_json(path: Path) -> dict:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"no such file: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}")
    if not isinstance(payload, dict):
        raise ConfigurationError(f"{path} must hold a JSON object")
    return payload


def _reject_unknown(payload: dict, known: set[str], where: str) -> None:
    unknown = set(payload) - known
    if unknown:
        raise ConfigurationError(f"unknown {where} keys: {sorted(unknown)}")


def _worker_cap(num_jobs: int) -> int:
    raw = os.environ.get("USRN_THREADS", "").strip()
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigurationError(f"USRN_THREADS must be an integer, got {raw!r}")
        if cap < 1:
            raise ConfigurationError("USRN_THREADS must be at least 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, num_jobs))


# ---------------------------------------------------------------------------
# gen-data


def _parse_fraction(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def cmd_gen_data(args) -> int:
    spec = load_spec(args.spec_file)
    if args.num_images < 2:
        raise ConfigurationError("need at least 2 training images to split")
    if args.eval_images < 1:
        raise ConfigurationError("need at least 1 eval image")
    fraction = _parse_fraction(args.fraction)
    # one generate call so train and eval share the scene's mode geometry
    samples = generate(spec, args.num_images + args.eval_images)
    ds = split(samples[: args.num_images], fraction, args.seed,
               eval_samples=samples[args.num_images:])

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_spec(spec, out / "spec.json")
    pools = {"labelled": ds.labelled, "unlabelled": ds.unlabelled, "eval": ds.eval}
    manifest = {
        "fraction": fraction,
        "seed": args.seed,
        "num_classes": spec.num_classes,
        "split_hash": ds.content_hash(),
        "files": {},
        "counts": {},
    }
    for pool, samples_ in pools.items():
        path = out / f"{pool}.bin"
        save_dataset(samples_, path)
        manifest["files"][f"{pool}.bin"] = _sha256(path)
        manifest["counts"][pool] = len(samples_)
    manifest["files"]["spec.json"] = _sha256(out / "spec.json")
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote {out}: " + ", ".join(f"{k}={len(v)}" for k, v in pools.items()))
    return 0


def _load_split(data_dir: str):
    data = Path(data_dir)
    manifest = _load_json(data / "manifest.json")
    for name, want in manifest.get("files", {}).items():
        path = data / name
        if not path.exists():
            raise DataError(f"manifest lists {name} but it is missing")
        got = _sha256(path)
        if got != want:
            raise DataError(f"{name} content hash mismatch: manifest says "
                            f"{want[:12]}..., file has {got[:12]}...")
    from .synthdata import DatasetSplit

    return DatasetSplit(
        labelled=load_dataset(data / "labelled.bin"),
        unlabelled=load_dataset(data / "unlabelled.bin"),
        eval=load_dataset(data / "eval.bin"),
        split_fraction=float(manifest["fraction"]),
    )


# ---------------------------------------------------------------------------
# train / ablate config files


def _parse_train_payload(payload: dict, where: str = "config") -> tuple[str, str, TrainConfig]:
    """Returns (mode, ladder row name, TrainConfig with the row's flags)."""
    _reject_unknown(payload, {"mode", "row", "name", "train"}, where)
    mode = payload.get("mode")
    if mode not in _TRAIN_MODES:
        raise ConfigurationError(f"config 'mode' must be one of {_TRAIN_MODES}, "
                                 f"got {mode!r}")
    row = payload.get("row", "model_i" if mode == "baseline" else "usrn")
    if row == "full":
        row = "usrn"
    if row not in LADDER:
        raise ConfigurationError(f"config 'row' must be one of "
                                 f"{list(LADDER) + ['full']}, got {row!r}")
    if mode == "baseline" and row != "model_i":
        raise ConfigurationError("mode=baseline only supports row=model_i")
    train_payload = dict(payload.get("train", {}))
    if "ablation" in train_payload:
        raise ConfigurationError("set 'row' at the top level instead of "
                                 "'train.ablation'")
    config = TrainConfig.from_json(train_payload)
    import dataclasses

    config = dataclasses.replace(config, ablation=LADDER[row])
    name = payload.get("name", row)
    return mode, name, config


def cmd_train(args) -> int:
    payload = _load_json(Path(args.config_file))
    _, name, config = _parse_train_payload(payload)
    ds = _load_split(args.data_dir)
    record = train(ds, config, name=name)
    write_run(record, args.out_dir)
    ev = record.final_eval
    print(f"{name}: miou={ev.miou:.4f} min_class_iou={ev.min_class_iou:.4f} "
          f"steps={config.warmup_steps + config.steps} "
          f"({record.wall_time:.1f}s) -> {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# cluster


def cmd_cluster(args) -> int:
    ds = _load_split(args.data_dir)
    if args.params is not None:
        params = load_params(args.params)
    else:
        from .netcore import init_params

        first = ds.labelled[0]
        num_classes = first.labels.num_classes
        params = init_params(first.features.dim, args.trunk_width, num_classes,
                             num_classes, "low", seed=args.seed)
    num_classes = ds.labelled[0].labels.num_classes
    pairs = [(s.features, s.labels) for s in ds.labelled]
    taxonomy, sub_grids = build_taxonomy(params, pairs, num_classes,
                                         seed=args.seed, backend=args.backend,
                                         variant=args.variant)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "taxonomy.json", "w") as fh:
        json.dump(taxonomy.to_json(), fh, indent=2)
    counts = np.concatenate([g.data.ravel() for g in sub_grids])
    sizes = np.bincount(counts, minlength=taxonomy.num_subclasses)
    report = {
        "num_subclasses": taxonomy.num_subclasses,
        "subclasses_per_class": [len(taxonomy.children(c))
                                 for c in range(num_classes)],
        "cbr_class": taxonomy.cbr_class(),
        "cbr_subclass": taxonomy.cbr_subclass(),
        "subclass_pixel_counts": [int(v) for v in sizes],
    }
    with open(out / "cluster_report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    print(f"taxonomy: {taxonomy.num_subclasses} subclasses, "
          f"class CBR {report['cbr_class']:.1f}% -> "
          f"subclass CBR {report['cbr_subclass']:.1f}%")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    params = load_params(Path(args.run_dir) / "params.bin")
    ds = _load_split(args.data_dir)
    pool = {"eval": ds.eval, "labelled": ds.labelled,
            "unlabelled": ds.unlabelled}[args.pool]
    ev = evaluate(params, pool)
    preds = ev.confusion.counts.sum(axis=0)
    payload = {
        "pool": args.pool,
        "miou": ev.miou,
        "per_class_iou": ev.per_class_iou,
        "min_class_iou": ev.min_class_iou,
        "cbr_pred": ev.cbr_pred,
        "ari": ev.ari,
        "predicted_pixels_per_class": [int(v) for v in preds],
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# ablate


def _ablate_job(job) -> tuple[str, float]:
    data_dir, out_dir, name, config_json = job
    config = TrainConfig.from_json(config_json)
    ds = _load_split(data_dir)
    record = train(ds, config, name=name)
    write_run(record, out_dir)
    return name, record.final_eval.miou


def cmd_ablate(args) -> int:
    payload = _load_json(Path(args.config_file))
    _reject_unknown(payload, {"train"}, "ablate config")
    base = TrainConfig.from_json(dict(payload.get("train", {})))
    rows = args.rows or list(LADDER)
    for row in rows:
        if row not in LADDER:
            raise ConfigurationError(f"unknown ladder row {row!r}")
    seeds = args.seeds if args.seeds is not None else [base.seed]
    _load_split(args.data_dir)  # validate before spawning workers

    import dataclasses

    jobs = []
    for seed in seeds:
        for row in rows:
            cfg = dataclasses.replace(base, seed=seed, ablation=LADDER[row])
            name = row if len(seeds) == 1 else f"{row}_s{seed}"
            jobs.append((args.data_dir, str(Path(args.out_dir) / name), name,
                         cfg.to_json()))
    workers = _worker_cap(len(jobs))
    results = {}
    if workers == 1:
        for job in jobs:
            name, miou = _ablate_job(job)
            results[name] = miou
            print(f"{name}: miou={miou:.4f}", flush=True)
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            for name, miou in pool.map(_ablate_job, jobs):
                results[name] = miou
                print(f"{name}: miou={miou:.4f}", flush=True)

    table_path = Path(args.out_dir) / "ladder.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "seed", "run", "miou"])
        for seed in seeds:
            for row in rows:
                name = row if len(seeds) == 1 else f"{row}_s{seed}"
                writer.writerow([row, seed, name, repr(results[name])])
        if len(seeds) > 1:
            writer.writerow([])
            writer.writerow(["row", "median_miou"])
            for row in rows:
                vals = [results[f"{row}_s{s}"] for s in seeds]
                writer.writerow([row, repr(float(np.median(vals)))])
    print(f"wrote {table_path}")
    return 0


# ---------------------------------------------------------------------------
# report


def _read_metrics(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: float(v) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


_SVG_W, _SVG_H = 640, 400
_MARGIN = 50
_PALETTE = ("#1b6ca8", "#d1495b", "#3a7d44", "#8d5a97", "#c77b2f",
            "#4a4e69", "#0f8b8d")


def _curve_svg(curves: dict[str, list[tuple[float, float]]]) -> ET.Element:
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                     width=str(_SVG_W), height=str(_SVG_H),
                     viewBox=f"0 0 {_SVG_W} {_SVG_H}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(_SVG_W),
                  height=str(_SVG_H), fill="white")
    x0, y0 = _MARGIN, _SVG_H - _MARGIN
    x1, y1 = _SVG_W - _MARGIN, _MARGIN
    ET.SubElement(svg, "path", d=f"M {x0} {y1} L {x0} {y0} L {x1} {y0}",
                  stroke="black", fill="none")
    points = [p for pts in curves.values() for p in pts]
    xs = [p[0] for p in points] or [0.0, 1.0]
    ys = [p[1] for p in points] or [0.0, 1.0]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(0.0, min(ys)), max(1.0, max(ys))
    if x_hi == x_lo:
        x_hi = x_lo + 1.0

    def to_px(x, y):
        px = x0 + (x - x_lo) / (x_hi - x_lo) * (x1 - x0)
        py = y0 - (y - y_lo) / (y_hi - y_lo) * (y0 - y1)
        return px, py

    label = ET.SubElement(svg, "text", x=str((x0 + x1) // 2), y=str(_SVG_H - 12),
                          **{"text-anchor": "middle", "font-size": "13"})
    label.text = "step"
    ylab = ET.SubElement(svg, "text", x="16", y=str((y0 + y1) // 2),
                         transform=f"rotate(-90 16 {(y0 + y1) // 2})",
                         **{"text-anchor": "middle", "font-size": "13"})
    ylab.text = "eval mIoU"
    for i, (name, pts) in enumerate(curves.items()):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{px:.1f},{py:.1f}" for px, py in
                          (to_px(x, y) for x, y in pts))
        ET.SubElement(svg, "polyline", points=coords, fill="none",
                      stroke=color, **{"stroke-width": "2"})
        tag = ET.SubElement(svg, "text", x=str(x1 - 150),
                            y=str(y1 + 18 + 16 * i), fill=color,
                            **{"font-size": "12"})
        tag.text = name
    return svg


def cmd_report(args) -> int:
    rows = []
    curves: dict[str, list[tuple[float, float]]] = {}
    for run_dir in args.run_dirs:
        summary_path = Path(run_dir) / "summary.json"
        if not summary_path.exists():
            print(f"warning: {run_dir} has no summary.json, skipping",
                  file=sys.stderr)
            continue
        summary = _load_json(summary_path)
        rows.append(summary)
        metrics_path = Path(run_dir) / "metrics.csv"
        if metrics_path.exists():
            curve = [(m["step"], m["miou"]) for m in _read_metrics(metrics_path)]
            if curve:
                curves[summary.get("name", Path(run_dir).name)] = curve
    if not rows:
        return _fail(2, "no run directory contained a summary.json")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    num_classes = max(len(r.get("per_class_iou", [])) for r in rows)
    header = (["name", "miou", "min_class_iou"]
              + [f"iou_{c}" for c in range(num_classes)]
              + ["cbr_pred", "cbr_subclass", "gate_open_fraction_mean",
                 "pseudo_coverage_mean", "steps"])
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in rows:
            per_class = list(r.get("per_class_iou", []))
            per_class += [""] * (num_classes - len(per_class))
            writer.writerow([
                r.get("name", ""),
                r.get("miou", ""),
                r.get("min_class_iou", ""),
                *per_class,
                r.get("cbr_pred", ""),
                r.get("cbr_subclass", ""),
                r.get("gate_open_fraction_mean", ""),
                r.get("pseudo_coverage_mean", ""),
                r.get("steps", ""),
            ])
    svg = _curve_svg(curves)
    ET.ElementTree(svg).write(out / "curves.svg", xml_declaration=True,
                              encoding="unicode")
    print(f"wrote {out / 'report.csv'} and {out / 'curves.svg'} "
          f"({len(rows)} runs)")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="usrn",
        description="Desk-scale semi-supervised per-pixel classification "
                    "with balanced subclass regularization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and split a synthetic dataset")
    p.add_argument("spec_file", help="SceneSpec JSON file")
    p.add_argument("out_dir")
    p.add_argument("--num-images", type=int, default=200)
    p.add_argument("--eval-images", type=int, default=50)
    p.add_argument("--fraction", default="1/32",
                   help="labelled fraction, e.g. 1/32 or 0.03125")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("cluster", help="build and inspect a subclass taxonomy")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.add_argument("--params", default=None,
                   help="params.bin to take trunk features from "
                        "(default: fresh init)")
    p.add_argument("--trunk-width", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backend", choices=BACKENDS, default="greedy")
    p.add_argument("--variant", choices=VARIANTS, default="balanced")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("config_file")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved params on a data pool")
    p.add_argument("run_dir")
    p.add_argument("data_dir")
    p.add_argument("--pool", choices=("eval", "labelled", "unlabelled"),
                   default="eval")
    p.add_argument("--out", default=None, help="also write the JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run ladder rows, optionally multi-seed")
    p.add_argument("config_file")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.add_argument("--rows", nargs="+", default=None,
                   help=f"subset of {list(LADDER)}")
    p.add_argument("--seeds", nargs="+", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summarize run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        return _fail(3, str(exc))
    except (UsrnError, OSError, ValueError, KeyError) as exc:
        return _fail(2, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
