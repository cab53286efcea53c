"""Command-line driver: ``etta {gen-data,pretrain,stats,adapt,flops,report}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as rc
from .adapt import SourceStats, compute_source_stats, select_hyperparameters
from .container import FormatError
from .data import CATEGORY, CORRUPTIONS, SOURCE, TEST, TRAIN, export_dataset, gen_dataset, ingest_raw
from .experiment import (SUMMARY_FIELDS, heldout_target_set, make_tasks, method_setup, metrics_jsonl, run_tasks,
                         summary_rows)
from .flops import VIT_B16, count_flops
from .tokenagg import MergeConfig, ScheduleError
from .train import TrainingDiverged, accuracy, pretrain
from .vit import ConfigError, load_checkpoint, save_checkpoint

log = logging.getLogger("etta")


class CLIError(Exception):
    pass


def _write_config(cfg: rc.RunConfig, out_dir: Path, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command}.config.json").write_text(cfg.dumps())


def _load(args) -> rc.RunConfig:
    cfg = rc.load(args.config) if args.config else rc.from_dict({}, Path.cwd())
    if args.seed is not None:
        cfg = rc.with_seed(cfg, args.seed)
    return cfg


def _stats_path(stats_dir, r: int) -> Path:
    return Path(stats_dir) / f"stats_r{r}.etta"


def _dataset(cfg: rc.RunConfig, name: str):
    path = Path(cfg.paths.data_dir) / f"{name}.etta"
    if not path.exists():
        raise CLIError(f"dataset {path} not found; run `etta gen-data` first")
    m = cfg.model
    return ingest_raw(path, m.image_size, m.channels, m.num_classes)


def _checkpoint(cfg: rc.RunConfig):
    path = Path(cfg.paths.checkpoint)
    if not path.exists():
        raise CLIError(f"checkpoint {path} not found; run `etta pretrain` first")
    return load_checkpoint(path, cfg.model)


# -----------------------------------------------------------------------------
# commands
# -----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    if args.out:
        cfg = replace(cfg, paths=replace(cfg.paths, data_dir=str(Path(args.out).resolve())))
    out = Path(cfg.paths.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    m, d = cfg.model, cfg.data
    sets = {
        "train": (d.train_per_class, TRAIN),
        "test": (d.test_per_class, TEST),
        "source": (-(-d.source_images // m.num_classes), SOURCE),
    }
    for name, (per_class, purpose) in sets.items():
        x, y = gen_dataset(per_class, m.image_size, m.channels, (d.seed, purpose), m.num_classes)
        if name == "source":
            x, y = x[:d.source_images], y[:d.source_images]
        export_dataset(out / f"{name}.etta", x, y, {"seed": d.seed, "set": name})
        print(f"{name}: {len(y)} images -> {out / (name + '.etta')}")
    _write_config(cfg, out, "gen-data")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    if args.out:
        cfg = replace(cfg, paths=replace(cfg.paths, checkpoint=str(Path(args.out).resolve() / "vit.etta")))
    x, y = _dataset(cfg, "train")
    ckpt = Path(cfg.paths.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = ckpt.with_name("train_log.jsonl")
    try:
        res = pretrain(x, y, cfg.model, cfg.train)
    except TrainingDiverged as exc:
        log_path.write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in exc.history))
        raise CLIError(f"pre-training failed: {exc} (log: {log_path})") from None
    xt, yt = _dataset(cfg, "test")
    test_acc = accuracy(res.params, xt, yt)
    res.history.append({"test_accuracy": test_acc})
    log_path.write_text(res.log_lines())
    save_checkpoint(res.params, ckpt)
    _write_config(cfg, ckpt.parent, "pretrain")
    print(f"train accuracy {res.train_accuracy:.4f}, held-out accuracy {test_acc:.4f} -> {ckpt}")
    return 0


def _stat_rs(cfg: rc.RunConfig) -> list[int]:
    return sorted({method_setup(m, cfg.tta, cfg.model.num_layers)[0].r for m in cfg.methods} | {cfg.tta.r})


def cmd_stats(args) -> int:
    cfg = _load(args)
    if args.out:
        cfg = replace(cfg, paths=replace(cfg.paths, stats_dir=str(Path(args.out).resolve())))
    params = _checkpoint(cfg)
    x, _ = _dataset(cfg, "source")
    out = Path(cfg.paths.stats_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in _stat_rs(cfg):
        stats = compute_source_stats(params, x, MergeConfig(r), cfg.tta.batch_size)
        stats.save(_stats_path(out, r))
        print(f"r={r}: statistics of {stats.count} source images -> {_stats_path(out, r)}")
    _write_config(cfg, out, "stats")
    return 0


def _load_stats(cfg: rc.RunConfig, rs) -> dict[int, SourceStats]:
    out = {}
    for r in rs:
        path = _stats_path(cfg.paths.stats_dir, r)
        if not path.exists():
            raise CLIError(
                f"source statistics {path} not found; run `etta stats --config <config>` "
                f"(cmd_stats) to compute them for r={r}")
        stats = SourceStats.load(path)
        if stats.num_layers != cfg.model.num_layers:
            raise CLIError(f"{path}: {stats.num_layers} layers, model has {cfg.model.num_layers}")
        out[r] = stats
    return out


def cmd_adapt(args) -> int:
    cfg = _load(args)
    if args.out:
        cfg = replace(cfg, paths=replace(cfg.paths, out=str(Path(args.out).resolve())))
    params = _checkpoint(cfg)
    stats = _load_stats(cfg, _stat_rs(cfg))
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    m, s = cfg.model, cfg.stream

    if cfg.select_hyperparameters:
        held = heldout_target_set(s.corruptions, s.severity, s.heldout_images, s.seeds[0],
                                  image_size=m.image_size, channels=m.channels, num_classes=m.num_classes)
        best, table = select_hyperparameters(params, stats[cfg.tta.r], held, cfg.tta)
        rows = [{"lr_delta": c.lr_delta, "lr_delta_layers": c.lr_delta_layers, "budget": c.budget, "loss": v}
                for c, v in table]
        chosen = {"lr_delta": best.lr_delta, "lr_delta_layers": best.lr_delta_layers, "budget": best.budget}
        doc = {"grid": rows, "selected": chosen}
        (out / "hparams.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        cfg = replace(cfg, tta=best, select_hyperparameters=False)
        log.info("selected lr_delta=%g lr_delta_layers=%g budget=%d", best.lr_delta, best.lr_delta_layers, best.budget)

    tasks = make_tasks(cfg.methods, s.seeds, s.corruptions, s.severity, s.images, cfg.tta)
    results = run_tasks(tasks, params, stats)
    (out / "metrics.jsonl").write_text(metrics_jsonl(results))
    rows = summary_rows(results, params)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        w.writerows(rows)
    _write_config(cfg, out, "adapt")
    for method in cfg.methods:
        accs = [r["accuracy"] for r in rows if r["method"] == method]
        print(f"{method:>14}: mean accuracy {np.mean(accs):.4f} over {len(accs)} streams")
    return 0


def cmd_flops(args) -> int:
    cfg = _load(args)
    model = VIT_B16 if args.preset == "vit-b16" else cfg.model
    reports = [count_flops(model, r) for r in args.r]
    for rep in reports:
        print(f"r={rep.r}")
        print(rep.table())
    out = Path(args.out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"model": model.to_dict(), "reports": [rep.as_dict() for rep in reports]}
    (out / "flops.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    _write_config(cfg, out, "flops")
    return 0


# -----------------------------------------------------------------------------
# report
# -----------------------------------------------------------------------------


def _read_summaries(run_dirs) -> list[dict]:
    rows = []
    for d in run_dirs:
        path = Path(d) / "summary.csv"
        if not path.exists():
            raise CLIError(f"{path} not found; run `etta adapt` first")
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                row["accuracy"] = float(row["accuracy"])
                row["gflops"] = float(row["gflops"])
                row["mean_entropy"] = float(row["mean_entropy"])
                rows.append(row)
    return rows


def aggregate(rows: list[dict]) -> tuple[list[str], list[str], dict]:
    """Seed-averaged accuracy per (method, corruption)."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    present = {r["corruption"] for r in rows}
    corruptions = [c for c in CORRUPTIONS if c in present]
    cells: dict[tuple[str, str], list] = {}
    for r in rows:
        cells.setdefault((r["method"], r["corruption"]), []).append(r)
    return methods, corruptions, cells


_SHORT = {"gaussian_noise": "gauss", "impulse_noise": "impul", "box_blur": "blur",
          "contrast": "contr", "brightness": "bright", "pixelate": "pixel"}


def report_table(rows: list[dict]) -> str:
    methods, corruptions, cells = aggregate(rows)
    short = {c: _SHORT.get(c, c[:7]) for c in corruptions}
    cats = " ".join(f"{CATEGORY[c]:>7}" for c in corruptions)
    head = " ".join(f"{short[c]:>7}" for c in corruptions)
    lines = [f"{'':<14} {cats}", f"{'method':<14} {head} {'avg':>7} {'GFLOPs':>8}"]
    for m in methods:
        accs = [np.mean([r["accuracy"] for r in cells.get((m, c), [])]) * 100 for c in corruptions]
        gfl = np.mean([r["gflops"] for c in corruptions for r in cells.get((m, c), [])])
        lines.append(f"{m:<14} " + " ".join(f"{a:7.1f}" for a in accs) + f" {np.mean(accs):7.1f} {gfl:8.4f}")
    return "\n".join(lines) + "\n"


def report_rows(rows: list[dict]) -> list[dict]:
    methods, corruptions, cells = aggregate(rows)
    out = []
    for c in corruptions:
        for m in methods:
            cell = cells.get((m, c), [])
            if cell:
                out.append({"corruption": c, "category": CATEGORY[c], "method": m,
                            "accuracy": float(np.mean([r["accuracy"] for r in cell])),
                            "seeds": len(cell), "gflops": float(cell[0]["gflops"])})
    return out


def scatter_points(rows: list[dict]) -> list[dict]:
    methods, corruptions, cells = aggregate(rows)
    pts = []
    for m in methods:
        cell = [r for c in corruptions for r in cells.get((m, c), [])]
        pts.append({"method": m, "gflops": float(np.mean([r["gflops"] for r in cell])),
                    "accuracy": float(np.mean([r["accuracy"] for r in cell]))})
    return pts


def scatter_svg(points: list[dict], width: int = 480, height: int = 320) -> str:
    """Accuracy-vs-GFLOPs scatter as a minimal standalone SVG."""
    pad = 50
    xs = [p["gflops"] for p in points]
    ys = [p["accuracy"] * 100 for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1e-3, x1 + 1e-3
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle">GFLOPs per image</text>',
        f'<text x="14" y="{height / 2}" text-anchor="middle" transform="rotate(-90 14 {height / 2})">accuracy (%)</text>',
        f'<text x="{pad}" y="{height - pad + 14}" text-anchor="middle">{x0:.4g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 14}" text-anchor="middle">{x1:.4g}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end">{y0:.1f}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end">{y1:.1f}</text>',
    ]
    for p, x, y in zip(points, xs, ys):
        parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="4" fill="steelblue"/>')
        parts.append(f'<text x="{sx(x) + 6:.1f}" y="{sy(y) - 6:.1f}">{p["method"]}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_report(args) -> int:
    rows = _read_summaries(args.runs)
    if not rows:
        raise CLIError("no summary rows found")
    table = report_table(rows)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(table)
        (out / "report.csv").write_text(_csv(report_rows(rows)))
        pts = scatter_points(rows)
        (out / "scatter.csv").write_text(_csv(pts))
        (out / "scatter.svg").write_text(scatter_svg(pts))
        (out / "report.config.json").write_text(
            json.dumps({"runs": [str(Path(d).resolve()) for d in args.runs]}, indent=2) + "\n")
    return 0


# -----------------------------------------------------------------------------
# entry point
# -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="etta", description="Efficient test-time adaptation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON run config")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--out", type=Path, help="output directory")
        return sp

    common(sub.add_parser("gen-data", help="generate train/test/source datasets")).set_defaults(fn=cmd_gen_data)
    common(sub.add_parser("pretrain", help="train the source model")).set_defaults(fn=cmd_pretrain)
    common(sub.add_parser("stats", help="compute source feature statistics")).set_defaults(fn=cmd_stats)
    common(sub.add_parser("adapt", help="run test-time adaptation on corrupted streams")).set_defaults(fn=cmd_adapt)
    fl = common(sub.add_parser("flops", help="analytic MAC/FLOP cost"))
    fl.add_argument("--preset", choices=["config", "vit-b16"], default="config")
    fl.add_argument("--r", type=int, nargs="+", default=[0, 4, 8])
    fl.set_defaults(fn=cmd_flops)
    rp = sub.add_parser("report", help="aggregate adapt runs into tables and plots")
    rp.add_argument("runs", nargs="+", type=Path)
    rp.add_argument("--out", type=Path)
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CLIError, ConfigError, FormatError, ScheduleError) as exc:
        print(f"etta {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
