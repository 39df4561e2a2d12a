"""Implementations of the pretrain / adapt / report / ablate / sweep commands."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import engine, segnet
from ..bench.metrics import ConfusionMatrix
from ..bench.stream import StreamManifest, make_stream
from ..errors import ConfigError, ContractError, LoadError
from ..segnet import Model
from ..training import evaluate_clean, pretrain
from . import checkpoint
from .config import Config, from_dict
from .fileio import atomic_write_text, read_json, write_json

log = logging.getLogger(__name__)

CSV_SCHEMA = 1
CSV_HEADER = ("run_id,method,round,domain,frame,miou_running,acc_running,loss,"
              "g_h_count,g_l_count,dsp_count,trp_count,seconds")
KNOWN_HEADERS = {CSV_HEADER: CSV_SCHEMA}
# Config sections that define the evaluation protocol; runs compared in one
# table must agree on all of them.
PROTOCOL_KEYS = ("model", "scene", "stream")


@dataclass
class RunResult:
    run_id: str
    method: str
    domains: tuple[str, ...]
    rounds: int
    cells: dict[tuple[int, str], tuple[float, float]]   # (round, domain) -> (mIoU, acc)
    manifest_sha256: str = ""
    rows: list[dict] = field(default_factory=list, repr=False)
    skipped: int = 0
    seconds: float = 0.0

    @property
    def mean_miou(self) -> float:
        return float(np.mean([m for m, _ in self.cells.values()]))

    @property
    def mean_acc(self) -> float:
        return float(np.mean([a for _, a in self.cells.values()]))

    def round_mean(self, r: int) -> float:
        return float(np.mean([self.cells[(r, d)][0] for d in self.domains]))

    def summary(self) -> dict:
        return {
            "run_id": self.run_id,
            "method": self.method,
            "domains": list(self.domains),
            "rounds": self.rounds,
            "cells": [{"round": r, "domain": d, "miou": m, "acc": a} for (r, d), (m, a) in self.cells.items()],
            "mean_miou": self.mean_miou,
            "mean_acc": self.mean_acc,
            "manifest_sha256": self.manifest_sha256,
            "skipped_frames": self.skipped,
        }


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_source(cfg: Config, path) -> Model:
    model = segnet.build_model(cfg.model)
    return checkpoint.load_into(model, checkpoint.load(path), str(path))


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.6f}"


def run_adapt(cfg: Config, source: Model, on_frame=None) -> tuple[RunResult, engine.AdaptState]:
    """Run the configured method over the configured stream.

    Rounds in the result and the CSV rows are 1-based. ``miou_running`` and
    ``acc_running`` are cumulative within the current (round, domain) cell.
    """
    cfg.validate()
    method = cfg.adapt.method
    ecfg = cfg.engine()
    run_id = cfg.run.run_id or f"{method}-s{cfg.run.seed}"
    manifest = make_stream(cfg.stream, cfg.scene, cfg.run.seed)
    state = engine.init_state(source, cfg.adapt, cfg.run.seed)
    cells: dict[tuple[int, str], ConfusionMatrix] = {}
    rows, skipped, total = [], 0, 0.0
    for sample in manifest:
        report, state = engine.step(state, sample, ecfg)
        key = (sample.round + 1, sample.domain)
        cm = cells.setdefault(key, ConfusionMatrix(cfg.model.num_classes))
        if not report.skipped:
            cm.update(report.prediction, sample.label)
        skipped += report.skipped
        total += report.seconds
        row = {
            "run_id": run_id, "method": method, "round": key[0], "domain": sample.domain,
            "frame": sample.frame, "miou_running": cm.miou(), "acc_running": cm.pixel_acc(),
            "loss": report.loss, "g_h_count": report.g_h_count, "g_l_count": report.g_l_count,
            "dsp_count": report.dsp_count, "trp_count": report.trp_count,
            "seconds": report.seconds if cfg.run.timing else 0.0,
        }
        rows.append(row)
        if on_frame is not None:
            on_frame(sample, report, state)
        if sample.frame == len(manifest) - 1 or manifest.records[sample.frame + 1].boundary:
            log.info("%s round %d %-5s mIoU %.4f", run_id, key[0], sample.domain, cm.miou())
    result = RunResult(run_id, method, tuple(cfg.stream.domains), cfg.stream.rounds,
                       {k: (cm.miou(), cm.pixel_acc()) for k, cm in cells.items()},
                       manifest.digest(), rows, skipped, total)
    return result, state


def render_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for r in rows:
        buf.write(",".join([
            r["run_id"], r["method"], str(r["round"]), r["domain"], str(r["frame"]),
            _fmt(r["miou_running"]), _fmt(r["acc_running"]), _fmt(r["loss"]),
            str(r["g_h_count"]), str(r["g_l_count"]), str(r["dsp_count"]), str(r["trp_count"]),
            "0" if r["seconds"] == 0 else f"{r['seconds']:.4f}",
        ]) + "\n")
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise LoadError(f"{path}: cannot read metrics CSV: {exc}") from exc
    header = text.split("\n", 1)[0].rstrip("\r")
    if header not in KNOWN_HEADERS:
        raise LoadError(f"{path}: unknown metrics CSV schema (header {header!r})")
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        try:
            rows.append({
                "run_id": rec["run_id"], "method": rec["method"], "round": int(rec["round"]),
                "domain": rec["domain"], "frame": int(rec["frame"]),
                "miou_running": float(rec["miou_running"]), "acc_running": float(rec["acc_running"]),
                "loss": float(rec["loss"]), "g_h_count": int(rec["g_h_count"]),
                "g_l_count": int(rec["g_l_count"]), "dsp_count": int(rec["dsp_count"]),
                "trp_count": int(rec["trp_count"]), "seconds": float(rec["seconds"]),
            })
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"{path}: malformed row {rec!r}: {exc}") from exc
    return rows


def result_from_rows(rows: list[dict]) -> RunResult:
    """Per-cell metrics are the last running values of each (round, domain) cell."""
    if not rows:
        raise LoadError("metrics CSV has no rows")
    cells, domains = {}, []
    for r in rows:
        cells[(r["round"], r["domain"])] = (r["miou_running"], r["acc_running"])
        if r["domain"] not in domains:
            domains.append(r["domain"])
    rounds = max(r for r, _ in cells)
    return RunResult(rows[0]["run_id"], rows[0]["method"], tuple(domains), rounds, cells)


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg: Config, out: Path) -> dict:
    cfg.validate()
    out = Path(out)
    model = segnet.build_model(cfg.model)
    steps = []
    history = pretrain(model, cfg.scene, cfg.pretrain, cfg.run.seed,
                       on_step=lambda e, s, loss: steps.append((e, s, loss)))
    cm = evaluate_clean(model, cfg.scene, cfg.pretrain.heldout_scenes, cfg.run.seed)
    ckpt = checkpoint.save_model(out / "source.datc", model)
    atomic_write_text(out / "pretrain_loss.csv",
                      "epoch,step,loss\n" + "".join(f"{e},{s},{_fmt(l)}\n" for e, s, l in steps))
    info = {
        "heldout_miou": cm.miou(),
        "heldout_acc": cm.pixel_acc(),
        "heldout_per_class_iou": [None if not np.isfinite(x) else float(x) for x in cm.per_class_iou()],
        "epoch_loss": [h.loss for h in history],
        "checkpoint": str(ckpt),
        "checkpoint_sha256": file_sha256(ckpt),
        "config": cfg.to_dict(),
    }
    write_json(out / "pretrain.json", info)
    return info


def write_run(out: Path, cfg: Config, result: RunResult, final: Model, source_path) -> dict:
    out = Path(out)
    atomic_write_text(out / "metrics.csv", render_csv(result.rows))
    checkpoint.save_model(out / "final.datc", final)
    info = result.summary()
    info.update({"csv_schema": CSV_SCHEMA, "config": cfg.to_dict(),
                 "source_checkpoint_sha256": file_sha256(source_path)})
    write_json(out / "run.json", info)
    return info


def cmd_adapt(cfg: Config, source_path, out: Path) -> RunResult:
    source = load_source(cfg, source_path)
    result, state = run_adapt(cfg, source)
    write_run(out, cfg, result, engine.evaluation_model(state, cfg.adapt.method), source_path)
    return result


def _run_variant(args) -> dict:
    cfg_dict, source_path, out = args
    cfg = from_dict(cfg_dict)
    result = cmd_adapt(cfg, source_path, Path(out))
    info = result.summary()
    info["round_means"] = [result.round_mean(r) for r in range(1, result.rounds + 1)]
    return info


def run_variants(variants: dict[str, Config], source_path, out: Path, workers: int = 0) -> dict[str, dict]:
    """Independent seeded runs, one output directory each, optionally in parallel.

    Variants with identical resolved configs (ignoring the run id) run once
    and share the result.
    """
    out = Path(out)
    unique: dict[str, tuple[str, Config]] = {}
    alias: dict[str, str] = {}
    for name, cfg in variants.items():
        cfg.validate()
        key = repr(replace(cfg, run=replace(cfg.run, run_id="", workers=0)))
        if key not in unique:
            unique[key] = (name, replace(cfg, run=replace(cfg.run, run_id=name)))
        alias[name] = unique[key][0]
    jobs = [(cfg.to_dict(), str(source_path), str(out / name)) for name, cfg in unique.values()]
    workers = workers or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_variant, jobs))
    else:
        results = [_run_variant(j) for j in jobs]
    by_name = {name: res for (name, _), res in zip(unique.values(), results)}
    return {name: by_name[alias[name]] for name in variants}


def table3_variants(cfg: Config) -> dict[str, Config]:
    dat = replace(cfg.adapt, method="dat")
    return {
        f"ex_{g}": replace(cfg, adapt=dat, pau=replace(cfg.pau, groups_enabled=g))
        for g in ("none", "dsp", "trp", "both")
    }


def table4_variants(cfg: Config) -> dict[str, Config]:
    dat = replace(cfg.adapt, method="dat")
    # Without accumulation the whole budget is selected on the first frame of a domain.
    no_pau = replace(cfg.pau, accumulation_frames=1, rho=cfg.pau.global_budget_cap)
    out = {}
    for mode, part_mode in (("uncertainty", cfg.partition.mode if cfg.partition.mode != "confidence" else "quantile"),
                            ("confidence", "confidence")):
        part = replace(cfg.partition, mode=part_mode)
        out[f"{mode}_pau"] = replace(cfg, adapt=dat, partition=part)
        out[f"{mode}_no_pau"] = replace(cfg, adapt=dat, partition=part, pau=no_pau)
    return out


def cmd_ablate(cfg: Config, source_path, out: Path) -> dict:
    cfg.validate()
    out = Path(out)
    t3, t4 = table3_variants(cfg), table4_variants(cfg)
    variants = {"source": replace(cfg, adapt=replace(cfg.adapt, method="source")), **t3, **t4}
    res = run_variants(variants, source_path, out / "runs", cfg.run.workers)
    source_mean = res["source"]["mean_miou"]
    lines3 = ["| Exp | DSP | TRP | mIoU | Gain |", "|---|---|---|---|---|",
              f"| source | - | - | {100 * source_mean:.1f} | 0.0 |"]
    for name in t3:
        g = name[3:]
        m = res[name]["mean_miou"]
        lines3.append(f"| {name} | {'x' if g in ('dsp', 'both') else ''} | {'x' if g in ('trp', 'both') else ''} "
                      f"| {100 * m:.1f} | {100 * (m - source_mean):+.1f} |")
    lines4 = ["| Selection | PAU | mIoU | Gain |", "|---|---|---|---|"]
    for name in t4:
        mode, pau = name.split("_", 1)
        m = res[name]["mean_miou"]
        lines4.append(f"| {mode} | {'w/' if pau == 'pau' else 'w/o'} | {100 * m:.1f} | {100 * (m - source_mean):+.1f} |")
    atomic_write_text(out / "table3.md", "\n".join(lines3) + "\n")
    atomic_write_text(out / "table4.md", "\n".join(lines4) + "\n")
    summary = {"source": res["source"], "table3": {k: res[k] for k in t3}, "table4": {k: res[k] for k in t4}}
    write_json(out / "ablate.json", summary)
    return summary


def sweep_config(cfg: Config, budget: float) -> Config:
    """Total budget b: global cap b, per-frame rate b / N_acc."""
    n = cfg.pau.accumulation_frames
    pau = replace(cfg.pau, global_budget_cap=budget, rho=budget / n)
    return replace(cfg, adapt=replace(cfg.adapt, method="dat"), pau=pau)


def cmd_sweep(cfg: Config, source_path, out: Path, budgets=None) -> list[tuple[float, float]]:
    cfg.validate()
    budgets = tuple(budgets if budgets is not None else cfg.sweep.budgets)
    for b in budgets:
        if not 0.0 <= b <= 0.5:
            raise ConfigError(f"sweep budgets must lie in [0, 0.5], got {b}")
    out = Path(out)
    variants = {f"budget_{b:g}": sweep_config(cfg, b) for b in budgets}
    res = run_variants(variants, source_path, out / "runs", cfg.run.workers)
    rows = [(b, res[f"budget_{b:g}"]["mean_miou"]) for b in budgets]
    atomic_write_text(out / "sweep.csv", "budget,mean_miou\n" + "".join(f"{b:g},{_fmt(m)}\n" for b, m in rows))
    best = max(range(len(rows)), key=lambda i: rows[i][1])
    interior = 0 < best < len(rows) - 1
    write_json(out / "sweep.json", {"rows": [{"budget": b, "mean_miou": m} for b, m in rows],
                                    "peak_budget": rows[best][0], "interior_peak": interior})
    return rows


# ---------------------------------------------------------------------------
# reporting


@dataclass
class ReportRow:
    label: str
    result: RunResult
    gain: float | None = None


def _protocol(info: dict) -> tuple:
    cfg = info.get("config", {})
    return (tuple(repr(cfg.get(k)) for k in PROTOCOL_KEYS), cfg.get("run", {}).get("seed"),
            info.get("manifest_sha256"), info.get("source_checkpoint_sha256"))


def _locate(path: Path) -> tuple[Path, Path | None]:
    if path.is_dir():
        return path / "metrics.csv", path / "run.json"
    meta = path.with_name("run.json")
    return path, meta if meta.exists() else None


def collect_runs(paths) -> list[ReportRow]:
    rows, protocol, labels = [], None, set()
    for p in map(Path, paths):
        csv_path, meta_path = _locate(p)
        result = result_from_rows(read_metrics_csv(csv_path))
        if meta_path is not None and meta_path.exists():
            info = read_json(meta_path)
            if info.get("csv_schema") != CSV_SCHEMA:
                raise LoadError(f"{meta_path}: unknown csv_schema {info.get('csv_schema')!r}")
            proto = _protocol(info)
            if protocol is None:
                protocol = proto
            elif proto != protocol:
                raise ContractError(f"{meta_path}: run uses a different protocol (model/scene/stream config, "
                                    f"seed, stream or source checkpoint) than the other runs; refusing to mix")
        else:
            log.warning("%s: no run.json beside the CSV; protocol consistency not checked", csv_path)
        label = result.run_id
        if label in labels:
            raise ContractError(f"{csv_path}: run id {label!r} appears more than once")
        labels.add(label)
        rows.append(ReportRow(label, result))
    if rows:
        shape = (rows[0].result.domains, rows[0].result.rounds)
        for r in rows[1:]:
            if (r.result.domains, r.result.rounds) != shape:
                raise ContractError(f"run {r.label!r} has a different (round x domain) grid; refusing to mix")
    return rows


def build_report(rows: list[ReportRow]) -> tuple[list[ReportRow], float | None]:
    source = next((r for r in rows if r.result.method == "source"), None)
    if source is None:
        log.warning("no source run among the inputs; Gain column omitted")
        return rows, None
    for r in rows:
        r.gain = r.result.mean_miou - source.result.mean_miou
    return rows, source.result.mean_miou


def render_table(rows: list[ReportRow]) -> str:
    """Methods as rows; round-major (round, domain) columns, then Mean and Gain, in percent."""
    if not rows:
        return ""
    first = rows[0].result
    with_gain = any(r.gain is not None for r in rows)
    width = max(8, max(len(r.label) for r in rows))
    n = len(first.domains)
    head1 = f"{'':<{width}} | " + " | ".join(f"{'Round ' + str(r):<{6 * n - 1}}" for r in range(1, first.rounds + 1))
    head2 = f"{'Method':<{width}} | " + " | ".join(" ".join(f"{d[:5]:>5}" for d in first.domains)
                                                 for _ in range(first.rounds))
    head2 += " |  Mean" + (" |  Gain" if with_gain else "")
    lines = [head1, head2, "-" * len(head2)]
    for row in rows:
        vals = " | ".join(" ".join(f"{100 * row.result.cells[(r, d)][0]:5.1f}" for d in first.domains)
                          for r in range(1, first.rounds + 1))
        line = f"{row.label:<{width}} | {vals} | {100 * row.result.mean_miou:5.1f}"
        if with_gain:
            line += f" | {100 * row.gain:+5.1f}" if row.gain is not None else " |     -"
        lines.append(line)
    return "\n".join(lines) + "\n"


def cmd_report(paths, out: Path | None = None) -> tuple[str, list[ReportRow]]:
    rows, _ = build_report(collect_runs(paths))
    text = render_table(rows)
    if out is not None:
        out = Path(out)
        atomic_write_text(out / "report.txt", text)
        write_json(out / "report.json", {"rows": [
            {"label": r.label, "method": r.result.method, "mean_miou": r.result.mean_miou,
             "gain": r.gain, "cells": r.result.summary()["cells"]} for r in rows]})
    return text, rows
