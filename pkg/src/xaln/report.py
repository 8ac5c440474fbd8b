"""Figures and CSV tables from training logs and probe results."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .tensorfile import atomic_write_bytes, atomic_write_text  # noqa: E402

LOSS_KEYS = ("loss_total", "loss_gkl", "loss_ntxent")
STYLE = {"figure.dpi": 110, "axes.spines.top": False, "axes.spines.right": False, "axes.grid": True,
         "grid.alpha": 0.3, "font.size": 9, "legend.frameon": False}


def read_metrics(run: Path) -> list[dict]:
    path = run / "metrics.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"no metrics.jsonl in {run}")
    return [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _save(fig, path: Path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return path


def plot_losses(runs: dict[str, list[dict]], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        for ax, key in zip(axes, LOSS_KEYS):
            for name, records in runs.items():
                for split, ls in (("train", "-"), ("validation", "--")):
                    pts = [(r["epoch"], r[key]) for r in records if r["split"] == split]
                    if pts:
                        ax.plot(*zip(*pts), ls, marker=".", label=f"{name} {split}")
            ax.set_title(key.replace("loss_", ""))
            ax.set_xlabel("epoch")
            if key != "loss_ntxent":
                ax.set_yscale("log")
        axes[0].legend(fontsize=7)
        return _save(fig, path)


def plot_probe(results: list[dict], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(results) + 2), 3.2))
        labels = [f"{r['variant']}\n{r['task']}" for r in results]
        ax.bar(range(len(results)), [r["mean"] for r in results], yerr=[r["std"] for r in results],
               color="0.6", edgecolor="0.2", capsize=3)
        for i, r in enumerate(results):
            ax.plot([i] * len(r["per_run_accuracies"]), r["per_run_accuracies"], "k.", ms=3)
        ax.set_xticks(range(len(results)), labels, fontsize=7)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("probe accuracy")
        return _save(fig, path)


def build_report(runs: list[Path], results: list[Path], out: Path) -> list[Path]:
    """Write ``loss_curves.png``/``metrics.csv`` and ``probe_accuracy.png``/``probe_results.csv``."""
    if not runs and not results:
        raise ValueError("nothing to report: pass --runs and/or --results")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if runs:
        logs = {r.name: read_metrics(r) for r in runs}
        rows = [{"run": n, **rec} for n, recs in logs.items() for rec in recs]
        atomic_write_text(out / "metrics.csv", _csv(rows, ["run", "epoch", "split", *LOSS_KEYS]))
        written += [out / "metrics.csv", plot_losses(logs, out / "loss_curves.png")]
    if results:
        res = [json.loads(p.read_text(encoding="utf-8")) for p in results]
        rows = [{**r, "runs": len(r["per_run_accuracies"])} for r in res]
        atomic_write_text(out / "probe_results.csv",
                          _csv(rows, ["task", "variant", "protocol", "mean", "std", "runs", "config_digest"]))
        written += [out / "probe_results.csv", plot_probe(res, out / "probe_accuracy.png")]
    return written
