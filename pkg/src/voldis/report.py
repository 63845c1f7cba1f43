"""Run summaries: a text digest of ``metrics.csv`` plus loss and PSNR curves."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import InputError  # noqa: E402


def read_rows(path: Path) -> tuple[list[str], list[dict[str, float]]]:
    if not path.is_file():
        raise InputError(f"metrics file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if "iter" not in header or "loss" not in header:
            raise InputError(f"{path}: header must include iter and loss, got {','.join(header)}")
        try:
            rows = [{k: float(v) for k, v in r.items()} for r in reader]
        except (TypeError, ValueError) as exc:
            raise InputError(f"{path}: non-numeric metrics row ({exc})") from exc
    return header, rows


def _plot(rows, key: str, path: Path, log_y: bool) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    ax.plot([r["iter"] for r in rows], [r[key] for r in rows], marker=".")
    ax.set_xlabel("iteration")
    ax.set_ylabel(key)
    if log_y and all(r[key] > 0 for r in rows):
        ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_report(run_dir: Path) -> str:
    """Write ``report/summary.txt`` and curve PNGs; return the summary text."""
    header, rows = read_rows(Path(run_dir) / "metrics.csv")
    out = Path(run_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"run: {run_dir}"]
    if not rows:
        lines.append("no iterations recorded")
    else:
        last = rows[-1]
        lines.append(f"iterations: {int(last['iter'])}")
        lines.append(f"final loss: {last['loss']!r}")
        if "lr" in last:
            lines.append(f"final lr: {last['lr']!r}")
        if "psnr" in last:
            lines.append(f"final psnr: {last['psnr']!r}")
            finite = [r["psnr"] for r in rows if math.isfinite(r["psnr"])]
            if finite:
                lines.append(f"best psnr: {max(finite)!r}")
        _plot(rows, "loss", out / "loss.png", log_y=True)
        if "psnr" in header:
            _plot(rows, "psnr", out / "psnr.png", log_y=False)
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text, encoding="utf-8")
    return text
