"""Static plots from report tables (no interactive UI).

Each plotting function returns the created figures so tests can assert on
bar heights before anything is rasterized.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataFormatError  # noqa: E402


def _read_tsv(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError(f"empty report table {path}")
    header = lines[0].split("\t")
    rows = [ln.split("\t") for ln in lines[1:]]
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}: line {i} has {len(row)} fields, "
                                  f"expected {len(header)}")
    return header, rows


def plot_eval(path):
    """Grouped success/precision bars per category."""
    header, rows = _read_tsv(path)
    cats = [r[0] for r in rows]
    succ = [float(r[2]) for r in rows]
    prec = [float(r[3]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    x = range(len(cats))
    ax.bar([i - 0.2 for i in x], succ, width=0.4, label="success")
    ax.bar([i + 0.2 for i in x], prec, width=0.4, label="precision")
    ax.set_xticks(list(x), cats, rotation=20)
    ax.set_ylabel("percent")
    ax.legend()
    fig.tight_layout()
    return fig


def plot_compare(path):
    """Mean recall per strategy."""
    header, rows = _read_tsv(path)
    by_strategy: dict[str, list] = {}
    for row in rows:
        by_strategy.setdefault(row[0], []).append(float(row[2]))
    strategies = sorted(by_strategy)
    means = [sum(v) / len(v) for v in (by_strategy[s] for s in strategies)]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(strategies, means)
    ax.set_ylabel("mean recall after sampling")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    return fig


def plot_train(path):
    """Loss curve (total plus the classification term) over epochs."""
    records = [json.loads(ln) for ln in Path(path).read_text().splitlines()
               if ln.strip()]
    if not records:
        raise DataFormatError(f"empty train report {path}")
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["loss_total"] for r in records], label="total")
    ax.plot(epochs, [r["loss_cls"] for r in records], label="cls")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    return fig


def plot_report(path, kind: str, out_dir) -> list:
    out_dir = Path(out_dir)
    fig = {"eval": plot_eval, "compare": plot_compare, "train": plot_train}[kind](path)
    target = out_dir / f"{kind}.png"
    fig.savefig(target, dpi=120)
    plt.close(fig)
    return [target]
