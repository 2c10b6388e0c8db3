"""Result emission: text tables, delimited files, and rendered figures.

Every report path writes the machine-readable artifact (CSV/JSON) and a
matplotlib PNG next to it; the text table goes to stdout and disk.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import Histogram  # noqa: E402

GAME_LEVELS = (0, 1, 2, 3)


def _fmt(v) -> str:
    if v is None:
        return "-"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def format_table(headers, rows) -> str:
    cells = [[_fmt(c) for c in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    out = [line, "-" * len(line)]
    for row in cells:
        out.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(out)


def write_csv(path, headers, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(headers)
        for row in rows:
            writer.writerow(["" if c is None else (f"{c:.6f}" if isinstance(c, float) else c)
                             for c in row])


def metrics_rows(result) -> list:
    """metric,level,value rows for one evaluation."""
    rows = [["game", l, result.games.get(l)] for l in GAME_LEVELS]
    rows.append(["rmse", "", result.rmse])
    return rows


def eval_table(result) -> str:
    return format_table(["metric", "level", "value"], metrics_rows(result))


def ablation_rows(rows) -> list:
    out = []
    for row in rows:
        r = row.result
        out.append([row.name] + [r.games.get(l) for l in GAME_LEVELS]
                   + [r.rmse, row.param_count])
    return out


ABLATION_HEADERS = ["variant", "game0", "game1", "game2", "game3", "rmse", "params"]


def histogram_text(hist: Histogram, width=40) -> str:
    lines = []
    top = max(hist.percentages) if hist.counts else 1.0
    for i, pct in enumerate(hist.percentages):
        lo = i * hist.bin_width
        bar = "#" * int(round(width * pct / top)) if top else ""
        lines.append(f"[{lo:5.2f},{lo + hist.bin_width:5.2f})  {pct:6.2f}%  {bar}")
    return "\n".join(lines)


# -- figures -----------------------------------------------------------------

def save_training_curves(path, history):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    epochs = [h.epoch for h in history]
    ax1.plot(epochs, [h.l_bl for h in history], label="counting loss")
    ax1.plot(epochs, [h.l_cl for h in history], label="consistency loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss / sample")
    ax1.legend()
    ax2.plot(epochs, [h.val_game0 for h in history], label="val GAME(0)")
    ax2.plot(epochs, [h.val_rmse for h in history], label="val RMSE")
    ax2.set_xlabel("epoch")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_chart(path, rows):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    names = [r.name for r in rows]
    game0 = [r.result.games.get(0) for r in rows]
    rmse_v = [r.result.rmse for r in rows]
    x = range(len(names))
    ax.bar([i - 0.2 for i in x], game0, width=0.4, label="GAME(0)")
    ax.bar([i + 0.2 for i in x], rmse_v, width=0.4, label="RMSE")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("test error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_alignment_figure(path, probe):
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2), sharey=True)
    for ax, hist, title in ((axes[0], probe.hist_rgb, "RGB vs pseudo-RGB"),
                            (axes[1], probe.hist_thermal, "thermal vs pseudo-thermal")):
        centers = [(i + 0.5) * hist.bin_width for i in range(len(hist.counts))]
        ax.bar(centers, hist.percentages, width=hist.bin_width * 0.9)
        ax.set_title(title)
        ax.set_xlabel("relative L1 distance")
    axes[0].set_ylabel("% of samples")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_density_figure(path, density, count):
    fig, ax = plt.subplots(figsize=(4, 3.6))
    im = ax.imshow(density, cmap="inferno")
    ax.set_title(f"predicted count: {count:.2f}")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
