#!/usr/bin/env python3
"""Render the plot_*.csv panels written by `sparse-meanrev backtest` and `sweep`.

usage: plot.py OUTPUT_DIR [--save DIR]
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def read(path):
    return pd.read_csv(path, comment="#")


def series_panel(ax, df, ylabel):
    x = "date" if df["date"].notna().all() else "t"
    if x == "date":
        df = df.assign(date=pd.to_datetime(df["date"]))
    for method, part in df.groupby("method"):
        ax.plot(part[x], part["value"], label=method, linewidth=0.8)
    ax.set_ylabel(ylabel)
    ax.legend()


def sharpe_panel(ax, df):
    for (method, proxy), part in df.groupby(["method", "proxy"]):
        best = part.groupby("k")["sharpe"].max()
        ax.plot(best.index, best.values, marker="o", label=f"{method} / {proxy}")
    ax.set_xlabel("k")
    ax.set_ylabel("Sharpe ratio")
    ax.legend()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("output_dir", type=Path)
    ap.add_argument("--save", type=Path, help="write PNGs here instead of showing")
    args = ap.parse_args()

    panels = []
    for name, ylabel in [("plot_spread.csv", "spread"), ("plot_cum_pnl.csv", "cumulative P&L")]:
        path = args.output_dir / name
        if path.exists():
            panels.append((name, lambda ax, p=path, y=ylabel: series_panel(ax, read(p), y)))
    path = args.output_dir / "plot_sharpe_by_k.csv"
    if path.exists():
        panels.append((path.name, lambda ax, p=path: sharpe_panel(ax, read(p).dropna(subset=["sharpe"]))))
    if not panels:
        raise SystemExit(f"no plot_*.csv files in {args.output_dir}")

    for name, draw in panels:
        fig, ax = plt.subplots(figsize=(9, 4))
        draw(ax)
        fig.tight_layout()
        if args.save:
            args.save.mkdir(parents=True, exist_ok=True)
            fig.savefig(args.save / (Path(name).stem + ".png"), dpi=120)
        plt.close(fig)
    if not args.save:
        print("pass --save DIR to write PNGs")


if __name__ == "__main__":
    main()
