"""Figure rendering from run artifacts and from the CSV files they produce.

All figures are written as vector graphics (PDF). Rendering is strictly a
view on the delimited output: the CSV readers here consume the exact files
the pipeline writes, so plots can be regenerated from a finished run
directory without re-simulating.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .units import SPECIES  # noqa: E402


def read_timeseries_csv(path):
    """Read a header+rows CSV into (column_names, float array)."""
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    return header, np.array(rows)


def read_snapshot_csv(path):
    """Read a dispersion snapshot; returns (meta dict, 2-D array)."""
    with open(path) as fh:
        first = fh.readline().strip().lstrip("# ")
        meta = {}
        for tok in first.split():
            key, val = tok.split("=")
            meta[key] = float(val)
        grid = np.array([[float(v) for v in line.split(",")]
                         for line in fh if line.strip()])
    return meta, grid


def plot_emission_series(csv_path, out_path):
    header, rows = read_timeseries_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(rows[:, 0] / 60.0, rows[:, 1], lw=1.0)
    ax.set_xlabel("time [min]")
    ax.set_ylabel("total NOx emission rate [g/h]")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def plot_traffic_heatmap(csv_path, out_path, column="rho_vehkm"):
    header, rows = read_timeseries_csv(csv_path)
    col = header.index(column)
    times = np.unique(rows[:, 0])
    cells = np.unique(rows[:, 1]).astype(int)
    grid = np.full((times.size, cells.size), np.nan)
    t_idx = {t: i for i, t in enumerate(times)}
    for row in rows:
        grid[t_idx[row[0]], int(row[1])] = row[col]
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(grid, origin="lower", aspect="auto",
                   extent=(0, cells.size, times[0] / 60.0, times[-1] / 60.0))
    ax.set_xlabel("cell index")
    ax.set_ylabel("time [min]")
    fig.colorbar(im, ax=ax, label=column)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def plot_chemistry_totals(csv_path, out_path):
    header, rows = read_timeseries_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for s, name in enumerate(SPECIES):
        if name == "O2":
            continue  # ambient O2 dwarfs everything else
        ax.plot(rows[:, 0] / 60.0, rows[:, 1 + s], lw=1.0, label=name)
    ax.set_xlabel("time [min]")
    ax.set_ylabel("total concentration [g/km$^3$]")
    ax.set_yscale("symlog", linthresh=1.0)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def plot_snapshot(csv_path, out_path, label="O3 [g/km$^3$]"):
    meta, grid = read_snapshot_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(grid, origin="lower", aspect="auto",
                   extent=(0, meta["nx"] * meta["dx_m"],
                           0, meta["ny"] * meta["dy_m"]))
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    fig.colorbar(im, ax=ax, label=label)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def render_run_figures(art, cfg, fig_dir):
    """Render the standard figure set for one pipeline run."""
    os.makedirs(fig_dir, exist_ok=True)
    if "traffic" in art.paths:
        plot_traffic_heatmap(art.paths["traffic"],
                             os.path.join(fig_dir, "traffic_density.pdf"))
    if "emissions" in art.paths:
        plot_emission_series(art.paths["emissions"],
                             os.path.join(fig_dir, "emission_total.pdf"))
    if "chemistry_totals" in art.paths:
        plot_chemistry_totals(art.paths["chemistry_totals"],
                              os.path.join(fig_dir, "chemistry_totals.pdf"))
    if "snapshots" in art.paths:
        snaps = sorted(f for f in os.listdir(art.paths["snapshots"])
                       if f.startswith("o3_"))
        if snaps:
            plot_snapshot(os.path.join(art.paths["snapshots"], snaps[-1]),
                          os.path.join(fig_dir, "dispersion_o3.pdf"))


def plot_sweep(csv_path, out_path, x_label):
    header, rows = read_timeseries_csv(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(rows[:, 0], rows[:, 2], "o-", label="peak")
    ax.plot(rows[:, 0], rows[:, 3], "s-", label="asymptotic mean")
    ax.set_xlabel(x_label)
    ax.set_ylabel("total NOx emission rate [g/h]")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
