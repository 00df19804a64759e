"""SVG summary figures for runs.  CSV files are the primary outputs; these
plots are a convenience and callers treat any failure here as a warning."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "pmpfold",
    "svg.fonttype": "none",
}


def figure_size(scale=1.0):
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    width = 6.0 * scale
    return width, width * golden


def _save(fig, path):
    # no timestamp in metadata so identical runs give identical files
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _running_mean(values, window):
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        return values
    window = max(1, min(window, len(values)))
    kernel = np.ones(window) / window
    padded = np.concatenate([np.full(window - 1, values[0]), values])
    return np.convolve(padded, kernel, mode="valid")


def plot_energy_change(episodes, path, title="Change in energy, initial to final (evaluation)"):
    delta = [ep.delta_E for ep in episodes]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size())
        ax.bar(np.arange(len(delta)), delta, color="tab:blue", alpha=0.6, label="episode")
        if delta:
            ax.axhline(np.nanmean(delta), color="k", lw=1.2, ls="--",
                       label=f"mean {np.nanmean(delta):.3g}")
        ax.axhline(0.0, color="0.6", lw=0.8)
        ax.set_xlabel("evaluation episode")
        ax.set_ylabel(r"$E_{final} - E_{initial}$")
        ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)


def plot_cumulative_reward(episodes, path, title="Cumulative reward (evaluation)"):
    rewards = [ep.cumulative_reward for ep in episodes]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size())
        ax.plot(np.arange(len(rewards)), rewards, "o-", ms=3, lw=1)
        if rewards:
            ax.axhline(np.nanmean(rewards), color="k", lw=1.2, ls="--",
                       label=f"mean {np.nanmean(rewards):.3g}")
            ax.legend(frameon=False)
        ax.set_xlabel("evaluation episode")
        ax.set_ylabel("cumulative reward")
        ax.set_title(title)
        _save(fig, path)


def plot_training_energy(log_rows, path, title="Change in energy during training"):
    delta = [row["delta_E"] for row in log_rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size())
        x = np.arange(len(delta))
        ax.plot(x, delta, ".", ms=3, alpha=0.5, label="episode")
        ax.plot(x, _running_mean(delta, 10), lw=1.5, label="running mean (10)")
        ax.axhline(0.0, color="0.6", lw=0.8)
        ax.set_xlabel("training episode")
        ax.set_ylabel(r"$\Delta E$")
        ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)


def plot_trajectory(traj, path, title="Trajectory"):
    t = [st.t for st in traj.states]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size())
        ax.plot(t, traj.potential, lw=1.2, label="U")
        ax.plot(t, traj.hamiltonian, lw=1.0, ls="--", label=r"$H = |a|^2/2 + U$")
        ax.set_xlabel("t")
        ax.set_ylabel("energy")
        ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)
