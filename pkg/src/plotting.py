import json
import os
from typing import Any, Dict, Optional
import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from src.empirical_bayes import Posterior
from src.engines import FdrCurve
from src.laser import LaserSample
from src.relevance import RelevanceBands
from src.utils import provenance
from src.logger import get_logger

# Configure logging
logger = get_logger(__name__)

# fixed salt keeps SVG element ids identical across runs
plt.rcParams.update({"font.size": 9, "axes.labelsize": 9, "legend.fontsize": 8, "savefig.bbox": "tight",
                     "svg.hashsalt": "laser-relevance"})


def _save(fig, path: str, config: Dict[str, Any]) -> str:
    """Write an SVG without a timestamp, carrying seed and config hash in its description."""
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    description = json.dumps(provenance(config), sort_keys=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Description": description})
    plt.close(fig)
    logger.info({"message": f"Plot saved to {path}"})
    return path


def plot_relevance(bands: RelevanceBands, path: str, config: Dict[str, Any], title: Optional[str] = None) -> str:
    """d_x(u) with its bootstrap band and the uniform reference line."""
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.fill_between(bands.u, bands.lower, bands.upper, color="0.85", label="95% band")
    ax.plot(bands.u, bands.estimate, color="C3", lw=1.5, label="d(u)")
    ax.axhline(1.0, color="0.4", ls="--", lw=0.8)
    ax.set_xlabel("u")
    ax.set_ylabel("relevance density")
    ax.set_title(title or f"x = {bands.x0.tolist()}")
    ax.legend(frameon=False)
    return _save(fig, path, config)


def plot_fdr_curves(curves: Dict[str, FdrCurve], path: str, config: Dict[str, Any],
                    threshold: Optional[float] = None) -> str:
    """Overlay of named fdr curves, e.g. global against customized."""
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for i, (name, curve) in enumerate(curves.items()):
        ax.plot(curve.z, curve.fdr, color=f"C{i}", lw=1.5, label=name)
    if threshold is not None:
        ax.axhline(threshold, color="0.4", ls="--", lw=0.8)
    ax.set_xlabel("z")
    ax.set_ylabel("fdr")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False)
    return _save(fig, path, config)


def plot_laser(sample: LaserSample, z: np.ndarray, path: str, config: Dict[str, Any]) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    bins = np.histogram_bin_edges(z, bins=60)
    ax.hist(z, bins=bins, density=True, color="0.8", label="all scores")
    ax.hist(sample.samples, bins=bins, density=True, histtype="step", color="C0", lw=1.5, label="LASER")
    ax.set_xlabel("z")
    ax.legend(frameon=False)
    return _save(fig, path, config)


def plot_posterior(post: Posterior, path: str, config: Dict[str, Any],
                   prior_weights: Optional[np.ndarray] = None) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    if prior_weights is not None:
        ax.plot(post.grid, prior_weights, color="0.5", lw=1, label="prior")
    ax.plot(post.grid, post.mass, color="C1", lw=1.5, label="posterior")
    ax.axvspan(post.lower, post.upper, color="C1", alpha=0.15, label=f"{100 * (1 - post.alpha):.0f}% HPD")
    ax.axvline(post.mean, color="C1", ls="--", lw=0.8)
    ax.set_xlabel("theta")
    ax.set_ylabel("mass")
    ax.legend(frameon=False)
    return _save(fig, path, config)


def plot_dps(dps: np.ndarray, path: str, config: Dict[str, Any], threshold: Optional[float] = None,
             top: int = 100) -> str:
    """DPS-sorted case list (largest first)."""
    values = np.sort(np.asarray(dps))[::-1][:top]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(np.arange(1, values.size + 1), values, "o", ms=2.5, color="C2")
    if threshold is not None:
        ax.axhline(-np.log10(threshold), color="0.4", ls="--", lw=0.8)
    ax.set_xlabel("rank")
    ax.set_ylabel("DPS")
    return _save(fig, path, config)
