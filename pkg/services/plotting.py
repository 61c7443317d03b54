"""
Figures
Static renderings of the loss log, embedding exports (2-D t-SNE), DS-feature
intensity histograms and iteration-sweep curves.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from sklearn.manifold import TSNE  # noqa: E402

from config.exceptions import ValidationError  # noqa: E402
from services.run_records import read_loss_log  # noqa: E402

logger = logging.getLogger(__name__)


def plot_loss_log(log_path: Union[str, Path], out_dir: Union[str, Path]) -> Path:
    """One panel per loss component, averaged per epoch."""
    records = read_loss_log(log_path)
    if not records:
        raise ValidationError(f"{log_path} holds no loss records")
    rows = [{"epoch": r["epoch"], **r["losses"]} for r in records]
    frame = pd.DataFrame(rows).groupby("epoch").mean()

    components = list(frame.columns)
    fig, axes = plt.subplots(len(components), 1, figsize=(7, 2.2 * len(components)), sharex=True, squeeze=False)
    for ax, name in zip(axes[:, 0], components):
        ax.plot(frame.index, frame[name], marker="o", markersize=3)
        ax.set_ylabel(name)
        ax.grid(True, linestyle="--", alpha=0.6)
    axes[-1, 0].set_xlabel("epoch")
    fig.tight_layout()
    return _save(fig, Path(out_dir) / "losses.png")


def embed_2d(values: np.ndarray, seed: int = 0) -> np.ndarray:
    """t-SNE projection; perplexity shrinks for small exports."""
    perplexity = float(min(30, max(2, (len(values) - 1) // 3)))
    tsne = TSNE(n_components=2, perplexity=perplexity, random_state=seed, init="pca", learning_rate="auto")
    return tsne.fit_transform(values)


def plot_embeddings(csv_path: Union[str, Path], out_dir: Union[str, Path], seed: int = 0) -> List[Path]:
    """One scatter per branch: natural vs adversarial points, coloured by label."""
    table = pd.read_csv(csv_path)
    dim_columns = [c for c in table.columns if c.startswith("dim_")]
    if not dim_columns:
        raise ValidationError(f"{csv_path} has no dim_* columns")
    written = []
    for branch, part in table.groupby("branch", sort=False):
        if len(part) < 4:
            logger.warning(f"Skipping t-SNE for branch {branch}: only {len(part)} rows")
            continue
        points = embed_2d(part[dim_columns].to_numpy(), seed)
        fig, ax = plt.subplots(figsize=(7, 6))
        for domain, marker in (("nat", "o"), ("adv", "x")):
            mask = (part["domain"] == domain).to_numpy()
            if mask.any():
                ax.scatter(points[mask, 0], points[mask, 1], c=part["label"].to_numpy()[mask], cmap="tab10",
                           marker=marker, s=12, alpha=0.7, label=domain)
        ax.set_title(f"t-SNE of {branch} features")
        ax.legend(title="domain")
        ax.grid(True, linestyle="--", alpha=0.6)
        written.append(_save(fig, Path(out_dir) / f"tsne_{branch}.png"))
    return written


def plot_histograms(histograms: Dict[str, np.ndarray], out_path: Union[str, Path],
                    bins: Optional[int] = None) -> Path:
    """
    Overlaid intensity histograms of DS latents, one series per domain.

    ``histograms`` maps a domain name to an (N, latent_dim) array.
    """
    fig, ax = plt.subplots(figsize=(8, 4))
    for domain, values in histograms.items():
        values = np.asarray(values)
        ax.hist(values.ravel(), bins=bins or values.shape[-1], alpha=0.5, label=domain)
    ax.set_xlabel("feature intensity")
    ax.set_ylabel("count")
    ax.legend()
    return _save(fig, out_path)


def histograms_from_csv(csv_path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Rebuild the per-domain (N, latent_dim) arrays written by the histogram command."""
    table = pd.read_csv(csv_path)
    histograms = {}
    for domain, part in table.groupby("domain", sort=False):
        grid = part.pivot(index="image", columns="feature", values="value").sort_index(axis=0).sort_index(axis=1)
        histograms[str(domain)] = grid.to_numpy()
    return histograms


def plot_iteration_sweep(report_path: Union[str, Path], out_dir: Union[str, Path]) -> Path:
    with open(report_path, "r", encoding="utf-8") as f:
        curve = json.load(f).get("iteration_sweep", [])
    if not curve:
        raise ValidationError(f"{report_path} holds no iteration sweep")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([p["num_steps"] for p in curve], [p["accuracy"] for p in curve], marker="o")
    ax.set_xlabel("attack iterations")
    ax.set_ylabel("accuracy (%)")
    ax.grid(True, linestyle="--", alpha=0.6)
    return _save(fig, Path(out_dir) / "iteration_sweep.png")


def plot_from(source: Union[str, Path], out_dir: Union[str, Path], seed: int = 0) -> List[Path]:
    """
    Pick the rendering from the input: .jsonl loss log, .json report, or a .csv
    that is either an embedding export (has a branch column) or a DS histogram table.
    """
    source = Path(source)
    if source.suffix == ".jsonl":
        return [plot_loss_log(source, out_dir)]
    if source.suffix == ".csv":
        columns = set(pd.read_csv(source, nrows=0).columns)
        if "branch" in columns:
            return plot_embeddings(source, out_dir, seed)
        if {"domain", "feature", "value"} <= columns:
            return [plot_histograms(histograms_from_csv(source), Path(out_dir) / "ds_histograms.png")]
        raise ValidationError(f"{source} is neither an embedding export nor a histogram table")
    if source.suffix == ".json":
        return [plot_iteration_sweep(source, out_dir)]
    raise ValidationError(f"Cannot plot {source}: expected .jsonl, .csv or .json")


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"[Plot] {path}")
    return path
