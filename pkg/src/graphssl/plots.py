"""Static SVG plots: accuracy curves from metrics files, decision boundaries."""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ValidationError
from .model import ModelParams, classify, feature_normalize, forward_features


def read_metrics(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise ValidationError(f"{path}: no records")
    return records


def _series(records: list[dict], key: str) -> tuple[list[int], list[float]]:
    steps, values = [], []
    for rec in records:
        if rec.get(key) is not None:
            steps.append(rec["step"])
            values.append(rec[key])
    return steps, values


def plot_curves(metric_paths: list[str], out_path: str) -> None:
    """Overlay validation / unlabeled / pseudo-label accuracy, one color per file."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, path in enumerate(metric_paths):
        records = read_metrics(path)
        color = colors[i % len(colors)]
        stem = os.path.splitext(os.path.basename(path))[0]
        for key, style in (
            ("validation_accuracy", "-"),
            ("unlabeled_accuracy", "--"),
            ("pseudo_label_accuracy", ":"),
        ):
            steps, values = _series(records, key)
            if steps:
                label = stem if style == "-" else None
                ax.plot(steps, values, style, color=color, label=label, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_title("validation (solid) / unlabeled (dashed) / pseudo-label (dotted)")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_boundary(
    params: ModelParams,
    feature_norm: bool,
    features: np.ndarray,
    labels: np.ndarray,
    out_path: str,
    grid: int = 220,
) -> None:
    """Class map of classify() over a 2-D grid with the data points overlaid."""
    if features.shape[1] != 2:
        raise ValidationError(f"boundary plot needs 2-D data, got {features.shape[1]} dims")
    lo = features.min(axis=0) - 0.5
    hi = features.max(axis=0) + 0.5
    xs = np.linspace(lo[0], hi[0], grid)
    ys = np.linspace(lo[1], hi[1], grid)
    xx, yy = np.meshgrid(xs, ys)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    with dc.no_grad():
        h = forward_features(Tensor(pts), params.encoder)
        p = classify(feature_normalize(h, params.heads, feature_norm), params.heads.classifier_w)
    zz = np.argmax(p.values, axis=1).reshape(xx.shape)

    fig, ax = plt.subplots(figsize=(6, 5))
    ax.contourf(xx, yy, zz, levels=np.arange(p.values.shape[1] + 1) - 0.5, cmap="coolwarm", alpha=0.35)
    unlabeled = labels < 0
    if np.any(unlabeled):
        ax.scatter(features[unlabeled, 0], features[unlabeled, 1], s=6, c="0.6", label="unlabeled")
    for c in sorted(set(labels[labels >= 0].tolist())):
        mask = labels == c
        ax.scatter(features[mask, 0], features[mask, 1], s=14, label=f"class {c}")
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
