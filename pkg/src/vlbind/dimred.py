"""PCA of per-layer embeddings with a deterministic sign convention."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError
from .io import write_csv


@dataclass(frozen=True)
class Projection:
    """Top-``k`` principal-component view of ``T`` embeddings.

    Attributes:
        coords: ``[T, k]`` projections of the centered data.
        components: ``[k, d]`` orthonormal directions, largest-magnitude
            loading positive.
        explained_variance_ratio: length ``k``, non-increasing.
        layer: source layer, if any.
        labels: per-trial label columns (e.g. ``{"position": [...]}``).
    """

    coords: np.ndarray
    components: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    layer: Optional[int] = None
    labels: dict = field(default_factory=dict)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def to_csv(self, path):
        k = self.coords.shape[1]
        names = sorted(self.labels)
        header = ["trial", *[f"pc{i + 1}" for i in range(k)], *names]
        rows = (
            [t, *self.coords[t], *[self.labels[n][t] for n in names]] for t in range(self.coords.shape[0])
        )
        return write_csv(path, header, rows)


def pca_project(
    embeddings: np.ndarray,
    k: int = 2,
    layer: Optional[int] = None,
    labels: Optional[dict[str, Sequence]] = None,
) -> Projection:
    """Project ``[T, d]`` embeddings onto their top-``k`` principal components.

    Raises:
        DimensionError: unless ``1 <= k < min(T, d)``, or if a label column
            has the wrong length.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected [T, d] embeddings, got shape {x.shape}")
    T, d = x.shape
    if not 1 <= k or k >= d or k >= T:
        raise DimensionError(f"k={k} must satisfy 1 <= k < min(T={T}, d={d})")
    labels = {n: list(v) for n, v in (labels or {}).items()}
    for n, v in labels.items():
        if len(v) != T:
            raise DimensionError(f"label {n!r} has {len(v)} entries for {T} trials")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:k].copy()
    for i in range(k):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    var = s**2
    total = var.sum()
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    return Projection(xc @ comps.T, comps, ratio, mean, layer, labels)


def project_layers(
    traces, k: int = 2, labels: Optional[dict[str, Sequence]] = None, group: int = 0
) -> dict[int, Projection]:
    """One projection per layer of a residual :class:`~vlbind.rsa.TraceSet`."""
    return {
        layer: pca_project(traces.acts[(layer, head)][group], k, layer, labels)
        for layer, head in traces.units()
    }


def trial_labels(instances) -> dict[str, list]:
    """Target position and feature labels for PCA scatter colouring."""
    pos, feat = [], []
    for inst in instances:
        t = inst.scene.target
        pos.append(f"{t.cell[0]},{t.cell[1]}")
        feat.append(t.description)
    return {"position": pos, "feature": feat}
