"""Two-dimensional principal-component projection for plotting feature clouds."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ProjectionError


@dataclass
class Projection:
    coords: np.ndarray
    labels: np.ndarray
    provenance: list[str]
    components: np.ndarray
    variances: np.ndarray

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            fh.write("x,y,label,provenance\n")
            for (x, y), lab, prov in zip(self.coords, self.labels, self.provenance):
                fh.write(f"{x!r},{y!r},{int(lab)},{prov}\n")


def top_eigenpairs(cov: np.ndarray, k: int = 2, tol: float = 1e-13, max_iter: int = 20000
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Leading eigenpairs of a symmetric PSD matrix by orthogonal (block power) iteration.

    Stops when the Ritz residual ``|cov q - q (q^T cov q)|`` falls below
    ``tol`` relative to the matrix scale.
    """
    n = cov.shape[0]
    q = np.eye(n, k)
    # deterministic start with weight on every coordinate
    q = q + np.linspace(0.1, 0.2, n)[:, None] * np.arange(1, k + 1)[None, :]
    q, _ = np.linalg.qr(q)
    scale = max(float(np.abs(cov).max()), 1e-300)
    for _ in range(max_iter):
        q, _ = np.linalg.qr(cov @ q)
        cq = cov @ q
        if np.abs(cq - q @ (q.T @ cq)).max() <= tol * scale:
            break
    # rotate the converged basis onto individual eigenvectors (Rayleigh-Ritz)
    w, v = np.linalg.eigh(q.T @ cov @ q)
    order = np.argsort(w)[::-1]
    return w[order], q @ v[:, order]


def project_2d(samples: np.ndarray, labels: Sequence[int] | None = None,
               provenance: Sequence[str] | None = None) -> Projection:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ProjectionError("need at least 2 samples of dimension >= 2")
    if len(np.unique(x, axis=0)) < 2:
        raise ProjectionError("need at least 2 distinct points")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / len(x)
    variances, comps = top_eigenpairs(cov, 2)
    # sign convention: largest-magnitude loading of each component is positive
    for j in range(2):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] = -comps[:, j]
    labels = np.zeros(len(x), dtype=np.int64) if labels is None else np.asarray(labels)
    provenance = ["real"] * len(x) if provenance is None else list(provenance)
    return Projection(centered @ comps, labels, provenance, comps.T, variances)
