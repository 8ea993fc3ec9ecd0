"""2-D projections of representation vectors."""

from __future__ import annotations

import numpy as np


def pca_2d(vectors: np.ndarray) -> np.ndarray:
    """Deterministic PCA onto the top two components.

    Sign convention: each component is flipped so its largest-magnitude
    loading is positive, making the projection reproducible across runs.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    centered = vectors - vectors.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    if components.shape[0] < 2:
        components = np.vstack([components, np.zeros_like(components[0])])
    for i in range(2):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    return centered @ components.T


def tsne_2d(vectors: np.ndarray, seed: int = 0) -> np.ndarray:
    """t-SNE projection (requires scikit-learn), seeded for reproducibility."""
    from sklearn.manifold import TSNE

    vectors = np.asarray(vectors, dtype=np.float64)
    perplexity = min(30.0, max(2.0, (len(vectors) - 1) / 3.0))
    tsne = TSNE(n_components=2, random_state=seed, init="pca", perplexity=perplexity)
    return tsne.fit_transform(vectors)


def project(vectors: np.ndarray, method: str, seed: int = 0) -> np.ndarray:
    if method == "pca":
        return pca_2d(vectors)
    if method == "tsne":
        return tsne_2d(vectors, seed)
    raise ValueError(f"projection must be 'pca' or 'tsne', got {method!r}")
