"""Principal-component diagnostics of the source/target covariate shift.

Both domains are projected into one PCA space fitted on their union; the
distance between the domain centroids, measured in units of the pooled
within-domain spread, summarizes how far apart the two input distributions
sit.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PcaModel",
    "ProjectionTable",
    "fit_pca",
    "project",
    "domain_gap",
    "cap_per_domain",
    "table_to_csv",
    "scatter_svg",
    "curves_svg",
]

MAX_PER_DOMAIN = 2000

# ten distinguishable label colors
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    image_shape: tuple = ()

    @property
    def k(self):
        return self.components.shape[0]


@dataclass(frozen=True)
class ProjectionTable:
    """One row per image: domain tag, label and its principal coordinates."""

    domains: np.ndarray
    labels: np.ndarray
    coords: np.ndarray

    def __len__(self):
        return self.coords.shape[0]

    def rows(self):
        for d, lab, xy in zip(self.domains, self.labels, self.coords):
            yield str(d), int(lab), float(xy[0]), float(xy[1])

    @classmethod
    def concat(cls, tables):
        return cls(
            np.concatenate([t.domains for t in tables]),
            np.concatenate([t.labels for t in tables]),
            np.concatenate([t.coords for t in tables]),
        )


def _flatten(images):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError(f"expected a stack of images, got shape {x.shape}")
    return x.reshape(x.shape[0], -1), tuple(x.shape[1:])


def _fix_signs(vectors):
    """Flip each row so its first non-negligible coordinate is positive."""
    out = vectors.copy()
    for i, v in enumerate(out):
        tol = 1e-12 * np.max(np.abs(v), initial=0.0)
        nz = np.flatnonzero(np.abs(v) > tol)
        if nz.size and v[nz[0]] < 0:
            out[i] = -v
    return out


def fit_pca(images, k=2):
    """Top-``k`` principal components of ``images`` (rows or image stack).

    Uses a thin SVD of the centered data, which yields the same directions
    as an eigendecomposition of the covariance.
    """
    x, shape = _flatten(images)
    n, d = x.shape
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} samples for k={k}, got {n}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    rank = int(np.sum(s > s[0] * max(n, d) * np.finfo(float).eps)) if s.size and s[0] > 0 else 0
    if k > rank:
        raise ValueError(f"k={k} exceeds the rank {rank} of the centered data")
    return PcaModel(
        mean=mean,
        components=_fix_signs(vt[:k]),
        explained_variance=s[:k] ** 2 / (n - 1),
        image_shape=shape,
    )


def project(model, images, labels=None, domain=""):
    """Principal coordinates ``<x - mean, component_i>`` of each image."""
    x, shape = _flatten(images)
    if x.shape[1] != model.mean.size:
        raise ValueError(f"image geometry {shape} does not match the PCA geometry {model.image_shape}")
    n = x.shape[0]
    labels = np.full(n, -1, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"{labels.size} labels for {n} images")
    coords = (x - model.mean) @ model.components.T
    return ProjectionTable(np.full(n, domain, dtype=object), labels, coords)


def domain_gap(table, dims=2):
    """Source-target centroid distance over the pooled within-domain std.

    The pooled variance is averaged over the ``dims`` leading coordinates,
    so two isotropic unit-variance clouds ``D`` apart give a gap near ``D``.
    """
    xy = table.coords[:, :dims]
    groups = [xy[table.domains == tag] for tag in ("source", "target")]
    if any(g.shape[0] == 0 for g in groups):
        raise ValueError("domain_gap needs rows from both the source and the target domain")
    centroids = [g.mean(axis=0) for g in groups]
    dof = sum(g.shape[0] for g in groups) - 2
    if dof < 1:
        raise ValueError("domain_gap needs at least three rows")
    sq = sum(np.sum((g - c) ** 2) for g, c in zip(groups, centroids))
    pooled = np.sqrt(sq / dof / xy.shape[1])
    dist = np.linalg.norm(centroids[0] - centroids[1])
    if pooled == 0:
        return 0.0 if dist == 0 else float("inf")
    return float(dist / pooled)


def cap_per_domain(n, seed, cap=MAX_PER_DOMAIN):
    """Sorted indices of a seeded subsample of at most ``cap`` of ``n`` items."""
    if n <= cap:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=cap, replace=False))


def table_to_csv(table):
    lines = ["domain,label,pc1,pc2"]
    for d, lab, x, y in table.rows():
        lines.append(f"{d},{lab},{x!r},{y!r}")
    return "\n".join(lines) + "\n"


def scatter_svg(table, title="", size=480, margin=40):
    """Standalone SVG scatter: source as circles, target as crosses,
    colored by label."""
    xy = table.coords[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    inner = size - 2 * margin

    def pos(p):
        u = margin + (p[0] - lo[0]) / span[0] * inner
        v = size - margin - (p[1] - lo[1]) / span[1] * inner
        return u, v

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{inner}" height="{inner}" fill="none" stroke="#999"/>',
    ]
    if title:
        out.append(f'<text x="{size / 2:.1f}" y="{margin / 2:.1f}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="14">{_escape(title)}</text>')
    out.append(f'<text x="{size / 2:.1f}" y="{size - 10}" text-anchor="middle" '
               'font-family="sans-serif" font-size="12">pc1</text>')
    out.append(f'<text x="12" y="{size / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12" transform="rotate(-90 12 {size / 2:.1f})">pc2</text>')
    for d, lab, x, y in table.rows():
        u, v = pos((x, y))
        color = PALETTE[lab % len(PALETTE)] if lab >= 0 else "#000000"
        if d == "target":
            out.append(f'<path d="M{u - 3:.2f} {v - 3:.2f}L{u + 3:.2f} {v + 3:.2f}'
                       f'M{u - 3:.2f} {v + 3:.2f}L{u + 3:.2f} {v - 3:.2f}" '
                       f'stroke="{color}" stroke-width="1"/>')
        else:
            out.append(f'<circle cx="{u:.2f}" cy="{v:.2f}" r="3" fill="none" '
                       f'stroke="{color}" stroke-width="1"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curves_svg(columns, rows, title="", width=520, height=320, margin=44):
    """Standalone SVG line chart of per-epoch accuracy columns."""
    epochs = [r["epoch"] for r in rows]
    x0, x1 = (min(epochs), max(epochs)) if epochs else (0, 1)
    xspan = (x1 - x0) or 1
    iw, ih = width - 2 * margin, height - 2 * margin

    def pos(e, a):
        return margin + (e - x0) / xspan * iw, height - margin - a * ih

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{iw}" height="{ih}" fill="none" stroke="#999"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="{margin / 2:.1f}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="14">{_escape(title)}</text>')
    for tick in (0.0, 0.5, 1.0):
        _, v = pos(x0, tick)
        out.append(f'<text x="{margin - 6}" y="{v + 4:.1f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{tick:.1f}</text>')
    for i, col in enumerate(columns):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join("%.2f,%.2f" % pos(r["epoch"], r[col]) for r in rows)
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{margin + 8}" y="{margin + 14 + 14 * i}" fill="{color}" '
                   f'font-family="sans-serif" font-size="11">{_escape(col)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text):
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
