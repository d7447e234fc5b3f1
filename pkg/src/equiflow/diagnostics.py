"""Dataset variability measures, occupancy histograms and the signed-rank test."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh
from scipy.stats import norm as normal

from equiflow.errors import (
    DegenerateTriangle,
    EigensolverNoConvergence,
    MixedDescriptorLength,
    NoDefinedAlignments,
    NonManifoldEdge,
    TooFewPairs,
    ValidationError,
)
from equiflow.preprocess import CUBE, PositionScaling, compute_position_scaling

UNDEFINED_TOL = 1e-12
AREA_TOL = 1e-12
AXES = {"x": 0, "y": 1, "z": 2}
DENSE_MAX_VERTS = 3000


# --- alignment ----------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentDescriptor:
    direction: np.ndarray
    defined: bool


def sample_alignment(u_field) -> AlignmentDescriptor:
    """Normalised sum of a vector field; undefined when the sum (nearly) cancels."""
    u = np.asarray(u_field, dtype=float).reshape(-1, 3)
    if len(u) == 0:
        raise ValidationError("alignment needs at least one vector")
    r = u.sum(axis=0)
    n = np.linalg.norm(r)
    if n <= UNDEFINED_TOL:
        return AlignmentDescriptor(np.full(3, np.nan), False)
    return AlignmentDescriptor(r / n, True)


def _cosine_variability(vectors: np.ndarray) -> float:
    """``1 - mean_i cos(v_i, mean_j v_j)``, defined as 1 when the mean vanishes."""
    mean = vectors.mean(axis=0)
    m = np.linalg.norm(mean)
    if m <= UNDEFINED_TOL:
        return 1.0
    cos = np.clip(vectors @ mean / (np.linalg.norm(vectors, axis=1) * m), -1.0, 1.0)
    return float(1.0 - cos.mean())


def alignment_variability(dataset) -> float:
    """Alignment variability over samples or raw ``[N, 3]`` fields (volume velocity for samples)."""
    descs = [sample_alignment(getattr(s, "volume_target", s)) for s in dataset]
    dirs = np.array([d.direction for d in descs if d.defined])
    if len(dirs) == 0:
        raise NoDefinedAlignments("no sample has a defined alignment")
    return _cosine_variability(dirs)


# --- Laplace-Beltrami spectrum ------------------------------------------------------------


def _check_mesh(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    if np.any(area < AREA_TOL):
        raise DegenerateTriangle(f"triangle {int(np.argmin(area))} has area {area.min():.3g}")
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise NonManifoldEdge(f"{int((counts > 2).sum())} edges are shared by more than two triangles")
    return area


def cotangent_laplacian(verts, faces) -> tuple[sp.csr_matrix, np.ndarray]:
    """Stiffness ``S`` (cotangent weights) and lumped barycentric mass diagonal ``m``.

    ``S`` is symmetric positive semi-definite with constants in its kernel; the
    spectrum solves ``S phi = lambda M phi``.
    """
    verts = np.asarray(verts, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    area = _check_mesh(verts, faces)
    n = len(verts)
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = faces[:, (k + 1) % 3], faces[:, (k + 2) % 3], faces[:, k]
        a, b = verts[i] - verts[o], verts[j] - verts[o]
        cot = (a * b).sum(1) / np.linalg.norm(np.cross(a, b), axis=1)
        rows += [i, j]
        cols += [j, i]
        vals += [-0.5 * cot, -0.5 * cot]
    off = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    off = 0.5 * (off + off.T)  # exact symmetry regardless of summation order
    stiffness = (off - sp.diags(np.asarray(off.sum(axis=1)).ravel())).tocsr()
    mass = np.zeros(n)
    np.add.at(mass, faces.ravel(), np.repeat(area / 3.0, 3))
    return stiffness, mass


@dataclass(frozen=True)
class ShapeDescriptor:
    spectrum: np.ndarray


def shape_descriptor(verts, faces, k: int = 32) -> ShapeDescriptor:
    """The ``k + 1`` smallest Laplace-Beltrami eigenvalues (dense for small meshes, else shift-invert Lanczos)."""
    verts = np.asarray(verts, dtype=float)
    if not 0 < k < len(verts) - 1:
        raise ValidationError(f"k={k} must be positive and below the vertex count minus one ({len(verts)})")
    stiffness, mass = cotangent_laplacian(verts, faces)
    if len(verts) <= DENSE_MAX_VERTS:
        # Lanczos only recovers repeated eigenvalues through rounding, so symmetric meshes
        # can lose copies; the lumped mass makes a dense symmetric solve cheap and exact
        r = 1.0 / np.sqrt(mass)
        sym = stiffness.toarray() * r[:, None] * r[None, :]
        vals = scipy.linalg.eigh(sym, subset_by_index=[0, k], eigvals_only=True, driver="evr")
        return ShapeDescriptor(np.clip(np.sort(vals), 0.0, None))
    m = sp.diags(mass).tocsc()
    sigma = -1e-6 * stiffness.diagonal().sum() / mass.sum()
    v0 = np.cos(np.arange(len(verts)) * 0.618) + 1.5
    ncv = min(len(verts) - 1, max(4 * (k + 1), 20))
    try:
        vals = eigsh(
            stiffness.tocsc(), k=k + 1, M=m, sigma=sigma, which="LM", v0=v0, ncv=ncv, maxiter=10 * k, tol=1e-8, return_eigenvectors=False
        )
    except ArpackNoConvergence as exc:
        raise EigensolverNoConvergence(f"eigensolver did not converge: {exc}") from None
    return ShapeDescriptor(np.clip(np.sort(vals), 0.0, None))


def shape_variability(descriptors) -> float:
    """Cosine-based variability of spectra (``ShapeDescriptor`` or plain arrays)."""
    specs = [np.asarray(getattr(d, "spectrum", d), dtype=float) for d in descriptors]
    if not specs:
        raise ValidationError("no descriptors given")
    if len({len(s) for s in specs}) != 1:
        raise MixedDescriptorLength("descriptors have different lengths")
    return _cosine_variability(np.stack(specs))


# --- Wilcoxon signed-rank -----------------------------------------------------------------


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    return ranks


def _exact_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign patterns reaching each value of ``2 W+`` (counting DP over ranks)."""
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b, alternative: str = "two_sided") -> float:
    """p-value of the signed-rank test on ``a - b``.

    Zero differences are dropped; ties share average ranks.  Exact null for n <= 25,
    normal approximation with continuity and tie correction above.
    ``alternative``: ``two_sided``, ``greater`` (a > b) or ``less``.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValidationError("paired samples must have equal lengths")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n < 5:
        raise TooFewPairs(f"{n} non-zero differences; at least 5 are needed")
    ranks = _average_ranks(np.abs(d))
    w_plus = ranks[d > 0].sum()
    if n <= 25:
        counts = _exact_null_counts(2 * ranks)
        total = 2**n
        w2 = int(round(2 * w_plus))
        p_le = float(sum(counts[: w2 + 1]) / total)
        p_ge = float(sum(counts[w2:]) / total)
    else:
        mean = n * (n + 1) / 4
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - (tie_sizes**3 - tie_sizes).sum() / 48
        sd = math.sqrt(var)
        p_le = float(normal.cdf((w_plus - mean + 0.5) / sd))
        p_ge = float(normal.sf((w_plus - mean - 0.5) / sd))
    if alternative == "greater":
        return p_ge
    if alternative == "less":
        return p_le
    if alternative in ("two_sided", "two-sided"):
        return min(1.0, 2 * min(p_le, p_ge))
    raise ValidationError(f"unknown alternative {alternative!r}")


# --- occupancy ----------------------------------------------------------------------------


def occupancy_histogram(dataset, axis: str, bins: int, scaling: PositionScaling | None = None) -> np.ndarray:
    """Dataset-wide histogram of one scaled coordinate over ``[0, 1000]``."""
    if bins < 1:
        raise ValidationError("bins must be >= 1")
    if axis not in AXES:
        raise ValidationError(f"axis must be one of x, y, z, got {axis!r}")
    dataset = list(dataset)
    scaling = scaling or compute_position_scaling(dataset)
    coords = []
    for s in dataset:
        pts = s if isinstance(s, np.ndarray) else np.concatenate([s.surface_pos, s.volume_pos])
        coords.append(scaling.apply(pts.reshape(-1, 3))[:, AXES[axis]])
    x = np.clip(np.concatenate(coords), 0.0, CUBE)
    counts, _ = np.histogram(x, bins=bins, range=(0.0, CUBE))
    return counts


# --- report -------------------------------------------------------------------------------


def diagnose(dataset, out_dir, bins: int = 50, k: int = 32, scaling: PositionScaling | None = None) -> dict:
    """Write ``variability.json`` and ``occupancy_<axis>.csv``; return the variability dict."""
    dataset = list(dataset)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = [shape_descriptor(s.mesh_vertices, s.triangles, k) for s in dataset]
    report = {
        "alignment_variability": alignment_variability(dataset),
        "shape_variability": shape_variability(specs),
        "n_samples": len(dataset),
        "k": k,
    }
    (out / "variability.json").write_text(json.dumps(report, indent=2))
    scaling = scaling or compute_position_scaling(dataset)
    edges = np.linspace(0.0, CUBE, bins + 1)
    for axis in AXES:
        counts = occupancy_histogram(dataset, axis, bins, scaling)
        with (out / f"occupancy_{axis}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([f"{lo:g}", f"{hi:g}", int(c)])
    return report


# --- run comparison -----------------------------------------------------------------------


def compare_runs(paths_a, paths_b, target: str = "volume", pairing: str = "sample") -> dict:
    """Wilcoxon comparison of two sets of ``metrics.json`` run records.

    ``sample`` pairing takes, per test sample, the median over runs of each model and
    pairs the two models sample by sample.  ``run`` pairing pairs test-set scores of
    runs in the order given.
    """
    def load(paths):
        recs = [json.loads(Path(p).read_text()) for p in paths]
        try:
            return np.array([r["test_rel_l2"][target] for r in recs], dtype=float)
        except KeyError:
            raise ValidationError(f"metrics files lack test scores for target {target!r}") from None

    a, b = load(paths_a), load(paths_b)
    per_run_a, per_run_b = a.mean(axis=1), b.mean(axis=1)
    if pairing == "sample":
        if a.shape[1] != b.shape[1]:
            raise ValidationError("sample pairing needs runs scored on the same test set")
        xa, xb = np.median(a, axis=0), np.median(b, axis=0)
    elif pairing == "run":
        if len(a) != len(b):
            raise ValidationError("run pairing needs the same number of runs on both sides")
        xa, xb = per_run_a, per_run_b
    else:
        raise ValidationError(f"unknown pairing {pairing!r}")
    return {
        "target": target,
        "pairing": pairing,
        "n_pairs": int(len(xa)),
        "median_a": float(np.median(per_run_a)),
        "median_b": float(np.median(per_run_b)),
        "p_value": wilcoxon_signed_rank(xa, xb),
    }
