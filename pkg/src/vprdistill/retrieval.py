"""Retrieval evaluation: PCA reduction, exact kNN and Recall@N.

Descriptors live in binary stores holding float32 rows plus per-row string
ids and geocoordinates. Search is brute-force descending dot product with
ties broken by ascending id. Recall@N treats a query as solved when any of
its top-N neighbours is within the distance threshold (geographic ground
truth, inclusive boundary) or equals its designated counterpart (pair
ground truth).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError, ShapeError, ValidationError

EARTH_RADIUS_M = 6371008.8  # mean earth radius, metres
STORE_MAGIC = b"SCVD"
STORE_VERSION = 1
_SYSTEM_CODES = {"utm": 0, "wgs84": 1}
_CODE_SYSTEMS = {code: name for name, code in _SYSTEM_CODES.items()}


@dataclass
class PcaModel:
    mean: np.ndarray          # (D_in,)
    components: np.ndarray    # (D_out, D_in), orthonormal rows
    eigenvalues: np.ndarray   # (D_out,), descending, non-negative


def fit_pca(descriptors, d_out: int) -> PcaModel:
    """Fit mean-centred covariance PCA (sample covariance, no whitening)."""
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected an (n, D) matrix, got shape {x.shape}")
    n, d_in = x.shape
    if not np.isfinite(x).all():
        raise InputError("descriptors contain non-finite values")
    if d_out < 1 or d_out > d_in:
        raise ValidationError(f"d_out must be in [1, {d_in}], got {d_out}")
    if n <= d_out:
        raise ValueError(f"rank-deficient fit: need more than d_out={d_out} samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    if d_in <= n:
        _, s, vt = np.linalg.svd(xc, full_matrices=False)
        components = vt[:d_out].copy()
        eigenvalues = s[:d_out] ** 2 / (n - 1)
    else:
        # D_in > n: eigendecompose the n x n Gram matrix instead of the
        # D_in x D_in covariance; both share the non-zero spectrum.
        gram = xc @ xc.T
        w, u = np.linalg.eigh(gram)
        order = np.argsort(w)[::-1][:d_out]
        w = np.clip(w[order], 0.0, None)
        u = u[:, order]
        scale = np.sqrt(w)
        # Numerically-null Gram eigenvalues sit near n*eps*w_max; rows built
        # from them would be fp noise, so complete those instead.
        good = w > 10.0 * n * np.finfo(np.float64).eps * max(float(w[0]), 1.0)
        components = np.zeros((d_out, d_in))
        components[good] = (xc.T @ (u[:, good] / scale[good])).T
        if not good.all():
            _complete_basis(components, good)
        eigenvalues = w / (n - 1)
    # Deterministic sign: largest-magnitude coordinate of each row positive.
    flips = np.sign(components[np.arange(d_out), np.abs(components).argmax(axis=1)])
    flips[flips == 0] = 1.0
    components *= flips[:, None]
    return PcaModel(mean=mean, components=components, eigenvalues=eigenvalues)


def _complete_basis(components, good) -> None:
    """Fill null-spectrum rows with an orthonormal complement (in place)."""
    rng = np.random.default_rng(0)
    basis = [components[i] for i in np.flatnonzero(good)]
    for i in np.flatnonzero(~good):
        vec = rng.standard_normal(components.shape[1])
        for _ in range(2):  # twice-is-enough re-orthogonalization
            for b in basis:
                vec -= (vec @ b) * b
        vec /= np.linalg.norm(vec)
        components[i] = vec
        basis.append(vec)


def project(model: PcaModel, x) -> np.ndarray:
    """Project rows onto the PCA basis and L2-renormalize."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != model.mean.shape[0]:
        raise ShapeError(f"input dim {arr.shape[1]} != model dim {model.mean.shape[0]}")
    y = (arr - model.mean) @ model.components.T
    norms = np.linalg.norm(y, axis=1, keepdims=True)
    if (norms == 0).any():
        raise InputError("projection produced a zero vector; cannot renormalize")
    y = y / norms
    return y[0] if single else y


@dataclass
class DescriptorStore:
    ids: list
    descriptors: np.ndarray                 # (n, dim) float32
    coords: list                            # (system, c1, c2) per row

    def coord_map(self) -> dict:
        return dict(zip(self.ids, self.coords))


def save_descriptor_store(path, store: DescriptorStore) -> None:
    n, dim = store.descriptors.shape
    if len(store.ids) != n or len(store.coords) != n:
        raise ShapeError("ids, coords and descriptor rows must align")
    if len(set(store.ids)) != n:
        raise ValueError("descriptor store ids must be unique")
    if not np.isfinite(store.descriptors).all():
        raise InputError("descriptors contain non-finite values")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIQ", STORE_MAGIC, STORE_VERSION, dim, n))
        fh.write(np.ascontiguousarray(store.descriptors, dtype="<f4").tobytes())
        for image_id, (system, c1, c2) in zip(store.ids, store.coords):
            if system not in _SYSTEM_CODES:
                raise ValueError(f"unknown coord system {system!r}")
            raw = str(image_id).encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<ddB", float(c1), float(c2), _SYSTEM_CODES[system]))


def load_descriptor_store(path) -> DescriptorStore:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.Struct("<4sIIQ")
    if len(raw) < head.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, dim, count = head.unpack_from(raw, 0)
    if magic != STORE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != STORE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = head.size
    matrix_bytes = 4 * dim * count
    if len(raw) < offset + matrix_bytes:
        raise FormatError(f"{path}: truncated descriptor matrix")
    descriptors = np.frombuffer(raw, dtype="<f4", count=dim * count, offset=offset)
    descriptors = descriptors.reshape(count, dim).copy()
    offset += matrix_bytes
    ids, coords = [], []
    tail = struct.Struct("<ddB")
    for _ in range(count):
        if len(raw) < offset + 4:
            raise FormatError(f"{path}: truncated record table")
        (id_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if len(raw) < offset + id_len + tail.size:
            raise FormatError(f"{path}: truncated record")
        image_id = raw[offset:offset + id_len].decode("utf-8")
        offset += id_len
        c1, c2, code = tail.unpack_from(raw, offset)
        offset += tail.size
        if code not in _CODE_SYSTEMS:
            raise FormatError(f"{path}: unknown coord system code {code}")
        ids.append(image_id)
        coords.append((_CODE_SYSTEMS[code], c1, c2))
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    if len(set(ids)) != count:
        raise FormatError(f"{path}: duplicate ids")
    return DescriptorStore(ids=ids, descriptors=descriptors, coords=coords)


@dataclass
class RetrievalIndex:
    ids: list
    descriptors: np.ndarray

    @classmethod
    def from_store(cls, store: DescriptorStore) -> "RetrievalIndex":
        return cls(ids=list(store.ids), descriptors=store.descriptors)


def knn_search(index: RetrievalIndex, queries, n: int) -> list:
    """Top-n database ids per query row: descending dot product, ties by id."""
    if n < 1:
        raise ValidationError(f"n must be at least 1, got {n}")
    if len(index.ids) == 0:
        raise ValueError("cannot search an empty index")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    db = np.asarray(index.descriptors, dtype=np.float64)
    if q.shape[1] != db.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != index dim {db.shape[1]}")
    ids_arr = np.asarray(index.ids)
    sims = q @ db.T
    results = []
    for row in sims:
        order = np.lexsort((ids_arr, -row))[:n]
        results.append([index.ids[i] for i in order])
    return results


@dataclass
class GeoTruth:
    """Geographic ground truth: a prediction is correct within threshold metres."""
    query_coords: dict   # query id -> (system, c1, c2)
    db_coords: dict      # database id -> (system, c1, c2)


@dataclass
class PairTruth:
    """Pair-match ground truth: one designated counterpart per query."""
    counterpart: dict    # query id -> database id


def haversine_m(lat1, lon1, lat2, lon2) -> float:
    """Great-circle distance in metres between WGS84 degree coordinates."""
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return float(2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0))))


def coord_distance_m(a, b) -> float:
    """Distance in metres between (system, c1, c2) coordinates."""
    sys_a, a1, a2 = a
    sys_b, b1, b2 = b
    if sys_a != sys_b:
        raise ValueError(f"cannot mix coordinate systems {sys_a!r} and {sys_b!r}")
    if sys_a == "utm":
        return float(np.hypot(a1 - b1, a2 - b2))
    return haversine_m(a1, a2, b1, b2)


def recall_at_n(results: dict, truth, n_values, threshold_m: float = 25.0) -> dict:
    """Percent of queries answered correctly within the top N, per N."""
    n_values = sorted(set(int(n) for n in n_values))
    if not n_values or n_values[0] < 1:
        raise ValidationError("N values must be positive integers")
    if not results:
        raise InputError("no query results to evaluate")
    correct_rank = {}
    for qid, ranked in results.items():
        rank = None
        if isinstance(truth, PairTruth):
            target = truth.counterpart[qid]
            if target in ranked:
                rank = ranked.index(target) + 1
        else:
            qc = truth.query_coords[qid]
            for pos, did in enumerate(ranked, start=1):
                if coord_distance_m(qc, truth.db_coords[did]) <= threshold_m:
                    rank = pos
                    break
        correct_rank[qid] = rank
    out = {}
    for n in n_values:
        hits = sum(1 for rank in correct_rank.values() if rank is not None and rank <= n)
        out[n] = 100.0 * hits / len(results)
    return out
