"""Evaluation protocols on a trained model.

Images in and out of this module are ``H x W x 3`` (or ``N x H x W x 3``)
arrays in ``[0, 1]``; conversion to the model's ``[-1, 1]`` channels-first
tensors happens here. Everything runs in eval mode: no encoder noise, no
dropout, batch-norm running statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from PIL import Image
from scipy.spatial.distance import cdist

from . import datagen
from .model import CrossDomainModel, image_to_tensor, other, tensor_to_image

FEATURE_KINDS = ("pixels", "shared", "exclusive")
IOU_THRESHOLD = 0.6
COLOR_TOLERANCE = 0.2


def _batch(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float32)
    return arr[None] if arr.ndim == 3 else arr


def _to_model(images) -> torch.Tensor:
    return image_to_tensor(datagen.to_model_range(_batch(images)))


def _to_images(t: torch.Tensor) -> np.ndarray:
    return np.clip(datagen.from_model_range(tensor_to_image(t)), 0.0, 1.0)


@torch.no_grad()
def encode_images(model: CrossDomainModel, images, domain: str, batch_size: int = 200):
    """Eval-mode ``(shared, exclusive)`` codes as numpy arrays."""
    model.eval()
    imgs = _batch(images)
    shared, exclusive = [], []
    for i in range(0, len(imgs), batch_size):
        r = model.encode(_to_model(imgs[i:i + batch_size]), domain, training=False)
        shared.append(r.shared.numpy())
        exclusive.append(r.exclusive.numpy())
    if not shared:
        c, s, _ = model.cfg.shared_shape
        return np.zeros((0, c, s, s), np.float32), np.zeros((0, model.cfg.exclusive_dim), np.float32)
    return np.concatenate(shared), np.concatenate(exclusive)


@torch.no_grad()
def decode_codes(model: CrossDomainModel, shared, vectors, domain: str, batch_size: int = 200) -> np.ndarray:
    model.eval()
    shared = torch.as_tensor(np.asarray(shared, dtype=np.float32))
    vectors = torch.as_tensor(np.asarray(vectors, dtype=np.float32))
    out = [
        _to_images(model.decode(shared[i:i + batch_size], vectors[i:i + batch_size], domain, training=False))
        for i in range(0, len(shared), batch_size)
    ]
    return np.concatenate(out)


def features(model: Optional[CrossDomainModel], images, domain: str, kind: str) -> np.ndarray:
    """Flattened retrieval features (no normalization)."""
    if kind not in FEATURE_KINDS:
        raise ValueError(f"feature kind must be one of {FEATURE_KINDS}, got {kind!r}")
    imgs = _batch(images)
    if kind == "pixels":
        return imgs.reshape(len(imgs), -1).astype(np.float64)
    shared, exclusive = encode_images(model, imgs, domain)
    chosen = shared if kind == "shared" else exclusive
    return chosen.reshape(len(chosen), -1).astype(np.float64)


# --------------------------------------------------------------------------
# retrieval

def nearest_neighbors(queries: np.ndarray, database: np.ndarray, k: int = 1) -> np.ndarray:
    """Exhaustive Euclidean k-NN; ties go to the lowest database index."""
    if len(database) == 0:
        raise ValueError("retrieval database is empty")
    if k > len(database):
        raise ValueError(f"k={k} exceeds database size {len(database)}")
    dist = cdist(np.asarray(queries, np.float64), np.asarray(database, np.float64), "sqeuclidean")
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


@dataclass
class RetrievalResult:
    rankings: np.ndarray
    recall_at_1: float
    feature_kind: str
    # fraction of queries whose top hit shares the query's digit label
    label_recall_at_1: Optional[float] = None

    def to_dict(self) -> dict:
        return {"feature_kind": self.feature_kind, "recall_at_1": self.recall_at_1,
                "label_recall_at_1": self.label_recall_at_1}


def recall_at_1(rankings: np.ndarray, targets: np.ndarray) -> float:
    if len(rankings) == 0:
        return 0.0
    return float(np.mean(rankings[:, 0] == np.asarray(targets)))


def cross_domain_retrieval(model, queries, database, source_domain: str, feature_kind: str,
                           query_labels=None, database_labels=None, k: int = 5,
                           pairs=None) -> RetrievalResult:
    """Retrieve each query's counterpart from a database in the other domain.

    ``pairs[i]`` is the database index paired with query ``i`` (default: the
    same index).
    """
    if len(_batch(database)) == 0:
        raise ValueError("retrieval database is empty")
    q = features(model, queries, source_domain, feature_kind)
    db = features(model, database, other(source_domain), feature_kind)
    ranks = nearest_neighbors(q, db, min(k, len(db)))
    targets = np.arange(len(q)) if pairs is None else np.asarray(pairs)
    label_recall = None
    if query_labels is not None and database_labels is not None:
        label_recall = float(np.mean(np.asarray(database_labels)[ranks[:, 0]] == np.asarray(query_labels)))
    return RetrievalResult(ranks, recall_at_1(ranks, targets), feature_kind, label_recall)


@dataclass
class MixedRetrievalResult:
    indices: np.ndarray
    domains: np.ndarray
    feature_kind: str
    domain_fraction: dict = field(default_factory=dict)
    same_digit_fraction: Optional[float] = None

    def to_dict(self) -> dict:
        return {"feature_kind": self.feature_kind, "domain_fraction": self.domain_fraction,
                "same_digit_fraction": self.same_digit_fraction}


def mixed_domain_retrieval(model, queries, query_domain: str, database_x, database_y,
                           feature_kind: str, k: int = 5, query_labels=None,
                           labels_x=None, labels_y=None) -> MixedRetrievalResult:
    """Top-k retrieval against the union of both domains.

    Distance ties go to the query's own domain, then to the lower index.
    """
    db = {"X": _batch(database_x), "Y": _batch(database_y)}
    labels = {"X": labels_x, "Y": labels_y}
    n_db = len(db["X"]) + len(db["Y"])
    if n_db == 0:
        raise ValueError("retrieval database is empty")
    if k > n_db:
        raise ValueError(f"k={k} exceeds database size {n_db}")
    order = (query_domain, other(query_domain))
    q = features(model, queries, query_domain, feature_kind)
    parts = [features(model, db[d], d, feature_kind) for d in order if len(db[d])]
    idx = nearest_neighbors(q, np.concatenate(parts), k)
    n_first = len(db[order[0]])
    tags = np.where(idx < n_first, order[0], order[1])
    local = np.where(idx < n_first, idx, idx - n_first)
    frac = {d: float(np.mean(tags == d)) for d in ("X", "Y")}
    same = None
    if query_labels is not None and labels_x is not None and labels_y is not None:
        union_labels = np.concatenate([np.asarray(labels[d]) for d in order])
        same = float(np.mean(union_labels[idx] == np.asarray(query_labels)[:, None]))
    return MixedRetrievalResult(local, tags, feature_kind, frac, same)


def intra_domain_label_recall(feats: np.ndarray, labels) -> float:
    """Leave-one-out Recall@1 where a hit is a neighbor with the same label."""
    feats = np.asarray(feats, np.float64)
    labels = np.asarray(labels)
    if len(feats) < 2:
        raise ValueError("need at least two items for intra-domain retrieval")
    dist = cdist(feats, feats, "sqeuclidean")
    np.fill_diagonal(dist, np.inf)
    nn = np.argsort(dist, axis=1, kind="stable")[:, 0]
    return float(np.mean(labels[nn] == labels))


def grl_probe(model_with, model_without, images, labels, domain: str,
              config_with=None, config_without=None) -> dict:
    """How much more digit information E carries when the GRL is removed.

    Intra-domain retrieval on exclusive codes only; returns the recall of both
    models and ``delta = without - with``.
    """
    if model_with.cfg.fingerprint() != model_without.cfg.fingerprint():
        raise ValueError("GRL probe needs two models with the same architecture")
    if config_with is not None and config_without is not None:
        a, b = config_with.to_flat_dict(), config_without.to_flat_dict()
        diff = {k for k in a if a[k] != b.get(k)} - {"disable_grl"}
        if diff:
            raise ValueError(f"configs differ beyond disable_grl: {sorted(diff)}")
    r_with = intra_domain_label_recall(features(model_with, images, domain, "exclusive"), labels)
    r_without = intra_domain_label_recall(features(model_without, images, domain, "exclusive"), labels)
    return {"recall_with_grl": r_with, "recall_without_grl": r_without, "delta": r_without - r_with}


# --------------------------------------------------------------------------
# generation

def sample_translations(model: CrossDomainModel, x, source_domain: str, n: int, seed: int = 0) -> list:
    """``n`` translations of ``x`` into the other domain with independent z ~ N(0, I)."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(n, model.cfg.exclusive_dim, generator=gen).numpy()
    shared, _ = encode_images(model, x, source_domain)
    out = decode_codes(model, np.repeat(shared[:1], n, axis=0), z, other(source_domain))
    return list(out)


def visual_analogy(model: CrossDomainModel, query, reference, domain: str,
                   reference_domain: Optional[str] = None):
    """Decode the query's shared part with the reference's exclusive part.

    Batched inputs give batched outputs.
    """
    if reference_domain is not None and reference_domain != domain:
        raise ValueError("query and reference must come from the same domain")
    q, r = _batch(query), _batch(reference)
    if q.shape != r.shape:
        raise ValueError("query and reference batches must have the same shape")
    s_q, _ = encode_images(model, q, domain)
    _, e_r = encode_images(model, r, domain)
    out = decode_codes(model, s_q, e_r, domain)
    return out[0] if np.asarray(query).ndim == 3 else out


def interpolate(model: CrossDomainModel, a, b, domain: str, part: str, steps: int) -> list:
    """Interpolate one latent part between ``a`` and ``b``, holding the other at ``a``."""
    if steps < 2:
        raise ValueError("interpolation needs steps >= 2")
    if part not in ("shared", "exclusive"):
        raise ValueError(f"part must be 'shared' or 'exclusive', got {part!r}")
    s, e = encode_images(model, np.stack([_batch(a)[0], _batch(b)[0]]), domain)
    t = np.linspace(0.0, 1.0, steps, dtype=np.float32)
    if part == "shared":
        shared = (1 - t)[:, None, None, None] * s[0] + t[:, None, None, None] * s[1]
        excl = np.repeat(e[:1], steps, axis=0)
    else:
        shared = np.repeat(s[:1], steps, axis=0)
        excl = (1 - t)[:, None] * e[0] + t[:, None] * e[1]
    return list(decode_codes(model, shared, excl, domain))


# --------------------------------------------------------------------------
# scores

def image_distance(a, b) -> np.ndarray:
    """Root-mean-square pixel distance per image, values in [0, 1] units."""
    a, b = _batch(a), _batch(b)
    return np.sqrt(((a.astype(np.float64) - b) ** 2).reshape(len(a), -1).mean(axis=1))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def dominant_color(image, domain: str) -> np.ndarray:
    """Palette color of the digit (domain X) or of the background (domain Y).

    Undoes the intensity blend per pixel, which is exact for fully saturated
    palette colors: an X pixel is ``i * c`` with ``max(c) = 1`` and a Y pixel
    is ``i + (1 - i) * c`` with ``min(c) = 0``.
    """
    img = np.asarray(image, np.float64)
    mask = datagen.digit_mask(img, domain)
    if domain == "X":
        px = img[mask]
        if not len(px):
            return np.zeros(3)
        return (px / px.max(axis=-1, keepdims=True)).mean(axis=0)
    px = img[~mask]
    if not len(px):
        return np.zeros(3)
    lo = px.min(axis=-1, keepdims=True)
    return ((px - lo) / (1.0 - lo)).mean(axis=0)


def diversity(samples) -> float:
    """Mean pairwise RMS distance between a set of samples."""
    s = _batch(samples)
    d = [image_distance(s[i], s[j])[0] for i in range(len(s)) for j in range(i + 1, len(s))]
    return float(np.mean(d)) if d else 0.0


@dataclass
class AnalogyScore:
    mean_distance: float
    std_distance: float
    n_pairs: int
    seed: int
    distance_kind: str = "euclidean_pixels"

    def to_dict(self) -> dict:
        return {"mean_distance_x1e-2": self.mean_distance, "std_distance_x1e-2": self.std_distance,
                "n_pairs": self.n_pairs, "seed": self.seed, "distance_kind": self.distance_kind}


def analogy_ground_truth(split: datagen.DatasetSplit, queries, references, domain: str) -> np.ndarray:
    """Query digit rendered with the reference's domain-specific color."""
    out = []
    for qi, ri in zip(queries, references):
        q, r = split.samples[qi], split.samples[ri]
        digit = q.digit if q.digit is not None else q.x.max(axis=-1)
        if domain == "X":
            out.append(datagen.colorize_digit(digit, r.digit_color, None))
        else:
            out.append(datagen.colorize_background(digit, r.background_color, None))
    return np.stack(out)


def analogy_pairs(n_items: int, n_pairs: int, seed: int):
    if n_pairs > n_items * (n_items - 1):
        raise ValueError(f"n_pairs={n_pairs} exceeds the available (query, reference) pairs")
    rng = np.random.default_rng(seed)
    q = rng.integers(0, n_items, n_pairs)
    r = (q + rng.integers(1, n_items, n_pairs)) % n_items
    return q, r


def analogy_benchmark(model, split: datagen.DatasetSplit, domain: str, n_pairs: int = 1000,
                      seed: int = 0, analogy_fn: Optional[Callable] = None) -> AnalogyScore:
    """Distance between generated analogies and their rendered ground truth.

    Reported in units of 1e-2 (a value of 13.0 means an RMS distance of 0.13).
    ``analogy_fn(queries, references)`` replaces the model when given.
    """
    if n_pairs < 1 or n_pairs > len(split) * (len(split) - 1):
        raise ValueError(f"n_pairs={n_pairs} is not available from a split of {len(split)}")
    q_idx, r_idx = analogy_pairs(len(split), n_pairs, seed)
    images = split.images(domain)
    truth = analogy_ground_truth(split, q_idx, r_idx, domain)
    if analogy_fn is None:
        out = visual_analogy(model, images[q_idx], images[r_idx], domain)
    else:
        out = analogy_fn(images[q_idx], images[r_idx])
    d = image_distance(out, truth) * 100.0
    return AnalogyScore(float(d.mean()), float(d.std()), n_pairs, seed)


# --------------------------------------------------------------------------
# figures

def save_grid(rows, path) -> Path:
    """Save a list of image rows (each a list of HxWx3 arrays) as one PNG."""
    rows = [np.concatenate([np.asarray(im) for im in row], axis=1) for row in rows]
    width = max(r.shape[1] for r in rows)
    rows = [np.pad(r, ((0, 0), (0, width - r.shape[1]), (0, 0))) for r in rows]
    grid = np.round(np.clip(np.concatenate(rows, axis=0), 0, 1) * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid, mode="RGB").save(path)
    return path
