"""Re-identification harness: pose-transfer augmentation, IDE classifier, KISSME, CMC/mAP."""
from __future__ import annotations

import logging
import shutil
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from . import checkpoint
from .config import to_dict
from .data import DatasetManifest, Record, load_tensors, tensor_to_image
from .errors import ConfigError, DataError
from .generator import generate
from .rng import derive_seed, numpy_rng
from .trainer import load_generator

log = logging.getLogger(__name__)

EMBEDDER_KIND = "ide-embedder"


# --------------------------------------------------------------------------
# augmentation


def augment(manifest: DatasetManifest, generator_ckpt, factor: int, seed: int, out_root,
            batch_size: int = 64) -> DatasetManifest:
    """Add ``factor - 1`` pose-transferred copies of every record.

    Target poses are drawn uniformly from the other records of the split, whatever their
    identity; each synthetic image keeps the identity of its source record. The input tree is
    copied, never modified.
    """
    if factor < 1:
        raise ConfigError(f"augmentation factor must be >= 1, got {factor}")
    if factor == 1:
        return manifest
    if len(manifest.records) < 2:
        raise DataError("augmentation needs at least two records")
    out_root = Path(out_root)
    src_dir, dst_dir = manifest.split_dir, out_root / manifest.split
    if dst_dir.resolve() == src_dir.resolve():
        raise ConfigError("augmentation output must not overwrite the input split")
    for sub in ("images", "parsing", "masks"):
        (dst_dir / sub).mkdir(parents=True, exist_ok=True)
    for rec in manifest.records:
        for rel in (rec.image, rec.parsing, rec.mask):
            shutil.copyfile(src_dir / rel, dst_dir / rel)

    gen, run_cfg = load_generator(generator_ckpt)
    data = load_tensors(manifest)
    rng = numpy_rng(seed, "augment-targets")
    n = len(manifest.records)
    jobs = []
    for i in range(n):
        for k in range(1, factor):
            j = int(rng.integers(n - 1))
            jobs.append((i, j + (j >= i), k))

    records = list(manifest.records)
    with torch.no_grad():
        for start in range(0, len(jobs), batch_size):
            chunk = jobs[start:start + batch_size]
            src = [i for i, _, _ in chunk]
            tgt = [j for _, j, _ in chunk]
            fake = generate(gen, data.inputs(src, tgt), run_cfg.disable_mask)
            for (i, j, k), img in zip(chunk, fake):
                s, t = manifest.records[i], manifest.records[j]
                pose = f"{s.pose}g{k}"
                rec = Record(s.identity, pose, f"images/{s.identity}_{pose}.png",
                             f"parsing/{s.identity}_{pose}.png", f"masks/{s.identity}_{pose}.png",
                             synthetic=True)
                Image.fromarray(tensor_to_image(img)).save(dst_dir / rec.image, format="PNG")
                shutil.copyfile(src_dir / t.parsing, dst_dir / rec.parsing)
                shutil.copyfile(src_dir / t.mask, dst_dir / rec.mask)
                records.append(rec)
    out = replace(manifest, root=out_root, records=tuple(records))
    out.save()
    return out


# --------------------------------------------------------------------------
# IDE embedder


@dataclass(frozen=True)
class EmbedderConfig:
    channels: int = 16
    embed_dim: int = 64
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim <= 0 or self.channels <= 0:
            raise ConfigError("embedder dimensions must be positive")


class Embedder(nn.Module):
    """Small convolutional identity classifier; the layer before the classifier is the embedding."""

    def __init__(self, num_ids: int, config: EmbedderConfig):
        super().__init__()
        c = config.channels
        self.config = config
        self.num_ids = num_ids

        def block(cin, cout):
            return nn.Sequential(nn.Conv2d(cin, cout, 3, 1, 1), nn.BatchNorm2d(cout), nn.ReLU(),
                                 nn.MaxPool2d(2))

        self.backbone = nn.Sequential(block(3, c), block(c, 2 * c), block(2 * c, 4 * c),
                                      nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.embedding = nn.Sequential(nn.Linear(4 * c, config.embed_dim), nn.BatchNorm1d(config.embed_dim))
        self.classifier = nn.Linear(config.embed_dim, num_ids)

    def embed(self, x):
        return self.embedding(self.backbone(x))

    def forward(self, x):
        return self.classifier(torch.relu(self.embed(x)))


def _init_embedder(model: Embedder, seed: int) -> Embedder:
    g = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            with torch.no_grad():
                fan_in = m.weight[0].numel()
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=g)
                m.bias.zero_()
    return model


def train_ide(manifest: DatasetManifest, config: EmbedderConfig) -> tuple[Embedder, dict]:
    """Softmax identity classification; returns the embedder and its final training accuracy."""
    ids = manifest.identities()
    if len(ids) < 2:
        raise DataError("identity classification needs at least two identities")
    label_of = {k: i for i, k in enumerate(ids)}
    data = load_tensors(manifest)
    x = data.images
    y = torch.tensor([label_of[r.identity] for r in manifest.records])
    model = _init_embedder(Embedder(len(ids), config), derive_seed(config.seed, "ide-init"))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    loss_fn = nn.CrossEntropyLoss()
    model.train()
    for epoch in range(config.epochs):
        order = torch.from_numpy(numpy_rng(config.seed, "ide-order", epoch).permutation(len(y)))
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            if len(idx) < 2:
                continue
            loss = loss_fn(model(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        acc = float((model(x).argmax(dim=1) == y).float().mean())
    return model, {"train_accuracy": acc, "num_ids": len(ids), "num_images": len(y)}


@torch.no_grad()
def embed_images(model: Embedder, images: torch.Tensor, batch_size: int = 128) -> np.ndarray:
    model.eval()
    return np.concatenate([model.embed(images[i:i + batch_size]).double().numpy()
                           for i in range(0, len(images), batch_size)])


def save_embedder(path, model: Embedder, identities) -> Path:
    meta = {"kind": EMBEDDER_KIND, "num_ids": model.num_ids, "config": to_dict(model.config),
            "identities": list(identities)}
    return checkpoint.save(path, checkpoint.module_tensors("embedder", model), meta)


def load_embedder(path) -> Embedder:
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != EMBEDDER_KIND:
        raise ConfigError(f"{path} is not an embedder checkpoint")
    model = Embedder(meta["num_ids"], EmbedderConfig(**meta["config"]))
    checkpoint.load_module("embedder", model, arrays)
    return model.eval()


# --------------------------------------------------------------------------
# distances


@dataclass(frozen=True)
class MetricModel:
    kind: str = "euclidean"
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("euclidean", "kissme"):
            raise ConfigError(f"unknown metric kind {self.kind!r}")
        if self.kind == "kissme" and self.matrix is None:
            raise ConfigError("a kissme metric needs its matrix")


def _second_moment(diffs: np.ndarray, name: str) -> np.ndarray:
    d = np.asarray(diffs, dtype=np.float64)
    if d.ndim == 1:
        d = d[:, None]
    cov = d.T @ d / len(d)
    w = np.linalg.eigvalsh(cov)
    if len(d) <= d.shape[1] or w.min() <= 1e-12 * max(w.max(), 1e-300):
        warnings.warn(f"{name} covariance is singular; adding 1e-6 ridge", RuntimeWarning, stacklevel=3)
        cov = cov + 1e-6 * np.eye(cov.shape[0])
    return cov


def fit_kissme(same_diffs, diff_diffs) -> MetricModel:
    """``M = inv(S_same) - inv(S_diff)`` projected onto the PSD cone.

    Each argument holds difference vectors ``x_i - x_j`` for same- and different-identity pairs;
    the covariances are zero-mean second moments.
    """
    inv_s = np.linalg.inv(_second_moment(same_diffs, "same-pair"))
    inv_d = np.linalg.inv(_second_moment(diff_diffs, "different-pair"))
    m = inv_s - inv_d
    w, v = np.linalg.eigh((m + m.T) / 2)
    m = (v * np.clip(w, 0.0, None)) @ v.T
    return MetricModel("kissme", (m + m.T) / 2)


def kissme_pairs(emb: np.ndarray, ids, seed: int, max_diff: int | None = None):
    """Difference vectors for all same-identity pairs and a seeded sample of different ones."""
    ids = np.asarray(ids)
    ii, jj = np.triu_indices(len(ids), k=1)
    same = ids[ii] == ids[jj]
    diff_idx = np.flatnonzero(~same)
    cap = max_diff or max(4 * int(same.sum()), emb.shape[1] + 1)
    if len(diff_idx) > cap:
        diff_idx = np.sort(numpy_rng(seed, "kissme-diff").choice(diff_idx, cap, replace=False))
    return emb[ii[same]] - emb[jj[same]], emb[ii[diff_idx]] - emb[jj[diff_idx]]


def distance(metric: MetricModel, x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"embedding dimensions differ: {x.shape} vs {y.shape}")
    d = x - y
    if metric.kind == "euclidean":
        return float(np.sqrt(d @ d))
    return float(d @ metric.matrix @ d)


def pairwise_distances(metric: MetricModel, queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"embedding dimensions differ: {q.shape[1]} vs {g.shape[1]}")
    diff = q[:, None, :] - g[None, :, :]
    if metric.kind == "euclidean":
        return np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    return np.einsum("qgd,de,qge->qg", diff, metric.matrix, diff)


def rank_metrics(dist: np.ndarray, query_ids, gallery_ids, exclude_self: bool = False,
                 ranks=(1, 5, 10)) -> dict:
    """Single-query CMC and mAP from a query×gallery distance matrix.

    Ties keep gallery order. With ``exclude_self`` the diagonal is dropped (query set == gallery).
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_ids, g_ids = np.asarray(query_ids), np.asarray(gallery_ids)
    if dist.shape[1] == 0:
        raise DataError("empty gallery")
    cmc = np.zeros(dist.shape[1])
    aps = []
    for qi in range(dist.shape[0]):
        keep = np.ones(dist.shape[1], dtype=bool)
        if exclude_self:
            keep[qi] = False
        order = np.flatnonzero(keep)[np.argsort(dist[qi, keep], kind="stable")]
        hits = g_ids[order] == q_ids[qi]
        if not hits.any():
            raise DataError(f"query {qi} (identity {q_ids[qi]!r}) has no match in the gallery")
        cmc[np.argmax(hits):] += 1
        pos = np.flatnonzero(hits)
        aps.append(float(np.mean(np.arange(1, len(pos) + 1) / (pos + 1))))
    cmc /= dist.shape[0]
    out = {f"rank{k}": float(cmc[min(k, len(cmc)) - 1]) for k in ranks}
    out["mAP"] = float(np.mean(aps))
    return out


def evaluate_reid(embedder: Embedder, metric: MetricModel, query, gallery, exclude_self=False) -> dict:
    """``query`` and ``gallery`` are ``(images, identities)`` tuples."""
    q_emb = embed_images(embedder, query[0])
    g_emb = embed_images(embedder, gallery[0])
    return rank_metrics(pairwise_distances(metric, q_emb, g_emb), query[1], gallery[1], exclude_self)


# --------------------------------------------------------------------------
# protocol


def query_gallery_split(manifest: DatasetManifest, queries_per_id: int = 2):
    """First ``queries_per_id`` poses of each identity are queries, the rest form the gallery."""
    data = load_tensors(manifest)
    seen: dict[str, int] = {}
    q_idx, g_idx = [], []
    for i, rec in enumerate(manifest.records):
        n = seen.get(rec.identity, 0)
        (q_idx if n < queries_per_id else g_idx).append(i)
        seen[rec.identity] = n + 1
    if not g_idx:
        raise DataError(f"{queries_per_id} queries per identity leave an empty gallery in {manifest.split_dir}")
    ids = np.array(data.identities)
    return ((data.images[q_idx], ids[q_idx]), (data.images[g_idx], ids[g_idx]))


def run_protocol(train: DatasetManifest, test: DatasetManifest, embed_cfg: EmbedderConfig, *,
                 alpha: int = 1, generator_ckpt=None, metric_kind: str = "euclidean",
                 work_dir=None, queries_per_id: int = 2) -> dict:
    """One seed of the augmentation experiment: (augment) → IDE → metric → CMC/mAP."""
    if alpha > 1:
        if generator_ckpt is None or work_dir is None:
            raise ConfigError("augmentation needs a generator checkpoint and a work directory")
        train_used = augment(train, generator_ckpt, alpha, embed_cfg.seed,
                             Path(work_dir) / f"augmented_seed{embed_cfg.seed}")
    else:
        train_used = train
    model, info = train_ide(train_used, embed_cfg)
    if metric_kind == "kissme":
        base = load_tensors(train)
        same, diff = kissme_pairs(embed_images(model, base.images), base.identities, embed_cfg.seed)
        metric = fit_kissme(same, diff)
    else:
        metric = MetricModel(metric_kind)
    query, gallery = query_gallery_split(test, queries_per_id)
    result = evaluate_reid(model, metric, query, gallery)
    result.update(train_accuracy=info["train_accuracy"], train_images=info["num_images"])
    return result
