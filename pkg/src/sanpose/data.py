"""Dataset types, on-disk layout, pair construction and the synthetic person generator.

On-disk layout for one split::

    <root>/<split>/images/<id>_<pose>.png    8-bit RGB
    <root>/<split>/parsing/<id>_<pose>.png   8-bit indexed labels
    <root>/<split>/masks/<id>_<pose>.png     8-bit, 0 or 255
    <root>/<split>/manifest.json

Images live in [-1, 1] once loaded.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import (
    ConfigError,
    DataError,
    EmptyPairsError,
    LabelRangeError,
    MissingFileError,
    SizeMismatchError,
    SplitOverlapError,
)

log = logging.getLogger(__name__)

# Human parsing label space used for real person data (20 classes).
LABELS = (
    "background", "hat", "hair", "glove", "sunglasses", "upper-clothes", "dress",
    "coat", "socks", "pants", "jumpsuits", "scarf", "skirt", "face", "left-arm",
    "right-arm", "left-leg", "right-leg", "left-shoe", "right-shoe",
)
BACKGROUND = 0
FACE, TORSO, ACCESSORY = 13, 5, 11
LEFT_ARM, RIGHT_ARM, LEFT_LEG, RIGHT_LEG = 14, 15, 16, 17

MANIFEST_NAME = "manifest.json"


def encode_semantic_onehot(indexed_map, num_labels: int) -> np.ndarray:
    """One-hot encode an H×W integer label map into an L×H×W uint8 array."""
    indexed = np.asarray(indexed_map)
    if indexed.ndim != 2:
        raise ValueError(f"expected a 2-D label map, got shape {indexed.shape}")
    bad = np.argwhere((indexed < 0) | (indexed >= num_labels))
    if len(bad):
        y, x = bad[0]
        raise LabelRangeError(
            f"label {int(indexed[y, x])} at pixel ({y}, {x}) outside [0, {num_labels})"
        )
    return (np.arange(num_labels)[:, None, None] == indexed[None]).astype(np.uint8)


def mask_from_semantic(semantic: np.ndarray, background_label: int = BACKGROUND) -> np.ndarray:
    """Binary foreground mask: 1 wherever the one-hot label is not ``background_label``."""
    semantic = np.asarray(semantic)
    if not 0 <= background_label < semantic.shape[0]:
        raise ValueError(f"background label {background_label} outside [0, {semantic.shape[0]})")
    return (semantic[background_label] == 0).astype(np.uint8)


@dataclass(frozen=True)
class Record:
    identity: str
    pose: str
    image: str
    parsing: str
    mask: str
    synthetic: bool = False

    @property
    def name(self) -> str:
        return f"{self.identity}_{self.pose}"


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    split: str
    records: tuple[Record, ...]
    num_labels: int
    image_size: tuple[int, int]
    seed: int | None = None

    @property
    def split_dir(self) -> Path:
        return Path(self.root) / self.split

    def identities(self) -> list[str]:
        return sorted({r.identity for r in self.records})

    def index(self) -> dict[str, int]:
        return {r.name: i for i, r in enumerate(self.records)}

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "num_labels": self.num_labels,
            "image_size": list(self.image_size),
            "seed": self.seed,
            "records": [asdict(r) for r in self.records],
        }

    def save(self) -> Path:
        path = self.split_dir / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return path


@dataclass(frozen=True)
class PairedSample:
    source: Record
    target: Record

    @property
    def identity(self) -> str:
        return self.source.identity


def make_pairs(manifest: DatasetManifest, seed: int, max_pairs: int | None = None) -> list[PairedSample]:
    """All same-identity, distinct-pose ordered pairs, optionally subsampled without replacement."""
    by_id: dict[str, list[Record]] = {}
    for rec in manifest.records:
        by_id.setdefault(rec.identity, []).append(rec)
    pairs = [
        PairedSample(a, b)
        for ident in sorted(by_id)
        for a in by_id[ident]
        for b in by_id[ident]
        if a.pose != b.pose
    ]
    if not pairs:
        raise EmptyPairsError(f"no identity in split {manifest.split!r} has two or more poses")
    if max_pairs is not None and max_pairs < len(pairs):
        rng = np.random.default_rng(seed)
        keep = rng.choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[i] for i in keep]
    return pairs


# --------------------------------------------------------------------------
# synthetic people


@dataclass(frozen=True)
class SynthConfig:
    image_size: tuple[int, int] = (32, 32)
    identities: int = 20
    poses: int = 8
    test_identities: int = 10
    num_labels: int = 20
    seed: int = 7
    background: float = 0.5
    min_color_distance: float = 0.2

    def __post_init__(self):
        h, w = self.image_size
        if min(h, w, self.identities, self.poses, self.num_labels) <= 0 or self.test_identities < 0:
            raise ConfigError(f"synthetic config counts must be positive: {self}")
        if self.num_labels <= max(FACE, TORSO, ACCESSORY, LEFT_ARM, RIGHT_ARM, LEFT_LEG, RIGHT_LEG):
            raise ConfigError("synthetic figures need the 20-label layout (num_labels >= 18)")


@dataclass
class _Look:
    skin: np.ndarray
    torso: np.ndarray
    torso2: np.ndarray
    pattern: int
    legs: np.ndarray
    accessory: np.ndarray | None
    build: float = 1.0


def _palette(rng: np.random.Generator, n: int, min_dist: float) -> np.ndarray:
    colors: list[np.ndarray] = []
    for _ in range(200 * n):
        c = rng.uniform(0.05, 0.95, size=3)
        if all(np.linalg.norm(c - o) > min_dist for o in colors):
            colors.append(c)
            if len(colors) == n:
                return np.stack(colors)
    raise ConfigError(f"cannot place {n} torso colours {min_dist} apart")


def _looks(config: SynthConfig, rng: np.random.Generator, n: int) -> list[_Look]:
    torsos = _palette(rng, n, config.min_color_distance)
    skins = np.array([[0.93, 0.78, 0.65], [0.80, 0.60, 0.45], [0.55, 0.38, 0.26], [0.98, 0.87, 0.77]])
    looks = []
    for i in range(n):
        has_bag = rng.random() < 0.5
        looks.append(_Look(
            skin=skins[rng.integers(len(skins))],
            torso=torsos[i],
            torso2=rng.uniform(0.05, 0.95, size=3),
            pattern=int(rng.integers(3)),
            legs=rng.uniform(0.05, 0.8, size=3),
            accessory=rng.uniform(0.05, 0.95, size=3) if has_bag else None,
            build=float(rng.uniform(0.9, 1.1)),
        ))
    return looks


def _capsule(yy, xx, p0, p1, radius):
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    t = ((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2 <= radius ** 2


def _limb_end(start, length, angle):
    # angle 0 points straight down the image
    return start[0] + length * math.cos(angle), start[1] + length * math.sin(angle)


def render_person(look: _Look, pose: dict, size: tuple[int, int], background: float,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Rasterise one figure. Returns (rgb float in [0,1] H×W×3, label map H×W)."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    s = h * look.build
    cy = h * (0.5 + pose["dy"])
    cx = w * (0.5 + pose["dx"])
    labels = np.zeros((h, w), dtype=np.uint8)

    neck = (cy - 0.26 * s, cx)
    hip = (cy + 0.06 * s, cx)
    shoulder_l = (neck[0] + 0.03 * s, cx - 0.09 * s)
    shoulder_r = (neck[0] + 0.03 * s, cx + 0.09 * s)
    hip_l = (hip[0], cx - 0.05 * s)
    hip_r = (hip[0], cx + 0.05 * s)

    leg_l = _capsule(yy, xx, hip_l, _limb_end(hip_l, 0.34 * s, pose["leg_l"]), 0.045 * s)
    leg_r = _capsule(yy, xx, hip_r, _limb_end(hip_r, 0.34 * s, pose["leg_r"]), 0.045 * s)
    labels[leg_l] = LEFT_LEG
    labels[leg_r] = RIGHT_LEG
    torso = _capsule(yy, xx, (neck[0] + 0.05 * s, cx), (hip[0] - 0.02 * s, cx), 0.11 * s)
    labels[torso] = TORSO
    if look.accessory is not None:
        side = 1.0 if pose["flip"] else -1.0
        bag = (np.abs(yy - (hip[0] - 0.02 * s)) <= 0.06 * s) & (np.abs(xx - (cx + side * 0.15 * s)) <= 0.05 * s)
        labels[bag] = ACCESSORY
    arm_l = _capsule(yy, xx, shoulder_l, _limb_end(shoulder_l, 0.28 * s, pose["arm_l"]), 0.035 * s)
    arm_r = _capsule(yy, xx, shoulder_r, _limb_end(shoulder_r, 0.28 * s, pose["arm_r"]), 0.035 * s)
    labels[arm_l] = LEFT_ARM
    labels[arm_r] = RIGHT_ARM
    head = (yy - (neck[0] - 0.08 * s)) ** 2 + (xx - cx) ** 2 <= (0.085 * s) ** 2
    labels[head] = FACE

    # low-frequency background clutter
    coarse = rng.uniform(0.0, 1.0, size=(4, 4, 3))
    bg = np.asarray(Image.fromarray((coarse * 255).astype(np.uint8)).resize((w, h), Image.BILINEAR),
                    dtype=np.float64) / 255.0
    base = rng.uniform(0.3, 0.7, size=3)
    rgb = (1 - background) * base + background * bg

    stripes_h = (np.floor(yy / 2.0) % 2).astype(bool)
    stripes_v = (np.floor(xx / 2.0) % 2).astype(bool)
    pattern = {0: np.zeros_like(stripes_h), 1: stripes_h, 2: stripes_v}[look.pattern]
    colors = {FACE: look.skin, LEFT_ARM: look.skin, RIGHT_ARM: look.skin,
              LEFT_LEG: look.legs, RIGHT_LEG: look.legs * 0.85}
    for lab, col in colors.items():
        rgb[labels == lab] = col
    rgb[(labels == TORSO) & ~pattern] = look.torso
    rgb[(labels == TORSO) & pattern] = look.torso2
    if look.accessory is not None:
        rgb[labels == ACCESSORY] = look.accessory
    fg = labels != BACKGROUND
    rgb[fg] += rng.normal(0.0, 0.02, size=(int(fg.sum()), 3))
    return np.clip(rgb, 0.0, 1.0), labels


def _random_pose(rng: np.random.Generator) -> dict:
    return {
        "dx": float(rng.uniform(-0.12, 0.12)),
        "dy": float(rng.uniform(-0.04, 0.04)),
        "arm_l": float(rng.uniform(0.15, 2.6)),
        "arm_r": float(-rng.uniform(0.15, 2.6)),
        "leg_l": float(rng.uniform(0.0, 0.5)),
        "leg_r": float(-rng.uniform(0.0, 0.5)),
        "flip": bool(rng.random() < 0.5),
    }


def _write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def synth_generate(config: SynthConfig, out_root) -> DatasetManifest:
    """Render the synthetic benchmark under ``out_root``; returns the train manifest.

    A ``test`` split with ``config.test_identities`` unseen identities is written alongside.
    """
    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write dataset root {out_root}: {exc}") from exc
    rng = np.random.default_rng(config.seed)
    n_total = config.identities + config.test_identities
    looks = _looks(config, rng, n_total)
    manifests = {}
    for split, ids in (("train", range(config.identities)),
                       ("test", range(config.identities, n_total))):
        records = []
        for i in ids:
            ident = f"{i:04d}"
            for p in range(config.poses):
                prng = np.random.default_rng([config.seed, i, p])
                rgb, labels = render_person(looks[i], _random_pose(prng), config.image_size,
                                            config.background, prng)
                pose = f"{p:02d}"
                rec = Record(ident, pose, f"images/{ident}_{pose}.png",
                             f"parsing/{ident}_{pose}.png", f"masks/{ident}_{pose}.png")
                base = out_root / split
                _write_png(base / rec.image, np.round(rgb * 255).astype(np.uint8))
                _write_png(base / rec.parsing, labels)
                mask = mask_from_semantic(encode_semantic_onehot(labels, config.num_labels))
                _write_png(base / rec.mask, mask * 255)
                records.append(rec)
        if not records:
            continue
        m = DatasetManifest(out_root, split, tuple(records), config.num_labels,
                            tuple(config.image_size), config.seed)
        m.save()
        manifests[split] = m
    if "train" not in manifests:
        raise ConfigError("synthetic dataset needs at least one training identity")
    return manifests["train"]


# --------------------------------------------------------------------------
# loading


def _read_manifest(path: Path) -> dict:
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc


def _decode(path: Path) -> np.ndarray:
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    with Image.open(path) as im:
        return np.asarray(im)


def load_dataset(root, split: str, validate: bool = True) -> DatasetManifest:
    """Load and validate ``<root>/<split>/manifest.json``."""
    root = Path(root)
    raw = _read_manifest(root / split / MANIFEST_NAME)
    manifest = DatasetManifest(
        root=root,
        split=raw.get("split", split),
        records=tuple(Record(**r) for r in raw["records"]),
        num_labels=int(raw["num_labels"]),
        image_size=tuple(raw["image_size"]),
        seed=raw.get("seed"),
    )
    if validate:
        _validate(manifest)
    return manifest


def _validate(manifest: DatasetManifest) -> None:
    h, w = manifest.image_size
    base = manifest.split_dir
    for rec in manifest.records:
        img = _decode(base / rec.image)
        par = _decode(base / rec.parsing)
        msk = _decode(base / rec.mask)
        if img.shape != (h, w, 3):
            raise SizeMismatchError(f"{base / rec.image}: shape {img.shape}, expected {(h, w, 3)}")
        for path, arr in ((rec.parsing, par), (rec.mask, msk)):
            if arr.shape != (h, w):
                raise SizeMismatchError(f"{base / path}: shape {arr.shape}, expected {(h, w)}")
        if par.max() >= manifest.num_labels:
            y, x = np.argwhere(par >= manifest.num_labels)[0]
            raise LabelRangeError(f"{base / rec.parsing}: label {int(par[y, x])} at pixel ({y}, {x}) "
                                  f"outside [0, {manifest.num_labels})")
        if not np.isin(msk, (0, 255)).all():
            raise DataError(f"{base / rec.mask}: mask values must be 0 or 255")
    mine = set(manifest.identities())
    root = Path(manifest.root)
    for other in sorted(root.iterdir()):
        if other.name == manifest.split or not (other / MANIFEST_NAME).is_file():
            continue
        theirs = {r["identity"] for r in _read_manifest(other / MANIFEST_NAME)["records"]}
        shared = mine & theirs
        # train and test must be disjoint; other split names are not checked
        if shared and {manifest.split, other.name} == {"train", "test"}:
            raise SplitOverlapError(f"identities shared by {manifest.split!r} and {other.name!r}: "
                                    f"{sorted(shared)[:5]}")


# --------------------------------------------------------------------------
# tensors


@dataclass
class DatasetTensors:
    """A manifest decoded into memory, ready for batching."""
    images: torch.Tensor      # N×3×H×W in [-1, 1]
    labels: torch.Tensor      # N×H×W int64
    masks: torch.Tensor       # N×1×H×W in {0, 1}
    num_labels: int
    names: list[str]
    identities: list[str]

    def __len__(self):
        return len(self.names)

    def semantic(self, idx) -> torch.Tensor:
        lab = self.labels[idx]
        return (torch.arange(self.num_labels).view(1, -1, 1, 1) == lab.unsqueeze(1)).float()

    def inputs(self, src, tgt) -> dict[str, torch.Tensor]:
        src = torch.as_tensor(src, dtype=torch.long)
        tgt = torch.as_tensor(tgt, dtype=torch.long)
        return {
            "img_src": self.images[src], "mask_src": self.masks[src], "sem_src": self.semantic(src),
            "img_tgt": self.images[tgt], "mask_tgt": self.masks[tgt], "sem_tgt": self.semantic(tgt),
        }


def image_to_tensor(rgb: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(rgb.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    arr = ((t.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def load_tensors(manifest: DatasetManifest) -> DatasetTensors:
    base = manifest.split_dir
    imgs, labs, msks = [], [], []
    for rec in manifest.records:
        imgs.append(image_to_tensor(_decode(base / rec.image)))
        labs.append(torch.from_numpy(_decode(base / rec.parsing).astype(np.int64)))
        msks.append(torch.from_numpy((_decode(base / rec.mask) > 0).astype(np.float32)))
    return DatasetTensors(
        images=torch.stack(imgs),
        labels=torch.stack(labs),
        masks=torch.stack(msks).unsqueeze(1),
        num_labels=manifest.num_labels,
        names=[r.name for r in manifest.records],
        identities=[r.identity for r in manifest.records],
    )


def pair_indices(manifest: DatasetManifest, pairs: Iterable[PairedSample]) -> tuple[np.ndarray, np.ndarray]:
    idx = manifest.index()
    pairs = list(pairs)
    return (np.array([idx[p.source.name] for p in pairs], dtype=np.int64),
            np.array([idx[p.target.name] for p in pairs], dtype=np.int64))


def colorize_labels(labels: np.ndarray, num_labels: int = len(LABELS)) -> np.ndarray:
    """Fixed-palette RGB rendering of an indexed label map, for contact sheets."""
    rng = np.random.default_rng(0)
    pal = rng.integers(0, 256, size=(max(num_labels, 1), 3)).astype(np.uint8)
    pal[BACKGROUND] = 0
    return pal[np.asarray(labels)]


def check_same_size(*arrays: Sequence) -> None:
    shapes = {tuple(a.shape[-2:]) for a in arrays}
    if len(shapes) > 1:
        raise SizeMismatchError(f"spatial sizes disagree: {sorted(shapes)}")
