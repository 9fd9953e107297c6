"""Synthetic paired source/target segmentation domains.

Each sample holds ellipse-shaped structures on a background.  Shapes come from
one random stream and intensities/noise from another, both derived from
``(seed, subject, slice)``, so two specs that differ only in their intensity
map produce identical masks when the seeds match.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .ioutil import atomic_write_bytes, atomic_write_text
from .priors import AnatomicalEntry, PriorTable
from .workers import worker_count

TNS_MAGIC = b"TNS1"
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class DomainSpec:
    height: int = 64
    width: int = 64
    n_classes: int = 2
    seed: int = 0
    gain: float = 1.0
    offset: float = 0.0
    gamma: float = 1.0
    noise: float = 0.1
    # per class, background first
    class_intensity: list = field(default_factory=lambda: [0.2, 0.8])
    # per foreground class: [[a_min, a_max], [b_min, b_max]] semi-axes in pixels
    axes: list = field(default_factory=lambda: [[[6.0, 12.0], [6.0, 12.0]]])
    presence_prob: list = field(default_factory=lambda: [0.9])
    count: list = field(default_factory=lambda: [1])
    split_fractions: list = field(default_factory=lambda: [0.6, 0.1, 0.3])

    def validate(self) -> None:
        k = self.n_classes
        if k < 2:
            raise DatasetError("n_classes must be >= 2")
        if self.gamma <= 0:
            raise DatasetError(f"gamma must be positive, got {self.gamma}")
        if self.noise < 0:
            raise DatasetError(f"noise must be non-negative, got {self.noise}")
        if len(self.class_intensity) != k:
            raise DatasetError(f"class_intensity needs {k} entries")
        for name in ("axes", "presence_prob", "count"):
            if len(getattr(self, name)) != k - 1:
                raise DatasetError(f"{name} needs {k - 1} foreground entries")
        for cls, (ra, rb) in enumerate(self.axes, start=1):
            lo = min(ra[0], rb[0])
            hi = max(ra[1], rb[1])
            if lo <= 0 or ra[0] > ra[1] or rb[0] > rb[1]:
                raise DatasetError(f"class {cls}: axis ranges must be positive and ordered")
            if 2 * math.ceil(hi) + 1 > min(self.height, self.width):
                raise DatasetError(f"class {cls}: axes up to {hi} px do not fit a "
                                   f"{self.height}x{self.width} image")
        for p in self.presence_prob:
            if not 0.0 <= p <= 1.0:
                raise DatasetError(f"presence_prob {p} outside [0, 1]")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise DatasetError("split_fractions must be three numbers summing to 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown domain spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sample:
    id: str
    subject: int
    slice: int
    split: str
    image: np.ndarray  # (1, H, W) float64
    mask: Optional[np.ndarray]  # (H, W) uint8, None when masks were not loaded
    tags: np.ndarray  # (K,) bool, tags[k] iff class k occupies a pixel


@dataclass
class Dataset:
    n_classes: int
    samples: list
    spec: Optional[dict] = None

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    def subjects(self, split: Optional[str] = None) -> dict:
        """Samples grouped by subject, slices in order."""
        groups: dict = {}
        for s in self.samples:
            if split is None or s.split == split:
                groups.setdefault(s.subject, []).append(s)
        return {k: sorted(v, key=lambda s: s.slice) for k, v in sorted(groups.items())}

    @property
    def has_masks(self) -> bool:
        return all(s.mask is not None for s in self.samples)


def tags_from_mask(mask: np.ndarray, n_classes: int) -> np.ndarray:
    return np.bincount(mask.reshape(-1), minlength=n_classes)[:n_classes] > 0


# ---------------------------------------------------------------------------
# presets


def source_spec(seed: int = 0, size: int = 64, fg_ratio: float = 0.05) -> DomainSpec:
    """Binary source domain, bright structure on a dark background."""
    return DomainSpec(height=size, width=size, seed=seed, axes=[_axes_for_ratio(size, fg_ratio)],
                      presence_prob=[0.9], noise=0.1)


def target_spec(seed: int = 1, size: int = 64, fg_ratio: float = 0.05) -> DomainSpec:
    """Intensity-shifted binary target: compressed, darker contrast and more noise."""
    return replace(source_spec(seed, size, fg_ratio), gain=0.6, offset=0.05, gamma=1.3, noise=0.16)


def hard_target_spec(seed: int = 1, size: int = 64, fg_ratio: float = 0.05) -> DomainSpec:
    """Contrast-inverted target emulating a cross-modality gap."""
    return replace(source_spec(seed, size, fg_ratio), gain=-0.8, offset=0.9, gamma=1.0, noise=0.12)


def cardiac_spec(seed: int = 0, size: int = 64) -> DomainSpec:
    """Five-class preset with foreground sizes proportioned like the cardiac priors."""
    from .priors import cardiac_table

    axes = [_axes_for_ratio(size, r) for r in cardiac_table().foreground]
    return DomainSpec(height=size, width=size, n_classes=5, seed=seed,
                      class_intensity=[0.1, 0.35, 0.55, 0.75, 0.95], axes=axes,
                      presence_prob=[0.9, 0.8, 0.8, 0.7], count=[1, 1, 1, 1], noise=0.08)


def _axes_for_ratio(size: int, ratio: float) -> list:
    """Axis ranges [0.75 r, 1.25 r] whose mean ellipse area is ``ratio`` of the image."""
    r = math.sqrt(ratio * size * size / math.pi)
    return [[0.75 * r, 1.25 * r], [0.75 * r, 1.25 * r]]


def prior_table_for(spec: DomainSpec) -> PriorTable:
    """Prior ratios from the configured mean shape areas (pixel units, 1 mm/px)."""
    entries = []
    for cls, ((a0, a1), (b0, b1)) in enumerate(spec.axes, start=1):
        area = spec.count[cls - 1] * math.pi * 0.5 * (a0 + a1) * 0.5 * (b0 + b1)
        entries.append(AnatomicalEntry(cls, area, 1.0, 1.0, spec.height * spec.width, f"class{cls}"))
    return PriorTable.from_entries(entries, spec.n_classes)


# ---------------------------------------------------------------------------
# generation


def _rasterize_ellipse(mask, label, rng, ax_range, bx_range):
    h, w = mask.shape
    a = rng.uniform(*ax_range)
    b = rng.uniform(*bx_range)
    r = math.ceil(max(a, b))
    cy = rng.uniform(r, h - 1 - r)
    cx = rng.uniform(r, w - 1 - r)
    theta = rng.uniform(0.0, math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    mask[u * u + v * v <= 1.0] = label


def _sample_mask(spec: DomainSpec, rng) -> np.ndarray:
    mask = np.zeros((spec.height, spec.width), dtype=np.uint8)
    for cls in range(1, spec.n_classes):
        ar, br = spec.axes[cls - 1]
        for _ in range(spec.count[cls - 1]):
            if rng.uniform() < spec.presence_prob[cls - 1]:
                _rasterize_ellipse(mask, cls, rng, ar, br)
    return mask


def render_image(spec: DomainSpec, mask: np.ndarray, rng) -> np.ndarray:
    base = np.asarray(spec.class_intensity, dtype=np.float64)[mask]
    clean = np.clip(spec.gain * base + spec.offset, 0.0, 1.0) ** spec.gamma
    noisy = clean + spec.noise * rng.standard_normal(mask.shape)
    return np.clip(noisy, 0.0, 1.0)[None]


def _subject_splits(spec: DomainSpec, n_subjects: int) -> list:
    f_train, f_val, _ = spec.split_fractions
    n_train = int(round(f_train * n_subjects))
    n_val = int(round(f_val * n_subjects))
    n_train = min(n_train, n_subjects)
    n_val = min(n_val, n_subjects - n_train)
    order = np.random.default_rng([spec.seed, 0x5B1]).permutation(n_subjects)
    split = [""] * n_subjects
    for rank, subj in enumerate(order):
        split[subj] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return split


def generate(spec: DomainSpec, n_subjects: int, slices_per_subject: int) -> Dataset:
    spec.validate()
    if n_subjects < 1 or slices_per_subject < 1:
        raise DatasetError("need at least one subject and one slice")
    splits = _subject_splits(spec, n_subjects)

    def make(key):
        subj, sl = key
        shape_rng = np.random.default_rng([spec.seed, subj, sl, 0])
        noise_rng = np.random.default_rng([spec.seed, subj, sl, 1])
        mask = _sample_mask(spec, shape_rng)
        image = render_image(spec, mask, noise_rng)
        return Sample(f"s{subj:03d}_{sl:03d}", subj, sl, splits[subj], image, mask,
                      tags_from_mask(mask, spec.n_classes))

    keys = [(s, z) for s in range(n_subjects) for z in range(slices_per_subject)]
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        samples = list(pool.map(make, keys))
    return Dataset(spec.n_classes, samples, spec.to_dict())


# ---------------------------------------------------------------------------
# file formats


def encode_tns(arr: np.ndarray, dtype: str) -> bytes:
    """TNS1 blob: magic, ASCII 'H W C dtype' line, little-endian row-major payload."""
    if arr.ndim == 2:
        h, w, c = arr.shape[0], arr.shape[1], 1
        hwc = arr[:, :, None]
    elif arr.ndim == 3:  # (C, H, W) -> H W C order on disk
        c, h, w = arr.shape
        hwc = np.transpose(arr, (1, 2, 0))
    else:
        raise DatasetError(f"cannot encode array of shape {arr.shape}")
    if dtype == "f64":
        payload = np.ascontiguousarray(hwc, dtype="<f8").tobytes()
    elif dtype == "u8":
        payload = np.ascontiguousarray(hwc, dtype=np.uint8).tobytes()
    else:
        raise DatasetError(f"unsupported dtype {dtype}")
    return TNS_MAGIC + f"{h} {w} {c} {dtype}\n".encode("ascii") + payload


def decode_tns(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    """Inverse of :func:`encode_tns`; f64 gives (C, H, W), u8 gives (H, W)."""
    if not raw.startswith(TNS_MAGIC):
        raise DatasetError(f"{source}: bad magic, expected TNS1")
    nl = raw.find(b"\n", len(TNS_MAGIC))
    if nl < 0:
        raise DatasetError(f"{source}: missing header line")
    try:
        hs, ws, cs, dtype = raw[len(TNS_MAGIC):nl].decode("ascii").split()
        h, w, c = int(hs), int(ws), int(cs)
    except ValueError:
        raise DatasetError(f"{source}: malformed header") from None
    payload = raw[nl + 1:]
    itemsize = {"f64": 8, "u8": 1}.get(dtype)
    if itemsize is None:
        raise DatasetError(f"{source}: unsupported dtype {dtype}")
    if len(payload) != h * w * c * itemsize:
        raise DatasetError(f"{source}: truncated payload ({len(payload)} bytes, "
                           f"expected {h * w * c * itemsize})")
    if dtype == "f64":
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(h, w, c)
        return np.transpose(arr, (2, 0, 1)).copy()
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c)
    if c != 1:
        raise DatasetError(f"{source}: mask must have one channel")
    return arr[:, :, 0].copy()


def write_dataset(dataset: Dataset, directory) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.samples:
        img_rel = f"images/{s.id}.tns"
        mask_rel = f"masks/{s.id}.tns"
        atomic_write_bytes(root / img_rel, encode_tns(s.image, "f64"))
        if s.mask is not None:
            atomic_write_bytes(root / mask_rel, encode_tns(s.mask, "u8"))
        entries.append({"id": s.id, "subject": s.subject, "slice": s.slice, "split": s.split,
                        "image_path": img_rel, "mask_path": mask_rel,
                        "tags": [bool(t) for t in s.tags]})
    manifest = {"classes": dataset.n_classes, "samples": entries}
    if dataset.spec is not None:
        manifest["spec"] = dataset.spec
    atomic_write_text(root / "manifest.json", json.dumps(manifest, indent=1) + "\n")


def read_dataset(directory, masks: bool = True) -> Dataset:
    """Load a dataset directory.

    With ``masks=False`` only images and tags are read, which is all the
    source-free adaptation loop is allowed to see.
    """
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{mpath}: manifest not found")
    manifest = json.loads(mpath.read_text())
    k = int(manifest["classes"])
    samples = []
    for i, e in enumerate(manifest["samples"]):
        ipath = root / e["image_path"]
        if not ipath.exists():
            raise DatasetError(f"{ipath}: image listed in manifest is missing")
        image = decode_tns(ipath.read_bytes(), str(ipath))
        mask = None
        tags = np.asarray(e["tags"], dtype=bool)
        if tags.shape != (k,):
            raise DatasetError(f"{mpath}: sample [{i}] tags length {tags.size}, expected {k}")
        if masks:
            mp = root / e["mask_path"]
            if not mp.exists():
                raise DatasetError(f"{mp}: mask listed in manifest is missing")
            mask = decode_tns(mp.read_bytes(), str(mp))
            if mask.shape != image.shape[1:]:
                raise DatasetError(f"{mp}: mask shape {mask.shape} does not match image {image.shape}")
            if mask.max(initial=0) >= k:
                raise DatasetError(f"{mp}: label >= {k}")
            if not np.array_equal(tags_from_mask(mask, k), tags):
                raise DatasetError(f"{mpath}: sample {e['id']} tags disagree with its mask")
        samples.append(Sample(e["id"], int(e["subject"]), int(e.get("slice", 0)), e["split"],
                              image, mask, tags))
    return Dataset(k, samples, manifest.get("spec"))


def read_spec(path) -> DomainSpec:
    return DomainSpec.from_dict(json.loads(Path(path).read_text()))
