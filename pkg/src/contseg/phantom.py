"""Procedural, partially-labeled 3D phantom datasets.

Each volume contains the full synthetic anatomy: a body cylinder cut into
depth bands (body parts) and one ellipsoidal organ per global class.  A
dataset only *labels* its own class subset, so organs outside the subset are
background in its label maps, exactly the background shift a continual
segmenter has to live with.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .nn.tensor import load_tensor, save_tensor

log = logging.getLogger(__name__)


class PlacementError(RuntimeError):
    """An organ could not be placed inside its body part."""


@dataclass(frozen=True)
class OrganDef:
    name: str
    part: int                      # 1-based body part (depth band)
    angle: float                   # nominal in-plane position, degrees
    offset: float                  # nominal distance from body axis, voxels
    intensity: float
    radius_range: tuple[float, float] = (3.0, 4.0)
    depth_radius_range: tuple[float, float] = (2.2, 2.9)


@dataclass
class ClassRegistry:
    names: list[str]                               # index == class id, 0 is background
    subsets: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.names or self.names[0] != "background":
            raise ValueError("class id 0 must be 'background'")
        for name, subset in self.subsets.items():
            for c in subset:
                if not 0 < c < len(self.names):
                    raise ValueError(f"dataset {name!r} labels unknown class {c}")

    @property
    def n_classes(self) -> int:
        return len(self.names) - 1

    def overlap(self, a: str, b: str) -> tuple[int, ...]:
        return tuple(sorted(set(self.subsets[a]) & set(self.subsets[b])))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "subsets": {k: list(v) for k, v in self.subsets.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassRegistry":
        return cls(list(d["names"]), {k: tuple(v) for k, v in d["subsets"].items()})


DEFAULT_ANATOMY = (
    OrganDef("brainstem", 1, 0.0, 6.5, 0.50),
    OrganDef("parotid", 1, 120.0, 6.5, 0.95),
    OrganDef("eye", 1, 240.0, 6.5, 1.40),
    OrganDef("esophagus", 2, 0.0, 7.0, 0.60),
    OrganDef("trachea", 2, 90.0, 7.0, 1.05),
    OrganDef("heart", 2, 180.0, 7.0, 1.50),
    OrganDef("aorta", 2, 270.0, 7.0, 1.25),
    OrganDef("liver", 3, 30.0, 6.5, 0.70),
    OrganDef("spleen", 3, 150.0, 6.5, 1.15),
    OrganDef("kidney", 3, 270.0, 6.5, 1.60),
    OrganDef("bladder", 4, 60.0, 6.0, 0.85),
    OrganDef("femur", 4, 240.0, 6.0, 1.35),
)


def default_registry() -> ClassRegistry:
    names = ["background"] + [o.name for o in DEFAULT_ANATOMY]
    ids = {n: i for i, n in enumerate(names)}
    subsets = {
        "total": tuple(ids[n] for n in ("esophagus", "trachea", "heart", "liver", "spleen", "kidney", "bladder", "femur")),
        "chest": tuple(ids[n] for n in ("esophagus", "trachea", "aorta")),
        "hn": tuple(ids[n] for n in ("brainstem", "parotid", "eye")),
        "eso": (ids["esophagus"],),
    }
    return ClassRegistry(names, subsets)


@dataclass(frozen=True)
class PhantomSpec:
    name: str
    labeled: tuple[int, ...]
    n_samples: int = 16
    seed: int = 0
    shape: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_bodyparts: int = 4
    body_radius: float = 14.0
    anomaly_rate: float = 0.0
    anomaly_radius_range: tuple[float, float] = (1.2, 2.0)
    anomaly_intensity: float = 2.2
    noise_sigma: float = 0.05
    position_jitter: float = 1.0
    max_retries: int = 50
    anatomy: tuple[OrganDef, ...] = DEFAULT_ANATOMY

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anatomy"] = [asdict(o) for o in self.anatomy]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["anatomy"] = tuple(
            OrganDef(**{**o, "radius_range": tuple(o["radius_range"]),
                        "depth_radius_range": tuple(o["depth_radius_range"])})
            for o in d["anatomy"])
        for key in ("labeled", "shape", "spacing", "anomaly_radius_range"):
            d[key] = tuple(d[key])
        return cls(**d)


def default_specs(seed: int = 0, registry: ClassRegistry | None = None) -> dict[str, PhantomSpec]:
    """The four desk-scale datasets (24/16/16/16 samples)."""
    reg = registry or default_registry()
    counts = {"total": 24, "chest": 16, "hn": 16, "eso": 16}
    anomaly = {"total": 0.5, "chest": 0.0, "hn": 0.0, "eso": 0.75}
    return {
        name: PhantomSpec(name=name, labeled=reg.subsets[name], n_samples=counts[name],
                          seed=seed * 1000 + i, anomaly_rate=anomaly[name])
        for i, name in enumerate(("total", "chest", "hn", "eso"))
    }


@dataclass
class Sample:
    id: str
    image: np.ndarray       # (D, H, W) float32
    label: np.ndarray       # (D, H, W) int16, values in {0} ∪ labeled
    bodypart: np.ndarray    # (D, H, W) int16, 1..n inside the body, 0 outside
    anomaly: np.ndarray     # (D, H, W) uint8


@dataclass
class PhantomDataset:
    name: str
    labeled: tuple[int, ...]
    spacing: tuple[float, float, float]
    samples: list[Sample]
    registry: ClassRegistry | None = None
    spec: PhantomSpec | None = None
    split: str = "all"

    def __len__(self):
        return len(self.samples)

    def subset(self, indices, split: str) -> "PhantomDataset":
        return replace(self, samples=[self.samples[i] for i in indices], split=split)


def band_of_depth(shape, n_bodyparts) -> np.ndarray:
    """1-based body part index for every depth slice."""
    d = shape[0]
    return (np.arange(d) * n_bodyparts // d + 1).astype(np.int16)


def _place_organ(organ: OrganDef, spec: PhantomSpec, rng, taken: list[tuple[np.ndarray, np.ndarray]]):
    d, h, w = spec.shape
    band_lo = (organ.part - 1) * d / spec.n_bodyparts
    band_hi = organ.part * d / spec.n_bodyparts
    theta = np.deg2rad(organ.angle)
    for _ in range(spec.max_retries):
        rz = rng.uniform(*organ.depth_radius_range)
        ry, rx = rng.uniform(*organ.radius_range, size=2)
        cz = (band_lo + band_hi - 1) / 2 + rng.uniform(-0.5, 0.5)
        jitter = rng.uniform(-spec.position_jitter, spec.position_jitter, size=2)
        cy = (h - 1) / 2 + organ.offset * np.sin(theta) + jitter[0]
        cx = (w - 1) / 2 + organ.offset * np.cos(theta) + jitter[1]
        center = np.array([cz, cy, cx])
        radii = np.array([rz, ry, rx])
        inside_band = cz - rz >= band_lo - 0.5 and cz + rz <= band_hi - 0.5
        inside_body = np.hypot(cy - (h - 1) / 2, cx - (w - 1) / 2) + max(ry, rx) <= spec.body_radius - 1
        clear = all(np.linalg.norm((center - c) / (radii + r)) > 1.05 for c, r in taken)
        if inside_band and inside_body and clear:
            return center, radii
    raise PlacementError(f"organ {organ.name!r} does not fit body part {organ.part}")


def generate_sample(spec: PhantomSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    d, h, w = spec.shape
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    body = np.hypot(yy - (h - 1) / 2, xx - (w - 1) / 2) <= spec.body_radius
    band = band_of_depth(spec.shape, spec.n_bodyparts)[:, None, None]
    bodypart = np.where(body, band, 0).astype(np.int16)

    image = np.where(body, 0.15 + 0.05 * band, 0.0).astype(np.float64)
    full_label = np.zeros(spec.shape, dtype=np.int16)
    labeled = set(spec.labeled)
    taken: list[tuple[np.ndarray, np.ndarray]] = []
    organ_masks: dict[int, np.ndarray] = {}
    for cls_id, organ in enumerate(spec.anatomy, start=1):
        center, radii = _place_organ(organ, spec, rng, taken)
        taken.append((center, radii))
        rho = np.sqrt(((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2
                      + ((xx - center[2]) / radii[2]) ** 2)
        profile = 1.0 / (1.0 + np.exp(-8.0 * (1.0 - rho)))
        image += (organ.intensity - image) * profile
        mask = rho <= 1.0
        full_label[mask] = cls_id
        organ_masks[cls_id] = mask

    anomaly = np.zeros(spec.shape, dtype=np.uint8)
    hosts = [c for c in sorted(labeled) if organ_masks.get(c) is not None and organ_masks[c].any()]
    if hosts and rng.uniform() < spec.anomaly_rate:
        host = hosts[rng.integers(len(hosts))]
        coords = np.argwhere(organ_masks[host])
        cz, cy, cx = coords[rng.integers(len(coords))]
        r = rng.uniform(*spec.anomaly_radius_range)
        blob = ((zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & organ_masks[host]
        anomaly[blob] = 1
        image[blob] = spec.anomaly_intensity

    image += rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    label = np.where(np.isin(full_label, list(labeled)), full_label, 0).astype(np.int16)
    return Sample(id=f"{spec.name}_{index:03d}", image=image.astype(np.float32), label=label,
                  bodypart=bodypart, anomaly=anomaly)


def generate_dataset(spec: PhantomSpec, registry: ClassRegistry | None = None) -> PhantomDataset:
    if spec.n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if any(s % 2 for s in spec.shape):
        raise ValueError("volume extents must be even")
    n_global = len(spec.anatomy)
    if any(not 0 < c <= n_global for c in spec.labeled):
        raise ValueError("labeled classes must be global class ids")
    samples = [generate_sample(spec, i) for i in range(spec.n_samples)]
    return PhantomDataset(name=spec.name, labeled=tuple(sorted(spec.labeled)), spacing=spec.spacing,
                          samples=samples, registry=registry, spec=spec)


def split_counts(n: int, ratios) -> list[int]:
    """Largest-remainder rounding of ``n * ratios``."""
    ratios = np.asarray(ratios, dtype=float)
    if np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError("ratios must be non-negative and sum to 1")
    raw = n * ratios
    counts = np.floor(raw + 1e-9).astype(int)
    rest = n - counts.sum()
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    for r, c in zip(ratios, counts):
        if r > 0 and c == 0:
            raise ValueError(f"split with ratio {r} rounds to zero samples out of {n}")
    return counts.tolist()


def split_dataset(d: PhantomDataset, ratios, seed: int, names=None) -> tuple[PhantomDataset, ...]:
    """Disjoint, exhaustive, seed-deterministic partition of ``d``."""
    counts = split_counts(len(d), ratios)
    names = names or (["train", "val", "test"] if len(counts) == 3 else [f"part{i}" for i in range(len(counts))])
    perm = np.random.default_rng(seed).permutation(len(d))
    parts, start = [], 0
    for name, c in zip(names, counts):
        parts.append(d.subset(sorted(perm[start:start + c].tolist()), name))
        start += c
    return tuple(parts)


def apply_augmentation(sample: Sample, flip: bool, noise_sigma: float, scale: float, rng) -> Sample:
    image = sample.image * np.float32(scale)
    if noise_sigma > 0:
        image = image + rng.normal(0.0, noise_sigma, size=image.shape).astype(np.float32)
    arrays = [image, sample.label, sample.bodypart, sample.anomaly]
    if flip:
        arrays = [np.ascontiguousarray(a[..., ::-1]) for a in arrays]
    return Sample(sample.id, arrays[0].astype(np.float32), arrays[1], arrays[2], arrays[3])


def augment(sample: Sample, seed) -> Sample:
    """Random width flip, Gaussian noise (sigma in [0, 0.1]) and intensity scaling."""
    rng = np.random.default_rng(seed)
    flip = bool(rng.uniform() < 0.5)
    sigma = float(rng.uniform(0.0, 0.1))
    scale = float(rng.uniform(0.75, 1.25))
    return apply_augmentation(sample, flip, sigma, scale, rng)


# -- disk format ----------------------------------------------------------

def save_dataset(d: PhantomDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "contseg-phantom/1",
        "name": d.name,
        "labeled": list(d.labeled),
        "spacing": list(d.spacing),
        "seed": d.spec.seed if d.spec else None,
        "registry": d.registry.to_dict() if d.registry else None,
        "spec": d.spec.to_dict() if d.spec else None,
        "samples": [s.id for s in d.samples],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for s in d.samples:
        save_tensor(directory / f"{s.id}.img", s.image)
        save_tensor(directory / f"{s.id}.lbl", s.label.astype(np.float32))
        save_tensor(directory / f"{s.id}.bp", s.bodypart.astype(np.float32))
        save_tensor(directory / f"{s.id}.anom", s.anomaly.astype(np.float32))
    return directory


def load_dataset(directory: str | Path) -> PhantomDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    samples = []
    for sid in manifest["samples"]:
        samples.append(Sample(
            id=sid,
            image=load_tensor(directory / f"{sid}.img"),
            label=load_tensor(directory / f"{sid}.lbl").astype(np.int16),
            bodypart=load_tensor(directory / f"{sid}.bp").astype(np.int16),
            anomaly=load_tensor(directory / f"{sid}.anom").astype(np.uint8),
        ))
    registry = ClassRegistry.from_dict(manifest["registry"]) if manifest.get("registry") else None
    spec = PhantomSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    return PhantomDataset(name=manifest["name"], labeled=tuple(manifest["labeled"]),
                          spacing=tuple(manifest["spacing"]), samples=samples, registry=registry, spec=spec)
