"""Volumes, preprocessing and a deterministic synthetic organ benchmark."""
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DegenerateVolumeError, FormatError, InsufficientDataError

VOLUME_MAGIC = b"MMVL"
VOLUME_VERSION = 1
DEFAULT_THRESHOLD = 10


@dataclass(frozen=True, eq=False)
class Volume:
    dataset_id: str
    volume_id: int
    slices: np.ndarray  # [D, H, W] float32
    masks: np.ndarray  # [D, H, W] uint8 in {0, 1}
    z: int = 1
    organ: str = ""

    def __post_init__(self):
        if self.slices.ndim != 3 or self.slices.shape != self.masks.shape:
            raise ConfigurationError(
                f"slices {self.slices.shape} and masks {self.masks.shape} must be aligned [D,H,W]")
        if not self.organ:
            object.__setattr__(self, "organ", self.dataset_id)

    @property
    def depth(self):
        return self.slices.shape[0]

    def __len__(self):
        return self.depth


@dataclass(frozen=True, eq=False)
class SliceSample:
    image: np.ndarray  # [1, H, W]
    mask: np.ndarray  # [1, H, W]
    volume_id: int = -1
    slice_index: int = -1


@dataclass(eq=False)
class SliceDataset:
    """Preprocessed volumes of one dataset plus their eligible slice indices."""

    dataset_id: str
    organ: str
    z: int
    volumes: list
    eligible: list  # one index array per volume
    threshold: int = DEFAULT_THRESHOLD

    def pool(self):
        """``(volume position, slice index)`` of every eligible slice."""
        return [(vi, int(si)) for vi, idx in enumerate(self.eligible) for si in idx]

    def sample(self, vi, si):
        v = self.volumes[vi]
        return SliceSample(v.slices[si][None], v.masks[si][None], v.volume_id, si)

    def subset(self, volume_ids):
        keep = [i for i, v in enumerate(self.volumes) if v.volume_id in set(volume_ids)]
        return replace(self, volumes=[self.volumes[i] for i in keep],
                       eligible=[self.eligible[i] for i in keep])

    @property
    def volume_ids(self):
        return [v.volume_id for v in self.volumes]


# ---------------------------------------------------------------- preprocessing

def normalize_volume(v):
    """Standardise with the mean/std of the volume's non-zero pixels."""
    x = v.slices.astype(np.float64)
    nz = x[x != 0]
    if nz.size < 2:
        raise DegenerateVolumeError(f"volume {v.volume_id} has fewer than 2 non-zero pixels")
    mu, sigma = nz.mean(), nz.std()
    if sigma == 0:
        raise DegenerateVolumeError(f"volume {v.volume_id} has constant non-zero intensity")
    return replace(v, slices=((x - mu) / sigma).astype(np.float32))


def _bilinear_axis(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_image(img, h, w):
    """Bilinear resize with half-pixel (centre-aligned) sampling."""
    if h < 1 or w < 1:
        raise ConfigurationError("target size must be positive")
    img = np.asarray(img)
    if img.shape[-2:] == (h, w):
        return img.copy()
    y0, y1, fy = _bilinear_axis(img.shape[-2], h)
    x0, x1, fx = _bilinear_axis(img.shape[-1], w)
    rows = img[..., y0, :] * (1 - fy)[:, None] + img[..., y1, :] * fy[:, None]
    out = rows[..., x0] * (1 - fx) + rows[..., x1] * fx
    return out.astype(img.dtype, copy=False)


def resize_mask(mask, h, w):
    """Nearest-neighbour resize; binary masks stay binary."""
    if h < 1 or w < 1:
        raise ConfigurationError("target size must be positive")
    mask = np.asarray(mask)
    ys = np.minimum(((np.arange(h) + 0.5) * mask.shape[-2] / h).astype(int), mask.shape[-2] - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * mask.shape[-1] / w).astype(int), mask.shape[-1] - 1)
    return mask[..., ys[:, None], xs[None, :]]


def resize(sample, h, w):
    return replace(sample, image=resize_image(sample.image, h, w),
                   mask=resize_mask(sample.mask, h, w))


def resize_volume(v, h, w):
    return replace(v, slices=resize_image(v.slices, h, w), masks=resize_mask(v.masks, h, w))


def presence_filter(v, threshold):
    """Indices of slices whose mask has at least ``threshold`` object pixels."""
    if threshold < 0:
        raise ConfigurationError("presence threshold must be >= 0")
    counts = v.masks.reshape(v.depth, -1).sum(axis=1)
    return np.flatnonzero(counts >= threshold)


def preprocess(volumes, size=32, threshold=DEFAULT_THRESHOLD):
    """Normalise, resize to ``size`` and threshold each volume of one dataset."""
    if not volumes:
        raise InsufficientDataError("no volumes to preprocess")
    prepared = [resize_volume(normalize_volume(v), size, size) for v in volumes]
    first = prepared[0]
    return SliceDataset(first.dataset_id, first.organ, first.z, prepared,
                        [presence_filter(v, threshold) for v in prepared], threshold)


def group_by_dataset(volumes):
    groups = {}
    for v in volumes:
        groups.setdefault(v.dataset_id, []).append(v)
    return groups


def prepare_datasets(volumes, size=32, thresholds=None):
    thresholds = thresholds or {}
    return {did: preprocess(vs, size, thresholds.get(did, DEFAULT_THRESHOLD))
            for did, vs in group_by_dataset(volumes).items()}


# ---------------------------------------------------------------- synthetic benchmark

@dataclass(frozen=True)
class OrganFamily:
    """Shape and appearance distribution of one synthetic organ.

    Lengths are fractions of the image side.  ``drift`` is how far the
    object centre travels between the first and last slice.
    """

    name: str
    axis_range: tuple = (0.12, 0.2)
    eccentricity: float = 0.3
    center: tuple = (0.0, 0.0)
    contrast: float = 1.0
    noise: float = 0.08
    drift: float = 0.15
    body_radius: float = 0.42
    texture: float = 3.0
    modalities: int = 1
    volumes: int = 20
    slices: int = 24
    size: int = 64
    threshold: int = DEFAULT_THRESHOLD

    def dataset_ids(self):
        if self.modalities == 1:
            return [self.name]
        return [f"{self.name}_m{m}" for m in range(self.modalities)]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("axis_range", "center"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


DEFAULT_SOURCES = (
    OrganFamily("liver", axis_range=(0.13, 0.17), center=(-0.14, -0.16), contrast=0.8,
                body_radius=0.45, texture=2.0),
    OrganFamily("kidney", axis_range=(0.08, 0.11), center=(0.14, 0.2), contrast=1.2,
                body_radius=0.38, texture=4.0, eccentricity=0.45),
    OrganFamily("prostate", axis_range=(0.08, 0.12), center=(0.2, -0.1), contrast=0.7,
                body_radius=0.4, texture=5.0, modalities=2),
    OrganFamily("brain", axis_range=(0.1, 0.14), center=(0.02, 0.0), contrast=1.0,
                body_radius=0.48, texture=1.5, eccentricity=0.15),
)
DEFAULT_TARGET = OrganFamily("cardiac", axis_range=(0.09, 0.13), center=(-0.17, 0.14),
                             contrast=0.9, body_radius=0.43, texture=3.0, eccentricity=0.25)


def default_benchmark():
    return list(DEFAULT_SOURCES) + [DEFAULT_TARGET]


def _modality_contrast(family, m):
    # odd modalities invert and weaken every structure's contrast
    return 1.0 if m % 2 == 0 else -0.6


class _OrganTrack:
    """One organ's elliptical cross-section as it drifts through the slices."""

    def __init__(self, family, rng):
        self.family = family
        self.a0 = rng.uniform(*family.axis_range)
        self.b0 = self.a0 * (1.0 - family.eccentricity * rng.uniform(0.5, 1.0))
        self.c0 = np.asarray(family.center) + rng.uniform(-0.03, 0.03, size=2)
        self.angle0 = rng.uniform(0, np.pi)
        heading = rng.uniform(0, 2 * np.pi)
        self.direction = np.array([np.sin(heading), np.cos(heading)])

    def mask(self, yy, xx, t):
        # organs taper towards both ends of the scan
        scale = np.sqrt(np.sin(np.pi * (0.04 + 0.92 * t)))
        cy, cx = self.c0 + self.family.drift * (t - 0.5) * self.direction
        ang = self.angle0 + 0.6 * t
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(ang) + dx * np.sin(ang)
        v = -dy * np.sin(ang) + dx * np.cos(ang)
        return (u / (self.a0 * scale)) ** 2 + (v / (self.b0 * scale)) ** 2 <= 1.0


def _render_volume(family, modality_gain, rng, context=()):
    """Slices and masks of one scan; ``context`` organs are drawn but not labelled."""
    n, d = family.size, family.slices
    yy, xx = np.mgrid[0:n, 0:n]
    yy = (yy + 0.5) / n - 0.5
    xx = (xx + 0.5) / n - 0.5

    body_r = family.body_radius * rng.uniform(0.95, 1.05)
    body = (yy / body_r) ** 2 + (xx / (body_r * rng.uniform(0.9, 1.0))) ** 2 <= 1.0
    phase = rng.uniform(0, 2 * np.pi, size=2)
    tissue = 1.0 + 0.15 * np.sin(2 * np.pi * family.texture * yy + phase[0]) \
        * np.cos(2 * np.pi * family.texture * xx + phase[1])

    others = [_OrganTrack(f, rng) for f in context]
    own = _OrganTrack(family, rng)

    slices = np.empty((d, n, n), dtype=np.float32)
    masks = np.empty((d, n, n), dtype=np.uint8)
    for i in range(d):
        t = i / max(d - 1, 1)
        img = tissue.copy()
        for track in others + [own]:
            obj = track.mask(yy, xx, t) & body
            img = np.where(obj, tissue + modality_gain * track.family.contrast * (1.0 + 0.2 * t), img)
        img = img + family.noise * rng.standard_normal((n, n))
        slices[i] = np.where(body, np.maximum(img, 0.05), 0.0)
        masks[i] = obj
    return slices, masks


def generate_benchmark(families, seed, context=True):
    """Volumes for every dataset of every family, deterministic in ``seed``.

    With ``context`` each scan also shows the other families' organs,
    unlabelled, the way one CT slice shows several organs.
    """
    if len(families) < 2:
        raise ConfigurationError("benchmark needs at least one source and one target family")
    volumes = []
    for fi, family in enumerate(families):
        others = [f for f in families if f.name != family.name] if context else []
        for m, dataset_id in enumerate(family.dataset_ids()):
            gain = _modality_contrast(family, m)
            for vid in range(family.volumes):
                rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(fi, m, vid)))
                slices, masks = _render_volume(family, gain, rng, others)
                volumes.append(Volume(dataset_id, vid, slices, masks, family.modalities, family.name))
    return volumes


# ---------------------------------------------------------------- MMVL files

def volume_bytes(v):
    name = v.dataset_id.encode("utf-8")
    d, h, w = v.slices.shape
    head = VOLUME_MAGIC + struct.pack("<IH", VOLUME_VERSION, len(name)) + name
    head += struct.pack("<IH3I", v.volume_id, v.z, d, h, w)
    return head + v.slices.astype("<f4").tobytes() + v.masks.astype(np.uint8).tobytes()


def parse_volume(blob, organ=""):
    if blob[:4] != VOLUME_MAGIC:
        raise FormatError("not an MMVL volume")
    version, n = struct.unpack_from("<IH", blob, 4)
    if version != VOLUME_VERSION:
        raise FormatError(f"unsupported volume version {version}")
    pos = 10
    dataset_id = blob[pos:pos + n].decode("utf-8")
    pos += n
    volume_id, z, d, h, w = struct.unpack_from("<IH3I", blob, pos)
    pos += struct.calcsize("<IH3I")
    count = d * h * w
    if len(blob) != pos + 5 * count:
        raise FormatError("volume payload length does not match its dimensions")
    slices = np.frombuffer(blob, "<f4", count, pos).reshape(d, h, w).astype(np.float32)
    masks = np.frombuffer(blob, np.uint8, count, pos + 4 * count).reshape(d, h, w).copy()
    return Volume(dataset_id, volume_id, slices, masks, z, organ)


def volume_filename(v):
    return f"{v.dataset_id}/{v.volume_id:04d}.mmvl"


def write_benchmark(volumes, families, out_dir):
    """One MMVL file per volume, one directory per dataset, and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for v in volumes:
        path = out / volume_filename(v)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(volume_bytes(v))
    manifest = {"datasets": []}
    for family in families:
        for did in family.dataset_ids():
            manifest["datasets"].append({
                "dataset_id": did, "organ": family.name, "z": family.modalities,
                "threshold": family.threshold,
                "volumes": sum(1 for v in volumes if v.dataset_id == did),
            })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError(f"missing manifest {path}") from None


def read_benchmark(data_dir):
    """Volumes and presence thresholds of a generated benchmark directory."""
    root = Path(data_dir)
    manifest = read_manifest(root)
    volumes, thresholds = [], {}
    for entry in manifest["datasets"]:
        did = entry["dataset_id"]
        thresholds[did] = int(entry.get("threshold", DEFAULT_THRESHOLD))
        files = sorted((root / did).glob("*.mmvl"))
        if not files:
            raise InsufficientDataError(f"dataset {did} has no volume files under {root / did}")
        for f in files:
            volumes.append(parse_volume(f.read_bytes(), organ=entry.get("organ", "")))
    return volumes, thresholds


def family_to_dict(family):
    return asdict(family)


def load_family_spec(path):
    spec = json.loads(Path(path).read_text())
    families = spec["families"] if isinstance(spec, dict) else spec
    return [OrganFamily.from_dict(f) for f in families]


def benchmark_datasets(families, seed, size=32):
    """Generate and preprocess in one go; keyed by dataset-id."""
    volumes = generate_benchmark(families, seed)
    thresholds = {did: f.threshold for f in families for did in f.dataset_ids()}
    return prepare_datasets(volumes, size, thresholds)

