"""Synthetic volumes, label corruption, slicing, augmentation, dataset IO.

Volumes are layered ellipsoid phantoms: a jittered, smoothly perturbed
ellipsoid split into shell / outer / inner tissue classes by distance
thresholds, plus a few small spherical structures buried in the inner
class so the label distribution is heavily imbalanced (background is
roughly 80-90% of voxels, the smallest structures well under 1%).
Intensities are per-class means plus a smooth additive bias field and
Gaussian noise.

Every volume carries two annotation tiers mimicking the weak/strong
label setup: the auxiliary tier is a systematically corrupted copy of
the clean labels (per-class over- and under-segmentation, boundary
jitter, mislabeled small structures), the manual tier keeps them clean.
The large aux split trains on its corrupted tier; the small manual
splits train/validate/test on the clean tier. Networks see 2-D axial
slices cut along the first axis.

On disk a dataset is one directory per volume (image.sdt,
labels_manual.sdt, labels_aux.sdt) plus a manifest.txt of key=value
lines listing the split membership.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .losses import boundary_mask
from .seeding import generator
from .serialize import (FormatError, atomic_write_text, read_sdt1, write_sdt1)

MANIFEST_NAME = "manifest.txt"
MANIFEST_FORMAT = "sdnet-dataset-v1"
SPLIT_NAMES = ("aux_train", "aux_val", "train", "val", "test")

# per-class mean intensities: background, shell, outer, inner tissue,
# then a cycle for the small structures
_BASE_MEANS = (0.05, 0.30, 0.55, 0.85)
_BLOB_MEANS = (0.15, 0.70, 0.40, 0.95, 0.22)


@dataclass
class DataConfig:
    """Corpus geometry and split sizes."""

    n_classes: int = 8
    extents: tuple = (8, 64, 64)         # (D, H, W); slices are H x W
    aux_volumes: int = 60
    manual_volumes: int = 30
    manual_train: int = 15
    manual_val: int = 5                  # manual test = remainder
    aux_val: int = 6

    def __post_init__(self):
        if self.n_classes < 4:
            raise ValueError(f"need at least 4 classes (got {self.n_classes})")
        if len(self.extents) != 3 or min(self.extents) < 8:
            raise ValueError(f"extents must be 3 values >= 8, got {self.extents}")
        if self.manual_train + self.manual_val >= self.manual_volumes:
            raise ValueError("manual train+val must leave room for a test split")
        if self.aux_val >= self.aux_volumes:
            raise ValueError("aux_val must be smaller than aux_volumes")


@dataclass
class CorruptionConfig:
    """How auxiliary labels are degraded.

    ``morph`` maps class -> signed radius: positive dilates (systematic
    over-segmentation), negative erodes, applied slice-wise with eroded
    pixels refilled from their nearest surviving neighbor label.
    ``boundary_jitter`` flips each label-boundary pixel to a random
    4-neighbor's label with this probability. ``small_class_mislabel``
    relabels this fraction of each listed small class's pixels to the
    nearest other label.
    """

    morph: dict = field(default_factory=lambda: {1: 1, 2: -1, 3: 1})
    boundary_jitter: float = 0.25
    small_class_mislabel: float = 0.25
    small_classes: tuple = ()
    seed: int = 0


@dataclass
class AugmentationConfig:
    max_translation: int = 5     # pixels, per axis
    max_rotation: float = 10.0   # degrees


@dataclass
class VolumeRecord:
    volume_id: str
    image: np.ndarray          # (D,H,W) float32
    labels_manual: np.ndarray  # (D,H,W) uint8, clean
    labels_aux: np.ndarray     # (D,H,W) uint8, corrupted

    def labels(self, tier: str) -> np.ndarray:
        if tier == "manual":
            return self.labels_manual
        if tier == "aux":
            return self.labels_aux
        raise ValueError(f"unknown label tier {tier!r} (want 'manual' or 'aux')")


@dataclass
class Sample:
    """One axial slice ready for training."""

    volume_id: str
    slice_index: int
    image: np.ndarray    # (H,W) float32
    labels: np.ndarray   # (H,W) uint8


class SegDataset:
    """Volumes plus named split membership."""

    def __init__(self, n_classes: int, volumes: "dict[str, VolumeRecord]",
                 splits: "dict[str, list[str]]", seed: int):
        for name in SPLIT_NAMES:
            if name not in splits:
                raise ValueError(f"missing split {name!r}")
            for vid in splits[name]:
                if vid not in volumes:
                    raise ValueError(f"split {name!r} references unknown volume {vid!r}")
        self.n_classes = n_classes
        self.volumes = volumes
        self.splits = {name: list(splits[name]) for name in SPLIT_NAMES}
        self.seed = seed

    def split(self, name: str) -> "list[VolumeRecord]":
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r} (have {', '.join(SPLIT_NAMES)})")
        return [self.volumes[vid] for vid in self.splits[name]]

    @property
    def extents(self) -> tuple:
        first = next(iter(self.volumes.values()))
        return first.image.shape


# ---------------------------------------------------------------------------
# phantom generation

def _smooth_field(rng: np.random.Generator, shape: tuple, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma)
    return f / (f.std() + 1e-12)


def _class_means(n_classes: int) -> np.ndarray:
    means = list(_BASE_MEANS)
    for i in range(n_classes - 4):
        means.append(_BLOB_MEANS[i % len(_BLOB_MEANS)])
    return np.asarray(means, dtype=np.float64)


def _try_phantom(rng: np.random.Generator, n_classes: int, extents: tuple):
    D, H, W = extents
    zz, yy, xx = np.meshgrid(np.arange(D), np.arange(H), np.arange(W),
                             indexing="ij", sparse=True)
    center = ((D - 1) / 2.0, (H - 1) / 2.0, (W - 1) / 2.0)
    jitter = rng.uniform(0.95, 1.05, size=3)
    axes = (0.38 * D * jitter[0], 0.32 * H * jitter[1], 0.32 * W * jitter[2])
    rho = np.sqrt(((zz - center[0]) / axes[0]) ** 2
                  + ((yy - center[1]) / axes[1]) ** 2
                  + ((xx - center[2]) / axes[2]) ** 2)
    rho = rho + 0.08 * _smooth_field(rng, extents, sigma=6.0)

    labels = np.zeros(extents, dtype=np.uint8)
    labels[rho < 1.0] = 1      # shell
    labels[rho < 0.78] = 2     # outer tissue
    labels[rho < 0.55] = 3     # inner tissue

    centers = []
    for cls in range(4, n_classes):
        candidates = np.argwhere(rho < 0.45)
        if centers:
            prev = np.asarray(centers, dtype=np.float64)
            dists = np.sqrt(((candidates[:, None, :] - prev[None]) ** 2).sum(axis=2))
            candidates = candidates[dists.min(axis=1) >= 8.0]
        if len(candidates) == 0:
            return None
        cz, cy, cx = candidates[rng.integers(len(candidates))]
        centers.append((cz, cy, cx))
        # the last structure class is kept extra small so at least one
        # class sits near 0.1-0.3% of the voxels
        if cls == n_classes - 1:
            radius = rng.uniform(2.0, 2.4)
        else:
            radius = rng.uniform(2.8, 3.6)
        r = int(np.ceil(radius))
        z0, z1 = max(cz - r, 0), min(cz + r + 1, D)
        y0, y1 = max(cy - r, 0), min(cy + r + 1, H)
        x0, x1 = max(cx - r, 0), min(cx + r + 1, W)
        bz, by, bx = np.meshgrid(np.arange(z0, z1), np.arange(y0, y1),
                                 np.arange(x0, x1), indexing="ij", sparse=True)
        ball = ((bz - cz) ** 2 + (by - cy) ** 2 + (bx - cx) ** 2) <= radius ** 2
        labels[z0:z1, y0:y1, x0:x1][ball] = cls

    counts = np.bincount(labels.ravel(), minlength=n_classes)
    if np.any(counts[:4] == 0) or np.any(counts[4:n_classes - 1] < 30) \
            or counts[n_classes - 1] < 20:
        return None

    means = _class_means(n_classes)
    image = means[labels]
    image = image + 0.05 * _smooth_field(rng, extents, sigma=10.0)
    image = image + rng.normal(0.0, 0.03, size=extents)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def generate_phantom(n_classes: int, extents: tuple, seed: int,
                     index: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministically build phantom ``index``: (image, labels).

    Geometry draws come from the "data" stream of ``seed`` keyed by the
    volume index; degenerate draws (a small structure failed to fit or a
    class came out empty) retry with the attempt number added to the key,
    so results never depend on global RNG state.
    """
    for attempt in range(32):
        rng = generator(seed, "data", index, attempt)
        result = _try_phantom(rng, n_classes, extents)
        if result is not None:
            return result
    raise RuntimeError(
        f"could not generate a valid phantom for index {index} after 32 attempts; "
        f"extents {extents} may be too small for {n_classes} classes")


# ---------------------------------------------------------------------------
# label corruption (weak annotation tier)

def _nearest_other_label(plane: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Labels for ``mask`` pixels copied from the nearest pixel outside it."""
    iy, ix = ndimage.distance_transform_edt(mask, return_indices=True)[1]
    return plane[iy, ix][mask]


def corrupt_labels(labels: np.ndarray, config: CorruptionConfig,
                   volume_index: int = 0) -> np.ndarray:
    """Degrade clean labels slice-by-slice; the input is not modified.

    Per slice: morphological over/under-segmentation per class, then
    boundary jitter, then small-class mislabeling. Randomness comes from
    the "corrupt" stream of ``config.seed`` keyed by the volume index.
    With any corruption switched on the output is guaranteed to differ
    from the input (a run of unlucky probabilistic draws falls back to
    flipping one boundary pixel); with everything off it is an exact copy.
    """
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"labels must be (D,H,W), got {labels.shape}")
    rng = generator(config.seed, "corrupt", volume_index)
    out = labels.copy()
    H, W = labels.shape[1:]
    for z in range(labels.shape[0]):
        plane = out[z]
        for cls in sorted(config.morph):
            radius = int(config.morph[cls])
            mask = plane == cls
            if radius == 0 or not mask.any():
                continue
            if radius > 0:
                grown = ndimage.binary_dilation(mask, iterations=radius)
                plane[grown] = cls
            else:
                kept = ndimage.binary_erosion(mask, iterations=-radius)
                removed = mask & ~kept
                if removed.any():
                    plane[removed] = _nearest_other_label(plane, mask)[removed[mask]]
        if config.boundary_jitter > 0:
            bpix = np.argwhere(boundary_mask(plane))
            if len(bpix):
                flip = rng.random(len(bpix)) < config.boundary_jitter
                direction = rng.integers(0, 4, size=len(bpix))
                offsets = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])
                src = plane.copy()
                ny = np.clip(bpix[:, 0] + offsets[direction, 0], 0, H - 1)
                nx = np.clip(bpix[:, 1] + offsets[direction, 1], 0, W - 1)
                sel = bpix[flip]
                plane[sel[:, 0], sel[:, 1]] = src[ny[flip], nx[flip]]
        if config.small_class_mislabel > 0:
            for cls in config.small_classes:
                mask = plane == cls
                n = int(mask.sum())
                if n == 0:
                    continue
                drop = rng.random(n) < config.small_class_mislabel
                if drop.any():
                    repl = _nearest_other_label(plane, mask)
                    pix = np.argwhere(mask)[drop]
                    plane[pix[:, 0], pix[:, 1]] = repl[drop]
    active = (config.boundary_jitter > 0 or
              (config.small_class_mislabel > 0 and len(config.small_classes)) or
              any(r != 0 for r in config.morph.values()))
    if active and np.array_equal(out, labels):
        # probabilistic passes happened to change nothing: flip one
        # boundary pixel so "corrupted" labels never equal the clean ones
        for z in range(labels.shape[0]):
            plane = out[z]
            bpix = np.argwhere(boundary_mask(plane))
            if len(bpix):
                y, x = bpix[0]
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < H and 0 <= nx < W and plane[ny, nx] != plane[y, x]:
                        plane[y, x] = plane[ny, nx]
                        break
                break
    return out


# ---------------------------------------------------------------------------
# slicing and augmentation

def slice_dataset(volumes: "list[VolumeRecord]", tier: str = "manual") -> "list[Sample]":
    """Cut volumes into axial (first-axis) slices, volume order preserved.

    ``tier`` picks which annotation accompanies each slice: "manual"
    (clean) or "aux" (corrupted).
    """
    samples = []
    for vol in volumes:
        labels = vol.labels(tier)
        for z in range(vol.image.shape[0]):
            samples.append(Sample(vol.volume_id, z, vol.image[z], labels[z]))
    return samples


def translate(plane: np.ndarray, dy: int, dx: int, fill=0) -> np.ndarray:
    """Integer shift with constant fill (no wrap-around)."""
    out = np.full_like(plane, fill)
    H, W = plane.shape
    ys = slice(max(dy, 0), min(H + dy, H))
    xs = slice(max(dx, 0), min(W + dx, W))
    ys_src = slice(max(-dy, 0), min(H - dy, H))
    xs_src = slice(max(-dx, 0), min(W - dx, W))
    out[ys, xs] = plane[ys_src, xs_src]
    return out


def augment(image: np.ndarray, labels: np.ndarray, config: AugmentationConfig,
            seed: int, epoch: int, sample_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Random rotation then integer translation, shared by image and labels.

    The image is interpolated bilinearly, labels nearest-neighbor, both
    zero-filled outside, so every transformed label still sits on the
    identically transformed image. Draws come from the "augment" stream
    keyed by (epoch, sample_index); a zero-magnitude draw returns the
    inputs unchanged.
    """
    rng = generator(seed, "augment", epoch, sample_index)
    angle = rng.uniform(-config.max_rotation, config.max_rotation) \
        if config.max_rotation > 0 else 0.0
    t = config.max_translation
    dy, dx = (rng.integers(-t, t + 1, size=2) if t > 0 else (0, 0))
    if angle == 0.0 and dy == 0 and dx == 0:
        return image, labels
    if angle != 0.0:
        image = ndimage.rotate(image, angle, reshape=False, order=1,
                               mode="constant", cval=0.0)
        labels = ndimage.rotate(labels, angle, reshape=False, order=0,
                                mode="constant", cval=0).astype(labels.dtype)
    if dy or dx:
        image = translate(image, int(dy), int(dx), fill=0.0)
        labels = translate(labels, int(dy), int(dx), fill=0)
    return image, labels


# ---------------------------------------------------------------------------
# corpus assembly and disk format

def generate_dataset(config: DataConfig, seed: int,
                     corruption: CorruptionConfig | None = None) -> SegDataset:
    """Build the full two-tier corpus for ``seed``.

    Every volume stores the clean labels as its manual tier and a
    corrupted copy as its auxiliary tier. Split assignment is by index:
    the first ``aux_volumes`` volumes form aux_train/aux_val (the last
    ``aux_val`` of them validate pretraining), the remaining manual
    volumes fill train/val/test in order.
    """
    if corruption is None:
        corruption = CorruptionConfig(
            small_classes=tuple(range(4, config.n_classes)), seed=seed)
    total = config.aux_volumes + config.manual_volumes
    volumes: dict = {}
    ids = []
    for i in range(total):
        image, clean = generate_phantom(config.n_classes, config.extents, seed, i)
        vid = f"vol_{i:03d}"
        volumes[vid] = VolumeRecord(vid, image, clean,
                                    corrupt_labels(clean, corruption, i))
        ids.append(vid)
    n_aux_train = config.aux_volumes - config.aux_val
    n_man = config.aux_volumes
    splits = {
        "aux_train": ids[:n_aux_train],
        "aux_val": ids[n_aux_train:config.aux_volumes],
        "train": ids[n_man:n_man + config.manual_train],
        "val": ids[n_man + config.manual_train:
                   n_man + config.manual_train + config.manual_val],
        "test": ids[n_man + config.manual_train + config.manual_val:],
    }
    return SegDataset(config.n_classes, volumes, splits, seed)


def write_dataset(dataset: SegDataset, out_dir) -> None:
    """Write one directory per volume plus the manifest.

    Labels are stored through the same float32 tensor container as images
    (values are small integers, so the round-trip is exact).
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    for vid, vol in dataset.volumes.items():
        vdir = os.path.join(out_dir, vid)
        os.makedirs(vdir, exist_ok=True)
        write_sdt1(os.path.join(vdir, "image.sdt"), vol.image.astype(np.float32))
        write_sdt1(os.path.join(vdir, "labels_manual.sdt"),
                   vol.labels_manual.astype(np.float32))
        write_sdt1(os.path.join(vdir, "labels_aux.sdt"),
                   vol.labels_aux.astype(np.float32))
    lines = [f"format={MANIFEST_FORMAT}",
             f"n_classes={dataset.n_classes}",
             f"seed={dataset.seed}",
             "extents=" + ",".join(str(e) for e in dataset.extents)]
    for name in SPLIT_NAMES:
        lines.append(f"{name}=" + ",".join(dataset.splits[name]))
    atomic_write_text(os.path.join(out_dir, MANIFEST_NAME), "\n".join(lines) + "\n")


def load_dataset(data_dir) -> SegDataset:
    """Read a dataset directory written by ``write_dataset``."""
    import os

    manifest_path = os.path.join(data_dir, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {data_dir}")
    entries = {}
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{manifest_path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    fmt = entries.get("format")
    if fmt != MANIFEST_FORMAT:
        raise FormatError(f"unsupported dataset format {fmt!r} (expected {MANIFEST_FORMAT!r})")
    for key in ("n_classes", "seed", "extents", *SPLIT_NAMES):
        if key not in entries:
            raise FormatError(f"manifest is missing required key {key!r}")
    n_classes = int(entries["n_classes"])
    seed = int(entries["seed"])
    splits = {name: [v for v in entries[name].split(",") if v] for name in SPLIT_NAMES}
    volumes = {}
    for name in SPLIT_NAMES:
        for vid in splits[name]:
            if vid in volumes:
                continue
            vdir = os.path.join(data_dir, vid)
            image = read_sdt1(os.path.join(vdir, "image.sdt"))
            manual = np.rint(read_sdt1(os.path.join(vdir, "labels_manual.sdt")))
            aux = np.rint(read_sdt1(os.path.join(vdir, "labels_aux.sdt")))
            if image.shape != manual.shape or image.shape != aux.shape:
                raise FormatError(
                    f"{vid}: image shape {image.shape} does not match labels "
                    f"({manual.shape} manual, {aux.shape} aux)")
            volumes[vid] = VolumeRecord(vid, image, manual.astype(np.uint8),
                                        aux.astype(np.uint8))
    return SegDataset(n_classes, volumes, splits, seed)
