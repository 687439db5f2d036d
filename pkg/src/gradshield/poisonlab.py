"""Image datasets, backdoor poison insertion and the on-disk formats for both.

Images are flat float64 vectors in height-width-channel order with pixel values
in ``[0, pixel_max]``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PGDS_MAGIC = b"PGDS"
PGDS_VERSION = 1
CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)


class DatasetFormatError(ValueError):
    pass


class PoisonError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    shape: tuple[int, int, int]
    class_count: int
    pixel_max: float = 255.0
    poisoned_flags: np.ndarray | None = None
    original_labels: np.ndarray | None = None
    class_names: list[str] | None = None
    poison_spec: dict | None = None  # serialized PoisonSpec that produced the flags, if any

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.shape = tuple(int(s) for s in self.shape)
        n = len(self.labels)
        if self.images.ndim != 2 or self.images.shape[0] != n:
            raise ValueError("images must be an (N, pixels) array aligned with labels")
        if self.images.shape[1] != math.prod(self.shape):
            raise ValueError(f"image length {self.images.shape[1]} does not match shape {self.shape}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels out of range")
        if self.poisoned_flags is None:
            self.poisoned_flags = np.zeros(n, dtype=bool)
        if self.original_labels is None:
            self.original_labels = self.labels.copy()
        self.poisoned_flags = np.asarray(self.poisoned_flags, dtype=bool)
        self.original_labels = np.asarray(self.original_labels, dtype=np.int64)
        if len(self.poisoned_flags) != n or len(self.original_labels) != n:
            raise ValueError("poison bookkeeping must align with images")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_pixels(self) -> int:
        return self.images.shape[1]

    def indices_of(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            images=self.images[idx],
            labels=self.labels[idx],
            poisoned_flags=self.poisoned_flags[idx],
            original_labels=self.original_labels[idx],
        )

    def copy(self) -> "Dataset":
        return replace(
            self,
            images=self.images.copy(),
            labels=self.labels.copy(),
            poisoned_flags=self.poisoned_flags.copy(),
            original_labels=self.original_labels.copy(),
        )


@dataclass
class PoisonSpec:
    mask: np.ndarray
    pattern: np.ndarray
    target_class: int
    base_class: int
    ratio: float
    kind: str = "dot"  # "dot" or "overlay"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        if self.mask.shape != self.pattern.shape or self.mask.ndim != 1:
            raise PoisonError("mask and pattern must be flat vectors of equal length")
        if np.any(self.mask < 0) or np.any(self.mask > 1):
            raise PoisonError("mask entries must lie in [0, 1]")
        if self.kind == "overlay":
            if not np.all(self.mask == self.mask[0]):
                raise PoisonError("overlay mask must be constant (the opacity)")
        elif self.kind == "dot":
            if not np.all((self.mask == 0) | (self.mask == 1)):
                raise PoisonError("dot mask must be 0/1")
        else:
            raise PoisonError(f"unknown poison kind {self.kind!r}")

    @classmethod
    def dot(
        cls,
        shape: tuple[int, int, int],
        pixels: list[tuple[int, int]],
        color: float | tuple[float, ...],
        target_class: int,
        base_class: int,
        ratio: float = 0.1,
    ) -> "PoisonSpec":
        """Replace the listed (row, col) pixels, all channels, with `color`."""
        h, w, c = shape
        mask = np.zeros((h, w, c))
        pattern = np.zeros((h, w, c))
        col = np.broadcast_to(np.asarray(color, dtype=np.float64), (c,))
        for r, q in pixels:
            if not (0 <= r < h and 0 <= q < w):
                raise PoisonError(f"dot pixel {(r, q)} outside a {h}x{w} image")
            mask[r, q, :] = 1.0
            pattern[r, q, :] = col
        params = {"pixels": [list(map(int, p)) for p in pixels], "color": col.tolist()}
        return cls(mask.ravel(), pattern.ravel(), target_class, base_class, ratio, "dot", params)

    @classmethod
    def random_dot(
        cls, shape, target_class: int, base_class: int, ratio: float = 0.1, seed: int = 0,
        size: int = 2, pixel_max: float = 255.0,
    ) -> "PoisonSpec":
        """`size` x `size` dot at a seeded position with a seeded saturated colour."""
        h, w, c = shape
        rng = np.random.default_rng(seed)
        r0, c0 = int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1))
        if c == 1:
            color = (pixel_max,)
        else:
            color = tuple(float(v) for v in pixel_max * rng.integers(0, 2, size=c))
            if not any(color):
                color = (pixel_max,) * c
        pixels = [(r0 + i, c0 + j) for i in range(size) for j in range(size)]
        return cls.dot(shape, pixels, color, target_class, base_class, ratio)

    @classmethod
    def overlay(
        cls, pattern, opacity: float, target_class: int, base_class: int, ratio: float = 0.1
    ) -> "PoisonSpec":
        pattern = np.asarray(pattern, dtype=np.float64).ravel()
        mask = np.full(pattern.shape, float(opacity))
        return cls(mask, pattern, target_class, base_class, ratio, "overlay", {"opacity": float(opacity)})

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "target_class": int(self.target_class),
            "base_class": int(self.base_class),
            "ratio": float(self.ratio),
            **self.params,
        }
        if self.kind == "overlay":
            d["pattern"] = self.pattern.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict, shape) -> "PoisonSpec":
        if d["kind"] == "dot":
            return cls.dot(
                shape, [tuple(p) for p in d["pixels"]], tuple(d["color"]),
                d["target_class"], d["base_class"], d["ratio"],
            )
        if d["kind"] == "overlay":
            return cls.overlay(d["pattern"], d["opacity"], d["target_class"], d["base_class"], d["ratio"])
        raise PoisonError(f"unknown poison kind {d['kind']!r}")


def procedural_texture(shape, seed: int = 0, pixel_max: float = 255.0) -> np.ndarray:
    """Deterministic stripes-and-blobs texture used as the default overlay image."""
    h, w, c = shape
    rng = np.random.default_rng(seed)
    rr, cc = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.zeros((h, w, c))
    for ch in range(c):
        fx, fy = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[:, :, ch] = 0.5 + 0.5 * np.sin(2 * np.pi * (fx * rr + fy * cc) + phase)
    return (pixel_max * img).ravel()


def apply_poison(x, spec: PoisonSpec, pixel_max: float = 255.0) -> np.ndarray:
    """x'_i = (1 - m_i) x_i + m_i p_i, for one image or a stack of images."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.mask.shape[0]:
        raise PoisonError(
            f"dimension mismatch: image length {x.shape[-1]} vs poison length {spec.mask.shape[0]}"
        )
    out = (1.0 - spec.mask) * x + spec.mask * spec.pattern
    return np.clip(out, 0.0, pixel_max)


def poison_count(ratio: float, n_base: int) -> int:
    # round half up
    return int(math.floor(ratio * n_base + 0.5))


def poison_dataset(d: Dataset, spec: PoisonSpec, seed: int = 0) -> Dataset:
    """Poison a seeded random subset of the base class and flip it to the target."""
    if not 0.0 < spec.ratio < 1.0:
        raise PoisonError(f"poison ratio must lie in (0, 1), got {spec.ratio}")
    for name, c in (("target", spec.target_class), ("base", spec.base_class)):
        if not 0 <= c < d.class_count:
            raise PoisonError(f"{name} class {c} out of range for {d.class_count} classes")
    if spec.target_class == spec.base_class:
        raise PoisonError("target and base class must differ")
    base_idx = d.indices_of(spec.base_class)
    k = poison_count(spec.ratio, len(base_idx))
    if k < 1:
        raise PoisonError("empty poison set: ratio too small for the base-class size")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(base_idx, size=k, replace=False))

    out = d.copy()
    out.images[chosen] = apply_poison(d.images[chosen], spec, d.pixel_max)
    out.labels[chosen] = spec.target_class
    out.poisoned_flags[chosen] = True
    out.original_labels[chosen] = spec.base_class
    out.poison_spec = spec.to_dict()
    return out


def triggered_copy(d: Dataset, spec: PoisonSpec) -> Dataset:
    """All base-class samples of `d` with the trigger applied, labels kept true.

    Used to measure how often the backdoor fires on held-out data.
    """
    idx = d.indices_of(spec.base_class)
    out = d.subset(idx)
    out.images = apply_poison(out.images, spec, d.pixel_max)
    out.poisoned_flags = np.ones(len(idx), dtype=bool)
    out.poison_spec = spec.to_dict()
    return out


def class_templates(classes: int, shape, pixel_max: float = 255.0) -> np.ndarray:
    """One fixed sinusoidal template per class, all with the same energy."""
    h, w, c = shape
    rr, cc = np.mgrid[0:h, 0:w]
    freqs = []
    for s in range(1, 8):
        for fy in range(-s, s + 1):
            fx = s - abs(fy)
            if fx == 0 and fy < 0:
                continue
            freqs.append((fx, fy))
    temps = np.zeros((classes, h, w, c))
    for k in range(classes):
        fx, fy = freqs[k % len(freqs)]
        phase = 2 * np.pi * (k // len(freqs)) / 3
        for ch in range(c):
            wave = np.cos(2 * np.pi * (fx * rr / h + fy * cc / w) + phase + ch * np.pi / 4)
            temps[k, :, :, ch] = 0.5 * pixel_max + 0.25 * pixel_max * wave
    return temps.reshape(classes, -1)


def make_synthetic_image_task(
    classes: int = 6,
    shape=(16, 16, 1),
    samples_per_class: int = 500,
    noise: float = 20.0,
    seed: int = 0,
    pixel_max: float = 255.0,
) -> Dataset:
    """Template-plus-Gaussian-noise image classification data.

    `noise` is the per-pixel standard deviation in pixel units.
    """
    if classes < 3:
        raise ValueError("synthetic task needs at least 3 classes")
    temps = class_templates(classes, shape, pixel_max)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), samples_per_class)
    images = temps[labels] + noise * rng.standard_normal((len(labels), temps.shape[1]))
    images = np.clip(images, 0.0, pixel_max)
    perm = rng.permutation(len(labels))
    return Dataset(
        images[perm], labels[perm], tuple(shape), classes, pixel_max,
        class_names=[f"class{k}" for k in range(classes)],
    )


# -- file formats ------------------------------------------------------------

def load_cifar10_binary(path, expected_records: int | None = None) -> Dataset:
    """Read one CIFAR-10 binary batch (label byte + 3072 CHW pixel bytes per record)."""
    raw = Path(path).read_bytes()
    if not raw:
        raise DatasetFormatError(f"{path}: empty file")
    if len(raw) % CIFAR_RECORD:
        raise DatasetFormatError(
            f"{path}: truncated file ({len(raw)} bytes is not a multiple of {CIFAR_RECORD})"
        )
    n = len(raw) // CIFAR_RECORD
    if expected_records is not None and n != expected_records:
        raise DatasetFormatError(f"{path}: expected {expected_records} records, found {n}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise DatasetFormatError(f"{path}: label byte >= 10")
    chw = rec[:, 1:].reshape(n, 3, 32, 32)
    images = chw.transpose(0, 2, 3, 1).reshape(n, -1).astype(np.float64)
    return Dataset(images, labels, (32, 32, 3), 10, 255.0, class_names=list(CIFAR_CLASSES))


def load_cifar10_dir(directory, train: bool = True) -> Dataset:
    d = Path(directory)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if train else ["test_batch.bin"]
    parts = [load_cifar10_binary(d / name) for name in names if (d / name).exists()]
    if not parts:
        raise DatasetFormatError(f"{directory}: no CIFAR-10 batch files found")
    return Dataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        (32, 32, 3), 10, 255.0, class_names=list(CIFAR_CLASSES),
    )


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_dataset(d: Dataset, path) -> None:
    """PGDS binary plus a JSON sidecar carrying class names and poison ground truth.

    Binary layout (little-endian): magic, u16 version, u32 count, u32 height,
    u32 width, u32 channels, u32 class count, f64 pixel_max, f32 pixels, u16 labels.
    """
    h, w, c = d.shape
    buf = bytearray(PGDS_MAGIC)
    buf += struct.pack("<HIIIIId", PGDS_VERSION, len(d), h, w, c, d.class_count, d.pixel_max)
    buf += np.ascontiguousarray(d.images, dtype="<f4").tobytes()
    buf += np.ascontiguousarray(d.labels, dtype="<u2").tobytes()
    Path(path).write_bytes(bytes(buf))
    meta = {
        "format": "PGDS",
        "version": PGDS_VERSION,
        "class_names": d.class_names or [str(k) for k in range(d.class_count)],
        "poisoned_indices": np.flatnonzero(d.poisoned_flags).tolist(),
        "original_labels": d.original_labels.tolist(),
        "poison_spec": d.poison_spec,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != PGDS_MAGIC:
        raise DatasetFormatError(f"{path}: not a PGDS dataset (bad magic)")
    head = struct.calcsize("<HIIIIId")
    if len(raw) < 4 + head:
        raise DatasetFormatError(f"{path}: truncated header")
    version, n, h, w, c, classes, pixel_max = struct.unpack_from("<HIIIIId", raw, 4)
    if version != PGDS_VERSION:
        raise DatasetFormatError(f"{path}: unsupported PGDS version {version}")
    off = 4 + head
    npix = h * w * c
    if len(raw) != off + 4 * n * npix + 2 * n:
        raise DatasetFormatError(f"{path}: size does not match header")
    images = np.frombuffer(raw, "<f4", n * npix, off).reshape(n, npix).astype(np.float64)
    labels = np.frombuffer(raw, "<u2", n, off + 4 * n * npix).astype(np.int64)
    flags = np.zeros(n, dtype=bool)
    original = labels.copy()
    names, spec = None, None
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        names = meta.get("class_names")
        flags[np.asarray(meta.get("poisoned_indices", []), dtype=np.int64)] = True
        if meta.get("original_labels") is not None:
            original = np.asarray(meta["original_labels"], dtype=np.int64)
        spec = meta.get("poison_spec")
    return Dataset(images, labels, (h, w, c), classes, pixel_max, flags, original, names, spec)


def write_ppm(path, image, shape) -> None:
    """Write an 8-bit binary PPM (P6); `image` holds values in [0, 1]."""
    h, w, c = shape
    img = np.clip(np.asarray(image, dtype=np.float64).reshape(h, w, c), 0.0, 1.0)
    if c == 1:
        img = np.repeat(img, 3, axis=2)
    elif c != 3:
        raise ValueError("PPM export supports 1 or 3 channels")
    data = np.round(img * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise DatasetFormatError(f"{path}: not a P6 PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def export_image_ppm(path, x, shape, pixel_max: float = 255.0) -> None:
    write_ppm(path, np.asarray(x) / pixel_max, shape)
