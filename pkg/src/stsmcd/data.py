"""Synthetic bitemporal datasets, raster I/O, training augmentations, and the
test-time degradation perturbations.

Scenes are textured backgrounds with stacked colored objects; the second epoch
is derived from the first by inserting, removing, or relabeling objects, so
every label raster is computed exactly from the generative trace. Per-sample
RNG streams derive from (seed, sample id), which keeps generation order-free.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RASTER_MAGIC = b"CMRD"
RASTER_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("u1")}


class RasterFormatError(ValueError):
    pass


def save_raster(path, arr: np.ndarray):
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        tag, payload = 1, arr.tobytes()
    else:
        tag, payload = 0, arr.astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(RASTER_MAGIC)
        f.write(struct.pack("<IBI", RASTER_VERSION, tag, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(payload)


def load_raster(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != RASTER_MAGIC:
        raise RasterFormatError(f"{path}: bad magic {blob[:4]!r}, expected {RASTER_MAGIC!r}")
    version, tag, rank = struct.unpack_from("<IBI", blob, 4)
    if version != RASTER_VERSION:
        raise RasterFormatError(f"{path}: unsupported version {version}")
    if tag not in _DTYPE_TAGS:
        raise RasterFormatError(f"{path}: unknown dtype tag {tag}")
    dims = struct.unpack_from(f"<{rank}I", blob, 13)
    dtype = _DTYPE_TAGS[tag]
    offset = 13 + 4 * rank
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise RasterFormatError(
            f"{path}: payload is {len(blob) - offset} bytes, expected {expected}"
        )
    return np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims)), offset=offset).reshape(dims).copy()


@dataclass
class Sample:
    sample_id: str
    x1: np.ndarray  # (H, W, 3) in [0, 1]
    x2: np.ndarray
    labels: dict[str, np.ndarray] = field(default_factory=dict)  # keyed bcd/t1/t2/loc/clf


# --- scene synthesis --------------------------------------------------------------------------

# palette rows: background, then semantic classes 1..6 (also used as damage bases)
_PALETTE = np.array(
    [
        [0.50, 0.50, 0.50],
        [0.90, 0.15, 0.15],
        [0.15, 0.80, 0.20],
        [0.15, 0.25, 0.90],
        [0.95, 0.85, 0.10],
        [0.85, 0.15, 0.85],
        [0.10, 0.85, 0.90],
    ]
)

# damage levels 1..4 rendered by blending the building color toward these
_DAMAGE_TINTS = np.array(
    [
        [0.92, 0.92, 0.95],  # intact
        [0.95, 0.80, 0.20],  # minor
        [0.90, 0.45, 0.10],  # major
        [0.25, 0.10, 0.08],  # destroyed
    ]
)
_DAMAGE_BLEND = (0.0, 0.55, 0.75, 0.95)


@dataclass
class SceneObject:
    kind: str  # rect | ellipse
    cy: float
    cx: float
    ry: float
    rx: float
    cls: int
    shade: float
    damage: int = 0


def _object_mask(obj: SceneObject, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if obj.kind == "rect":
        return (np.abs(yy - obj.cy) <= obj.ry) & (np.abs(xx - obj.cx) <= obj.rx)
    return ((yy - obj.cy) / obj.ry) ** 2 + ((xx - obj.cx) / obj.rx) ** 2 <= 1.0


def _class_map(objects: list[SceneObject], h: int, w: int) -> np.ndarray:
    out = np.zeros((h, w), dtype=np.int64)
    for obj in objects:
        out[_object_mask(obj, h, w)] = obj.cls
    return out


def _background(rng, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.40, 0.60)
    coarse = rng.normal(0.0, 1.0, size=(max(h // 8, 1), max(w // 8, 1), 3))
    coarse = coarse.repeat(8, axis=0).repeat(8, axis=1)[:h, :w]
    return np.clip(base + 0.04 * coarse, 0.0, 1.0)


def _render(objects, background, h, w, rng, damage_epoch=False) -> np.ndarray:
    img = background.copy()
    for obj in objects:
        mask = _object_mask(obj, h, w)
        color = _PALETTE[obj.cls] * obj.shade
        if damage_epoch and obj.damage > 0:
            blend = _DAMAGE_BLEND[obj.damage - 1]
            color = (1.0 - blend) * color + blend * _DAMAGE_TINTS[obj.damage - 1]
        img[mask] = color
    img = img + rng.normal(0.0, 0.012, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _random_object(rng, h, w, num_classes, kind=None) -> SceneObject:
    return SceneObject(
        kind=kind or ("rect" if rng.uniform() < 0.5 else "ellipse"),
        cy=rng.uniform(0.1 * h, 0.9 * h),
        cx=rng.uniform(0.1 * w, 0.9 * w),
        ry=rng.uniform(0.08 * h, 0.18 * h),
        rx=rng.uniform(0.08 * w, 0.18 * w),
        cls=int(rng.integers(1, num_classes + 1)),
        shade=rng.uniform(0.85, 1.05),
    )


def _make_change_scene(rng, h, w, num_classes):
    """T1 object stack plus a T2 stack derived by keep/remove/relabel/insert."""
    t1 = [_random_object(rng, h, w, num_classes) for _ in range(rng.integers(3, 6))]
    t2 = []
    for obj in t1:
        roll = rng.uniform()
        if roll < 0.45:
            t2.append(obj)
        elif roll < 0.70:
            continue  # removed
        else:
            new_cls = int(rng.integers(1, num_classes))
            if new_cls >= obj.cls:
                new_cls += 1
            t2.append(SceneObject(obj.kind, obj.cy, obj.cx, obj.ry, obj.rx, new_cls, obj.shade))
    for _ in range(rng.integers(1, 3)):
        t2.append(_random_object(rng, h, w, num_classes))
    return t1, t2


def _synth_change_sample(rng, h, w, num_classes):
    for _ in range(200):
        t1, t2 = _make_change_scene(rng, h, w, num_classes)
        map1 = _class_map(t1, h, w)
        map2 = _class_map(t2, h, w)
        changed = map1 != map2
        frac = changed.mean()
        if 0.05 <= frac <= 0.4:
            break
    else:
        raise RuntimeError("synthetic generator: rejection loop failed to hit change bounds")
    background = _background(rng, h, w)
    x1 = _render(t1, background, h, w, rng)
    x2 = _render(t2, background, h, w, rng)
    return x1, x2, map1, map2, changed


def _synth_damage_sample(rng, h, w, level_offset: int):
    for _ in range(200):
        buildings = []
        for i in range(int(rng.integers(4, 7))):
            b = _random_object(rng, h, w, 1, kind="rect")
            b.cls = 1
            b.damage = (level_offset + i) % 4 + 1  # cycle so every level occurs
            buildings.append(b)
        loc = _class_map(buildings, h, w) > 0
        frac = loc.mean()
        if 0.05 <= frac <= 0.4:
            break
    else:
        raise RuntimeError("synthetic generator: rejection loop failed to hit footprint bounds")
    clf = np.zeros((h, w), dtype=np.int64)
    for b in buildings:
        clf[_object_mask(b, h, w)] = b.damage
    background = _background(rng, h, w)
    x1 = _render(buildings, background, h, w, rng)
    x2 = _render(buildings, background, h, w, rng, damage_epoch=True)
    return x1, x2, loc.astype(np.int64), clf


def make_sample(task: str, sample_id: int, h: int, w: int, seed: int, num_classes: int = 6) -> Sample:
    rng = np.random.default_rng([seed, sample_id])
    sid = f"{sample_id:04d}"
    if task == "bda":
        x1, x2, loc, clf = _synth_damage_sample(rng, h, w, level_offset=sample_id)
        labels = {"loc": loc.astype(np.uint8), "clf": clf.astype(np.uint8)}
    else:
        x1, x2, map1, map2, changed = _synth_change_sample(rng, h, w, num_classes)
        labels = {"bcd": changed.astype(np.uint8)}
        if task == "scd":
            labels["t1"] = np.where(changed, map1, 0).astype(np.uint8)
            labels["t2"] = np.where(changed, map2, 0).astype(np.uint8)
    return Sample(sid, x1, x2, labels)


_LABEL_DIRS = {"bcd": "GT_BCD", "t1": "GT_T1", "t2": "GT_T2", "loc": "GT_LOC", "clf": "GT_CLF"}
_DIR_LABELS = {v: k for k, v in _LABEL_DIRS.items()}


def synth_generate(
    task: str,
    count: int,
    h: int,
    w: int,
    seed: int,
    out_dir,
    num_classes: int = 6,
) -> Path:
    """Write a dataset directory with a manifest; byte-identical per seed."""
    if task not in ("bcd", "scd", "bda"):
        raise ValueError(f"unknown task '{task}'")
    if h % 32 or w % 32:
        raise ValueError(f"size {h}x{w} invalid: H and W must be divisible by 32")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        sample = make_sample(task, i, h, w, seed, num_classes)
        rels = []
        for sub, arr in (("T1", sample.x1), ("T2", sample.x2)):
            (out / sub).mkdir(exist_ok=True)
            rel = f"{sub}/{sample.sample_id}.cmrd"
            save_raster(out / rel, arr)
            rels.append(rel)
        for key, arr in sample.labels.items():
            sub = _LABEL_DIRS[key]
            (out / sub).mkdir(exist_ok=True)
            rel = f"{sub}/{sample.sample_id}.cmrd"
            save_raster(out / rel, arr)
            rels.append(rel)
        lines.append("\t".join([sample.sample_id] + rels))
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt under {root}")
    samples = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        sid, *paths = line.split("\t")
        sample = Sample(sid, None, None, {})
        for rel in paths:
            sub = rel.split("/")[0]
            arr = load_raster(root / rel)
            if sub == "T1":
                sample.x1 = arr
            elif sub == "T2":
                sample.x2 = arr
            else:
                sample.labels[_DIR_LABELS[sub]] = arr.astype(np.int64)
        samples.append(sample)
    return samples


def dataset_task(samples: list[Sample]) -> str:
    keys = set(samples[0].labels)
    if "loc" in keys:
        return "bda"
    return "scd" if "t1" in keys else "bcd"


# --- augmentation -----------------------------------------------------------------------------


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random 90-degree rotation plus independent left-right / top-bottom flips,
    applied identically to both epochs and every label raster."""
    k = int(rng.integers(0, 4))
    flip_lr = bool(rng.integers(0, 2))
    flip_tb = bool(rng.integers(0, 2))

    def tf(arr):
        out = np.rot90(arr, k, axes=(0, 1))
        if flip_lr:
            out = np.flip(out, axis=1)
        if flip_tb:
            out = np.flip(out, axis=0)
        return np.ascontiguousarray(out)

    return Sample(
        sample.sample_id,
        tf(sample.x1),
        tf(sample.x2),
        {k_: tf(v) for k_, v in sample.labels.items()},
    )


# --- test-time perturbations ------------------------------------------------------------------


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian with radius ceil(3 sigma) and reflected borders."""
    if sigma < 0:
        raise ValueError(f"gaussian_blur: sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    radius = int(np.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()
    out = img.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for i, kv in enumerate(kernel):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(i, i + out.shape[axis])
            acc += kv * padded[tuple(sl)]
        out = acc
    return out


def gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"gaussian_noise: sigma must be >= 0, got {sigma}")
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)


def rescale(img: np.ndarray, ratio: float) -> np.ndarray:
    """Nearest-neighbor resize by ratio, then center crop or zero-pad back."""
    if ratio <= 0:
        raise ValueError(f"rescale: ratio must be > 0, got {ratio}")
    h, w = img.shape[:2]
    nh, nw = max(int(round(h * ratio)), 1), max(int(round(w * ratio)), 1)
    ri = np.minimum((np.arange(nh) / ratio).astype(np.int64), h - 1)
    ci = np.minimum((np.arange(nw) / ratio).astype(np.int64), w - 1)
    resized = img[ri][:, ci]
    out = np.zeros_like(img)
    if nh >= h:
        y0 = (nh - h) // 2
        x0 = (nw - w) // 2
        out[...] = resized[y0 : y0 + h, x0 : x0 + w]
    else:
        y0 = (h - nh) // 2
        x0 = (w - nw) // 2
        out[y0 : y0 + nh, x0 : x0 + nw] = resized
    return out


def perturb(images, kind: str, value: float, rng=None):
    """Apply one named degradation to each image; labels are never touched."""
    rng = np.random.default_rng(0) if rng is None else rng
    if kind == "blur":
        return [gaussian_blur(x, value) for x in images]
    if kind == "noise":
        return [gaussian_noise(x, value, rng) for x in images]
    if kind == "scale":
        return [rescale(x, value) for x in images]
    raise ValueError(f"unknown perturbation '{kind}', pick blur, noise or scale")
