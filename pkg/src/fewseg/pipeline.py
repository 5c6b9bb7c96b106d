"""Data ingestion and preprocessing.

Fixed order for scalar volumes: intensity_scale -> normalize_nonzero ->
slice/replicate -> resize. Each sample records the steps it went through in
``meta["steps"]``; :func:`check_order` rejects any other order.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DegenerateRange, NotEnoughData, ShapeMismatch

log = logging.getLogger(__name__)

STEP_ORDER = ("intensity_scale", "normalize_nonzero", "slice", "resize")
STANDARD_EXEMPLAR_COUNTS = (1, 5, 10)


@dataclass
class SegSample:
    image: np.ndarray  # (3, H, W) float32
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ShapeMismatch(f"image must be (3, H, W), got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise ShapeMismatch(f"image {self.image.shape[1:]} and mask {self.mask.shape} differ")
        self.meta.setdefault("steps", [])

    @property
    def sample_id(self) -> str:
        m = self.meta
        sid = f"{m.get('dataset', 'data')}/{m.get('volume', '?')}"
        if "slice" in m:
            sid += f"/z{m['slice']}"
        if "tile" in m:
            sid += "/t{}-{}".format(*m["tile"])
        return sid

    @property
    def volume(self) -> str:
        return str(self.meta.get("volume", self.sample_id))


@dataclass
class ExemplarSet:
    groups: list  # list[list[SegSample]], one inner list per exemplar
    n: int
    seed: int
    eval_samples: list = field(default_factory=list)

    @property
    def samples(self) -> list:
        return [s for g in self.groups for s in g]

    @property
    def volumes(self) -> list:
        return [g[0].volume for g in self.groups]


def check_order(steps: Sequence[str]) -> None:
    idx = [STEP_ORDER.index(s) for s in steps]
    if idx != sorted(idx) or len(set(idx)) != len(idx):
        raise ConfigError(f"preprocessing steps out of order: {list(steps)}; expected subsequence of {STEP_ORDER}")


def _record(meta: dict, step: str) -> None:
    steps = meta.setdefault("steps", [])
    check_order([*steps, step])
    steps.append(step)


def intensity_scale(x, in_range=(-1000.0, 2000.0), out_range=(0.0, 255.0)) -> np.ndarray:
    lo, hi = map(float, in_range)
    if lo == hi:
        raise DegenerateRange(f"input range is empty: {in_range}")
    y = np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return out_range[0] + y * (out_range[1] - out_range[0])


def normalize_nonzero(x, meta: dict | None = None) -> np.ndarray:
    """Standardize non-zero entries using their own mean/std; zeros stay zero.

    With fewer than two distinct non-zero values the std is undefined: only
    the mean is removed and ``meta["degenerate_stats"]`` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    nz = x != 0
    y = x.copy()
    vals = x[nz]
    if vals.size == 0:
        if meta is not None:
            meta["degenerate_stats"] = True
        return y
    mu, sigma = vals.mean(), vals.std()
    if sigma == 0:
        log.warning("normalize_nonzero: constant non-zero values, subtracting mean only")
        if meta is not None:
            meta["degenerate_stats"] = True
        y[nz] = vals - mu
        return y
    y[nz] = (vals - mu) / sigma
    return y


def slice_volume(volume, labels, window: int = 256, axis: int = -1, meta: dict | None = None) -> list[SegSample]:
    """Tile each slice along ``axis`` into non-overlapping windows; keep tiles with foreground.

    Remainder tiles are zero-padded. Single-channel tiles are replicated to 3 channels.
    """
    volume = np.asarray(volume)
    labels = np.asarray(labels)
    if volume.shape != labels.shape:
        raise ShapeMismatch(f"volume {volume.shape} vs labels {labels.shape}")
    vol = np.moveaxis(volume, axis, 0)
    lab = np.moveaxis(labels, axis, 0) > 0
    base = dict(meta or {})
    steps = list(base.pop("steps", []))
    check_order([*steps, "slice"])
    out = []
    for z in range(vol.shape[0]):
        if not lab[z].any():
            continue
        H, W = vol[z].shape
        ph, pw = math.ceil(H / window) * window, math.ceil(W / window) * window
        img = np.zeros((ph, pw), dtype=np.float32)
        msk = np.zeros((ph, pw), dtype=np.uint8)
        img[:H, :W] = vol[z]
        msk[:H, :W] = lab[z]
        for r in range(0, ph, window):
            for c in range(0, pw, window):
                m = msk[r:r + window, c:c + window]
                if not m.any():
                    continue
                tile = img[r:r + window, c:c + window]
                meta_t = {**base, "slice": z, "tile": (r // window, c // window), "steps": [*steps, "slice"]}
                out.append(SegSample(np.repeat(tile[None], 3, axis=0).copy(), m.copy(), meta_t))
    return out


def tile_count(height: int, width: int, window: int = 256) -> int:
    return math.ceil(height / window) * math.ceil(width / window)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    if t.shape[-2:] == (size, size):
        return image.astype(np.float32)
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0].numpy()


def resize_mask(mask: np.ndarray, size) -> np.ndarray:
    size = (size, size) if isinstance(size, int) else tuple(size)
    if mask.shape == size:
        return mask.astype(np.uint8)
    t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))[None, None]
    return F.interpolate(t, size=size, mode="nearest")[0, 0].numpy().astype(np.uint8)


def resize_to_model(sample: SegSample, size: int) -> SegSample:
    H, W = sample.mask.shape
    meta = {**sample.meta, "steps": list(sample.meta.get("steps", []))}
    if "resize" not in meta["steps"]:
        _record(meta, "resize")
    meta.setdefault("native_size", (H, W))
    meta["scale"] = (size / H, size / W)
    return SegSample(resize_image(sample.image, size), resize_mask(sample.mask, size), meta)


def back_project(mask: np.ndarray, native_size) -> np.ndarray:
    """Nearest-neighbour resize of a model-resolution mask to the sample's native size."""
    return resize_mask(np.asarray(mask, dtype=np.uint8), tuple(native_size))


def preprocess_volume(volume, labels, *, window: int = 256, size: int | None = None,
                      scale_intensity: bool = True, meta: dict | None = None, axis: int = -1) -> list[SegSample]:
    """Full fixed-order preprocessing of one 3-D scalar volume."""
    meta = {**(meta or {}), "steps": []}
    x = np.asarray(volume, dtype=np.float64)
    if scale_intensity:
        x = intensity_scale(x)
        _record(meta, "intensity_scale")
    x = normalize_nonzero(x, meta)
    _record(meta, "normalize_nonzero")
    samples = slice_volume(x, labels, window=window, axis=axis, meta=meta)
    if size is not None:
        samples = [resize_to_model(s, size) for s in samples]
    return samples


def preprocess_image(sample: SegSample, size: int | None = None) -> SegSample:
    """2-D image path: 8-bit images skip intensity scaling."""
    meta = {**sample.meta, "steps": list(sample.meta.get("steps", []))}
    img = normalize_nonzero(sample.image, meta).astype(np.float32)
    _record(meta, "normalize_nonzero")
    out = SegSample(img, (sample.mask > 0).astype(np.uint8), meta)
    return resize_to_model(out, size) if size is not None else out


def group_by_volume(samples: Iterable[SegSample]) -> dict[str, list[SegSample]]:
    groups: dict[str, list[SegSample]] = {}
    for s in samples:
        groups.setdefault(s.volume, []).append(s)
    return groups


def sample_exemplars(samples, n: int, seed: int) -> ExemplarSet:
    """Pick ``n`` volume groups uniformly without replacement; the rest become eval data."""
    groups = samples if isinstance(samples, dict) else group_by_volume(samples)
    keys = sorted(groups)
    if n < 1 or n > len(keys):
        raise NotEnoughData(f"need {n} exemplar groups, have {len(keys)}")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(keys), size=n, replace=False).tolist())
    picked = {keys[i] for i in chosen}
    train = [groups[keys[i]] for i in chosen]
    rest = [s for k in keys if k not in picked for s in groups[k]]
    return ExemplarSet(train, n, seed, rest)


# ---------------------------------------------------------------- synthetic

SYNTH_MIN_SIZE = 32
FG_FRACTION = (0.005, 0.30)


def _smooth_noise(rng, size: int, cells: int) -> np.ndarray:
    coarse = rng.standard_normal((1, 1, cells, cells)).astype(np.float32)
    t = F.interpolate(torch.from_numpy(coarse), size=(size, size), mode="bicubic", align_corners=False)
    return t[0, 0].numpy().astype(np.float64)


def ellipse_field(size: int, cx, cy, a, b, theta) -> np.ndarray:
    """Normalized elliptical radius at every pixel center (<= 1 inside)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    return np.sqrt(u * u + v * v)


def _draw_ellipses(rng, size: int, count: int, max_tries: int = 200) -> list[dict]:
    out: list[dict] = []
    tries = 0
    while len(out) < count and tries < max_tries:
        tries += 1
        a = rng.uniform(0.07, 0.2) * size
        b = rng.uniform(0.6, 1.0) * a
        m = a + 1
        cx, cy = rng.uniform(m, size - m), rng.uniform(m, size - m)
        if any(math.hypot(cx - e["cx"], cy - e["cy"]) < a + e["a"] + 3 for e in out):
            continue
        out.append({"cx": cx, "cy": cy, "a": a, "b": b, "theta": rng.uniform(0, math.pi)})
    return out


def rasterize_ellipses(size: int, ellipses: Sequence[dict]) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    for e in ellipses:
        mask |= ellipse_field(size, e["cx"], e["cy"], e["a"], e["b"], e["theta"]) <= 1.0
    return mask


def synth_one(size: int, seed: int, index: int) -> SegSample:
    rng = np.random.default_rng([seed, index])
    while True:
        ellipses = _draw_ellipses(rng, size, int(rng.integers(1, 4)))
        mask = rasterize_ellipses(size, ellipses)
        frac = mask.mean()
        if ellipses and FG_FRACTION[0] <= frac <= FG_FRACTION[1]:
            break
    img = 90.0 + 10.0 * _smooth_noise(rng, size, 6) + 6.0 * rng.standard_normal((size, size))
    for e in ellipses:
        r = ellipse_field(size, e["cx"], e["cy"], e["a"], e["b"], e["theta"])
        contrast = rng.uniform(45.0, 75.0)
        soft = 1.0 / (1.0 + np.exp(-(1.0 - r) * 12.0))  # soft edge centered on the support boundary
        img += contrast * soft * (1.0 + 0.15 * _smooth_noise(rng, size, 10))
    img = np.clip(np.rint(img), 1, 255).astype(np.float32)
    meta = {"dataset": "synthetic", "volume": f"syn{index:05d}", "index": index, "ellipses": ellipses}
    return SegSample(np.repeat(img[None], 3, axis=0), mask.astype(np.uint8), meta)


def gen_synthetic(count: int, size: int = 64, seed: int = 0) -> list[SegSample]:
    """Seeded corpus of 8-bit-valued images with 1-3 soft elliptical blobs over texture."""
    if size < SYNTH_MIN_SIZE:
        raise ValueError(f"synthetic size must be >= {SYNTH_MIN_SIZE}, got {size}")
    return [synth_one(size, seed, i) for i in range(count)]


# ---------------------------------------------------------------- persistence / ingestion


def write_corpus(samples: Sequence[SegSample], outdir, extra: dict | None = None) -> Path:
    """Directory of paired lossless PNGs plus ``manifest.json``."""
    from PIL import Image

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        img_name, mask_name = f"img_{i:05d}.png", f"mask_{i:05d}.png"
        arr = np.clip(np.rint(s.image.transpose(1, 2, 0)), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(outdir / img_name, optimize=False)
        Image.fromarray((s.mask > 0).astype(np.uint8) * 255, mode="L").save(outdir / mask_name, optimize=False)
        meta = {k: v for k, v in s.meta.items() if k != "steps"}
        entries.append({"image": img_name, "mask": mask_name, **meta})
    manifest = {"format": "fewseg-corpus/1", "count": len(entries), **(extra or {}), "samples": entries}
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_image_pair(image_path, mask_path, meta: dict | None = None) -> SegSample:
    from PIL import Image

    img = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.float32).transpose(2, 0, 1)
    mask = (np.asarray(Image.open(mask_path).convert("L")) > 0).astype(np.uint8)
    return SegSample(np.ascontiguousarray(img), mask, dict(meta or {}))


def load_nifti(path) -> tuple[np.ndarray, tuple]:
    import nibabel as nib

    img = nib.load(str(path))
    return np.asarray(img.dataobj, dtype=np.float64), tuple(float(z) for z in img.header.get_zooms())


def load_dataset(root, window: int = 256, scale_intensity: bool = True) -> list[SegSample]:
    """Read a dataset directory described by ``manifest.json``.

    Entries with ``label`` keys are NIfTI volume pairs; entries with ``mask``
    keys are 2-D image pairs. Returns native-resolution samples after the
    pre-resize steps (resizing happens at model input time).
    """
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    dataset = manifest.get("dataset", root.name)
    out: list[SegSample] = []
    for i, e in enumerate(manifest["samples"]):
        meta = {k: v for k, v in e.items() if k not in ("image", "mask", "label")}
        meta.setdefault("dataset", dataset)
        meta.setdefault("volume", Path(e["image"]).name.split(".")[0])
        if "label" in e:
            vol, spacing = load_nifti(root / e["image"])
            lab, _ = load_nifti(root / e["label"])
            meta["spacing"] = spacing[:2]
            out.extend(preprocess_volume(vol, lab, window=window, scale_intensity=scale_intensity, meta=meta))
        else:
            out.append(preprocess_image(load_image_pair(root / e["image"], root / e["mask"], meta)))
    return out
