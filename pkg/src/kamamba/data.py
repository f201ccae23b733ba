"""Synthetic MODIS-like patch pairs with a known transition matrix.

Each class has a seasonal curve per band. A patch renders its labelled class
at the centre pixel and blends toward a neighbouring class across an
irregular smooth boundary, so border pixels are mixed. Labels and rendering
draw from separate per-sample seed streams, which makes label-only sampling
(``sample_pairs``) cheap.

Container: ``values.bin`` (little-endian sections, layout in the manifest)
plus ``manifest.json``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError
from .losses import check_stochastic

log = logging.getLogger(__name__)

SCHEMA = "v1"
NUM_CLASSES = 11
BANDS = ("NDVI", "EVI", "band1", "band2", "band3", "band7")
PROFILE_SEED = 7
NOISE_SIGMA = 0.1
VALUE_BOUND = 3.0
# (a, b): class b is a lightly perturbed copy of class a
CONFUSABLE_PAIRS = ((0, 1), (4, 5), (8, 9))

_LABELS, _RENDER_PRE, _RENDER_POST = 0, 1, 2


@dataclass(frozen=True)
class ClassProfile:
    class_id: int
    baseline: np.ndarray  # (bands,)
    amplitude: np.ndarray
    phase: np.ndarray
    texture: float

    def curve(self, steps: int = 23) -> np.ndarray:
        """(bands, steps) seasonal curve clipped to the normalized range."""
        t = np.arange(steps)
        c = self.baseline[:, None] + self.amplitude[:, None] * np.sin(
            2 * np.pi * t[None, :] / steps + self.phase[:, None]
        )
        return np.clip(c, -VALUE_BOUND, VALUE_BOUND)


def class_profiles(num_classes: int = NUM_CLASSES, bands: int = len(BANDS), seed: int = PROFILE_SEED):
    rng = np.random.default_rng(seed)
    base = rng.uniform(-1.2, 1.2, (num_classes, bands))
    amp = rng.uniform(0.3, 1.2, (num_classes, bands))
    phase = rng.uniform(0, 2 * np.pi, (num_classes, bands))
    texture = rng.uniform(0.05, 0.25, num_classes)
    for a, b in CONFUSABLE_PAIRS:
        if b < num_classes:
            base[b] = base[a] + np.where(np.arange(bands) < 2, 0.25, 0.0)
            amp[b] = amp[a]
            phase[b] = phase[a] + 0.3
    return [ClassProfile(k, base[k], amp[k], phase[k], float(texture[k])) for k in range(num_classes)]


def designed_transition(primary: float = 0.97, secondary: float = 0.02, num_classes: int = NUM_CLASSES,
                        seed: int = 0) -> np.ndarray:
    """Zero-diagonal T* where each class mostly changes to one target.

    Row i puts ``primary`` on one class, ``secondary`` on another and spreads
    the rest evenly over the remaining off-diagonal targets.
    """
    K = num_classes
    rest = 1.0 - primary - secondary
    if min(primary, secondary, rest) < 0 or K < 4:
        raise ValidationError("primary + secondary must be <= 1 and K >= 4")
    rng = np.random.default_rng(seed)
    T = np.zeros((K, K))
    for i in range(K):
        targets = rng.permutation([j for j in range(K) if j != i])
        T[i, targets[0]] = primary
        T[i, targets[1]] = secondary
        T[i, targets[2:]] = rest / (K - 3)
    return T


def sample_pairs(seed: int, n: int, change_rate: float, T_star, class_freq=None):
    """Labels only: (y_pre, y_post) int arrays of length n."""
    T_star = np.asarray(T_star, dtype=np.float64)
    check_stochastic(T_star, tol=1e-9)
    if not 0 <= change_rate <= 1:
        raise ValidationError(f"change_rate must be in [0, 1], got {change_rate}")
    K = T_star.shape[0]
    p_off = T_star * (1 - np.eye(K))
    if change_rate > 0 and (p_off.sum(1) <= 0).any():
        raise ValidationError("T_star has a row with no off-diagonal mass")
    p_off = p_off / np.maximum(p_off.sum(1, keepdims=True), 1e-300)
    rng = np.random.default_rng([seed, _LABELS])
    freq = None if class_freq is None else np.asarray(class_freq, dtype=np.float64) / np.sum(class_freq)
    y_pre = rng.choice(K, size=n, p=freq)
    change = rng.random(n) < change_rate
    # inverse-CDF draw of the post class from the restricted row
    cdf = np.cumsum(p_off[y_pre], axis=1)
    u = rng.random(n)[:, None] * cdf[:, -1:]
    drawn = np.minimum((u >= cdf).sum(1), K - 1)
    y_post = np.where(change, drawn, y_pre)
    return y_pre.astype(np.int32), y_post.astype(np.int32)


def render_patch(rng: np.random.Generator, label: int, profiles, steps: int, height: int, width: int,
                 noise: float = NOISE_SIGMA) -> np.ndarray:
    """(bands, steps, H, W) cube; the centre pixel is purely ``label``."""
    K = len(profiles)
    own = profiles[label].curve(steps)
    other = rng.choice([k for k in range(K) if k != label])
    nbr = profiles[other].curve(steps)
    cy, cx = (height - 1) / 2, (width - 1) / 2
    yy, xx = np.meshgrid(np.arange(height) - cy, np.arange(width) - cx, indexing="ij")
    radius = max(cy, cx, 1.0)
    theta = rng.uniform(0, 2 * np.pi)
    r0 = rng.uniform(0.45, 0.8) * radius
    wiggle = rng.uniform(0, 1.0) * np.sin(
        rng.uniform(0.3, 0.8) * (-xx * np.sin(theta) + yy * np.cos(theta)) + rng.uniform(0, 2 * np.pi)
    )
    dist = xx * np.cos(theta) + yy * np.sin(theta) - r0 - wiggle
    w = rng.uniform(0.5, 1.0) / (1 + np.exp(-dist / 0.8))
    # correlated texture, zero at the centre
    tex = np.zeros((height, width))
    for _ in range(3):
        fy, fx = rng.uniform(0.2, 1.0, 2)
        tex += np.cos(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi)) / 3
    tex = profiles[label].texture * (tex - tex[int(cy), int(cx)])
    signs = rng.choice([-1.0, 1.0], size=own.shape[0])
    w[int(cy), int(cx)] = 0.0
    cube = (1 - w) * own[:, :, None, None] + w * nbr[:, :, None, None]
    cube = cube + signs[:, None, None, None] * tex[None, None]
    cube[:, :, int(cy), int(cx)] = own
    if noise > 0:
        cube = cube + rng.normal(0.0, noise, cube.shape)
    return cube.astype(np.float32)


def balance_caps(counts) -> np.ndarray:
    """Per-class sample cap: 10 below 50 available, 50 for 50-300, 100 above 300."""
    counts = np.asarray(counts)
    return np.where(counts < 50, 10, np.where(counts <= 300, 50, 100))


def balanced_subset(labels, seed: int = 0) -> np.ndarray:
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 3])
    keep = []
    classes, counts = np.unique(labels, return_counts=True)
    for k, cap in zip(classes, balance_caps(counts)):
        idx = np.flatnonzero(labels == k)
        keep.append(np.sort(rng.permutation(idx)[: min(cap, len(idx))]))
    return np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)


def make_splits(n: int, seed: int, fractions=(0.6, 0.2, 0.2)) -> dict:
    if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9 or min(fractions) < 0:
        raise ValidationError(f"split fractions must be 3 non-negative values summing to 1, got {fractions}")
    order = np.random.default_rng([seed, 4]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    cut = {"train": order[:n_train], "val": order[n_train : n_train + n_val], "test": order[n_train + n_val :]}
    return {k: sorted(int(i) for i in v) for k, v in cut.items()}


@dataclass
class SyntheticDataset:
    pre: np.ndarray  # (n, C, T, H, W) float32
    post: np.ndarray
    y_pre: np.ndarray  # (n,) int32
    y_post: np.ndarray
    changed: np.ndarray  # (n,) bool
    manifest: dict

    def __len__(self):
        return len(self.y_pre)

    def split(self, name: str) -> np.ndarray:
        try:
            return np.asarray(self.manifest["splits"][name], dtype=np.int64)
        except KeyError:
            raise ValidationError(f"unknown split {name!r}") from None

    def tensors(self, idx=None, normalize: bool = True) -> dict:
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        pre, post = self.pre[idx], self.post[idx]
        if normalize:
            mean = np.asarray(self.manifest["norm"]["mean"], dtype=np.float32)[:, None, None, None]
            std = np.asarray(self.manifest["norm"]["std"], dtype=np.float32)[:, None, None, None]
            pre, post = (pre - mean) / std, (post - mean) / std
        return {
            "pre": torch.from_numpy(np.ascontiguousarray(pre, dtype=np.float32)),
            "post": torch.from_numpy(np.ascontiguousarray(post, dtype=np.float32)),
            "y_pre": torch.from_numpy(self.y_pre[idx].astype(np.int64)),
            "y_post": torch.from_numpy(self.y_post[idx].astype(np.int64)),
            "changed": torch.from_numpy(self.changed[idx].astype(np.int64)),
        }

    def label_pairs(self, idx=None) -> np.ndarray:
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        return np.stack([self.y_pre[idx], self.y_post[idx]], axis=1)

    def save(self, path):
        save(self, path)


def band_stats(pre: np.ndarray, post: np.ndarray, idx) -> dict:
    both = np.concatenate([pre[idx], post[idx]]).astype(np.float64)
    mean = both.mean(axis=(0, 2, 3, 4))
    std = both.std(axis=(0, 2, 3, 4))
    std = np.where(std > 0, std, 1.0)
    return {"mean": mean.tolist(), "std": std.tolist()}


def generate(seed: int, n_samples: int, change_rate: float, T_star, *, class_freq=None, steps: int = 23,
             height: int = 13, width: int = 13, noise: float = NOISE_SIGMA, split_fractions=(0.6, 0.2, 0.2),
             num_classes: int = NUM_CLASSES) -> SyntheticDataset:
    T_star = np.asarray(T_star, dtype=np.float64)
    if T_star.shape != (num_classes, num_classes):
        raise ValidationError(f"T_star must be {num_classes}x{num_classes}, got {T_star.shape}")
    y_pre, y_post = sample_pairs(seed, n_samples, change_rate, T_star, class_freq)
    profiles = class_profiles(num_classes)
    shape = (n_samples, len(BANDS), steps, height, width)
    pre, post = np.empty(shape, np.float32), np.empty(shape, np.float32)
    for i in range(n_samples):
        pre[i] = render_patch(np.random.default_rng([seed, _RENDER_PRE, i]), int(y_pre[i]), profiles,
                              steps, height, width, noise)
        post[i] = render_patch(np.random.default_rng([seed, _RENDER_POST, i]), int(y_post[i]), profiles,
                               steps, height, width, noise)
    splits = make_splits(n_samples, seed, split_fractions)
    manifest = {
        "schema": SCHEMA,
        "n_samples": n_samples,
        "cube_shape": list(shape[1:]),
        "bands": list(BANDS),
        "dtype": "<f4",
        "seed": seed,
        "change_rate": change_rate,
        "noise_sigma": noise,
        "T_star": T_star.tolist(),
        "confusable_pairs": [list(p) for p in CONFUSABLE_PAIRS],
        "profile_seed": PROFILE_SEED,
        "splits": splits,
        "norm": band_stats(pre, post, splits["train"] or list(range(n_samples))),
    }
    return SyntheticDataset(pre, post, y_pre, y_post, y_pre != y_post, manifest)


# -- container ---------------------------------------------------------------

_SECTIONS = (("pre", "<f4"), ("post", "<f4"), ("y_pre", "<i4"), ("y_post", "<i4"), ("changed", "u1"))


def _section_arrays(ds: SyntheticDataset):
    return {
        "pre": ds.pre, "post": ds.post, "y_pre": ds.y_pre, "y_post": ds.y_post,
        "changed": ds.changed.astype(np.uint8),
    }


def save(ds: SyntheticDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = _section_arrays(ds)
    layout, blobs, offset = [], [], 0
    for name, dtype in _SECTIONS:
        blob = np.ascontiguousarray(arrays[name], dtype=dtype).tobytes()
        layout.append({"name": name, "dtype": dtype, "shape": list(arrays[name].shape),
                       "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    (path / "values.bin").write_bytes(payload)
    manifest = dict(ds.manifest, layout=layout, sha256=hashlib.sha256(payload).hexdigest())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    ds.manifest = manifest
    return path


def manifest_digest(manifest: dict) -> str:
    """Stable hash of a dataset manifest, stored in checkpoints."""
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()


def load(path) -> SyntheticDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        payload = (path / "values.bin").read_bytes()
    except FileNotFoundError as exc:
        raise ValidationError(f"dataset not found: {exc.filename}") from None
    if manifest.get("schema") != SCHEMA:
        raise ValidationError(f"unsupported dataset schema {manifest.get('schema')!r}")
    expected = sum(s["nbytes"] for s in manifest["layout"])
    if len(payload) != expected:
        raise ValidationError(f"values.bin has {len(payload)} bytes, manifest expects {expected}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["sha256"]:
        raise ValidationError(f"checksum mismatch: {digest} != {manifest['sha256']}")
    arrays = {}
    for sec in manifest["layout"]:
        count = math.prod(sec["shape"])
        arr = np.frombuffer(payload, dtype=sec["dtype"], count=count, offset=sec["offset"])
        if arr.nbytes != sec["nbytes"]:
            raise ValidationError(f"section {sec['name']}: shape {sec['shape']} disagrees with byte count")
        # native-endian writable copy
        arrays[sec["name"]] = arr.reshape(sec["shape"]).astype(arr.dtype.newbyteorder("="))
    n = manifest["n_samples"]
    for name in ("pre", "post"):
        if list(arrays[name].shape) != [n, *manifest["cube_shape"]]:
            raise ValidationError(f"{name} shape {arrays[name].shape} != manifest cube shape")
    changed = arrays["changed"].astype(bool)
    if (changed != (arrays["y_pre"] != arrays["y_post"])).any():
        raise ValidationError("changed flags disagree with labels")
    return SyntheticDataset(arrays["pre"], arrays["post"], arrays["y_pre"], arrays["y_post"], changed, manifest)
