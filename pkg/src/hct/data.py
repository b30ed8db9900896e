"""Synthetic paired PET/CT phantoms, intensity normalization, augmentation
and the on-disk dataset format.

Phantoms are built so that neither modality alone gives the mask: PET marks
tumors with smooth hot blobs (plus hot spots that are not tumors), while CT
shows the exact tumor outline at low contrast next to look-alike structures.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, DimensionError, FormatError
from .nn import bilinear_resize

FORMAT_VERSION = 1

SUV_MAX = 15.0
HU_MIN, HU_MAX = -160.0, 240.0

PHANTOM_PARAMS = {
    "tumor_radius": [0.06, 0.13],  # fraction of min(h, w)
    "tumors_per_slice": [1, 3],
    "tumor_suv_peak": [5.0, 10.0],
    "tumor_suv_spread": 0.6,  # Gaussian sigma / mean tumor radius
    "hotspots_per_slice": [0, 2],
    "hotspot_suv_peak": [3.0, 8.0],
    "background_suv": 0.8,
    "pet_noise": 0.15,
    "soft_tissue_hu": 40.0,
    "tumor_hu_contrast": 35.0,
    "distractors_per_slice": [1, 3],
    "distractor_gap": 2,  # pixels
    "ct_noise": 12.0,
    "air_hu": -1000.0,
    "pet_grid_factor": 2,  # PET is simulated at half resolution then upsampled
}


@dataclass
class Sample:
    pet: np.ndarray
    ct: np.ndarray
    mask: np.ndarray
    patient_id: int

    def __post_init__(self):
        if not (self.pet.shape == self.ct.shape == self.mask.shape) or self.pet.ndim != 2:
            raise DimensionError(
                f"pet {self.pet.shape}, ct {self.ct.shape} and mask {self.mask.shape} must share one 2-D shape"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.pet.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and np.array_equal(self.pet, other.pet)
            and np.array_equal(self.ct, other.ct)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass
class Dataset:
    samples: list[Sample]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.meta == other.meta and self.samples == other.samples

    @property
    def patient_ids(self) -> list[int]:
        return [s.patient_id for s in self.samples]

    def patients(self) -> list[int]:
        return sorted(set(self.patient_ids))

    def select(self, patient_ids) -> list[Sample]:
        keep = set(patient_ids)
        return [s for s in self.samples if s.patient_id in keep]


# generation -----------------------------------------------------------------


def _ellipse(yy, xx, cy, cx, ry, rx, theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _blob(yy, xx, cy, cx, sigma) -> np.ndarray:
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))


def _inside_body(rng, body, margin: float) -> tuple[float, float]:
    cy, cx, ry, rx = body
    r = margin * np.sqrt(rng.random())
    phi = rng.uniform(0, 2 * np.pi)
    return cy + r * ry * np.sin(phi), cx + r * rx * np.cos(phi)


def _slice(rng, h: int, w: int, body, p: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    size = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    f = p["pet_grid_factor"]
    # PET grid samples the same physical extent, coarser (align-corners spacing)
    pyy, pxx = np.meshgrid(np.linspace(0, h - 1, h // f), np.linspace(0, w - 1, w // f), indexing="ij")

    body_mask = _ellipse(yy, xx, body[0], body[1], body[2], body[3], 0.0)
    body_pet = _ellipse(pyy, pxx, body[0], body[1], body[2], body[3], 0.0)

    mask = np.zeros((h, w), dtype=bool)
    ct = np.where(body_mask, p["soft_tissue_hu"], p["air_hu"])
    pet = np.where(body_pet, p["background_suv"], 0.05)

    lo, hi = p["tumor_radius"]
    n_tumors = int(rng.integers(p["tumors_per_slice"][0], p["tumors_per_slice"][1] + 1))
    for _ in range(n_tumors):
        cy, cx = _inside_body(rng, body, 0.6)
        ry, rx = rng.uniform(lo, hi, size=2) * size
        theta = rng.uniform(0, np.pi)
        shape = _ellipse(yy, xx, cy, cx, ry, rx, theta)
        mask |= shape
        ct = np.where(shape, p["soft_tissue_hu"] + p["tumor_hu_contrast"], ct)
        peak = rng.uniform(*p["tumor_suv_peak"])
        pet = pet + peak * _blob(pyy, pxx, cy, cx, p["tumor_suv_spread"] * 0.5 * (ry + rx))

    # distractors never touch a tumor, so the CT outline of every tumor stays visible
    keep_out = ndimage.binary_dilation(mask, iterations=p["distractor_gap"])
    n_distract = int(rng.integers(p["distractors_per_slice"][0], p["distractors_per_slice"][1] + 1))
    for _ in range(n_distract):
        for _attempt in range(20):
            cy, cx = _inside_body(rng, body, 0.8)
            ry, rx = rng.uniform(lo, hi, size=2) * size
            shape = _ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0, np.pi))
            contrast = p["tumor_hu_contrast"] * rng.uniform(0.8, 1.2)
            if not (shape & keep_out).any():
                ct = np.where(shape, p["soft_tissue_hu"] + contrast, ct)
                keep_out |= shape
                break

    n_hot = int(rng.integers(p["hotspots_per_slice"][0], p["hotspots_per_slice"][1] + 1))
    for _ in range(n_hot):
        cy, cx = _inside_body(rng, body, 0.8)
        peak = rng.uniform(*p["hotspot_suv_peak"])
        pet = pet + peak * _blob(pyy, pxx, cy, cx, rng.uniform(lo, hi) * size * 0.5)

    ct = ct + rng.normal(0.0, p["ct_noise"], size=ct.shape)
    pet = np.maximum(pet + rng.normal(0.0, p["pet_noise"], size=pet.shape), 0.0)
    pet = resample_pet_to_ct(pet, h, w)
    return np.maximum(pet, 0.0).astype(np.float32), ct.astype(np.float32), mask.astype(np.uint8)


def generate_phantom(seed: int, n_patients: int, slices_per_patient: int, h: int, w: int) -> Dataset:
    """Deterministic dataset of ``n_patients * slices_per_patient`` slices."""
    if h % 16 or w % 16 or h < 16 or w < 16:
        raise DimensionError(f"phantom size {h}x{w} must be a positive multiple of 16")
    if n_patients < 1:
        raise ValueError(f"n_patients must be >= 1, got {n_patients}")
    if slices_per_patient < 1:
        raise ValueError(f"slices_per_patient must be >= 1, got {slices_per_patient}")
    p = PHANTOM_PARAMS
    samples = []
    for pid in range(n_patients):
        rng = np.random.default_rng([seed, pid])
        body = (
            h / 2 + rng.uniform(-0.03, 0.03) * h,
            w / 2 + rng.uniform(-0.03, 0.03) * w,
            rng.uniform(0.38, 0.45) * h,
            rng.uniform(0.40, 0.47) * w,
        )
        for _ in range(slices_per_patient):
            pet, ct, mask = _slice(rng, h, w, body, p)
            samples.append(Sample(pet, ct, mask, pid))
    meta = {
        "seed": int(seed),
        "h": int(h),
        "w": int(w),
        "n_patients": int(n_patients),
        "slices_per_patient": int(slices_per_patient),
        "params": json.loads(json.dumps(p)),
    }
    return Dataset(samples, meta)


# preprocessing ----------------------------------------------------------------


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if np.isnan(x).any():
        raise DataError(f"{what} contains NaN")
    return x


def normalize_pet(pet) -> np.ndarray:
    """Clamp SUV to [0, 15] and scale to [0, 1]."""
    pet = _check_finite(pet, "PET image")
    return np.clip(pet, 0.0, SUV_MAX) / pet.dtype.type(SUV_MAX)


def normalize_ct(ct) -> np.ndarray:
    """Clamp HU to [-160, 240] and map affinely to [0, 1]."""
    ct = _check_finite(ct, "CT image")
    lo, span = ct.dtype.type(HU_MIN), ct.dtype.type(HU_MAX - HU_MIN)
    return (np.clip(ct, HU_MIN, HU_MAX) - lo) / span


def resample_pet_to_ct(pet, target_h: int, target_w: int) -> np.ndarray:
    pet = np.asarray(pet)
    if min(pet.shape) < 2 or target_h < 2 or target_w < 2:
        raise DimensionError(f"resampling needs dims >= 2, got {pet.shape} -> ({target_h}, {target_w})")
    return bilinear_resize(pet, target_h, target_w)


def prepare_batch(samples: list[Sample], dtype=np.float32):
    """Normalized (B, 1, H, W) PET and CT plus the (B, H, W) mask."""
    pet = np.stack([normalize_pet(s.pet) for s in samples])[:, None].astype(dtype)
    ct = np.stack([normalize_ct(s.ct) for s in samples])[:, None].astype(dtype)
    mask = np.stack([s.mask for s in samples]).astype(np.uint8)
    return pet, ct, mask


# augmentation -----------------------------------------------------------------


@dataclass
class AugmentConfig:
    p_flip: float = 0.5
    p_crop: float = 0.5
    crop_scale: tuple[float, float] = (0.8, 1.0)


def augment(sample: Sample, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> Sample:
    """Random horizontal flip and random crop-and-resize, shared by all channels."""
    h, w = sample.shape
    # draw everything up front so the random stream does not depend on branches
    flip = rng.random() < config.p_flip
    crop = rng.random() < config.p_crop
    sy, sx = rng.uniform(*config.crop_scale, size=2)
    oy, ox = rng.random(2)

    pet, ct, mask = sample.pet, sample.ct, sample.mask.astype(np.float32)
    if flip:
        pet, ct, mask = pet[:, ::-1], ct[:, ::-1], mask[:, ::-1]
    if crop:
        ch, cw = max(2, int(round(sy * h))), max(2, int(round(sx * w)))
        y0, x0 = int(oy * (h - ch + 1)), int(ox * (w - cw + 1))
        window = np.s_[y0 : y0 + ch, x0 : x0 + cw]
        pet = bilinear_resize(np.ascontiguousarray(pet[window]), h, w)
        ct = bilinear_resize(np.ascontiguousarray(ct[window]), h, w)
        mask = bilinear_resize(np.ascontiguousarray(mask[window]), h, w)
    return Sample(
        np.ascontiguousarray(pet, dtype=np.float32),
        np.ascontiguousarray(ct, dtype=np.float32),
        (np.asarray(mask) >= 0.5).astype(np.uint8),
        sample.patient_id,
    )


# on-disk format -----------------------------------------------------------------


def _payload_names(i: int) -> tuple[str, str, str]:
    return f"pet_{i:04}.f32", f"ct_{i:04}.f32", f"mask_{i:04}.u8"


def write_dataset(dataset: Dataset, directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    h, w = dataset.samples[0].shape if dataset.samples else (dataset.meta["h"], dataset.meta["w"])
    meta = {
        **dataset.meta,
        "h": int(h),
        "w": int(w),
        "n_samples": len(dataset),
        "patient_ids": [int(p) for p in dataset.patient_ids],
        "version": FORMAT_VERSION,
    }
    for i, s in enumerate(dataset.samples):
        if s.shape != (h, w):
            raise DimensionError(f"sample {i} has shape {s.shape}, dataset is {h}x{w}")
        pet_name, ct_name, mask_name = _payload_names(i)
        (out / pet_name).write_bytes(np.ascontiguousarray(s.pet, dtype="<f4").tobytes())
        (out / ct_name).write_bytes(np.ascontiguousarray(s.ct, dtype="<f4").tobytes())
        (out / mask_name).write_bytes(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_payload(path: Path, dtype: str, count: int) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing payload file {path}") from exc
    expected = count * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes from meta.json, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).copy()


def read_dataset(directory) -> Dataset:
    src = Path(directory)
    meta_path = src / "meta.json"
    if not meta_path.is_file():
        raise FormatError(f"{meta_path} not found")
    try:
        meta = json.loads(meta_path.read_text())
        h, w, n = int(meta["h"]), int(meta["w"]), int(meta["n_samples"])
        pids = [int(p) for p in meta["patient_ids"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{meta_path}: malformed meta ({exc})") from exc
    if len(pids) != n:
        raise FormatError(f"{meta_path}: n_samples={n} but {len(pids)} patient_ids")
    samples = []
    for i, pid in enumerate(pids):
        pet_name, ct_name, mask_name = _payload_names(i)
        pet = _read_payload(src / pet_name, "<f4", h * w).reshape(h, w).astype(np.float32)
        ct = _read_payload(src / ct_name, "<f4", h * w).reshape(h, w).astype(np.float32)
        mask = _read_payload(src / mask_name, "u1", h * w).reshape(h, w)
        samples.append(Sample(pet, ct, mask, pid))
    for key in ("n_samples", "patient_ids", "version"):
        meta.pop(key, None)
    return Dataset(samples, meta)


def payload_checksum(directory) -> str:
    """SHA-256 over the payload files in name order (meta.json excluded)."""
    digest = hashlib.sha256()
    for path in sorted(Path(directory).iterdir()):
        if path.suffix in (".f32", ".u8"):
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()
