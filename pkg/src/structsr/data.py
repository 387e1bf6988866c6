"""Image I/O, paired LR/HR samples, patch cropping and CutMix masks.

Images are H-by-W-by-3 float64 arrays with values in [0, 1]. All sampling
takes an explicit ``numpy.random.Generator``; nothing here touches global
RNG state.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .bicubic import degrade_x


def load_png(path) -> np.ndarray:
    """Load an 8- or 16-bit RGB or grayscale PNG as [0,1] floats.

    Grayscale inputs are replicated to 3 channels.
    """
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("I", "I;16", "I;16B"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif im.mode in ("L", "RGB"):
                arr = np.asarray(im, dtype=np.float64) / 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except OSError as e:
        raise OSError(f"cannot read PNG {path}: {e}") from e
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.clip(arr, 0.0, 1.0)


def save_png(image: np.ndarray, path) -> None:
    """Write a [0,1] image as 8-bit PNG, atomically (temp file + rename)."""
    path = Path(path)
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    data = np.rint(arr * 255.0).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".png.part")
    try:
        with os.fdopen(fd, "wb") as fh:
            PILImage.fromarray(data).save(fh, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def quantize8(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit quantization (what save_png stores)."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class PairedSample:
    """An HR image with its LR counterpart at 1/scale the size."""

    hr: np.ndarray
    lr: np.ndarray
    scale: int = 4
    name: str = ""

    def __post_init__(self):
        eh, ew = self.lr.shape[0] * self.scale, self.lr.shape[1] * self.scale
        if self.hr.shape[:2] != (eh, ew):
            raise ValueError(
                f"paired sample {self.name!r}: hr is {self.hr.shape[:2]}, "
                f"expected {(eh, ew)} for lr {self.lr.shape[:2]} at x{self.scale}"
            )


class SRFolderDataset:
    """A directory of HR PNGs; LR from a sibling ``LRx<scale>/`` dir if
    present, otherwise degraded on the fly with the bicubic kernel."""

    def __init__(self, root, scale: int = 4, antialias: bool = True, cache: bool = True):
        self.root = Path(root)
        self.scale = scale
        self.antialias = antialias
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset directory not found: {self.root}")
        self.paths = sorted(p for p in self.root.iterdir() if p.suffix.lower() == ".png")
        if not self.paths:
            raise ValueError(f"no PNG files in {self.root}")
        self.lr_dir = self.root / f"LRx{scale}"
        self._cache: dict[int, PairedSample] = {} if cache else None

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i: int) -> PairedSample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        hr_path = self.paths[i]
        hr = load_png(hr_path)
        # trim so dims divide the scale
        h = hr.shape[0] - hr.shape[0] % self.scale
        w = hr.shape[1] - hr.shape[1] % self.scale
        hr = hr[:h, :w]
        lr_path = self.lr_dir / hr_path.name
        if lr_path.is_file():
            lr = load_png(lr_path)
        else:
            lr = degrade_x(hr, self.scale, antialias=self.antialias)
        sample = PairedSample(hr=hr, lr=lr, scale=self.scale, name=hr_path.name)
        if self._cache is not None:
            self._cache[i] = sample
        return sample


def sample_patch_pair(sample: PairedSample, hr_patch: int, rng: np.random.Generator):
    """Aligned random (hr, lr) crops; the lr origin is the hr origin / scale."""
    s = sample.scale
    if hr_patch % s:
        raise ValueError(f"hr_patch {hr_patch} not divisible by scale {s}")
    lr_patch = hr_patch // s
    lh, lw = sample.lr.shape[:2]
    if lh < lr_patch or lw < lr_patch:
        raise ValueError(
            f"sample {sample.name!r} too small: lr {lh}x{lw} < patch {lr_patch}"
        )
    ly = int(rng.integers(lh - lr_patch + 1))
    lx = int(rng.integers(lw - lr_patch + 1))
    hy, hx = ly * s, lx * s
    hr = sample.hr[hy:hy + hr_patch, hx:hx + hr_patch]
    lr = sample.lr[ly:ly + lr_patch, lx:lx + lr_patch]
    return hr, lr


def augment_pair(hr: np.ndarray, lr: np.ndarray, rng: np.random.Generator):
    """Optional flips/rotations (off by default in training config)."""
    if rng.random() < 0.5:
        hr, lr = hr[:, ::-1], lr[:, ::-1]
    if rng.random() < 0.5:
        hr, lr = hr[::-1], lr[::-1]
    if rng.random() < 0.5:
        hr, lr = np.swapaxes(hr, 0, 1), np.swapaxes(lr, 0, 1)
    return np.ascontiguousarray(hr), np.ascontiguousarray(lr)


@dataclass
class CutMixMask:
    """Axis-aligned rectangle of ones on a zero background."""

    mask: np.ndarray          # (H, W) of {0.0, 1.0}
    rect: tuple[int, int, int, int]  # (y0, y1, x0, x1), half-open
    mix_ratio: float = field(default=0.5)

    @property
    def area_fraction(self) -> float:
        return float(self.mask.mean())


def make_cutmix_mask(h: int, w: int, rng: np.random.Generator) -> CutMixMask:
    """Rectangle sized by sqrt(1 - mix_ratio), centre uniform, clipped."""
    if h < 2 or w < 2:
        raise ValueError(f"mask dims must be >= 2, got {h}x{w}")
    lam = float(rng.uniform(0.0, 1.0))
    frac = math.sqrt(1.0 - lam)
    rh, rw = int(round(h * frac)), int(round(w * frac))
    cy = int(rng.integers(h))
    cx = int(rng.integers(w))
    y0 = max(0, cy - rh // 2)
    y1 = min(h, cy + (rh + 1) // 2)
    x0 = max(0, cx - rw // 2)
    x1 = min(w, cx + (rw + 1) // 2)
    mask = np.zeros((h, w))
    mask[y0:y1, x0:x1] = 1.0
    return CutMixMask(mask=mask, rect=(y0, y1, x0, x1), mix_ratio=lam)


def cutmix(real: np.ndarray, fake: np.ndarray, mask: CutMixMask) -> np.ndarray:
    """mask==1 pixels from ``real`` pasted onto ``fake``."""
    m = mask.mask
    if real.shape[:2] != m.shape or fake.shape[:2] != m.shape:
        raise ValueError(
            f"cutmix dims mismatch: real {real.shape[:2]}, fake {fake.shape[:2]}, "
            f"mask {m.shape}"
        )
    if real.ndim == 3:
        m = m[:, :, None]
    return m * real + (1.0 - m) * fake
