"""Rectangular adversarial patches: sampling, placement and application."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from edpa import autodiff as ad
from edpa.errors import ShapeError
from edpa.tensorio import load_tensor, save_tensor


@dataclass
class AdvPatch:
    pixels: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise ShapeError(f"patch must be h x w x C, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ShapeError(f"patch values outside [0, 1]: [{self.pixels.min()}, {self.pixels.max()}]")

    @property
    def dims(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class PlacementMask:
    origin: tuple[int, int]
    dims: tuple[int, int]
    image_dims: tuple[int, int]

    def __post_init__(self):
        (r, c), (h, w), (H, W) = self.origin, self.dims, self.image_dims
        if h < 1 or w < 1:
            raise ShapeError(f"mask dims must be positive, got {self.dims}")
        if r < 0 or c < 0 or r + h > H or c + w > W:
            raise ShapeError(f"mask {h}x{w} at {self.origin} exceeds image {H}x{W}")

    @property
    def rows(self) -> slice:
        return slice(self.origin[0], self.origin[0] + self.dims[0])

    @property
    def cols(self) -> slice:
        return slice(self.origin[1], self.origin[1] + self.dims[1])

    def binary(self) -> np.ndarray:
        m = np.zeros(self.image_dims)
        m[self.rows, self.cols] = 1.0
        return m


def init_patch(rng: np.random.Generator, h: int, w: int, channels: int = 3, provenance: str = "") -> AdvPatch:
    if h < 1 or w < 1 or channels < 1:
        raise ShapeError(f"patch dims must be positive, got {(h, w, channels)}")
    return AdvPatch(rng.random((h, w, channels)), provenance or "init:uniform")


def gaussian_patch(rng: np.random.Generator, h: int, w: int, channels: int = 3) -> AdvPatch:
    """Random-baseline patch: standard normal noise clipped into [0, 1]."""
    return AdvPatch(np.clip(rng.standard_normal((h, w, channels)), 0.0, 1.0), "baseline:gaussian")


def random_position(rng: np.random.Generator, image_dims: tuple[int, int], patch_dims: tuple[int, int]) -> PlacementMask:
    (H, W), (h, w) = image_dims, patch_dims
    if h > H or w > W:
        raise ShapeError(f"patch {h}x{w} larger than image {H}x{W}")
    r = int(rng.integers(0, H - h + 1))
    c = int(rng.integers(0, W - w + 1))
    return PlacementMask((r, c), (h, w), (H, W))


def apply_patch(image, patch, mask: PlacementMask):
    """Replace the masked rectangle of ``image`` (H, W, C) with the patch pixels.

    ``patch`` may be an :class:`AdvPatch`, an array or an autodiff ``Node``;
    with a Node the result is a Node carrying gradients back to the patch.
    """
    image = np.asarray(image, dtype=np.float64)
    pix = patch.pixels if isinstance(patch, AdvPatch) else patch
    pshape = pix.shape
    if image.ndim != 3 or len(pshape) != 3 or pshape[2] != image.shape[2]:
        raise ShapeError(f"apply_patch: image {image.shape} and patch {pshape} are incompatible")
    if tuple(pshape[:2]) != tuple(mask.dims) or tuple(image.shape[:2]) != tuple(mask.image_dims):
        raise ShapeError(
            f"apply_patch: mask {mask.dims} on {mask.image_dims} does not fit patch {pshape[:2]} / image {image.shape[:2]}"
        )
    if isinstance(pix, ad.Node):
        keep = image.copy()
        keep[mask.rows, mask.cols, :] = 0.0
        return ad.add(keep, ad.paste(pix, image.shape, (mask.origin[0], mask.origin[1], 0)))
    out = image.copy()
    out[mask.rows, mask.cols, :] = pix
    return out


def apply_patch_batch(images: np.ndarray, patch, masks: list[PlacementMask]):
    """Apply one patch to each image under its own mask; Node in, Node out."""
    rows = [apply_patch(img, patch, m) for img, m in zip(images, masks)]
    if isinstance(rows[0], ad.Node):
        return ad.stack(rows, axis=0)
    return np.stack(rows)


def save_patch(path, patch: AdvPatch, extra: dict | None = None) -> None:
    path = Path(path)
    save_tensor(path, patch.pixels)
    side = {"provenance": patch.provenance, "dims": list(patch.pixels.shape), **(extra or {})}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_patch(path) -> AdvPatch:
    path = Path(path)
    pixels = load_tensor(path)
    side = path.with_suffix(path.suffix + ".json")
    prov = json.loads(side.read_text(encoding="utf-8")).get("provenance", "") if side.exists() else ""
    return AdvPatch(pixels, prov)


def to_ppm(pixels: np.ndarray) -> bytes:
    """Binary P6 pixmap; values quantised with round-half-even to 0..255."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def export_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(to_ppm(pixels))
