"""Slice rasterization: grayscale channel slices and mask overlays as PNG."""

import io
from pathlib import Path

import numpy as np
from PIL import Image

# fixed overlay colors per mask class (ED, ET, NET)
OVERLAY_COLORS = {1: (40, 200, 80), 2: (230, 60, 50), 3: (70, 110, 235)}
OVERLAY_ALPHA = 0.45
AXIS_NAMES = {"axial": 0, "coronal": 1, "sagittal": 2}


def slice_of(grid: np.ndarray, axis: int, index: int) -> np.ndarray:
    if not (0 <= axis <= 2):
        raise ValueError(f"axis must be 0..2, got {axis}")
    n = grid.shape[axis]
    if not (0 <= index < n):
        raise IndexError(f"slice index {index} out of range [0, {n})")
    return np.take(grid, index, axis=axis)


def slice_image(channel: np.ndarray, axis: int, index: int) -> np.ndarray:
    """Grayscale uint8 slice from a [-1,1] intensity grid (D,H,W)."""
    sl = slice_of(channel, axis, index)
    return np.clip((sl + 1.0) * 127.5, 0, 255).astype(np.uint8)


def overlay_image(channel: np.ndarray, labels: np.ndarray, axis: int,
                  index: int, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Alpha-composite the ED/ET/NET classes in fixed colors over a slice."""
    gray = slice_image(channel, axis, index)
    lab = slice_of(labels, axis, index)
    rgb = np.stack([gray] * 3, axis=-1).astype(np.float64)
    for cls, color in OVERLAY_COLORS.items():
        m = lab == cls
        if m.any():
            rgb[m] = (1 - alpha) * rgb[m] + alpha * np.array(color, dtype=np.float64)
    return np.clip(rgb, 0, 255).astype(np.uint8)


def to_png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return buf.getvalue()


def export_step_artifacts(out_dir, stem: str, volume, mask) -> dict:
    """Write a rollout step: raw volume + mask blobs plus center-slice
    overlays on every axis. Returns the manifest entry."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vol_name = f"{stem}_vol.f32"
    volume.data.astype("<f4").tofile(out / vol_name)
    entry = {"volume": vol_name, "volume_shape": list(volume.data.shape)}
    labels = None
    if mask is not None:
        mask_name = f"{stem}_mask.f32"
        mask.data.astype("<f4").tofile(out / mask_name)
        entry["mask"] = mask_name
        entry["mask_shape"] = list(mask.data.shape)
        labels = mask.labels()
    entry["slices"] = {}
    for axis_name, axis in AXIS_NAMES.items():
        idx = volume.data.shape[1 + axis] // 2
        img = slice_image(volume.data[0], axis, idx)
        png = f"{stem}_{axis_name}.png"
        (out / png).write_bytes(to_png_bytes(img))
        entry["slices"][axis_name] = png
        if labels is not None:
            ov = overlay_image(volume.data[0], labels, axis, idx)
            png_ov = f"{stem}_{axis_name}_overlay.png"
            (out / png_ov).write_bytes(to_png_bytes(ov))
            entry["slices"][axis_name + "_overlay"] = png_ov
    return entry
