"""Export of score maps, attention maps and boxes as binary PPM images."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .boxes import Box
from .data import GroundingSample
from .errors import ContractError, FormatError
from .model import GroundingModel

RED = (255, 0, 0)
GREEN = (0, 255, 0)


def write_ppm(path, rgb: np.ndarray) -> Path:
    """Write an ``[H, W, 3]`` uint8 array as P6 with max value 255."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ContractError(f"expected [H, W, 3] uint8, got {rgb.shape} {rgb.dtype}")
    path = Path(path)
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: max value {maxval}, expected 255")
    pixels = parts[4]
    if len(pixels) != w * h * 3:
        raise FormatError(f"{path}: {len(pixels)} pixel bytes for {w}x{h}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


def upsample(grid: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upsampling of a 2-D map."""
    return np.repeat(np.repeat(np.asarray(grid), factor, axis=0), factor, axis=1)


def to_gray_rgb(values: np.ndarray) -> np.ndarray:
    """Linear scaling with the maximum mapped to 255, replicated over RGB."""
    values = np.asarray(values, dtype=np.float64)
    top = values.max()
    scaled = np.zeros_like(values) if top <= 0 else np.clip(values / top, 0, 1) * 255
    gray = np.round(scaled).astype(np.uint8)
    return np.repeat(gray[..., None], 3, axis=-1)


def box_pixels(box: Box, size: int) -> tuple[int, int, int, int]:
    """Inclusive pixel bounds ``(x0, y0, x1, y1)`` clipped to the image."""
    x0, y0, x1, y1 = box.corners
    lo = lambda v: int(np.clip(np.floor(v * size), 0, size - 1))  # noqa: E731
    hi = lambda v: int(np.clip(np.ceil(v * size) - 1, 0, size - 1))  # noqa: E731
    return lo(x0), lo(y0), max(lo(x0), hi(x1)), max(lo(y0), hi(y1))


def draw_box(rgb: np.ndarray, box: Box, color, thickness: int = 2) -> np.ndarray:
    out = rgb.copy()
    x0, y0, x1, y1 = box_pixels(box, rgb.shape[0])
    t = thickness
    out[y0 : min(y0 + t, y1 + 1), x0 : x1 + 1] = color
    out[max(y1 - t + 1, y0) : y1 + 1, x0 : x1 + 1] = color
    out[y0 : y1 + 1, x0 : min(x0 + t, x1 + 1)] = color
    out[y0 : y1 + 1, max(x1 - t + 1, x0) : x1 + 1] = color
    return out


def inside_mask(box: Box, size: int) -> np.ndarray:
    """Pixels whose centres fall inside ``box``."""
    c = (np.arange(size) + 0.5) / size
    x0, y0, x1, y1 = box.corners
    return ((c >= y0) & (c <= y1))[:, None] & ((c >= x0) & (c <= x1))[None, :]


def score_focus(score_pixels: np.ndarray, box: Box) -> tuple[float, float]:
    """Mean score inside and outside ``box`` on a pixel-resolution map."""
    mask = inside_mask(box, score_pixels.shape[0])
    if mask.all() or not mask.any():
        raise ContractError("box must leave pixels both inside and outside")
    return float(score_pixels[mask].mean()), float(score_pixels[~mask].mean())


def center_cell(box: Box, grid: int) -> int:
    col = min(int(box.cx * grid), grid - 1)
    row = min(int(box.cy * grid), grid - 1)
    return row * grid + col


def export_maps(model: GroundingModel, sample: GroundingSample, out_dir) -> list[Path]:
    """Write the PPM set for one sample plus a ``maps.json`` sidecar of raw floats.

    PPM files: ``score`` (with verification), ``context`` (with the context
    encoder; the attention row of the cell holding the ground-truth centre),
    ``stage{k}`` for every decoder stage, and ``input_boxes``, the input image
    with the ground truth (green) and final prediction (red) outlined. The
    full model therefore yields N + 3 images.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    size, patch, grid = cfg.image_size, cfg.patch_size, cfg.grid
    if sample.pixels.shape[-1] != size:
        raise ContractError(f"sample is {sample.pixels.shape[-1]} px, model expects {size}")
    pred = model.forward(sample.image, sample.tokens)
    image = np.transpose(sample.pixels, (1, 2, 0)).copy()
    written = []
    raw: dict = {"grid": grid, "patch_size": patch, "gt": list(sample.gt.as_array())}

    if pred.score_map is not None:
        s = pred.score_map[0]
        written.append(write_ppm(out / "score.ppm", to_gray_rgb(upsample(s, patch))))
        raw["score"] = s.tolist()
    if pred.context_attention is not None:
        cell = center_cell(sample.gt, grid)
        row = pred.context_attention[0].mean(axis=0)[cell].reshape(grid, grid)
        written.append(write_ppm(out / "context.ppm", to_gray_rgb(upsample(row, patch))))
        raw["context_cell"] = cell
        raw["context"] = row.tolist()
    raw["stages"] = []
    for k, attn in enumerate(pred.stage_attention):
        a = attn[0].mean(axis=0).reshape(grid, grid)
        written.append(write_ppm(out / f"stage{k + 1}.ppm", to_gray_rgb(upsample(a, patch))))
        raw["stages"].append(a.tolist())

    final = pred.box_list(0)[-1]
    raw["pred"] = list(final.as_array())
    overlay = draw_box(draw_box(image, sample.gt, GREEN), final, RED)
    written.append(write_ppm(out / "input_boxes.ppm", overlay))
    (out / "maps.json").write_text(json.dumps(raw, sort_keys=True))
    return written
