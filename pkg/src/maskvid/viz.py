"""PPM image output for mask maps and reconstructions."""

from __future__ import annotations

import numpy as np

from .masking import MaskMap
from .video import CUBE_H, CUBE_T, CUBE_W, VideoClip


def write_ppm(path: str, image: np.ndarray):
    """Write an (H, W, 3) float array in [0, 1] as binary P6."""
    h, w, _ = image.shape
    data = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def frame_to_image(clip: VideoClip, frame: int) -> np.ndarray:
    return clip.pixels[:, frame].transpose(1, 2, 0)


def mask_heatmap(mask: MaskMap, cell: int = 8) -> np.ndarray:
    """Temporal slices side by side; masked cells dark red, visible light gray."""
    t, s = mask.dims
    side = int(np.sqrt(s))
    if side * side != s:
        side, rows = s, 1
    else:
        rows = side
    gap = 2
    img = np.ones((rows * cell, t * (side * cell + gap) - gap, 3))
    for ti in range(t):
        block = mask.mask[ti].reshape(rows, side)
        tile = np.where(block[:, :, None], [0.55, 0.08, 0.08], [0.85, 0.85, 0.85])
        tile = np.repeat(np.repeat(tile, cell, axis=0), cell, axis=1)
        x0 = ti * (side * cell + gap)
        img[:, x0:x0 + side * cell] = tile
    return img


def gray_masked_cubes(clip: VideoClip, mask: MaskMap, gray: float = 0.5) -> VideoClip:
    """Copy of the clip with every masked cube's pixels replaced by flat gray."""
    tp, hp, wp = clip.grid_dims
    out = clip.pixels.copy()
    masked = mask.mask.reshape(tp, hp, wp)
    for t in range(tp):
        for h in range(hp):
            for w in range(wp):
                if masked[t, h, w]:
                    out[:, t * CUBE_T:(t + 1) * CUBE_T,
                        h * CUBE_H:(h + 1) * CUBE_H,
                        w * CUBE_W:(w + 1) * CUBE_W] = gray
    return VideoClip(out, stride=clip.stride, start=clip.start)
