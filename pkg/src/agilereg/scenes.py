"""Seeded synthetic scenes with natural-image statistics.

Dead-leaves occlusion model (power-law leaf sizes, so structure exists at
every scale) with a faint 1/f luminance texture on top.
"""

from __future__ import annotations

import numpy as np

from .imgio import ImageBuffer


def pink_noise(size: int, rng: np.random.Generator, exponent: float = 1.0) -> np.ndarray:
    """Zero-mean, unit-std field with amplitude spectrum ~ 1/f**exponent."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.hypot(fx, fy)
    f[0, 0] = 1.0
    spec = (rng.standard_normal(f.shape) + 1j * rng.standard_normal(f.shape)) / f**exponent
    spec[0, 0] = 0
    field = np.fft.irfft2(spec, s=(size, size))
    return field / field.std()


def dead_leaves(size: int, seed: int, rmin: float = 2.0, rmax: float | None = None,
                texture: float = 0.06, max_leaves: int = 200_000) -> ImageBuffer:
    """Square RGB dead-leaves image.

    Leaves are axis-aligned rectangles with half-sizes drawn from a density
    proportional to r**-3 on [rmin, rmax]; they are painted front to back
    until the canvas is covered.
    """
    rng = np.random.default_rng(seed)
    rmax = rmax if rmax is not None else size / 4
    canvas = np.zeros((size, size, 3), dtype=np.float32)
    covered = np.zeros((size, size), dtype=bool)
    remaining = size * size
    a, b = rmin**-2, rmax**-2
    batch = 4096
    painted = 0
    while remaining and painted < max_leaves:
        u = rng.random(batch)
        half = (a - u * (a - b)) ** -0.5  # inverse CDF of r**-3
        aspect = np.exp(rng.uniform(-0.7, 0.7, batch))
        hw = np.maximum(half * aspect, 1.0)
        hh = np.maximum(half / aspect, 1.0)
        cx = rng.uniform(-rmax, size + rmax, batch)
        cy = rng.uniform(-rmax, size + rmax, batch)
        base = rng.random((batch, 1))
        tint = rng.normal(0.0, 0.18, (batch, 3))
        color = np.clip(base + tint, 0.02, 0.98).astype(np.float32)
        for i in range(batch):
            x0, x1 = int(max(cx[i] - hw[i], 0)), int(min(cx[i] + hw[i], size))
            y0, y1 = int(max(cy[i] - hh[i], 0)), int(min(cy[i] + hh[i], size))
            if x0 >= x1 or y0 >= y1:
                continue
            free = ~covered[y0:y1, x0:x1]
            n = int(free.sum())
            if n:
                canvas[y0:y1, x0:x1][free] = color[i]
                covered[y0:y1, x0:x1] = True
                remaining -= n
                if not remaining:
                    break
        painted += batch
    if texture:
        canvas += (texture * pink_noise(size, rng))[:, :, None].astype(np.float32)
    return ImageBuffer(np.clip(canvas, 0.0, 1.0))
