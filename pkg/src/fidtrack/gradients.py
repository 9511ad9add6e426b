"""Noise-suppressed and regular gradient images, and their normalized probability form.

Partial derivatives are forward differences between neighboring pixels; the
last column (for the u-derivative) and last row (for the v-derivative) are
zero-padded. With a suppression threshold mu, each partial derivative whose
magnitude is below mu is zeroed before the magnitude is formed; without one
the regular (unsuppressed) gradient is produced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_MU = 32.0


@dataclass
class GradientImage:
    values: np.ndarray  # float64, >= 0, same shape as the source frame
    suppressed: bool
    mu: float | None


@dataclass
class ProbabilityImage:
    values: np.ndarray  # float64 in [0, 1]


def gradient_magnitude(pixels: np.ndarray, mu: float | None) -> np.ndarray:
    """Forward-difference gradient magnitude of a 2D image.

    Magnitudes are sqrt(du**2 + dv**2); sqrt of an exactly-representable
    integer sum, so results are reproducible bit-for-bit across platforms for
    integer-valued inputs.
    """
    a = np.asarray(pixels, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("expected a non-empty 2D image")
    du = np.zeros_like(a)
    dv = np.zeros_like(a)
    du[:, :-1] = a[:, 1:] - a[:, :-1]
    dv[:-1, :] = a[1:, :] - a[:-1, :]
    if mu is not None:
        if mu <= 0:
            raise ValueError(f"mu must be positive, got {mu}")
        du[np.abs(du) < mu] = 0.0
        dv[np.abs(dv) < mu] = 0.0
    return np.sqrt(du * du + dv * dv)


def gradient(frame, mu: float | None = DEFAULT_MU) -> GradientImage:
    """Gradient image of a projection frame; mu=None yields the regular gradient."""
    pixels = frame.pixels if hasattr(frame, "pixels") else frame
    values = gradient_magnitude(pixels, mu)
    return GradientImage(values=values, suppressed=mu is not None, mu=mu)


def normalize(g: GradientImage) -> ProbabilityImage:
    """Scale a gradient image into [0, 1]; an all-zero image stays all-zero."""
    peak = float(g.values.max()) if g.values.size else 0.0
    if peak <= 0.0:
        return ProbabilityImage(values=np.zeros_like(g.values))
    return ProbabilityImage(values=g.values / peak)


def write_pgm16(values: np.ndarray, path) -> None:
    """Debug dump as a 16-bit binary PGM (P5), scaled so the image max maps to 65535."""
    peak = float(values.max()) if values.size else 0.0
    scaled = np.zeros(values.shape, dtype=np.uint16)
    if peak > 0:
        scaled = np.rint(values / peak * 65535.0).astype(np.uint16)
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(scaled.astype(">u2").tobytes())
