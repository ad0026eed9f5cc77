import numpy as np
from pydantic import BaseModel, model_validator
from scipy import signal

from app.internal.geometry import FloatArray, GrayImage, difference, euclidean_distance_sq
from app.util.errors import ShapeError


class SsimConfig(BaseModel, frozen=True):
    window_side: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0

    @model_validator(mode="after")
    def _check(self):
        if self.window_side < 3 or self.window_side % 2 == 0:
            raise ValueError("window side must be odd and >= 3")
        if self.window_sigma <= 0:
            raise ValueError("window sigma must be > 0")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be > 0")
        if self.dynamic_range <= 0:
            raise ValueError("dynamic range must be > 0")
        return self

    def window(self) -> FloatArray:
        """Normalized 2-D Gaussian weights of the local statistics."""
        x = np.arange(self.window_side) - (self.window_side - 1) / 2.0
        g = np.exp(-(x**2) / (2.0 * self.window_sigma**2))
        g /= g.sum()
        return np.outer(g, g)


def euclidean_metric(ref: GrayImage, deg: GrayImage) -> float:
    """Squared Euclidean distance between the two images."""
    return euclidean_distance_sq(difference(ref, deg))


def ssim_map(ref: GrayImage, deg: GrayImage, cfg: SsimConfig = SsimConfig()) -> FloatArray:
    """Per-window SSIM index over fully interior windows only."""
    if ref.shape != deg.shape:
        raise ShapeError(
            f"image dimensions differ: reference {ref.width}x{ref.height}, degraded {deg.width}x{deg.height}"
        )
    if ref.width < cfg.window_side or ref.height < cfg.window_side:
        raise ShapeError(
            f"{ref.width}x{ref.height} image is smaller than the {cfg.window_side}x{cfg.window_side} window"
        )
    w = cfg.window()
    x = ref.values
    y = deg.values

    def local(values: FloatArray) -> FloatArray:
        return signal.correlate2d(values, w, mode="valid")

    mu_x = local(x)
    mu_y = local(y)
    var_x = local(x * x) - mu_x * mu_x
    var_y = local(y * y) - mu_y * mu_y
    cov = local(x * y) - mu_x * mu_y

    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )


def ssim(ref: GrayImage, deg: GrayImage, cfg: SsimConfig = SsimConfig()) -> float:
    return float(ssim_map(ref, deg, cfg).mean())
