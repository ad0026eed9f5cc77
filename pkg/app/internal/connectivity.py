"""
Kernel metrics: translation-invariant Jacobians built from a Gaussian or
difference-of-Gaussians connectivity profile over retinal (pixel) distance.
"""

import csv
import io
import itertools
import math
from pathlib import Path
from typing import Any, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import signal

from app.internal.corpus import FoldAssignment, ImagePair, assign_folds, references_of
from app.internal.geometry import DenseJacobian, FloatArray, GrayImage, difference
from app.internal.regression import TILE_SIDE, tile_differences, tiled_quadratic
from app.internal.stats import CorrelationKind, correlation_error
from app.util.errors import ParameterError
from app.util.log import logger
from app.util.numfmt import fmt
from app.util.parallel import ordered_map

DEFAULT_TRUNCATION = 1e-4

DogCenterMode = Literal["unit", "profile"]


class GaussianProfile(BaseModel, frozen=True):
    kind: Literal["gauss"] = "gauss"
    sigma: float

    @field_validator("sigma")
    @classmethod
    def _positive(cls, value: float) -> float:
        if not (math.isfinite(value) and value > 0):
            raise ValueError(f"sigma must be > 0, got {value}")
        return value

    def at_sq(self, d2: float | FloatArray) -> Any:
        return np.exp(-d2 / (2.0 * self.sigma**2))

    def envelope_sq(self, d2: float) -> float:
        return float(self.at_sq(d2))


class DogProfile(BaseModel, frozen=True):
    kind: Literal["dog"] = "dog"
    sigma_center: float
    sigma_surround: float
    alpha: float

    @field_validator("sigma_center", "sigma_surround", "alpha")
    @classmethod
    def _positive(cls, value: float) -> float:
        if not (math.isfinite(value) and value > 0):
            raise ValueError(f"must be > 0, got {value}")
        return value

    def at_sq(self, d2: float | FloatArray) -> Any:
        a = self.alpha
        center = np.exp(-d2 / (2.0 * self.sigma_center**2))
        surround = np.exp(-d2 / (2.0 * self.sigma_surround**2))
        return center / (1 + a) - a * surround / (1 + a)

    def envelope_sq(self, d2: float) -> float:
        """Upper bound on |profile| that decreases with distance."""
        a = self.alpha
        center = math.exp(-d2 / (2.0 * self.sigma_center**2))
        surround = math.exp(-d2 / (2.0 * self.sigma_surround**2))
        return center / (1 + a) + a * surround / (1 + a)


type Profile = GaussianProfile | DogProfile


def gauss_profile(d: float, sigma: float) -> float:
    if d < 0:
        raise ParameterError(f"distance must be >= 0, got {d}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    return math.exp(-(d * d) / (2.0 * sigma * sigma))


def dog_profile(d: float, p: DogProfile) -> float:
    if d < 0:
        raise ParameterError(f"distance must be >= 0, got {d}")
    return float(p.at_sq(d * d))


class ConnectivityKernel(BaseModel):
    """
    Stencil of one row of J: weights[radius + dr, radius + dc] connects a pixel
    to the pixel offset by (dr, dc).
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    radius: int
    weights: FloatArray
    profile: Optional[GaussianProfile | DogProfile] = None
    unit_center: bool = True

    @field_validator("weights", mode="before")
    @classmethod
    def _readonly(cls, value: Any) -> FloatArray:
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        return arr

    @model_validator(mode="after")
    def _check(self):
        side = 2 * self.radius + 1
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if self.weights.shape != (side, side):
            raise ValueError(f"weights must be {side}x{side}, got {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")
        w = self.weights
        if not (np.array_equal(w, w.T) and np.array_equal(w, w[::-1]) and np.array_equal(w, w[:, ::-1])):
            raise ValueError("weights must be 8-fold symmetric")
        if self.unit_center and w[self.radius, self.radius] != 1.0:
            raise ValueError("center weight must be exactly 1")
        return self

    @property
    def center(self) -> float:
        return float(self.weights[self.radius, self.radius])

    def to_dense(self, height: int, width: int) -> DenseJacobian:
        """The (height·width)² Jacobian this kernel realizes on a height×width image."""
        r = self.radius
        rows, cols = np.divmod(np.arange(height * width), width)
        dr = rows[None, :] - rows[:, None]
        dc = cols[None, :] - cols[:, None]
        inside = (np.abs(dr) <= r) & (np.abs(dc) <= r)
        dense = np.zeros((height * width, height * width))
        dense[inside] = self.weights[r + dr[inside], r + dc[inside]]
        return DenseJacobian(entries=dense)


def kernel_radius(
    profile: Profile, truncation_threshold: float = DEFAULT_TRUNCATION, max_radius: Optional[int] = None
) -> int:
    """
    Smallest r with |profile(d)| < threshold for every d >= r.

    No ceil(4 sigma) or ceil(4 max(sigma_c, sigma_s)) cap is applied, so the
    radius can exceed it (sigma = 2.0 gives 9, not 8). `max_radius` is the only
    cap and logs a warning when it cuts the kernel above the threshold.
    """
    if not truncation_threshold > 0:
        raise ParameterError(f"truncation threshold must be > 0, got {truncation_threshold}")
    r = 0
    while profile.envelope_sq(float(r * r)) >= truncation_threshold:
        if max_radius is not None and r >= max_radius:
            logger.warning(
                "Kernel radius capped above the truncation threshold",
                radius=r,
                residual=profile.envelope_sq(float(r * r)),
            )
            break
        r += 1
    return r


def build_kernel(
    profile: Profile,
    truncation_threshold: float = DEFAULT_TRUNCATION,
    dog_center: DogCenterMode = "unit",
    max_radius: Optional[int] = None,
) -> ConnectivityKernel:
    """
    Off-center weights follow the profile at the Euclidean pixel distance. The
    center is forced to 1, except for a DOG with `dog_center="profile"`, which
    keeps (1 − α)/(1 + α).
    """
    radius = kernel_radius(profile, truncation_threshold, max_radius)
    offsets = np.arange(-radius, radius + 1)
    d2 = (offsets[:, None] ** 2 + offsets[None, :] ** 2).astype(np.float64)
    weights = np.asarray(profile.at_sq(d2), dtype=np.float64)
    unit = isinstance(profile, GaussianProfile) or dog_center == "unit"
    if unit:
        weights[radius, radius] = 1.0
    return ConnectivityKernel(radius=radius, weights=weights, profile=profile, unit_center=unit)


def strain_field(delta: FloatArray, kernel: ConnectivityKernel) -> FloatArray:
    # zero outside the image, so this is the dense J restricted to the image
    return signal.convolve(delta, kernel.weights, mode="same")


def score_pair(ref: GrayImage, deg: GrayImage, kernel: ConnectivityKernel) -> float:
    """‖J Δ‖² over the whole image."""
    delta = difference(ref, deg).values
    strained = strain_field(delta, kernel)
    return float(np.sum(strained * strained))


def score_pair_tiled(
    ref: GrayImage, deg: GrayImage, kernel: ConnectivityKernel, crop: bool = False
) -> float:
    """Kernel scoring restricted to independent 8×8 tiles."""
    tiles = tile_differences(ref, deg, TILE_SIDE, crop)
    return tiled_quadratic(tiles, kernel.to_dense(TILE_SIDE, TILE_SIDE).entries)


class SweepResult(BaseModel):
    kind: Literal["gauss", "dog"]
    parameter_names: list[str]
    grid: list[tuple[float, ...]]
    errors: list[list[float]]
    """errors[fold][grid index] = 1 − correlation on the fold's training pairs."""
    degenerate: list[list[bool]]
    best: list[tuple[float, ...]]
    held_out_error: list[float]
    """Error of each fold's best parameters on that fold's own pairs."""
    folds: FoldAssignment
    statistic: CorrelationKind = "pearson"

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.errors) != self.folds.k or len(self.best) != self.folds.k:
            raise ValueError("need one error curve and one best point per fold")
        for fold, curve in enumerate(self.errors):
            if len(curve) != len(self.grid):
                raise ValueError(f"fold {fold} has {len(curve)} errors for {len(self.grid)} grid points")
            if curve[self.grid.index(self.best[fold])] != min(curve):
                raise ValueError(f"best parameters of fold {fold} do not attain the minimum")
        return self


def _profile_for(kind: Literal["gauss", "dog"], params: tuple[float, ...]) -> Profile:
    if kind == "gauss":
        return GaussianProfile(sigma=params[0])
    return DogProfile(sigma_center=params[0], sigma_surround=params[1], alpha=params[2])


def _sweep(
    kind: Literal["gauss", "dog"],
    names: list[str],
    grid: list[tuple[float, ...]],
    pairs: Sequence[ImagePair],
    folds: int,
    seed: int,
    statistic: CorrelationKind,
    truncation_threshold: float,
    dog_center: DogCenterMode,
) -> SweepResult:
    if not grid:
        raise ParameterError("parameter grid is empty")
    if len(set(grid)) != len(grid):
        raise ParameterError("parameter grid has duplicate points")
    assignment = assign_folds(references_of(pairs), folds, seed)
    profiles = [_profile_for(kind, params) for params in grid]

    def score_grid_point(profile: Profile) -> FloatArray:
        kernel = build_kernel(profile, truncation_threshold, dog_center)
        return np.array([score_pair(p.ref, p.deg, kernel) for p in pairs])

    logger.info("Sweeping", kind=kind, grid=len(grid), pairs=len(pairs), folds=folds)
    scores = ordered_map(score_grid_point, profiles)
    dmos = np.array([p.dmos for p in pairs])
    fold_of = np.array([assignment.fold_of(p.reference) for p in pairs])

    errors: list[list[float]] = []
    degenerate: list[list[bool]] = []
    best: list[tuple[float, ...]] = []
    held_out: list[float] = []
    for fold in range(folds):
        train = fold_of != fold
        test = ~train
        curve: list[float] = []
        flags: list[bool] = []
        for point_scores in scores:
            error, flag = correlation_error(point_scores[train], dmos[train], statistic)
            curve.append(error)
            flags.append(flag)
        if any(flags):
            logger.warning(
                "Degenerate correlations counted as error 1",
                fold=fold,
                points=sum(flags),
            )
        index = int(np.argmin(curve))
        errors.append(curve)
        degenerate.append(flags)
        best.append(grid[index])
        held_out.append(correlation_error(scores[index][test], dmos[test], statistic)[0])
        logger.info("Fold done", fold=fold, best=grid[index], error=curve[index])

    return SweepResult(
        kind=kind,
        parameter_names=names,
        grid=grid,
        errors=errors,
        degenerate=degenerate,
        best=best,
        held_out_error=held_out,
        folds=assignment,
        statistic=statistic,
    )


def sweep_gaussian(
    pairs: Sequence[ImagePair],
    sigma_grid: Sequence[float],
    folds: int,
    seed: int,
    *,
    statistic: CorrelationKind = "pearson",
    truncation_threshold: float = DEFAULT_TRUNCATION,
) -> SweepResult:
    return _sweep(
        "gauss",
        ["sigma"],
        [(float(s),) for s in sigma_grid],
        pairs,
        folds,
        seed,
        statistic,
        truncation_threshold,
        "unit",
    )


def sweep_dog(
    pairs: Sequence[ImagePair],
    center_grid: Sequence[float],
    surround_grid: Sequence[float],
    alpha_grid: Sequence[float],
    folds: int,
    seed: int,
    *,
    statistic: CorrelationKind = "pearson",
    truncation_threshold: float = DEFAULT_TRUNCATION,
    dog_center: DogCenterMode = "unit",
) -> SweepResult:
    grid = [
        (float(c), float(s), float(a))
        for c, s, a in itertools.product(center_grid, surround_grid, alpha_grid)
    ]
    return _sweep(
        "dog",
        ["sigma_center", "sigma_surround", "alpha"],
        grid,
        pairs,
        folds,
        seed,
        statistic,
        truncation_threshold,
        dog_center,
    )


def reduce_over_alpha(
    result: SweepResult, fold: Optional[int] = None
) -> dict[tuple[float, float], float]:
    """
    Error surface over (σ_center, σ_surround) with α eliminated by taking its
    best value. Without a fold, errors are first averaged across folds.
    """
    if result.kind != "dog":
        raise ParameterError("only DOG sweeps have an alpha axis")
    if fold is None:
        curve = np.mean(np.array(result.errors), axis=0)
    else:
        if not 0 <= fold < result.folds.k:
            raise ParameterError(f"fold {fold} out of range")
        curve = np.array(result.errors[fold])
    surface: dict[tuple[float, float], float] = {}
    for (center, surround, _alpha), error in zip(result.grid, curve):
        key = (center, surround)
        surface[key] = min(surface.get(key, math.inf), float(error))
    return surface


def write_sweep_table(result: SweepResult, path: str | Path):
    """One row per fold × grid point."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["fold", *result.parameter_names, "error", "degenerate", "best"])
    for fold, (curve, flags) in enumerate(zip(result.errors, result.degenerate)):
        for params, error, flag in zip(result.grid, curve, flags):
            writer.writerow(
                [
                    fold,
                    *(fmt(v) for v in params),
                    fmt(error),
                    int(flag),
                    int(params == result.best[fold]),
                ]
            )
    Path(path).write_text(buffer.getvalue(), encoding="utf-8")

