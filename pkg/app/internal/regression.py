"""
Trained tile metric: a single 64×64 symmetric Jacobian applied to every 8×8 tile,
fitted to human DMOS by random-walk coordinate descent.
"""

import csv
import io
from pathlib import Path
from typing import Any, Literal, NamedTuple, Optional, Sequence

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from app.internal.corpus import ImagePair
from app.internal.geometry import DifferenceField, FloatArray, GrayImage, difference
from app.internal.stats import correlation_error
from app.util.errors import JacobianFileError, ParameterError, ShapeError
from app.util.log import logger
from app.util.numfmt import fmt

TILE_SIDE = 8
TILE_DIM = TILE_SIDE * TILE_SIDE
FORMAT_VERSION = 1
FILE_MAGIC = "# strainiqa tile jacobian"

DistanceTransform = Literal["squared", "root"]


def jacobian_violation(entries: npt.NDArray[Any], bounds: tuple[float, float] = (-1.0, 1.0)) -> Optional[str]:
    """Describes the first violated TileJacobian invariant, or None."""
    if entries.shape != (TILE_DIM, TILE_DIM):
        return f"shape {entries.shape} is not {TILE_DIM}x{TILE_DIM}"
    if not np.all(np.isfinite(entries)):
        i, j = np.argwhere(~np.isfinite(entries))[0]
        return f"entry ({i},{j}) is not finite"
    off = np.flatnonzero(np.diag(entries) != 1.0)
    if off.size:
        i = int(off[0])
        return f"diagonal entry ({i},{i}) is {entries[i, i]!r}, expected 1"
    asym = np.argwhere(entries != entries.T)
    if asym.size:
        i, j = (int(v) for v in asym[0])
        return f"asymmetric pair ({i},{j})={entries[i, j]!r} vs ({j},{i})={entries[j, i]!r}"
    low, high = bounds
    outside = np.argwhere((entries < low) | (entries > high))
    if outside.size:
        i, j = (int(v) for v in outside[0])
        return f"entry ({i},{j})={entries[i, j]!r} outside [{low}, {high}]"
    return None


class JacobianProvenance(BaseModel):
    dataset_id: str = ""
    seed: Optional[int] = None
    iterations: int = 0
    step: Optional[float] = None
    distance_transform: DistanceTransform = "squared"
    final_training_error: Optional[float] = None


class TileJacobian(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    entries: FloatArray
    metadata: JacobianProvenance = JacobianProvenance()

    @field_validator("entries", mode="before")
    @classmethod
    def _validate_entries(cls, value: Any) -> FloatArray:
        arr = np.array(value, dtype=np.float64)
        violation = jacobian_violation(arr)
        if violation:
            raise ValueError(violation)
        arr.setflags(write=False)
        return arr

    @property
    def dim(self) -> int:
        return TILE_DIM

    @property
    def tile_side(self) -> int:
        return TILE_SIDE

    @classmethod
    def identity(cls) -> "TileJacobian":
        return cls(entries=np.eye(TILE_DIM))


class TrainingConfig(BaseModel, frozen=True):
    iterations: int = 10_000
    """Number of proposals, accepted or not."""
    step: float = 0.1
    seed: int
    cell_bounds: tuple[float, float] = (-1.0, 1.0)
    checkpoint_interval: int = 500
    tolerance: float = 1e-9
    distance_transform: DistanceTransform = "squared"
    crop: bool = False

    @field_validator("iterations")
    @classmethod
    def _iterations(cls, value: int) -> int:
        if value < 0:
            raise ValueError("iterations must be >= 0")
        return value

    @field_validator("seed")
    @classmethod
    def _seed(cls, value: int) -> int:
        if value < 0:
            raise ValueError("seed must be >= 0")
        return value

    @field_validator("step")
    @classmethod
    def _step(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("step must be > 0")
        return value

    @field_validator("checkpoint_interval")
    @classmethod
    def _interval(cls, value: int) -> int:
        if value < 1:
            raise ValueError("checkpoint interval must be >= 1")
        return value

    @field_validator("cell_bounds")
    @classmethod
    def _bounds(cls, value: tuple[float, float]) -> tuple[float, float]:
        low, high = value
        if not low <= 0.0 <= high:
            raise ValueError("cell bounds must contain 0")
        return value


class TrainingTrace(BaseModel):
    points: list[tuple[int, float]]
    """(iteration, error) for the initial state and every accepted move."""
    checkpoints: list[tuple[int, float]] = []
    """(iteration, |incremental − recomputed error|) at each full recompute."""
    proposals: int = 0
    degenerate_proposals: int = 0

    @property
    def initial_error(self) -> float:
        return self.points[0][1]

    @property
    def final_error(self) -> float:
        return self.points[-1][1]

    @property
    def accepted(self) -> int:
        return len(self.points) - 1


class ObjectiveValue(NamedTuple):
    error: float
    degenerate: bool


def _tiles(values: FloatArray, tile_side: int, crop: bool) -> FloatArray:
    height, width = values.shape
    if height % tile_side or width % tile_side:
        if not crop:
            raise ShapeError(
                f"{width}x{height} image is not divisible into {tile_side}x{tile_side} tiles"
            )
        height -= height % tile_side
        width -= width % tile_side
        if height == 0 or width == 0:
            raise ShapeError(f"image is smaller than one {tile_side}x{tile_side} tile")
        logger.warning(
            "Cropping image to whole tiles",
            original=f"{values.shape[1]}x{values.shape[0]}",
            cropped=f"{width}x{height}",
        )
        values = values[:height, :width]
    return (
        values.reshape(height // tile_side, tile_side, width // tile_side, tile_side)
        .transpose(0, 2, 1, 3)
        .reshape(-1, tile_side * tile_side)
    )


def tile_image(img: GrayImage | DifferenceField, tile_side: int = TILE_SIDE, crop: bool = False) -> FloatArray:
    """Row-major tiles, each flattened row-major into one row of the result."""
    if tile_side < 1:
        raise ParameterError("tile side must be >= 1")
    return _tiles(img.values, tile_side, crop)


def tile_differences(
    ref: GrayImage, deg: GrayImage, tile_side: int = TILE_SIDE, crop: bool = False
) -> FloatArray:
    return tile_image(difference(ref, deg), tile_side, crop)


def tiled_quadratic(tiles: FloatArray, matrix: FloatArray) -> float:
    """Σ over tiles of ‖M Δ_t‖²."""
    strained = tiles @ matrix.T
    return float(np.sum(strained * strained))


def tiled_distance(ref: GrayImage, deg: GrayImage, j: TileJacobian, crop: bool = False) -> float:
    return tiled_quadratic(tile_differences(ref, deg, j.tile_side, crop), j.entries)


def _transform(distances: FloatArray, transform: DistanceTransform) -> FloatArray:
    if transform == "root":
        return np.sqrt(distances)
    return distances


def training_error(
    j: TileJacobian,
    pairs: Sequence[ImagePair],
    transform: DistanceTransform = "squared",
    crop: bool = False,
) -> ObjectiveValue:
    """1 − Pearson(tiled distance, DMOS); degenerate data gives (1.0, True)."""
    if len(pairs) < 3:
        return ObjectiveValue(1.0, True)
    distances = np.array([tiled_distance(p.ref, p.deg, j, crop) for p in pairs])
    dmos = np.array([p.dmos for p in pairs])
    return ObjectiveValue(*correlation_error(_transform(distances, transform), dmos))


class _TileBank:
    """Per-pair tile difference vectors, stacked once before training."""

    def __init__(self, pairs: Sequence[ImagePair], crop: bool):
        blocks = [tile_differences(p.ref, p.deg, TILE_SIDE, crop) for p in pairs]
        # dimension-major so that one Jacobian row is a contiguous slice
        self.tiles = np.ascontiguousarray(np.concatenate(blocks).T)
        self.owner = np.concatenate(
            [np.full(len(b), i, dtype=np.intp) for i, b in enumerate(blocks)]
        )
        self.n_pairs = len(pairs)
        self.dmos = np.array([p.dmos for p in pairs])
        logger.debug(
            "Precomputed tile differences",
            pairs=self.n_pairs,
            tiles=self.tiles.shape[1],
            megabytes=round(self.tiles.nbytes / 2**20, 1),
        )

    def pair_sums(self, per_tile: FloatArray) -> FloatArray:
        return np.bincount(self.owner, weights=per_tile, minlength=self.n_pairs)

    def strained(self, entries: FloatArray) -> FloatArray:
        return entries @ self.tiles

    def distances(self, strained: FloatArray) -> FloatArray:
        return self.pair_sums(np.einsum("ij,ij->j", strained, strained))


def train_jacobian(
    pairs: Sequence[ImagePair], cfg: TrainingConfig, dataset_id: str = ""
) -> tuple[TileJacobian, TrainingTrace]:
    """
    Random-walk coordinate descent from the identity. Each proposal draws one
    of the 2016 free lower-triangle cells, evaluates the cell moved by ±step
    (mirrored across the diagonal, out-of-bounds moves discarded) and keeps
    the better candidate if it strictly lowers 1 − Pearson. Equal candidates
    resolve toward +step.

    Per-pair distances are updated incrementally: moving cell (a, b) only
    changes rows a and b of J Δ_t. A full recompute every
    `checkpoint_interval` proposals checks the incremental objective.
    """
    if len(pairs) < 3:
        raise ParameterError(f"training needs at least 3 pairs, got {len(pairs)}")
    bank = _TileBank(pairs, cfg.crop)
    rows, cols = np.tril_indices(TILE_DIM, -1)
    low, high = cfg.cell_bounds
    # cells live on the step lattice: value = lattice * step
    lattice = np.zeros((TILE_DIM, TILE_DIM), dtype=np.int64)
    entries = np.eye(TILE_DIM)

    strained = bank.strained(entries)
    distances = bank.distances(strained)

    def objective(d: FloatArray) -> ObjectiveValue:
        return ObjectiveValue(*correlation_error(_transform(d, cfg.distance_transform), bank.dmos))

    current = objective(distances)
    if current.degenerate:
        logger.warning("Initial training objective is degenerate", pairs=bank.n_pairs)
    trace = TrainingTrace(points=[(0, current.error)], proposals=cfg.iterations)
    rng = np.random.default_rng(cfg.seed)

    for iteration in range(1, cfg.iterations + 1):
        cell = int(rng.integers(rows.size))
        a, b = int(rows[cell]), int(cols[cell])

        best: Optional[tuple[int, float, ObjectiveValue, FloatArray, FloatArray, FloatArray]] = None
        # a degenerate state accepts any non-degenerate proposal
        bar = np.inf if current.degenerate else current.error
        for direction in (1, -1):
            steps = int(lattice[a, b]) + direction
            value = steps * cfg.step
            if value < low - 1e-12 or value > high + 1e-12:
                continue
            value = min(max(value, low), high)
            delta = value - entries[a, b]
            new_a = strained[a] + delta * bank.tiles[b]
            new_b = strained[b] + delta * bank.tiles[a]
            change = (
                new_a * new_a - strained[a] * strained[a] + new_b * new_b - strained[b] * strained[b]
            )
            candidate = distances + bank.pair_sums(change)
            result = objective(candidate)
            if result.degenerate:
                trace.degenerate_proposals += 1
                continue
            if result.error < (best[2].error if best else bar):
                best = (steps, value, result, candidate, new_a, new_b)

        if best is not None:
            steps, value, result, candidate, new_a, new_b = best
            lattice[a, b] = lattice[b, a] = steps
            entries[a, b] = entries[b, a] = value
            strained[a] = new_a
            strained[b] = new_b
            distances = candidate
            current = result
            trace.points.append((iteration, current.error))

        if iteration % cfg.checkpoint_interval == 0:
            full_strained = bank.strained(entries)
            full_distances = bank.distances(full_strained)
            full = objective(full_distances)
            drift = abs(full.error - current.error)
            trace.checkpoints.append((iteration, drift))
            logger.debug("Checkpoint", iteration=iteration, error=current.error, drift=drift)
            if drift > cfg.tolerance:
                logger.warning(
                    "Incremental objective drifted, resynchronizing",
                    iteration=iteration,
                    drift=drift,
                )
                strained, distances, current = full_strained, full_distances, full

    logger.info(
        "Training finished",
        initial_error=trace.initial_error,
        final_error=current.error,
        accepted=trace.accepted,
        proposals=cfg.iterations,
    )
    metadata = JacobianProvenance(
        dataset_id=dataset_id,
        seed=cfg.seed,
        iterations=cfg.iterations,
        step=cfg.step,
        distance_transform=cfg.distance_transform,
        final_training_error=current.error,
    )
    return TileJacobian(entries=entries, metadata=metadata), trace


class _JacobianHeader(BaseModel):
    format_version: int = FORMAT_VERSION
    dim: int = TILE_DIM
    tile_side: int = TILE_SIDE
    metadata: JacobianProvenance = JacobianProvenance()


def save_jacobian(j: TileJacobian, path: str | Path):
    """
    Text format: a magic comment line, one JSON header line, then `dim` rows of
    `dim` values with 17 significant digits.
    """
    header = _JacobianHeader(metadata=j.metadata)
    lines = [FILE_MAGIC, header.model_dump_json()]
    lines.extend(" ".join(fmt(float(v)) for v in row) for row in j.entries)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_jacobian(path: str | Path) -> TileJacobian:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise JacobianFileError(f"{path}: file not found") from None
    except UnicodeDecodeError:
        raise JacobianFileError(f"{path}: not a text file") from None

    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or lines[0].strip() != FILE_MAGIC:
        raise JacobianFileError(f"{path}: missing '{FILE_MAGIC}' line")
    if len(lines) < 2:
        raise JacobianFileError(f"{path}: missing header")
    try:
        header = _JacobianHeader.model_validate_json(lines[1])
    except ValidationError as e:
        raise JacobianFileError(f"{path}: malformed header ({e.error_count()} errors)") from None
    if header.format_version != FORMAT_VERSION:
        raise JacobianFileError(f"{path}: unsupported format version {header.format_version}")
    if header.dim != TILE_DIM or header.tile_side != TILE_SIDE:
        raise JacobianFileError(
            f"{path}: expected dim {TILE_DIM} and tile side {TILE_SIDE}, got {header.dim} and {header.tile_side}"
        )

    rows = lines[2:]
    if len(rows) != header.dim:
        raise JacobianFileError(f"{path}: expected {header.dim} rows, got {len(rows)}")
    entries = np.empty((header.dim, header.dim))
    for i, line in enumerate(rows):
        fields = line.split()
        if len(fields) != header.dim:
            raise JacobianFileError(f"{path}: row {i} has {len(fields)} values, expected {header.dim}")
        try:
            entries[i] = [float(v) for v in fields]
        except ValueError:
            raise JacobianFileError(f"{path}: row {i} has a non-numeric value") from None

    violation = jacobian_violation(entries)
    if violation:
        raise JacobianFileError(f"{path}: {violation}")
    return TileJacobian(entries=entries, metadata=header.metadata)


def write_trace(trace: TrainingTrace, path: str | Path):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["iteration", "error"])
    for iteration, error in trace.points:
        writer.writerow([iteration, fmt(error)])
    Path(path).write_text(buffer.getvalue(), encoding="utf-8")
