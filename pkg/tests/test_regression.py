from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from app.internal.corpus import ImagePair
from app.internal.geometry import GrayImage, euclidean_distance_sq, difference
from app.internal.regression import (
    FILE_MAGIC,
    TILE_DIM,
    TileJacobian,
    TrainingConfig,
    TrainingTrace,
    jacobian_violation,
    load_jacobian,
    save_jacobian,
    tile_image,
    tiled_distance,
    train_jacobian,
    training_error,
    write_trace,
)
from app.internal.stats import pearson
from app.util.errors import JacobianFileError, ParameterError, ShapeError
from conftest import make_pair


def _planted_jacobian() -> TileJacobian:
    entries = np.eye(TILE_DIM)
    entries[1, 0] = entries[0, 1] = 0.1
    entries[3, 2] = entries[2, 3] = -0.1
    return TileJacobian(entries=entries)


def _planted_pairs(rng: np.random.Generator, count: int, planted: TileJacobian) -> list[ImagePair]:
    """Differences live on pixels 0..3 of every 8x8 tile, with per-pair coupling between them."""
    raw: list[tuple[np.ndarray, np.ndarray]] = []
    for _ in range(count):
        ref = rng.uniform(0, 255, size=(32, 32))
        c01, c23 = rng.uniform(-1, 1, size=2)
        scale = rng.uniform(1.0, 1.5)
        tiles = np.zeros((16, 8, 8))
        d0 = rng.normal(size=16)
        d2 = rng.normal(size=16)
        tiles[:, 0, 0] = d0
        tiles[:, 0, 1] = c01 * d0 + 0.2 * rng.normal(size=16)
        tiles[:, 0, 2] = d2
        tiles[:, 0, 3] = c23 * d2 + 0.2 * rng.normal(size=16)
        delta = tiles.reshape(4, 4, 8, 8).transpose(0, 2, 1, 3).reshape(32, 32) * scale
        raw.append((ref, ref + delta))
    distances = [tiled_distance(GrayImage(values=r), GrayImage(values=d), planted) for r, d in raw]
    top = max(distances)
    return [
        make_pair(r, d, dist / top, reference=f"ref{i}")
        for i, ((r, d), dist) in enumerate(zip(raw, distances))
    ]


def _distances(pairs: list[ImagePair], j: TileJacobian) -> np.ndarray:
    return np.array([tiled_distance(p.ref, p.deg, j) for p in pairs])


@pytest.fixture(scope="module")
def planted_run():
    rng = np.random.default_rng(77)
    planted = _planted_jacobian()
    train = _planted_pairs(rng, 200, planted)
    held_out = _planted_pairs(rng, 60, planted)
    j, trace = train_jacobian(train, TrainingConfig(seed=5), dataset_id="planted")
    return train, held_out, j, trace


def test_training_reaches_planted_correlation(planted_run):
    train, held_out, j, trace = planted_run
    dmos = np.array([p.dmos for p in train])
    assert pearson(_distances(train, j), dmos) >= 0.99
    assert trace.final_error <= 0.01

    held_dmos = np.array([p.dmos for p in held_out])
    identity = TileJacobian.identity()
    assert pearson(_distances(held_out, j), held_dmos) > pearson(_distances(held_out, identity), held_dmos)


def test_training_trace_is_monotone(planted_run):
    _, _, _, trace = planted_run
    errors = [e for _, e in trace.points]
    assert all(b <= a for a, b in zip(errors, errors[1:]))
    iterations = [i for i, _ in trace.points]
    assert iterations == sorted(iterations)
    assert trace.proposals == 10_000


def test_incremental_objective_matches_recompute(planted_run):
    train, _, j, trace = planted_run
    assert len(trace.checkpoints) == 20
    assert all(drift <= 1e-9 for _, drift in trace.checkpoints)
    assert training_error(j, train).error == pytest.approx(trace.final_error, abs=1e-9)


def test_trained_jacobian_keeps_invariants(planted_run):
    _, _, j, _ = planted_run
    assert jacobian_violation(np.array(j.entries)) is None
    lattice = np.array(j.entries) / 0.1
    np.testing.assert_allclose(lattice, np.round(lattice), atol=1e-9)
    assert j.metadata.seed == 5
    assert j.metadata.dataset_id == "planted"


def test_training_is_bit_identical_under_seed():
    rng = np.random.default_rng(3)
    pairs = _planted_pairs(rng, 30, _planted_jacobian())
    cfg = TrainingConfig(seed=42, iterations=1500)
    j1, t1 = train_jacobian(pairs, cfg)
    j2, t2 = train_jacobian(pairs, cfg)
    np.testing.assert_array_equal(j1.entries, j2.entries)
    assert t1.points == t2.points


def test_zero_iterations_returns_identity(rng: np.random.Generator):
    pairs = _planted_pairs(rng, 5, _planted_jacobian())
    j, trace = train_jacobian(pairs, TrainingConfig(seed=1, iterations=0))
    np.testing.assert_array_equal(j.entries, np.eye(TILE_DIM))
    assert trace.accepted == 0
    assert trace.initial_error == trace.final_error


def test_training_needs_three_pairs(rng: np.random.Generator):
    pairs = _planted_pairs(rng, 2, _planted_jacobian())
    with pytest.raises(ParameterError):
        train_jacobian(pairs, TrainingConfig(seed=1))


def test_constant_dmos_is_degenerate(rng: np.random.Generator):
    pairs = [make_pair(rng.uniform(0, 255, (8, 8)), rng.uniform(0, 255, (8, 8)), 0.5, f"r{i}") for i in range(4)]
    value = training_error(TileJacobian.identity(), pairs)
    assert value.degenerate
    assert value.error == 1.0
    _, trace = train_jacobian(pairs, TrainingConfig(seed=0, iterations=50))
    assert trace.accepted == 0
    assert trace.degenerate_proposals == 100


def test_degenerate_start_accepts_any_defined_proposal():
    """Only cell (1,0) changes the ranking, and its one allowed step anti-correlates with DMOS."""
    pairs: list[ImagePair] = []
    for i, (a, b) in enumerate([(4, 7), (1, 8), (1, -8), (4, -7)]):
        delta = np.zeros((8, 16))
        delta[0, 0], delta[0, 1] = a, b
        delta[0, 8], delta[0, 9] = b, a
        ref = np.full((8, 16), 100.0)
        pairs.append(make_pair(ref, ref + delta, 0.1 + 0.25 * i, reference=f"r{i}"))
    assert training_error(TileJacobian.identity(), pairs).degenerate

    cfg = TrainingConfig(seed=6, iterations=30_000, step=0.25, cell_bounds=(0.0, 1.0))
    j, trace = train_jacobian(pairs, cfg)
    assert trace.accepted >= 1
    assert trace.points[1][1] > 1.0
    assert np.array(j.entries)[1, 0] > 0.0


def test_lattice_overshoot_is_clamped_to_bounds():
    rng = np.random.default_rng(19)
    entries = np.eye(TILE_DIM)
    entries[1, 0] = entries[0, 1] = 0.5
    entries[3, 2] = entries[2, 3] = -0.5
    pairs = _planted_pairs(rng, 30, TileJacobian(entries=entries))
    # 3 * 0.1 lands just past 0.3
    cfg = TrainingConfig(seed=2, iterations=40_000, cell_bounds=(-0.3, 0.3))
    j, trace = train_jacobian(pairs, cfg)
    trained = np.array(j.entries)
    assert jacobian_violation(trained, cfg.cell_bounds) is None
    assert trained[1, 0] == 0.3
    assert trained[3, 2] == -0.3
    assert training_error(j, pairs).error == pytest.approx(trace.final_error, abs=1e-9)


def test_training_config_validation():
    with pytest.raises(ValidationError):
        TrainingConfig(seed=0, step=0.0)
    with pytest.raises(ValidationError):
        TrainingConfig(seed=0, iterations=-1)
    with pytest.raises(ValidationError):
        TrainingConfig(seed=0, cell_bounds=(0.5, 1.0))
    with pytest.raises(ValidationError):
        TrainingConfig(seed=-1)
    with pytest.raises(ValidationError):
        TrainingConfig()  # type: ignore[call-arg]


def test_tiles_are_row_major():
    img = GrayImage(values=np.arange(16 * 24, dtype=np.float64).reshape(16, 24))
    tiles = tile_image(img)
    assert tiles.shape == (6, 64)
    np.testing.assert_array_equal(tiles[0, :8], np.arange(8))
    np.testing.assert_array_equal(tiles[0, 8:16], np.arange(24, 32))
    np.testing.assert_array_equal(tiles[1, :8], np.arange(8, 16))
    np.testing.assert_array_equal(tiles[3, :8], np.arange(8 * 24, 8 * 24 + 8))


def test_tiling_requires_whole_tiles():
    img = GrayImage(values=np.zeros((12, 16)))
    with pytest.raises(ShapeError):
        tile_image(img)
    assert tile_image(img, crop=True).shape == (2, 64)
    with pytest.raises(ShapeError):
        tile_image(GrayImage(values=np.zeros((5, 5))), crop=True)


def test_identity_tiled_distance_is_euclidean(rng: np.random.Generator):
    for _ in range(20):
        ref = GrayImage(values=rng.uniform(0, 255, size=(16, 32)))
        deg = GrayImage(values=rng.uniform(0, 255, size=(16, 32)))
        expected = euclidean_distance_sq(difference(ref, deg))
        assert tiled_distance(ref, deg, TileJacobian.identity()) == pytest.approx(expected, rel=1e-12)


def test_jacobian_violations():
    good = np.eye(TILE_DIM)
    assert jacobian_violation(good) is None
    asym = good.copy()
    asym[5, 2] = 0.3
    assert "asymmetric" in (jacobian_violation(asym) or "")
    diag = good.copy()
    diag[7, 7] = 0.9
    assert "diagonal" in (jacobian_violation(diag) or "")
    wide = good.copy()
    wide[1, 0] = wide[0, 1] = 1.5
    assert "outside" in (jacobian_violation(wide) or "")
    assert "shape" in (jacobian_violation(np.eye(8)) or "")
    with pytest.raises(ValidationError):
        TileJacobian(entries=asym)


def test_jacobian_file_round_trip(tmp_path: Path):
    j = _planted_jacobian()
    path = tmp_path / "j.txt"
    save_jacobian(j, path)
    lines = path.read_text().splitlines()
    assert lines[0] == FILE_MAGIC
    assert len(lines) == 2 + TILE_DIM
    loaded = load_jacobian(path)
    np.testing.assert_array_equal(loaded.entries, j.entries)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda lines: lines[1:], "missing"),
        (lambda lines: lines[:-1], "expected 64 rows"),
        (lambda lines: lines[:2] + ["x " + lines[2]] + lines[3:], "values"),
        (lambda lines: lines[:3] + [lines[3].replace("1 ", "0.5 ", 1)] + lines[4:], "diagonal"),
    ],
)
def test_load_jacobian_diagnostics(tmp_path: Path, mutate, message: str):
    path = tmp_path / "j.txt"
    save_jacobian(TileJacobian.identity(), path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(mutate(lines)) + "\n")
    with pytest.raises(JacobianFileError, match=message):
        load_jacobian(path)


def test_load_jacobian_rejects_asymmetry(tmp_path: Path):
    path = tmp_path / "j.txt"
    save_jacobian(TileJacobian.identity(), path)
    lines = path.read_text().splitlines()
    row = lines[2].split()
    row[1] = "0.25"
    lines[2] = " ".join(row)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(JacobianFileError, match="asymmetric"):
        load_jacobian(path)


def test_write_trace(tmp_path: Path):
    trace = TrainingTrace(points=[(0, 0.5), (3, 0.25)])
    path = tmp_path / "trace.csv"
    write_trace(trace, path)
    assert path.read_text().splitlines() == ["iteration,error", "0,0.5", "3,0.25"]
