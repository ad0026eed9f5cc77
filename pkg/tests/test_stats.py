import math
from pathlib import Path
from typing import Sequence

import numpy as np
import pytest

from app.internal.corpus import ImagePair, assign_folds, references_of
from app.internal.metrics import EuclideanScorer
from app.internal.scoring import Scorer, TrainableScorer
from app.internal.stats import (
    ScoreSeries,
    adjusted_r2,
    bonferroni,
    correlation_error,
    evaluate_models,
    export_scatter,
    fisher_rz_two_sample,
    pearson,
    permutation_test_corr,
    permutation_test_exact,
    render_report,
    spearman,
    write_report_csv,
    zscore,
)
from app.util.errors import DegenerateError, ParameterError, ShapeError
from conftest import make_pair


def _loop_pearson(x: list[float], y: list[float]) -> float:
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_pearson_matches_formula(rng: np.random.Generator):
    x = rng.normal(size=40).tolist()
    y = (np.array(x) * 0.5 + rng.normal(size=40)).tolist()
    assert pearson(x, y) == pytest.approx(_loop_pearson(x, y), abs=1e-12)


def test_spearman_without_ties_matches_rank_formula(rng: np.random.Generator):
    x = rng.permutation(25).astype(float)
    y = rng.permutation(25).astype(float)
    d2 = float(np.sum((x - y) ** 2))
    expected = 1 - 6 * d2 / (25 * (25**2 - 1))
    assert spearman(x, y) == pytest.approx(expected, abs=1e-12)


def test_spearman_uses_average_ranks_for_ties():
    x = [1.0, 2.0, 2.0, 3.0]
    y = [1.0, 2.0, 3.0, 4.0]
    assert spearman(x, y) == pytest.approx(_loop_pearson([1, 2.5, 2.5, 4], [1, 2, 3, 4]), abs=1e-12)


def test_correlation_rejects_bad_series():
    with pytest.raises(ShapeError):
        pearson([1.0, 2.0, 3.0], [1.0, 2.0])
    with pytest.raises(DegenerateError):
        pearson([1.0, 2.0], [2.0, 1.0])
    with pytest.raises(DegenerateError):
        spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    assert correlation_error([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) == (1.0, True)
    error, degenerate = correlation_error([1.0, 2.0, 3.0], [3.0, 2.0, 1.0])
    assert error == pytest.approx(2.0)
    assert not degenerate


def test_fisher_matches_manual_formula():
    z = (math.atanh(0.5) - math.atanh(0.3)) / math.sqrt(2 / 47)
    expected = math.erfc(abs(z) / math.sqrt(2))
    assert fisher_rz_two_sample(0.5, 50, 0.3, 50) == pytest.approx(expected, rel=1e-9)
    assert fisher_rz_two_sample(0.4, 30, 0.4, 80) == pytest.approx(1.0)


def test_fisher_rejects_out_of_range_inputs():
    with pytest.raises(ParameterError):
        fisher_rz_two_sample(1.0, 10, 0.5, 10)
    with pytest.raises(ParameterError):
        fisher_rz_two_sample(0.2, 3, 0.5, 10)


def test_permutation_test_uses_add_one_rule():
    x = np.arange(10, dtype=float)
    y = x * 2.0 + 1.0
    assert permutation_test_corr(x, y, 19, seed=4) == pytest.approx(1 / 20)


def test_permutation_test_is_seeded(rng: np.random.Generator):
    x = rng.normal(size=15)
    y = x + rng.normal(scale=2.0, size=15)
    p1 = permutation_test_corr(x, y, 200, seed=9)
    assert p1 == permutation_test_corr(x, y, 200, seed=9)
    assert 1 / 201 <= p1 <= 1.0
    with pytest.raises(ParameterError):
        permutation_test_corr(x, y, 0, seed=9)
    with pytest.raises(ParameterError):
        permutation_test_corr(x, y, 10, seed=-1)


def test_exact_permutation_test():
    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    # only the identity and the reversal reach |rho| = 1
    assert permutation_test_exact(x, [2.0, 4.0, 6.0, 8.0, 10.0]) == pytest.approx(2 / 120)
    assert permutation_test_exact(x, [5.0, 4.0, 3.0, 2.0, 1.0]) == pytest.approx(2 / 120)
    with pytest.raises(ParameterError):
        permutation_test_exact(list(range(10)), list(range(10)))


def test_bonferroni():
    assert bonferroni(0.02, 3) == pytest.approx(0.06)
    assert bonferroni(0.5, 4) == 1.0
    with pytest.raises(ParameterError):
        bonferroni(0.1, 0)


def test_zscore(rng: np.random.Generator):
    z = zscore(rng.uniform(3, 9, size=30))
    assert z.mean() == pytest.approx(0.0, abs=1e-12)
    assert z.std(ddof=1) == pytest.approx(1.0)
    with pytest.raises(DegenerateError):
        zscore([2.0, 2.0, 2.0])


def test_adjusted_r2(rng: np.random.Generator):
    x = rng.normal(size=20)
    assert adjusted_r2([x], 2 * x + 1) == pytest.approx(1.0)
    y = x + rng.normal(size=20)
    slope, intercept = np.polyfit(x, y, 1)
    r2 = 1 - np.sum((y - (slope * x + intercept)) ** 2) / np.sum((y - y.mean()) ** 2)
    assert adjusted_r2([x], y) == pytest.approx(1 - (1 - r2) * 19 / 18, rel=1e-9)
    with pytest.raises(DegenerateError):
        adjusted_r2([x[:2]], y[:2])


class _NegatedEuclid(Scorer):
    label = "neg"
    similarity = True

    def score(self, pair: ImagePair) -> float:
        return -float(np.sum((pair.deg.values - pair.ref.values) ** 2))


class _Constant(Scorer):
    label = "flat"

    def score(self, pair: ImagePair) -> float:
        return 1.0


class _Ranked(Scorer):
    """Scores pair i (DMOS (i+1)/13) with a fixed rank."""

    def __init__(self, label: str, ranks: list[int]):
        self.label = label
        self.ranks = ranks

    def score(self, pair: ImagePair) -> float:
        return float(self.ranks[round(pair.dmos * 13) - 1])


class _Broken(Scorer):
    label = "broken"

    def score(self, pair: ImagePair) -> float:
        raise RuntimeError("no luck")


class _RecordingTrainer(TrainableScorer):
    label = "trained"

    def __init__(self):
        self.trained_on: list[set[str]] = []

    def fit(self, pairs: Sequence[ImagePair]) -> Scorer:
        self.trained_on.append({p.reference for p in pairs})
        return EuclideanScorer(self.label)


@pytest.fixture
def graded_pairs(rng: np.random.Generator) -> list[ImagePair]:
    """Twelve pairs whose distortion amplitude grows with DMOS."""
    u = rng.normal(size=(8, 8))
    pairs: list[ImagePair] = []
    for i in range(12):
        ref = rng.uniform(50, 200, size=(8, 8))
        pairs.append(
            make_pair(
                ref,
                ref + (i + 1) * u,
                (i + 1) / 13,
                reference=f"r{i // 2}",
                category="jpeg" if i % 2 else "blur",
            )
        )
    return pairs


def test_evaluate_perfect_rank_models(graded_pairs: list[ImagePair]):
    report = evaluate_models(graded_pairs, [EuclideanScorer(), _NegatedEuclid()], dataset_id="toy")
    euclid, neg = report.columns
    assert report.rows == ["all", "blur", "jpeg"]
    assert euclid.spearman["all"] == pytest.approx(1.0)
    assert euclid.spearman["jpeg"] == pytest.approx(1.0)
    assert neg.spearman["all"] == pytest.approx(-1.0)
    assert neg.similarity
    (comparison,) = report.comparisons
    assert (comparison.first, comparison.second) == ("euclid", "neg")
    assert comparison.p == 1.0
    assert comparison.n == 12


def test_bonferroni_count_flips_comparison_flag(graded_pairs: list[ImagePair]):
    models = [
        _Ranked("near", [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 11]),
        _Ranked("far", [3, 1, 2, 6, 4, 5, 9, 7, 8, 12, 10, 11]),
    ]
    p = evaluate_models(graded_pairs, models).comparisons[0].p
    assert p is not None and 0.0 < p < 0.05

    (single,) = evaluate_models(graded_pairs, models, alpha=2 * p).comparisons
    assert single.adjusted_p == pytest.approx(p)
    assert single.significant is True

    (corrected,) = evaluate_models(
        graded_pairs, models, bonferroni_comparisons=14, alpha=2 * p
    ).comparisons
    assert corrected.adjusted_p == pytest.approx(min(1.0, 14 * p))
    assert corrected.significant is False
    assert "adjusted p" in render_report(
        evaluate_models(graded_pairs, models, alpha=2 * p)
    )


def test_evaluate_records_failures_and_degenerate_series(graded_pairs: list[ImagePair]):
    report = evaluate_models(graded_pairs, [EuclideanScorer(), _Constant(), _Broken()])
    euclid, flat, broken = report.columns
    assert euclid.error is None
    assert flat.spearman["all"] is None
    assert broken.error == "no luck"
    assert [(c.first, c.second) for c in report.comparisons] == [("euclid", "flat")]
    assert report.comparisons[0].p is None
    with pytest.raises(ParameterError):
        evaluate_models(graded_pairs, [EuclideanScorer()], comparisons=[("euclid", "broken")])


def test_trainable_model_only_scores_held_out_pairs(graded_pairs: list[ImagePair]):
    folds = assign_folds(references_of(graded_pairs), 2, seed=1)
    trainer = _RecordingTrainer()
    report = evaluate_models(graded_pairs, [EuclideanScorer(), trainer], folds, permutations=19, seed=3)
    assert len(trainer.trained_on) == 2
    for fold, trained in enumerate(trainer.trained_on):
        assert not trained & set(folds.references_in(fold))
    euclid, trained = report.columns
    assert trained.spearman["all"] == pytest.approx(1.0)
    assert euclid.fold_mean_spearman == pytest.approx(1.0)
    assert trained.permutation_p == pytest.approx(1 / 20)
    assert trained.significant is False
    assert report.folds == 2
    assert report.comparisons[0].fold_mean_p == 1.0


def test_trainable_model_needs_folds(graded_pairs: list[ImagePair]):
    report = evaluate_models(graded_pairs, [_RecordingTrainer()])
    assert "needs folds" in (report.columns[0].error or "")


def test_render_and_csv(graded_pairs: list[ImagePair], tmp_path: Path):
    report = evaluate_models(graded_pairs, [EuclideanScorer(), _NegatedEuclid(), _Broken()], dataset_id="toy")
    text = render_report(report)
    assert "Spearman correlation with DMOS" in text
    assert "toy (all)" in text
    assert "euclid = neg" in text
    assert "broken: failed (no luck)" in text
    assert "pairs=12" in text

    path = tmp_path / "report.csv"
    write_report_csv(report, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "row,model,spearman,pearson"
    assert len(lines) == 1 + 3 * 3
    assert lines[1].startswith("all,euclid,")
    assert lines[3] == "all,broken,,"


def test_export_scatter_linear_fit(tmp_path: Path):
    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    dmos = [0.3, 0.5, 0.7, 0.9, 1.1]
    export = export_scatter([ScoreSeries(label="m", scores=x)], dmos, tmp_path / "s.csv")
    (fit,) = export.fits
    assert fit.slope == pytest.approx(0.2)
    assert fit.intercept == pytest.approx(0.1)
    assert fit.r == pytest.approx(1.0)
    assert export.excluded == 0
    assert export.adjusted_r2 == pytest.approx(1.0)


def test_export_scatter_zscore_and_log(tmp_path: Path):
    a = ScoreSeries(label="a", scores=[0.0, 10.0, 100.0, 1000.0, 20.0])
    b = ScoreSeries(label="b", scores=[2.0, 3.0, 5.0, 9.0, 4.0])
    dmos = [0.1, 0.2, 0.4, 0.8, 0.3]
    path = tmp_path / "s.csv"
    export = export_scatter([a, b], dmos, path, zscore_scores=True, log_axes=True)
    assert export.excluded == 1
    assert all(fit.n == 4 for fit in export.fits)

    lines = path.read_text().splitlines()
    assert "# excluded=1" in lines
    rows = [line.split(",") for line in lines if not line.startswith("#")]
    assert rows[0] == ["pair", "a", "b", "dmos", "excluded"]
    assert rows[1] == ["0", "", "", "", "1"]
    za = [float(r[1]) for r in rows[2:]]
    assert sum(za) == pytest.approx(0.0, abs=1e-12)


def test_export_scatter_errors(tmp_path: Path):
    with pytest.raises(ShapeError):
        export_scatter([ScoreSeries(label="a", scores=[1.0, 2.0])], [0.1, 0.2, 0.3], tmp_path / "s.csv")
    with pytest.raises(ParameterError):
        export_scatter([], [0.1, 0.2, 0.3], tmp_path / "s.csv")
    with pytest.raises(DegenerateError):
        export_scatter([ScoreSeries(label="a", scores=[1.0, 1.0, 1.0])], [0.1, 0.2, 0.3], tmp_path / "s.csv")
