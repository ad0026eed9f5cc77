"""
Evaluation statistics: correlations with DMOS, correlation-difference tests,
permutation tests, model-comparison reports and scatter export.
"""

import csv
import io
import itertools
import math
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel
from scipy import stats as sps

from app.internal.corpus import DmosConvention, FoldAssignment, ImagePair
from app.internal.scoring import Scorer, TrainableScorer
from app.util.errors import DegenerateError, ParameterError, ShapeError
from app.util.log import logger
from app.util.numfmt import fmt
from app.util.parallel import ordered_map
from app.util.tables import render_table

type Series = Sequence[float] | npt.NDArray[np.float64]
type Statistic = Callable[[Series, Series], float]
CorrelationKind = Literal["pearson", "spearman"]

_TIE_TOLERANCE = 1e-12


def _as_pair(x: Series, y: Series) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.ndim != 1 or ya.ndim != 1 or xa.shape != ya.shape:
        raise ShapeError(f"series lengths differ: {xa.shape} vs {ya.shape}")
    if xa.size < 3:
        raise DegenerateError(f"correlation needs at least 3 values, got {xa.size}")
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(ya))):
        raise DegenerateError("series contain non-finite values")
    if np.ptp(xa) == 0 or np.ptp(ya) == 0:
        raise DegenerateError("correlation is undefined for a constant series")
    return xa, ya


def pearson(x: Series, y: Series) -> float:
    xa, ya = _as_pair(x, y)
    r = float(sps.pearsonr(xa, ya).statistic)
    return min(1.0, max(-1.0, r))


def spearman(x: Series, y: Series) -> float:
    """Pearson correlation of the ranks; ties get average ranks."""
    xa, ya = _as_pair(x, y)
    rho = float(sps.spearmanr(xa, ya).statistic)
    return min(1.0, max(-1.0, rho))


def correlation(x: Series, y: Series, kind: CorrelationKind = "pearson") -> float:
    return pearson(x, y) if kind == "pearson" else spearman(x, y)


def correlation_error(
    x: Series, y: Series, kind: CorrelationKind = "pearson"
) -> tuple[float, bool]:
    """
    1 − correlation, in [0, 2]. Undefined correlations give (1.0, True)
    instead of raising.
    """
    try:
        return 1.0 - correlation(x, y, kind), False
    except DegenerateError:
        return 1.0, True


def fisher_rz_two_sample(r1: float, n1: int, r2: float, n2: int) -> float:
    """Two-tailed p that two independent correlations are equal."""
    for r, n in ((r1, n1), (r2, n2)):
        if not -1.0 < r < 1.0:
            raise ParameterError(f"correlation {r} must lie strictly inside (-1, 1)")
        if n <= 3:
            raise ParameterError(f"sample size {n} must exceed 3")
    z = (math.atanh(r1) - math.atanh(r2)) / math.sqrt(1 / (n1 - 3) + 1 / (n2 - 3))
    return min(1.0, float(2.0 * sps.norm.sf(abs(z))))


def permutation_test_corr(
    x: Series,
    y: Series,
    n_perm: int,
    seed: int,
    statistic: Statistic = spearman,
) -> float:
    """
    p = (1 + #{|stat_perm| >= |stat_obs|}) / (n_perm + 1) over seeded shuffles
    of y. Each permutation draws from its own generator seeded by
    (seed, index), so the result does not depend on the thread schedule.
    """
    if n_perm < 1:
        raise ParameterError("n_perm must be >= 1")
    if seed < 0:
        raise ParameterError(f"seed must be >= 0, got {seed}")
    xa, ya = _as_pair(x, y)
    observed = abs(statistic(xa, ya))

    def permuted(index: int) -> float:
        rng = np.random.default_rng([seed, index])
        return abs(statistic(xa, rng.permutation(ya)))

    hits = sum(
        1 for s in ordered_map(permuted, range(n_perm)) if s >= observed - _TIE_TOLERANCE
    )
    return (1 + hits) / (n_perm + 1)


def permutation_test_exact(
    x: Series, y: Series, statistic: Statistic = spearman
) -> float:
    """Exhaustive permutation p-value; the identity permutation is included."""
    xa, ya = _as_pair(x, y)
    if xa.size > 9:
        raise ParameterError("exhaustive permutation is limited to n <= 9")
    observed = abs(statistic(xa, ya))
    hits = 0
    total = 0
    for order in itertools.permutations(range(ya.size)):
        total += 1
        if abs(statistic(xa, ya[list(order)])) >= observed - _TIE_TOLERANCE:
            hits += 1
    return hits / total


def bonferroni(p: float, comparisons: int) -> float:
    if comparisons < 1:
        raise ParameterError("comparison count must be >= 1")
    return min(1.0, p * comparisons)


def zscore(values: Series) -> npt.NDArray[np.float64]:
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    if sd == 0.0:
        raise DegenerateError("cannot z-score a constant series")
    return (arr - arr.mean()) / sd


def adjusted_r2(predictors: Sequence[Series], target: Series) -> float:
    """Adjusted R² of an ordinary least-squares fit with intercept."""
    y = np.asarray(target, dtype=np.float64)
    n = y.size
    p = len(predictors)
    if p < 1 or n <= p + 1:
        raise DegenerateError(f"adjusted R² needs more than {p + 1} observations")
    design = np.column_stack([np.ones(n)] + [np.asarray(x, dtype=np.float64) for x in predictors])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = y - design @ coef
    total = float(np.sum((y - y.mean()) ** 2))
    if total == 0.0:
        raise DegenerateError("target series is constant")
    r2 = 1.0 - float(residual @ residual) / total
    return 1.0 - (1.0 - r2) * (n - 1) / (n - p - 1)


class ScoreSeries(BaseModel, frozen=True):
    label: str
    scores: list[float]
    similarity: bool = False
    """True when higher scores mean more similar (SSIM)."""


class ModelColumn(BaseModel):
    label: str
    similarity: bool
    spearman: dict[str, Optional[float]]
    pearson: dict[str, Optional[float]]
    fold_mean_spearman: Optional[float] = None
    fold_mean_pearson: Optional[float] = None
    permutation_p: Optional[float] = None
    significant: Optional[bool] = None
    error: Optional[str] = None


class Comparison(BaseModel):
    first: str
    second: str
    p: Optional[float]
    fold_mean_p: Optional[float] = None
    adjusted_p: Optional[float] = None
    significant: Optional[bool] = None
    n: int


class EvalReport(BaseModel):
    dataset_id: str
    rows: list[str]
    """Row keys: "all" then one per category."""
    columns: list[ModelColumn]
    comparisons: list[Comparison]
    folds: Optional[int] = None
    fold_seed: Optional[int] = None
    bonferroni: int = 1
    dmos_convention: DmosConvention = "printed"
    pair_count: int


def _safe(fn: Callable[[], float]) -> Optional[float]:
    try:
        return fn()
    except DegenerateError:
        return None


def _score_all(scorer: Scorer, pairs: Sequence[ImagePair]) -> list[float]:
    return ordered_map(scorer.score, pairs)


def _held_out_scores(
    scorer: TrainableScorer, pairs: Sequence[ImagePair], folds: FoldAssignment
) -> list[float]:
    scores: list[Optional[float]] = [None] * len(pairs)
    for fold in range(folds.k):
        train = [p for p in pairs if folds.fold_of(p.reference) != fold]
        test_index = [i for i, p in enumerate(pairs) if folds.fold_of(p.reference) == fold]
        trained_on = {p.reference for p in train}
        if trained_on & {pairs[i].reference for i in test_index}:
            raise ParameterError("training and held-out references overlap")
        fitted = scorer.fit(train)
        for i, value in zip(test_index, ordered_map(fitted.score, [pairs[i] for i in test_index])):
            scores[i] = value
    assert all(s is not None for s in scores)
    return [s for s in scores if s is not None]


def evaluate_models(
    pairs: Sequence[ImagePair],
    models: Sequence[Scorer | TrainableScorer],
    folds: Optional[FoldAssignment] = None,
    *,
    comparisons: Optional[Sequence[tuple[str, str]]] = None,
    bonferroni_comparisons: int = 1,
    permutations: int = 0,
    seed: int = 0,
    alpha: float = 0.001,
    dataset_id: str = "",
    dmos_convention: DmosConvention = "printed",
) -> EvalReport:
    """
    Scores every pair with every model and correlates with DMOS overall and
    per category. Trainable models need folds: each fold's model is fitted on
    the other folds and only scores its own held-out pairs; the held-out scores
    are pooled before correlating.
    """
    if not pairs:
        raise ParameterError("no pairs to evaluate")
    dmos = np.array([p.dmos for p in pairs])
    categories = sorted({p.category for p in pairs if p.category is not None})
    rows = ["all"] + categories
    masks = {"all": np.ones(len(pairs), dtype=bool)} | {
        c: np.array([p.category == c for p in pairs]) for c in categories
    }

    series: dict[str, ScoreSeries] = {}
    columns: list[ModelColumn] = []
    for model in models:
        try:
            if isinstance(model, TrainableScorer):
                if folds is None:
                    raise ParameterError(f"model {model.label} needs folds to be evaluated")
                values = _held_out_scores(model, pairs, folds)
            else:
                values = _score_all(model, pairs)
        except Exception as e:
            logger.error("Scorer failed", model=model.label, error=str(e))
            columns.append(
                ModelColumn(
                    label=model.label,
                    similarity=model.similarity,
                    spearman={},
                    pearson={},
                    error=str(e),
                )
            )
            continue

        scores = np.array(values)
        series[model.label] = ScoreSeries(label=model.label, scores=values, similarity=model.similarity)
        column = ModelColumn(
            label=model.label,
            similarity=model.similarity,
            spearman={r: _safe(lambda m=masks[r]: spearman(scores[m], dmos[m])) for r in rows},
            pearson={r: _safe(lambda m=masks[r]: pearson(scores[m], dmos[m])) for r in rows},
        )
        if folds is not None:
            per_fold = [
                np.array([folds.fold_of(p.reference) == f for p in pairs]) for f in range(folds.k)
            ]
            rho = [_safe(lambda m=m: spearman(scores[m], dmos[m])) for m in per_fold]
            r = [_safe(lambda m=m: pearson(scores[m], dmos[m])) for m in per_fold]
            if all(v is not None for v in rho):
                column.fold_mean_spearman = float(np.mean([v for v in rho if v is not None]))
            if all(v is not None for v in r):
                column.fold_mean_pearson = float(np.mean([v for v in r if v is not None]))
        if permutations > 0:
            p = _safe(lambda: permutation_test_corr(scores, dmos, permutations, seed))
            if p is not None:
                column.permutation_p = p
                column.significant = bonferroni(p, bonferroni_comparisons) < alpha
        columns.append(column)

    if comparisons is None:
        labels = [c.label for c in columns if c.error is None]
        comparisons = list(itertools.combinations(labels, 2))

    compared: list[Comparison] = []
    for first, second in comparisons:
        if first not in series or second not in series:
            raise ParameterError(f"cannot compare {first} and {second}: missing scores")
        comparison = _compare(series[first], series[second], dmos, pairs, folds)
        if comparison.p is not None:
            comparison.adjusted_p = bonferroni(comparison.p, bonferroni_comparisons)
            comparison.significant = comparison.adjusted_p < alpha
        compared.append(comparison)

    return EvalReport(
        dataset_id=dataset_id,
        rows=rows,
        columns=columns,
        comparisons=compared,
        folds=folds.k if folds else None,
        fold_seed=folds.seed if folds else None,
        bonferroni=bonferroni_comparisons,
        dmos_convention=dmos_convention,
        pair_count=len(pairs),
    )


def _fisher_or_none(r1: Optional[float], r2: Optional[float], n: int) -> Optional[float]:
    if r1 is None or r2 is None or n <= 3:
        return None
    a1, a2 = abs(r1), abs(r2)
    if max(a1, a2) >= 1.0 - _TIE_TOLERANCE:
        # atanh(1) is infinite
        return 1.0 if abs(a1 - a2) <= _TIE_TOLERANCE else 0.0
    return fisher_rz_two_sample(a1, n, a2, n)


def _compare(
    a: ScoreSeries,
    b: ScoreSeries,
    dmos: npt.NDArray[np.float64],
    pairs: Sequence[ImagePair],
    folds: Optional[FoldAssignment],
) -> Comparison:
    """Fisher test on |ρ| so that similarity and distance scores compare on equal terms."""
    xa = np.array(a.scores)
    xb = np.array(b.scores)
    n = len(pairs)
    p = _fisher_or_none(_safe(lambda: spearman(xa, dmos)), _safe(lambda: spearman(xb, dmos)), n)
    fold_mean: Optional[float] = None
    if folds is not None:
        ps: list[Optional[float]] = []
        for f in range(folds.k):
            m = np.array([folds.fold_of(q.reference) == f for q in pairs])
            ps.append(
                _fisher_or_none(
                    _safe(lambda: spearman(xa[m], dmos[m])),
                    _safe(lambda: spearman(xb[m], dmos[m])),
                    int(m.sum()),
                )
            )
        if all(v is not None for v in ps):
            fold_mean = float(np.mean([v for v in ps if v is not None]))
    return Comparison(first=a.label, second=b.label, p=p, fold_mean_p=fold_mean, n=n)


def _cell(value: Optional[float], digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def render_report(report: EvalReport) -> str:
    """Plain-text table: one row per dataset/category, one column per model."""
    header = ["Rows"] + [c.label for c in report.columns]
    data = [header]
    for row in report.rows:
        label = f"{report.dataset_id} ({row})" if report.dataset_id else row
        data.append([label] + [_cell(c.spearman.get(row)) for c in report.columns])
    if report.folds:
        data.append(
            [f"mean of {report.folds} folds"]
            + [_cell(c.fold_mean_spearman) for c in report.columns]
        )
    if any(c.permutation_p is not None for c in report.columns):
        data.append(["permutation p"] + [_cell(c.permutation_p, 6) for c in report.columns])
    out = [render_table(data, title="Spearman correlation with DMOS")]

    if report.comparisons:
        cmp_data = [["Comparison", "n", "Fisher p", "adjusted p", "fold-mean p", ""]]
        for c in report.comparisons:
            cmp_data.append(
                [
                    f"{c.first} = {c.second}",
                    str(c.n),
                    _cell(c.p),
                    _cell(c.adjusted_p),
                    _cell(c.fold_mean_p),
                    "*" if c.significant else "",
                ]
            )
        out.append(render_table(cmp_data, title="Fisher r-to-z"))

    errors = [c for c in report.columns if c.error]
    for c in errors:
        out.append(f"{c.label}: failed ({c.error})")
    out.append(
        f"pairs={report.pair_count} dmos_convention={report.dmos_convention} "
        f"bonferroni={report.bonferroni}"
        + (f" folds={report.folds} seed={report.fold_seed}" if report.folds else "")
    )
    return "\n".join(out)


def write_report_csv(report: EvalReport, path: str | Path):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["row", "model", "spearman", "pearson"])
    for row in report.rows:
        for c in report.columns:
            s = c.spearman.get(row)
            p = c.pearson.get(row)
            writer.writerow([row, c.label, "" if s is None else fmt(s), "" if p is None else fmt(p)])
    for c in report.columns:
        if c.fold_mean_spearman is not None:
            writer.writerow(
                [
                    "fold_mean",
                    c.label,
                    fmt(c.fold_mean_spearman),
                    "" if c.fold_mean_pearson is None else fmt(c.fold_mean_pearson),
                ]
            )
    Path(path).write_text(buffer.getvalue(), encoding="utf-8")


class LinearFit(BaseModel):
    label: str
    slope: float
    intercept: float
    r: float
    n: int


class ScatterExport(BaseModel):
    fits: list[LinearFit]
    excluded: int
    adjusted_r2: Optional[float] = None


def export_scatter(
    scores: Sequence[ScoreSeries],
    dmos: Series,
    path: str | Path,
    *,
    zscore_scores: bool = False,
    log_axes: bool = False,
) -> ScatterExport:
    """
    Writes one row per pair: each model's score and the DMOS, on the requested
    axes (log10 first, then z-scoring). Rows with a non-positive value under
    log axes are flagged and left out of the fits. Fits regress DMOS on each
    model's axis.
    """
    y = np.asarray(dmos, dtype=np.float64)
    for s in scores:
        if len(s.scores) != y.size:
            raise ShapeError(f"model {s.label} has {len(s.scores)} scores for {y.size} pairs")
    if not scores:
        raise ParameterError("no score series to export")

    raw = np.column_stack([np.asarray(s.scores, dtype=np.float64) for s in scores])
    valid = np.ones(y.size, dtype=bool)
    if log_axes:
        valid = np.all(raw > 0, axis=1) & (y > 0)
        excluded = int((~valid).sum())
        if excluded:
            logger.warning("Rows with non-positive values excluded from log axes", rows=excluded)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_axes = np.where(raw > 0, np.log10(np.where(raw > 0, raw, 1.0)), np.nan)
            y_axis = np.where(y > 0, np.log10(np.where(y > 0, y, 1.0)), np.nan)
    else:
        excluded = 0
        x_axes = raw.copy()
        y_axis = y.copy()

    if zscore_scores:
        for col in range(x_axes.shape[1]):
            z = zscore(x_axes[valid, col])
            x_axes[:, col] = np.nan
            x_axes[valid, col] = z

    fits: list[LinearFit] = []
    for col, s in enumerate(scores):
        xs = x_axes[valid, col]
        ys = y_axis[valid]
        if xs.size < 3 or np.ptp(xs) == 0:
            raise DegenerateError(f"cannot fit model {s.label}: too few distinct values")
        result = sps.linregress(xs, ys)
        fits.append(
            LinearFit(
                label=s.label,
                slope=float(result.slope),  # pyright: ignore[reportAttributeAccessIssue]
                intercept=float(result.intercept),  # pyright: ignore[reportAttributeAccessIssue]
                r=float(result.rvalue),  # pyright: ignore[reportAttributeAccessIssue]
                n=int(xs.size),
            )
        )
    joint = _safe(lambda: adjusted_r2([x_axes[valid, c] for c in range(len(scores))], y_axis[valid]))

    buffer = io.StringIO()
    for fit in fits:
        buffer.write(
            f"# fit {fit.label}: slope={fmt(fit.slope)} intercept={fmt(fit.intercept)} r={fmt(fit.r)} n={fit.n}\n"
        )
    buffer.write(f"# excluded={excluded}\n")
    if joint is not None:
        buffer.write(f"# adjusted_r2={fmt(joint)}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["pair"] + [s.label for s in scores] + ["dmos", "excluded"])
    for i in range(y.size):
        writer.writerow(
            [str(i)]
            + ["" if not valid[i] else fmt(float(x_axes[i, c])) for c in range(len(scores))]
            + ["" if not valid[i] else fmt(float(y_axis[i])), "0" if valid[i] else "1"]
        )
    Path(path).write_text(buffer.getvalue(), encoding="utf-8")
    return ScatterExport(fits=fits, excluded=excluded, adjusted_r2=joint)
