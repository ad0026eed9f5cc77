"""
Metric descriptors (`euclid`, `ssim`, `gauss:<sigma>`, `dog:<c>,<s>,<alpha>`,
`jacobian:<path>`, `train[:<iterations>]`) and the scorers they build.
"""

import math
from pathlib import Path
from typing import Literal, Optional, Sequence, cast

from pydantic import BaseModel, ValidationError

from app.internal.baselines import SsimConfig, euclidean_metric, ssim
from app.internal.connectivity import (
    ConnectivityKernel,
    DogCenterMode,
    DogProfile,
    GaussianProfile,
    build_kernel,
    score_pair,
)
from app.internal.corpus import ImagePair
from app.internal.regression import (
    TileJacobian,
    TrainingConfig,
    load_jacobian,
    tiled_distance,
    train_jacobian,
)
from app.internal.scoring import Scorer, TrainableScorer
from app.util.errors import ParameterError, ParseError
from app.util.log import logger

MetricKind = Literal["euclid", "ssim", "gauss", "dog", "jacobian", "train"]


class MetricSpec(BaseModel, frozen=True):
    kind: MetricKind
    params: tuple[float, ...] = ()
    path: Optional[Path] = None
    iterations: Optional[int] = None
    descriptor: str

    @property
    def label(self) -> str:
        return self.descriptor

    @classmethod
    def parse(cls, descriptor: str) -> "MetricSpec":
        text = descriptor.strip()
        name, _, rest = text.partition(":")
        name = name.strip().lower()
        match name:
            case "euclid" | "ssim":
                if rest:
                    raise ParseError(f"metric {name!r} takes no parameters: {descriptor!r}")
                return cls(kind=cast(MetricKind, name), descriptor=text)
            case "gauss":
                return cls(kind="gauss", params=_numbers(rest, 1, descriptor), descriptor=text)
            case "dog":
                return cls(kind="dog", params=_numbers(rest, 3, descriptor), descriptor=text)
            case "jacobian":
                if not rest.strip():
                    raise ParseError(f"jacobian metric needs a file path: {descriptor!r}")
                return cls(kind="jacobian", path=Path(rest.strip()), descriptor=text)
            case "train":
                iterations = None
                if rest:
                    try:
                        iterations = int(rest)
                    except ValueError:
                        raise ParseError(f"iteration count {rest!r} is not an integer") from None
                    if iterations < 0:
                        raise ParameterError(f"iteration count must be >= 0, got {iterations}")
                return cls(kind="train", iterations=iterations, descriptor=text)
            case _:
                raise ParseError(
                    f"unknown metric {descriptor!r}; expected euclid, ssim, gauss:<sigma>, "
                    "dog:<center>,<surround>,<alpha>, jacobian:<path> or train[:<iterations>]"
                )


def _numbers(text: str, count: int, descriptor: str) -> tuple[float, ...]:
    fields = [f.strip() for f in text.split(",")] if text.strip() else []
    if len(fields) != count:
        raise ParseError(f"{descriptor!r}: expected {count} parameter(s), got {len(fields)}")
    try:
        values = tuple(float(f) for f in fields)
    except ValueError:
        raise ParseError(f"{descriptor!r}: parameters must be numbers") from None
    for v in values:
        if not (math.isfinite(v) and v > 0):
            raise ParameterError(f"{descriptor!r}: parameters must be finite and > 0")
    return values


class EuclideanScorer(Scorer):
    def __init__(self, label: str = "euclid"):
        self.label = label

    def score(self, pair: ImagePair) -> float:
        return euclidean_metric(pair.ref, pair.deg)


class SsimScorer(Scorer):
    similarity = True

    def __init__(self, label: str = "ssim", cfg: SsimConfig = SsimConfig()):
        self.label = label
        self.cfg = cfg

    def score(self, pair: ImagePair) -> float:
        return ssim(pair.ref, pair.deg, self.cfg)


class KernelScorer(Scorer):
    def __init__(self, label: str, kernel: ConnectivityKernel):
        self.label = label
        self.kernel = kernel

    def score(self, pair: ImagePair) -> float:
        return score_pair(pair.ref, pair.deg, self.kernel)


class JacobianScorer(Scorer):
    """Tiled scoring with a fixed tile Jacobian, possibly trained on another dataset."""

    def __init__(self, label: str, jacobian: TileJacobian, crop: bool = False):
        self.label = label
        self.jacobian = jacobian
        self.crop = crop

    def score(self, pair: ImagePair) -> float:
        return tiled_distance(pair.ref, pair.deg, self.jacobian, self.crop)


class TrainedJacobianScorer(TrainableScorer):
    def __init__(self, label: str, cfg: TrainingConfig, dataset_id: str = ""):
        self.label = label
        self.cfg = cfg
        self.dataset_id = dataset_id
        self._fits = 0

    def fit(self, pairs: Sequence[ImagePair]) -> Scorer:
        self._fits += 1
        logger.info("Fitting tile Jacobian", model=self.label, fit=self._fits, pairs=len(pairs))
        jacobian, _ = train_jacobian(pairs, self.cfg, self.dataset_id)
        return JacobianScorer(self.label, jacobian, self.cfg.crop)


def build_scorer(
    spec: MetricSpec,
    *,
    seed: Optional[int] = None,
    step: float = 0.1,
    crop: bool = False,
    dog_center: DogCenterMode = "unit",
    dataset_id: str = "",
) -> Scorer | TrainableScorer:
    try:
        match spec.kind:
            case "euclid":
                return EuclideanScorer(spec.label)
            case "ssim":
                return SsimScorer(spec.label)
            case "gauss":
                kernel = build_kernel(GaussianProfile(sigma=spec.params[0]))
                return KernelScorer(spec.label, kernel)
            case "dog":
                c, s, a = spec.params
                profile = DogProfile(sigma_center=c, sigma_surround=s, alpha=a)
                return KernelScorer(spec.label, build_kernel(profile, dog_center=dog_center))
            case "jacobian":
                assert spec.path is not None
                return JacobianScorer(spec.label, load_jacobian(spec.path), crop)
            case "train":
                if seed is None:
                    raise ParameterError(f"metric {spec.label!r} needs --seed")
                cfg = TrainingConfig(
                    seed=seed,
                    step=step,
                    crop=crop,
                    iterations=spec.iterations if spec.iterations is not None else 10_000,
                )
                return TrainedJacobianScorer(spec.label, cfg, dataset_id)
    except ValidationError as e:
        raise ParameterError(f"metric {spec.label!r}: {e.errors()[0]['msg']}") from None


def parse_metrics(descriptors: Sequence[str]) -> list[MetricSpec]:
    specs = [MetricSpec.parse(d) for d in descriptors]
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ParseError("metric list has duplicates")
    if not specs:
        raise ParseError("no metrics given")
    return specs
