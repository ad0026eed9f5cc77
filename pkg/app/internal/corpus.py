"""
Dataset ingestion: rating manifests, image decoding and normalization, and the
cross-validation folds over reference images.
"""

import csv
import hashlib
import io
from collections import defaultdict
from pathlib import Path
from typing import Literal, NamedTuple, Optional, Sequence, cast

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from app.internal.geometry import GrayImage
from app.internal.imaging import load_image, to_grayscale
from app.util.errors import ManifestError, ParameterError, ParseError
from app.util.log import logger
from app.util.numfmt import fmt
from app.util.parallel import ordered_map

__all__ = [
    "DmosConvention",
    "FoldAssignment",
    "ImagePair",
    "Manifest",
    "RatedPair",
    "StretchMode",
    "StretchResult",
    "assign_folds",
    "fold_split",
    "load_manifest",
    "load_pair",
    "load_pairs",
    "load_scores",
    "luminance_stretch",
    "rating_to_dmos",
    "references_of",
    "stratified_folds",
    "stretch_pair",
    "to_grayscale",
    "write_manifest",
    "write_scores",
    "ScoreRow",
]

MANIFEST_HEADER = ["ref_path", "deg_path", "dmos", "category", "codec", "quality"]
POOLED_STRATUM = "(pooled)"

DmosConvention = Literal["printed", "inverted"]
StretchMode = Literal["per_image", "paired", "none"]


class RatedPair(BaseModel, frozen=True):
    ref_path: Path
    deg_path: Path
    dmos: float
    category: Optional[str] = None
    codec: Optional[str] = None
    quality_level: Optional[str] = None

    @field_validator("dmos")
    @classmethod
    def _dmos_range(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"dmos {value} outside [0, 1]")
        return value


class Manifest(BaseModel, frozen=True):
    pairs: list[RatedPair]
    dataset_id: str
    checksum: str = ""
    dmos_convention: DmosConvention = "printed"

    @field_validator("pairs")
    @classmethod
    def _non_empty(cls, value: list[RatedPair]) -> list[RatedPair]:
        if not value:
            raise ValueError("manifest has no rows")
        return value

    def references(self) -> list[tuple[str, Optional[str]]]:
        seen: dict[str, Optional[str]] = {}
        for pair in self.pairs:
            seen.setdefault(str(pair.ref_path), pair.category)
        return list(seen.items())


class ImagePair(BaseModel):
    """A decoded, normalized pair ready for scoring."""

    model_config = ConfigDict(frozen=True)

    ref: GrayImage
    deg: GrayImage
    dmos: float
    reference: str
    """Identifier of the reference image; all its degradations share a fold."""
    category: Optional[str] = None
    source: Optional[RatedPair] = None


class FoldAssignment(BaseModel, frozen=True):
    k: int
    seed: int
    folds: dict[str, int]

    @model_validator(mode="after")
    def _partition(self):
        if self.k < 2:
            raise ValueError("fold count must be >= 2")
        used = set(self.folds.values())
        if not used <= set(range(self.k)):
            raise ValueError("fold index out of range")
        if len(used) != self.k:
            raise ValueError("every fold needs at least one reference image")
        return self

    def fold_of(self, reference: str) -> int:
        try:
            return self.folds[reference]
        except KeyError:
            raise ParameterError(f"reference {reference} has no fold") from None

    def references_in(self, fold: int) -> list[str]:
        return [ref for ref, f in self.folds.items() if f == fold]


class StretchResult(NamedTuple):
    image: GrayImage
    degenerate: bool


def rating_to_dmos(rating: float, inverted: bool = False) -> float:
    """
    DMOS = 1 − rating / 100 as printed. With `inverted`, DMOS = rating / 100,
    for raters who scored how different the images look.
    """
    if not 0 <= rating <= 100:
        raise ParameterError(f"rating {rating} outside [0, 100]")
    if inverted:
        return rating / 100
    return 1 - rating / 100


def luminance_stretch(
    img: GrayImage, reference: Optional[GrayImage] = None
) -> StretchResult:
    """
    Affine map sending the minimum to 0 and the maximum to 255. Passing a
    reference stretches by the reference's range instead (paired mode); the
    result is then not clipped.
    """
    source = reference if reference is not None else img
    low = float(source.values.min())
    high = float(source.values.max())
    if high == low:
        logger.warning("Constant image, luminance stretch is degenerate", value=low)
        return StretchResult(GrayImage(values=np.zeros(img.shape)), True)
    scale = 255.0 / (high - low)
    stretched = (img.values - low) * scale
    if reference is None:
        # exact endpoints
        stretched[img.values == high] = 255.0
        stretched[img.values == low] = 0.0
    return StretchResult(GrayImage(values=stretched), False)


def _parse_optional(value: str) -> Optional[str]:
    value = value.strip()
    return value or None


def load_manifest(path: str | Path) -> Manifest:
    """
    Reads a comma-separated manifest with the header
    `ref_path,deg_path,dmos,category,codec,quality`. Lines starting with `#`
    are comments; `# dmos_convention=inverted` records the DMOS convention.
    Relative image paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ManifestError(f"{path}: file not found") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ManifestError(f"{path}: not UTF-8 ({e})") from None

    convention: DmosConvention = "printed"
    numbered: list[tuple[int, str]] = []
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            directive = stripped.lstrip("#").strip()
            if directive.startswith("dmos_convention="):
                value = directive.split("=", 1)[1].strip()
                if value not in ("printed", "inverted"):
                    raise ManifestError(f"unknown dmos convention {value!r}", number)
                convention = cast(DmosConvention, value)
            continue
        numbered.append((number, line))

    if not numbered:
        raise ManifestError(f"{path}: manifest is empty")

    header_number, header_line = numbered[0]
    header = [h.strip() for h in next(csv.reader([header_line]))]
    if header != MANIFEST_HEADER:
        raise ManifestError(
            f"expected header {','.join(MANIFEST_HEADER)}, got {','.join(header)}",
            header_number,
        )

    base = path.parent
    pairs: list[RatedPair] = []
    seen: set[tuple[Path, Path]] = set()
    for number, line in numbered[1:]:
        fields = next(csv.reader([line]))
        if len(fields) != len(MANIFEST_HEADER):
            raise ManifestError(
                f"expected {len(MANIFEST_HEADER)} fields, got {len(fields)}", number
            )
        ref_raw, deg_raw, dmos_raw, category, codec, quality = fields
        try:
            dmos = float(dmos_raw)
        except ValueError:
            raise ManifestError(f"dmos {dmos_raw!r} is not a number", number) from None
        if not 0.0 <= dmos <= 1.0:
            raise ManifestError(f"dmos {dmos} outside [0, 1]", number)

        ref_path = (base / ref_raw.strip()).resolve()
        deg_path = (base / deg_raw.strip()).resolve()
        for p in (ref_path, deg_path):
            if not p.is_file():
                raise ManifestError(f"image {p} does not exist", number)
        if (ref_path, deg_path) in seen:
            raise ManifestError(f"duplicate pair {ref_raw},{deg_raw}", number)
        seen.add((ref_path, deg_path))

        pairs.append(
            RatedPair(
                ref_path=ref_path,
                deg_path=deg_path,
                dmos=dmos,
                category=_parse_optional(category),
                codec=_parse_optional(codec),
                quality_level=_parse_optional(quality),
            )
        )

    if not pairs:
        raise ManifestError(f"{path}: manifest has no rows")

    manifest = Manifest(
        pairs=pairs,
        dataset_id=path.stem,
        checksum=hashlib.sha256(raw).hexdigest(),
        dmos_convention=convention,
    )
    logger.info(
        "Loaded manifest",
        path=str(path),
        rows=len(pairs),
        references=len(manifest.references()),
    )
    return manifest


def write_manifest(manifest: Manifest, path: str | Path):
    buffer = io.StringIO()
    if manifest.dmos_convention != "printed":
        buffer.write(f"# dmos_convention={manifest.dmos_convention}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for pair in manifest.pairs:
        writer.writerow(
            [
                str(pair.ref_path),
                str(pair.deg_path),
                repr(pair.dmos),
                pair.category or "",
                pair.codec or "",
                pair.quality_level or "",
            ]
        )
    Path(path).write_text(buffer.getvalue(), encoding="utf-8")


def stretch_pair(
    ref: GrayImage, deg: GrayImage, stretch: StretchMode
) -> tuple[GrayImage, GrayImage]:
    match stretch:
        case "per_image":
            return luminance_stretch(ref).image, luminance_stretch(deg).image
        case "paired":
            return luminance_stretch(ref).image, luminance_stretch(deg, reference=ref).image
        case "none":
            return ref, deg


def _normalized_pair(
    rated: RatedPair, ref: GrayImage, deg: GrayImage, stretch: StretchMode
) -> ImagePair:
    ref_out, deg_out = stretch_pair(ref, deg, stretch)
    return ImagePair(
        ref=ref_out,
        deg=deg_out,
        dmos=rated.dmos,
        reference=str(rated.ref_path),
        category=rated.category,
        source=rated,
    )


def load_pair(rated: RatedPair, stretch: StretchMode = "per_image") -> ImagePair:
    return _normalized_pair(rated, load_image(rated.ref_path), load_image(rated.deg_path), stretch)


def load_pairs(manifest: Manifest, stretch: StretchMode = "per_image") -> list[ImagePair]:
    """Decodes every image once and applies the luminance stretch."""
    paths = sorted({p for pair in manifest.pairs for p in (pair.ref_path, pair.deg_path)})
    images = dict(zip(paths, ordered_map(load_image, paths)))
    return [
        _normalized_pair(rated, images[rated.ref_path], images[rated.deg_path], stretch)
        for rated in manifest.pairs
    ]


class ScoreRow(NamedTuple):
    ref_path: str
    deg_path: str
    score: Optional[float]


SCORES_HEADER = ["ref_path", "deg_path", "score"]


def write_scores(rows: Sequence[ScoreRow], path: str | Path):
    """Batch output; failed rows keep their place with an empty score."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SCORES_HEADER)
    for row in rows:
        writer.writerow([row.ref_path, row.deg_path, "" if row.score is None else fmt(row.score)])
    Path(path).write_text(buffer.getvalue(), encoding="utf-8")


def load_scores(path: str | Path) -> list[ScoreRow]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ParseError(f"{path}: file not found") from None
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != SCORES_HEADER:
        raise ParseError(f"{path}: expected header {','.join(SCORES_HEADER)}")
    rows: list[ScoreRow] = []
    for number, fields in enumerate(reader, start=2):
        if not fields:
            continue
        if len(fields) != len(SCORES_HEADER):
            raise ParseError(f"{path}: row {number}: expected 3 fields, got {len(fields)}")
        ref, deg, raw = fields
        score: Optional[float] = None
        if raw.strip():
            try:
                score = float(raw)
            except ValueError:
                raise ParseError(f"{path}: row {number}: score {raw!r} is not a number") from None
        rows.append(ScoreRow(ref, deg, score))
    return rows


def references_of(pairs: Sequence[ImagePair]) -> list[tuple[str, Optional[str]]]:
    seen: dict[str, Optional[str]] = {}
    for pair in pairs:
        seen.setdefault(pair.reference, pair.category)
    return list(seen.items())


def assign_folds(
    references: Sequence[tuple[str, Optional[str]]], k: int, seed: int
) -> FoldAssignment:
    """
    Seeded shuffle within each category followed by round-robin assignment.
    Categories with fewer than k references are pooled into one stratum.
    """
    if k < 2:
        raise ParameterError(f"fold count must be >= 2, got {k}")
    if seed < 0:
        raise ParameterError(f"seed must be >= 0, got {seed}")
    if len(references) < k:
        raise ParameterError(
            f"{len(references)} reference images cannot fill {k} folds"
        )

    categories: dict[str, list[str]] = defaultdict(list)
    for ref, category in references:
        categories[category if category is not None else ""].append(ref)

    large = sorted(name for name, refs in categories.items() if len(refs) >= k)
    small = sorted(name for name, refs in categories.items() if len(refs) < k)
    if small:
        logger.warning(
            "Categories smaller than the fold count are pooled into one stratum",
            stratum=POOLED_STRATUM,
            categories=small,
            folds=k,
        )

    rng = np.random.default_rng(seed)
    folds: dict[str, int] = {}
    # the round-robin cursor carries over between categories, so the pooled
    # categories occupy consecutive slots and total fold sizes stay balanced
    offset = 0
    for name in large + small:
        refs = categories[name]
        order = rng.permutation(len(refs))
        for position, index in enumerate(order):
            folds[refs[int(index)]] = (offset + position) % k
        offset = (offset + len(refs)) % k

    return FoldAssignment(k=k, seed=seed, folds=folds)


def stratified_folds(manifest: Manifest, k: int, seed: int) -> FoldAssignment:
    return assign_folds(manifest.references(), k, seed)


def fold_split(
    pairs: Sequence[ImagePair], folds: FoldAssignment, fold: int
) -> tuple[list[ImagePair], list[ImagePair]]:
    """Returns (training pairs, held-out pairs) for `fold`."""
    train = [p for p in pairs if folds.fold_of(p.reference) != fold]
    test = [p for p in pairs if folds.fold_of(p.reference) == fold]
    return train, test
