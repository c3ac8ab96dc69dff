"""Pairwise-comparison scoring: Q scores (Strength of Schedule) and TrueSkill.

Comparison records are filtered into grouping contexts, the pool of
participants and images a score is valid for. Within each context and
indicator every image gets a Q score in [0, 10] and a TrueSkill rating.

Q score of image ``i`` with ``n`` comparisons, ``w`` wins, ``l`` losses and
``t`` ties::

    W_i = (w + t/2) / n            L_i = (l + t/2) / n
    Q_i = 10/3 * (W_i + mean(W_j for j beaten by i)
                      - mean(L_k for k that beat i) + 1)

Empty means contribute 0; ties never populate the beaten/beaten-by sets.
"""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Iterable, Literal, Mapping, Sequence

from scipy.special import erfcx, ndtr

from .errors import BadChoice, InvalidRecord, NoRecords, SchemaMismatch
from .ingest import image_key

ALL = "ALL"

INDICATORS: tuple[str, ...] = (
    "safe",
    "lively",
    "wealthy",
    "beautiful",
    "boring",
    "depressing",
    "live_nearby",
    "walk",
    "cycle",
    "green",
)
CHOICES = ("left", "right", "equal")
PERSONALITY_TRAITS = ("extraversion", "agreeableness", "conscientiousness", "neuroticism", "openness")
DEFAULT_MIN_COMPARISONS = 4

REQUIRED_COLUMNS = (
    "participant_id",
    "country_of_residence",
    "indicator",
    "left_image_id",
    "right_image_id",
    "choice",
)
# Columns mapped onto dedicated record fields rather than the demographics map.
_STRUCTURAL = set(REQUIRED_COLUMNS) | {"city_of_residence", "left_image_city", "right_image_city"}


def normalize_name(name: str) -> str:
    return "_".join(name.strip().lower().replace("-", " ").split())


@dataclass(frozen=True)
class ComparisonRecord:
    participant_id: str
    participant_country: str
    indicator: str
    left_image: str
    right_image: str
    choice: Literal["left", "right", "equal"]
    participant_city: str = ""
    demographics: Mapping[str, str] = field(default_factory=dict)
    personality: Mapping[str, float] = field(default_factory=dict)
    left_city: str = ""
    right_city: str = ""

    def flipped(self) -> "ComparisonRecord":
        """Same comparison with sides swapped and the choice mirrored."""
        choice = {"left": "right", "right": "left", "equal": "equal"}[self.choice]
        return ComparisonRecord(
            self.participant_id,
            self.participant_country,
            self.indicator,
            self.right_image,
            self.left_image,
            choice,
            self.participant_city,
            self.demographics,
            self.personality,
            self.right_city,
            self.left_city,
        )

    @property
    def winner(self) -> str | None:
        if self.choice == "left":
            return self.left_image
        if self.choice == "right":
            return self.right_image
        return None


def parse_comparisons(path: str | os.PathLike) -> list[ComparisonRecord]:
    """Read pairwise ratings from CSV.

    Header names are matched case-insensitively with spaces and hyphens
    folded to underscores. Columns outside the record fields (gender,
    age group, income, ...) land in ``demographics``; the five Big Five
    traits, when present, land in ``personality``.
    """
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaMismatch(REQUIRED_COLUMNS[0])
        cols = [normalize_name(h) for h in header]
        for req in REQUIRED_COLUMNS:
            if req not in cols:
                raise SchemaMismatch(req)
        records = []
        for row_no, raw in enumerate(reader, start=2):
            if not raw or all(not v.strip() for v in raw):
                continue
            rec = dict(zip(cols, (v.strip() for v in raw)))
            records.append(_record_from_row(rec, row_no))
    return records


def _record_from_row(rec: dict[str, str], row_no: int) -> ComparisonRecord:
    choice = rec["choice"].lower()
    if choice not in CHOICES:
        raise BadChoice(rec["choice"], row_no)
    indicator = normalize_name(rec["indicator"])
    if indicator not in INDICATORS:
        raise InvalidRecord(f"unknown indicator {rec['indicator']!r}", row_no)
    left, right = rec["left_image_id"], rec["right_image_id"]
    if left == right:
        raise InvalidRecord(f"image {left} compared with itself", row_no)
    personality = {}
    demographics = {}
    for key, value in rec.items():
        if key in _STRUCTURAL:
            continue
        if key in PERSONALITY_TRAITS and value != "":
            try:
                personality[key] = float(value)
                continue
            except ValueError:
                pass
        demographics[key] = value
    return ComparisonRecord(
        participant_id=rec["participant_id"],
        participant_country=rec["country_of_residence"],
        indicator=indicator,
        left_image=left,
        right_image=right,
        choice=choice,
        participant_city=rec.get("city_of_residence", ""),
        demographics=demographics,
        personality=personality,
        left_city=rec.get("left_image_city", ""),
        right_city=rec.get("right_image_city", ""),
    )


def load_image_cities(path: str | os.PathLike) -> dict[str, str]:
    """Read an ``image_id,city`` CSV."""
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        fieldmap = {normalize_name(f): f for f in reader.fieldnames or ()}
        for req in ("image_id", "city"):
            if req not in fieldmap:
                raise SchemaMismatch(req)
        return {row[fieldmap["image_id"]].strip(): row[fieldmap["city"]].strip() for row in reader}


# --------------------------------------------------------------------------
# grouping contexts


@dataclass(frozen=True, order=True)
class GroupingContext:
    participant_scope: str = ALL
    image_scope: str = ALL

    def __str__(self) -> str:
        return f"{self.participant_scope},{self.image_scope}"

    @classmethod
    def parse(cls, text: str) -> "GroupingContext":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2 or not all(parts):
            raise ValueError(f"context must look like 'COUNTRY,CITY', got {text!r}")
        return cls(parts[0], parts[1])


def _city(image: str, own: str, image_cities: Mapping[str, str] | None) -> str:
    if image_cities is not None and image in image_cities:
        return image_cities[image]
    return own


def filter_by_context(
    records: Iterable[ComparisonRecord],
    context: GroupingContext,
    indicator: str | None = None,
    image_cities: Mapping[str, str] | None = None,
) -> list[ComparisonRecord]:
    """Keep records inside a rating pool.

    A comparison whose two images come from different cities only survives
    when the image scope is ALL.
    """
    out = []
    for r in records:
        if indicator is not None and r.indicator != indicator:
            continue
        if context.participant_scope != ALL and r.participant_country != context.participant_scope:
            continue
        if context.image_scope != ALL:
            if _city(r.left_image, r.left_city, image_cities) != context.image_scope:
                continue
            if _city(r.right_image, r.right_city, image_cities) != context.image_scope:
                continue
        out.append(r)
    return out


def available_contexts(
    records: Iterable[ComparisonRecord], image_cities: Mapping[str, str] | None = None
) -> list[GroupingContext]:
    """Every (country | ALL) x (city | ALL) pool the records can populate."""
    countries, cities = set(), set()
    for r in records:
        if r.participant_country:
            countries.add(r.participant_country)
        for img, own in ((r.left_image, r.left_city), (r.right_image, r.right_city)):
            c = _city(img, own, image_cities)
            if c:
                cities.add(c)
    return [
        GroupingContext(p, i)
        for p in sorted(countries) + [ALL]
        for i in sorted(cities) + [ALL]
    ]


# --------------------------------------------------------------------------
# Q scores


@dataclass(frozen=True)
class QScoreEntry:
    image_id: str
    q: float
    n_comparisons: int
    context: GroupingContext = GroupingContext()
    indicator: str = ""

    @property
    def q_normalized(self) -> float:
        return self.q / 10.0


def q_scores(
    records: Sequence[ComparisonRecord],
    min_comparisons: int = DEFAULT_MIN_COMPARISONS,
    context: GroupingContext = GroupingContext(),
) -> list[QScoreEntry]:
    """Strength-of-Schedule Q scores for one indicator's records.

    Ties count toward ``n`` and toward the retention threshold. All images
    take part in the opponent averages; retention only filters the output.
    """
    if not records:
        raise NoRecords("no comparison records to score")
    indicators = {r.indicator for r in records}
    if len(indicators) > 1:
        raise ValueError(f"records mix indicators: {sorted(indicators)}")
    indicator = indicators.pop()

    wins: dict[str, float] = defaultdict(float)
    losses: dict[str, float] = defaultdict(float)
    n: dict[str, int] = defaultdict(int)
    beaten: dict[str, set[str]] = defaultdict(set)
    beaten_by: dict[str, set[str]] = defaultdict(set)
    for r in records:
        a, b = r.left_image, r.right_image
        n[a] += 1
        n[b] += 1
        if r.choice == "equal":
            wins[a] += 0.5
            wins[b] += 0.5
            losses[a] += 0.5
            losses[b] += 0.5
            continue
        winner, loser = (a, b) if r.choice == "left" else (b, a)
        wins[winner] += 1.0
        losses[loser] += 1.0
        beaten[winner].add(loser)
        beaten_by[loser].add(winner)

    win_ratio = {i: wins[i] / n[i] for i in n}
    loss_ratio = {i: losses[i] / n[i] for i in n}

    def mean_of(ratio, ids):
        return math.fsum(ratio[j] for j in sorted(ids)) / len(ids) if ids else 0.0

    out = []
    for i in sorted(n, key=image_key):
        if n[i] < min_comparisons:
            continue
        bracket = win_ratio[i] + mean_of(win_ratio, beaten[i]) - mean_of(loss_ratio, beaten_by[i]) + 1.0
        out.append(QScoreEntry(i, 10.0 / 3.0 * bracket, n[i], context, indicator))
    return out


# --------------------------------------------------------------------------
# TrueSkill


@dataclass(frozen=True)
class SkillRating:
    mu: float = 25.0
    sigma: float = 25.0 / 3.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def conservative(self, k: float = 3.0) -> float:
        return self.mu - k * self.sigma


@dataclass(frozen=True)
class TrueSkillParams:
    mu0: float = 25.0
    sigma0: float = 25.0 / 3.0
    beta: float = 25.0 / 6.0
    tau: float = 25.0 / 300.0
    draw_probability: float = 0.10

    def prior(self) -> SkillRating:
        return SkillRating(self.mu0, self.sigma0)

    @property
    def draw_margin(self) -> float:
        """Performance-difference margin inside which a game counts as drawn."""
        return NormalDist().inv_cdf((self.draw_probability + 1.0) / 2.0) * math.sqrt(2.0) * self.beta


_SQRT2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_TINY = 2.222758749e-162


def _pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _v_win(t: float, eps: float) -> float:
    x = t - eps
    # phi(x) / Phi(x), written with erfcx to stay finite in the tails
    return _SQRT_2_OVER_PI / float(erfcx(-x / _SQRT2))


def _w_win(t: float, eps: float) -> float:
    v = _v_win(t, eps)
    return v * (v + t - eps)


def _v_draw(t: float, eps: float) -> float:
    at = abs(t)
    denom = float(ndtr(eps - at) - ndtr(-eps - at))
    if denom < _TINY:
        v = -at + eps  # asymptote for a hopeless draw
    else:
        v = (_pdf(-eps - at) - _pdf(eps - at)) / denom
    return -v if t < 0 else v


def _w_draw(t: float, eps: float) -> float:
    at = abs(t)
    denom = float(ndtr(eps - at) - ndtr(-eps - at))
    if denom < _TINY:
        return 1.0
    v = _v_draw(at, eps)
    return v * v + ((eps - at) * _pdf(eps - at) + (eps + at) * _pdf(eps + at)) / denom


def trueskill_update(
    a: SkillRating,
    b: SkillRating,
    outcome: Literal["a_wins", "b_wins", "draw"],
    params: TrueSkillParams = TrueSkillParams(),
) -> tuple[SkillRating, SkillRating]:
    """One two-player TrueSkill update, including the dynamics term ``tau``."""
    if outcome == "b_wins":
        nb, na = trueskill_update(b, a, "a_wins", params)
        return na, nb
    var_a = a.sigma**2 + params.tau**2
    var_b = b.sigma**2 + params.tau**2
    c2 = 2.0 * params.beta**2 + var_a + var_b
    c = math.sqrt(c2)
    t = (a.mu - b.mu) / c
    eps = params.draw_margin / c
    if outcome == "a_wins":
        v, w = _v_win(t, eps), _w_win(t, eps)
    elif outcome == "draw":
        v, w = _v_draw(t, eps), _w_draw(t, eps)
    else:
        raise ValueError(f"unknown outcome {outcome!r}")
    new_a = SkillRating(a.mu + var_a / c * v, math.sqrt(var_a * (1.0 - var_a / c2 * w)))
    new_b = SkillRating(b.mu - var_b / c * v, math.sqrt(var_b * (1.0 - var_b / c2 * w)))
    return new_a, new_b


@dataclass(frozen=True)
class TrueSkillScore:
    image_id: str
    mu: float
    sigma: float
    n_comparisons: int

    @property
    def conservative(self) -> float:
        return self.mu - 3.0 * self.sigma


def trueskill_scores(
    records: Sequence[ComparisonRecord], params: TrueSkillParams = TrueSkillParams()
) -> dict[str, TrueSkillScore]:
    """Sequential TrueSkill ratings over ``records`` in the given order."""
    if not records:
        raise NoRecords("no comparison records to rate")
    ratings: dict[str, SkillRating] = {}
    counts: dict[str, int] = defaultdict(int)
    outcome = {"left": "a_wins", "right": "b_wins", "equal": "draw"}
    for r in records:
        a = ratings.get(r.left_image, params.prior())
        b = ratings.get(r.right_image, params.prior())
        ratings[r.left_image], ratings[r.right_image] = trueskill_update(a, b, outcome[r.choice], params)
        counts[r.left_image] += 1
        counts[r.right_image] += 1
    return {
        i: TrueSkillScore(i, ratings[i].mu, ratings[i].sigma, counts[i])
        for i in sorted(ratings, key=image_key)
    }


# --------------------------------------------------------------------------
# score tables


@dataclass(frozen=True)
class ScoreRow:
    participant_scope: str
    image_scope: str
    indicator: str
    image_id: str
    q: float
    q_normalized: float
    n_comparisons: int
    ts_mu: float
    ts_sigma: float
    ts_conservative: float

    @property
    def context(self) -> GroupingContext:
        return GroupingContext(self.participant_scope, self.image_scope)


SCORE_COLUMNS = (
    "participant_scope",
    "image_scope",
    "indicator",
    "image_id",
    "q",
    "q_normalized",
    "n_comparisons",
    "ts_mu",
    "ts_sigma",
    "ts_conservative",
)


@dataclass
class ScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def select(
        self,
        context: GroupingContext | None = None,
        indicator: str | None = None,
    ) -> list[ScoreRow]:
        return [
            r
            for r in self.rows
            if (context is None or r.context == context)
            and (indicator is None or r.indicator == indicator)
        ]

    def contexts(self) -> list[GroupingContext]:
        return sorted({r.context for r in self.rows})

    def lookup(self) -> dict[tuple[str, str, str, str], ScoreRow]:
        return {(r.participant_scope, r.image_scope, r.indicator, r.image_id): r for r in self.rows}


def score_cell(
    records: Sequence[ComparisonRecord],
    context: GroupingContext,
    indicator: str,
    image_cities: Mapping[str, str] | None = None,
    min_comparisons: int = DEFAULT_MIN_COMPARISONS,
    params: TrueSkillParams = TrueSkillParams(),
) -> list[ScoreRow]:
    pool = filter_by_context(records, context, indicator, image_cities)
    if not pool:
        return []
    ts = trueskill_scores(pool, params)
    rows = []
    for e in q_scores(pool, min_comparisons, context):
        s = ts[e.image_id]
        rows.append(
            ScoreRow(
                context.participant_scope,
                context.image_scope,
                indicator,
                e.image_id,
                e.q,
                e.q_normalized,
                e.n_comparisons,
                s.mu,
                s.sigma,
                s.conservative,
            )
        )
    return rows


def score_table(
    records: Sequence[ComparisonRecord],
    contexts: Sequence[GroupingContext],
    indicators: Sequence[str] = INDICATORS,
    image_cities: Mapping[str, str] | None = None,
    min_comparisons: int = DEFAULT_MIN_COMPARISONS,
    params: TrueSkillParams = TrueSkillParams(),
) -> ScoreTable:
    """Q scores and TrueSkill ratings for every (context, indicator) cell.

    Retention is applied per cell. Each cell's TrueSkill pass is sequential
    over that cell's records in input order.
    """
    by_indicator: dict[str, list[ComparisonRecord]] = defaultdict(list)
    for r in records:
        by_indicator[r.indicator].append(r)
    rows: list[ScoreRow] = []
    for ctx in contexts:
        for ind in indicators:
            rows.extend(score_cell(by_indicator.get(ind, []), ctx, ind, image_cities, min_comparisons, params))
    return ScoreTable(rows)


def write_score_table(path, table: ScoreTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for r in table.rows:
            w.writerow(
                [
                    r.participant_scope,
                    r.image_scope,
                    r.indicator,
                    r.image_id,
                    repr(r.q),
                    repr(r.q_normalized),
                    r.n_comparisons,
                    repr(r.ts_mu),
                    repr(r.ts_sigma),
                    repr(r.ts_conservative),
                ]
            )


def read_score_table(path) -> ScoreTable:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SCORE_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise SchemaMismatch(missing[0])
        for rec in reader:
            rows.append(
                ScoreRow(
                    rec["participant_scope"],
                    rec["image_scope"],
                    rec["indicator"],
                    rec["image_id"],
                    float(rec["q"]),
                    float(rec["q_normalized"]),
                    int(rec["n_comparisons"]),
                    float(rec["ts_mu"]),
                    float(rec["ts_sigma"]),
                    float(rec["ts_conservative"]),
                )
            )
    return ScoreTable(rows)
