"""Election impact of an overvote-inducing adversarial bubble.

A blank race on a ballot carrying a triggered example reads as a vote for
Lose. A Win vote on such a ballot reads as an overvote; the voter either
casts it anyway (the race is void, probability ``recast``) or asks for a
fresh ballot and ends up counted for Win.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

REFERENCE_RACE = dict(win_share=0.415, lose_share=0.395, blank_rate=0.12, deploy=1.0, success=0.1, recast=0.3,
                  target_margin=0.005)
PUBLISHED_REPEAT_FRACTION = 0.0013
MARGIN_BUCKETS = (0.05, 0.02, 0.01)


class RaceParamError(ValueError):
    pass


@dataclass(frozen=True)
class RaceParams:
    win_share: float
    lose_share: float
    blank_rate: float
    deploy: float = 1.0
    success: float = 0.1
    recast: float = 0.3
    target_margin: float = 0.005

    def __post_init__(self):
        for name in ("win_share", "lose_share", "blank_rate", "deploy", "success", "recast", "target_margin"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise RaceParamError(f"{name} must lie in [0, 1], got {v}")
        total = math.fsum([self.win_share, self.lose_share, self.blank_rate])
        if total > 1.0 + 1e-12:
            raise RaceParamError(f"win + lose + blank = {total} exceeds 1")

    def replace(self, **kw) -> "RaceParams":
        return RaceParams(**{**asdict(self), **kw})


@dataclass(frozen=True)
class RaceOutcome:
    lose_final: float
    win_final: float

    @property
    def margin(self) -> float:
        return self.lose_final - self.win_final


def closed_form_outcome(p: RaceParams) -> RaceOutcome:
    trig = p.deploy * p.success
    return RaceOutcome(p.lose_share + p.blank_rate * trig, p.win_share * (1.0 - trig * p.recast))


# ---------------------------------------------------------------- Monte Carlo

@dataclass
class MonteCarloOutcome:
    ballots: int
    lose_final: float
    win_final: float
    lose_sigma: float
    win_sigma: float
    lose_ci95: tuple[float, float]
    win_ci95: tuple[float, float]
    repeat_request_fraction: float
    repeat_sigma: float
    fresh_requests: int
    chains_capped: int
    published_repeat_fraction: float = PUBLISHED_REPEAT_FRACTION

    def to_dict(self):
        return asdict(self)


def _ci(p, sigma):
    return (p - 1.959963984540054 * sigma, p + 1.959963984540054 * sigma)


def monte_carlo_outcome(p: RaceParams, ballots: int = 1_000_000, seed: int = 0,
                        shard: int = 1 << 17, max_chain: int = 10_000) -> MonteCarloOutcome:
    """Ballot-level simulation.

    Base shares are allotted by count (rounded), so all randomness comes from
    the attack itself. Fresh-ballot chains run until a clean ballot arrives;
    a fresh ballot that again triggers is a repeat request.
    """
    if ballots < 1:
        raise ValueError("ballots must be >= 1")
    n_win = int(round(p.win_share * ballots))
    n_lose = int(round(p.lose_share * ballots))
    n_blank = min(int(round(p.blank_rate * ballots)), ballots - n_win - n_lose)
    trig = p.deploy * p.success

    flipped = voided = repeats = fresh = capped = 0
    root = np.random.SeedSequence(seed)
    # one child stream per shard keeps the reduction order fixed
    for kind, count in (("blank", n_blank), ("win", n_win)):
        n_shards = max(1, -(-count // shard))
        streams = root.spawn(n_shards) if count else []
        for k, ss in enumerate(streams):
            rng = np.random.default_rng(ss)
            m = min(shard, count - k * shard)
            carries = rng.random(m) < p.deploy
            fires = carries & (rng.random(m) < p.success)
            if kind == "blank":
                flipped += int(fires.sum())
                continue
            cast_anyway = fires & (rng.random(m) < p.recast)
            voided += int(cast_anyway.sum())
            asking = int((fires & ~cast_anyway).sum())
            if asking:
                if trig >= 1.0:
                    chain = np.full(asking, max_chain)
                    capped += asking
                else:
                    chain = rng.geometric(1.0 - trig, size=asking)
                    capped += int((chain > max_chain).sum())
                    chain = np.minimum(chain, max_chain)
                fresh += int(chain.sum())
                repeats += int((chain >= 2).sum())

    lose = (n_lose + flipped) / ballots
    win = (n_win - voided) / ballots
    s_lose = math.sqrt(n_blank * trig * (1 - trig)) / ballots
    q = trig * p.recast
    s_win = math.sqrt(n_win * q * (1 - q)) / ballots
    rep = repeats / ballots
    q2 = trig * (1 - p.recast) * trig
    s_rep = math.sqrt(n_win * q2 * (1 - q2)) / ballots
    return MonteCarloOutcome(ballots, lose, win, s_lose, s_win, _ci(lose, s_lose), _ci(win, s_win),
                             rep, s_rep, fresh, capped)


def expected_repeat_fraction(p: RaceParams) -> float:
    trig = p.deploy * p.success
    return p.win_share * trig * (1.0 - p.recast) * trig


# ---------------------------------------------------------------- flip threshold

@dataclass(frozen=True)
class FlipResult:
    status: str  # "ok" or "infeasible"
    success: float | None
    algebraic: float | None

    @property
    def feasible(self):
        return self.status == "ok"


def success_algebraic(p: RaceParams, goal: float) -> float | None:
    """Rearranged closed form: (win - lose + goal) / (deploy (blank + win recast))."""
    need = p.win_share - p.lose_share + goal
    if need <= 0:
        return 0.0
    lever = p.deploy * (p.blank_rate + p.win_share * p.recast)
    if lever <= 0:
        return None
    s = need / lever
    return s if s <= 1.0 else None


def min_success_to_flip(p: RaceParams, goal: float | None = None, tol: float = 1e-9) -> FlipResult:
    """Smallest success with lose_final >= win_final + goal, by bisection."""
    if p.deploy <= 0:
        raise RaceParamError("deploy must be > 0 to solve for success")
    goal = p.target_margin if goal is None else goal
    alg = success_algebraic(p, goal)

    def ok(s):
        o = closed_form_outcome(p.replace(success=s))
        return o.lose_final >= o.win_final + goal

    if ok(0.0):
        return FlipResult("ok", 0.0, alg)
    if not ok(1.0):
        return FlipResult("infeasible", None, alg)
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return FlipResult("ok", hi, alg)


# ---------------------------------------------------------------- race tables

class RaceCsvError(ValueError):
    pass


@dataclass
class Race:
    race_id: str
    total_votes: int
    margin_fraction: float
    blank_fraction: float

    def params(self, deploy=1.0, recast=0.3, target_margin=0.005) -> RaceParams:
        win = (1.0 - self.blank_fraction + self.margin_fraction) / 2.0
        lose = (1.0 - self.blank_fraction - self.margin_fraction) / 2.0
        return RaceParams(win, lose, self.blank_fraction, deploy, 0.0, recast, target_margin)


def read_races(source) -> list[Race]:
    """Parse race rows; ``source`` is a path or CSV text."""
    text = Path(source).read_text() if not (isinstance(source, str) and "\n" in source) else source
    rdr = csv.reader(io.StringIO(text))
    rows = list(rdr)
    if not rows:
        return []
    want = ["race_id", "total_votes", "margin_fraction", "blank_fraction"]
    if [c.strip() for c in rows[0]] != want:
        raise RaceCsvError(f"line 1: header must be {','.join(want)}")
    races, errors = [], []
    for line, r in enumerate(rows[1:], start=2):
        if not r or all(not c.strip() for c in r):
            continue
        try:
            if len(r) != 4:
                raise ValueError(f"expected 4 fields, got {len(r)}")
            race = Race(r[0].strip(), int(r[1]), float(r[2]), float(r[3]))
            if race.total_votes < 0 or not 0 <= race.margin_fraction <= 1 or not 0 <= race.blank_fraction <= 1:
                raise ValueError("value out of range")
            if race.margin_fraction + race.blank_fraction > 1:
                raise ValueError("margin + blank exceeds 1")
            races.append(race)
        except ValueError as exc:
            errors.append(f"line {line}: {exc}")
    if errors:
        raise RaceCsvError("; ".join(errors))
    return races


@dataclass
class RaceReport:
    state: str
    races: int
    under: dict[str, int]
    mean_blank: float
    vote_weighted_blank: float
    per_race: list[dict]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def markdown(self) -> str:
        cols = " | ".join(f"<= {k}" for k in self.under)
        vals = " | ".join(str(v) for v in self.under.values())
        return "\n".join([
            "Margin buckets are inclusive (a race at exactly 5% counts under <= 5%).",
            "",
            f"| State | Races | {cols} | Avg. blank |",
            "|" + "---|" * (3 + len(self.under)),
            f"| {self.state} | {self.races} | {vals} | {100 * self.mean_blank:.1f}% |",
        ])


def race_table_report(source, state: str = "", deploy: float = 1.0, recast: float = 0.3,
                      target_margin: float = 0.005) -> RaceReport:
    races = read_races(source)
    under = {f"{round(b * 100)}%": sum(1 for r in races if r.margin_fraction <= b) for b in MARGIN_BUCKETS}
    per = []
    for r in races:
        res = min_success_to_flip(r.params(deploy, recast, target_margin))
        per.append({"race_id": r.race_id, "margin": r.margin_fraction, "blank": r.blank_fraction,
                    "status": res.status, "success_star": res.success})
    mean_blank = math.fsum(r.blank_fraction for r in races) / len(races) if races else 0.0
    votes = sum(r.total_votes for r in races)
    weighted = math.fsum(r.blank_fraction * r.total_votes for r in races) / votes if votes else 0.0
    if not state and not (isinstance(source, str) and "\n" in source):
        state = Path(source).stem
    return RaceReport(state, len(races), under, mean_blank, weighted, per)
