"""Trial samples and their summary statistics (microseconds throughout)."""

from __future__ import annotations

import enum
import math
from collections.abc import Iterable
from dataclasses import asdict, dataclass

from ..errors import EmptyInputError


class Outcome(enum.Enum):
    OK = "ok"
    TIMEOUT = "timeout"
    ERROR = "error"


@dataclass(frozen=True)
class LatencySample:
    trial: int
    latency_us: int | None
    outcome: Outcome = Outcome.OK
    started_us: int | None = None
    detail: str = ""

    def __post_init__(self) -> None:
        if self.outcome is Outcome.OK:
            if self.latency_us is None or self.latency_us < 0:
                raise ValueError(f"trial {self.trial}: Ok sample needs a latency >= 0")
        elif self.latency_us is not None:
            raise ValueError(f"trial {self.trial}: only Ok samples carry a latency")


@dataclass(frozen=True)
class LatencyStats:
    count: int
    mean: float
    median: float
    p95: float
    p99: float
    min: float
    max: float
    stddev: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> LatencyStats:
        return cls(
            count=int(raw["count"]),
            **{k: float(raw[k]) for k in ("mean", "median", "p95", "p99", "min", "max", "stddev")},
        )


def nearest_rank(ordered: list, percent: int) -> float:
    """Smallest value with at least ``percent``% of the data at or below it."""
    n = len(ordered)
    rank = max(1, -(-percent * n // 100))  # ceil without float rounding
    return ordered[rank - 1]


def compute_stats(samples: Iterable[LatencySample] | Iterable[float]) -> LatencyStats:
    """Summarise the Ok samples.

    Mean and population standard deviation use compensated summation;
    median, p95 and p99 are nearest-rank values of the sorted latencies.
    Plain numbers are accepted as already-Ok latencies.
    """
    values = []
    for s in samples:
        if isinstance(s, LatencySample):
            if s.outcome is Outcome.OK:
                values.append(s.latency_us)
        else:
            values.append(s)
    if not values:
        raise EmptyInputError("no Ok samples to summarise")
    values.sort()
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return LatencyStats(
        count=n,
        mean=mean,
        median=float(nearest_rank(values, 50)),
        p95=float(nearest_rank(values, 95)),
        p99=float(nearest_rank(values, 99)),
        min=float(values[0]),
        max=float(values[-1]),
        stddev=math.sqrt(var),
    )
