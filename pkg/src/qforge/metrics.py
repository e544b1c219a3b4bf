"""Append-only CSV metrics sink for training runs."""

from __future__ import annotations

import csv
from dataclasses import dataclass

HEADER = [
    "episode",
    "total_reward",
    "mean_loss",
    "epsilon",
    "steps",
    "env_time_s",
    "step_time_ms",
    "eval_avg_reward",
    "loss_mode",
]


@dataclass
class MetricsRow:
    episode: int
    total_reward: float
    mean_loss: float | None
    epsilon: float
    steps: int
    env_time_s: float
    step_time_ms: float | None
    eval_avg_reward: float | None
    loss_mode: str

    def as_record(self) -> list:
        def num(x):
            return "" if x is None else repr(float(x))

        return [
            str(self.episode),
            num(self.total_reward),
            num(self.mean_loss),
            num(self.epsilon),
            str(self.steps),
            num(self.env_time_s),
            num(self.step_time_ms),
            num(self.eval_avg_reward),
            self.loss_mode,
        ]


class CsvMetricsWriter:
    """Writes rows as they arrive; flushed per row so tails are inspectable."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(HEADER)
        self._last_episode = 0

    def write(self, row: MetricsRow):
        if row.episode <= self._last_episode:
            raise ValueError(
                f"episodes must strictly increase: {row.episode} after {self._last_episode}"
            )
        self._last_episode = row.episode
        self._writer.writerow(row.as_record())
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
