"""Per-epoch training records."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricsLog:
    """What a training run leaves behind besides the trained weights.

    ``snapshots[0]`` holds the initial parameters and ``snapshots[k]`` the
    parameters after epoch ``k`` (or after episode ``k`` for RL runs that
    record them).
    """

    snapshots: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    kd: list = field(default_factory=list)
    ce: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    step_path_length: float = 0.0
    iterations: int = 0
    seconds: float = 0.0
    episodes: list = field(default_factory=list)
    # DQN runs: final target network and how often each action was taken
    target: object = None
    action_counts: list = field(default_factory=list)

    def add_snapshot(self, params):
        self.snapshots.append(np.array(params, dtype=np.float64, copy=True))

    @property
    def num_epochs(self) -> int:
        return len(self.loss)
