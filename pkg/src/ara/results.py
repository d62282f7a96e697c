"""Common receiver output container."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ReceiverOutput:
    H_hat: np.ndarray       # ((T+1)N, M) estimated expanded channel matrix
    omega: np.ndarray       # (N, T+1) final sparsity ratios used for decisions
    active: np.ndarray      # detected user indices (sorted)
    delays: np.ndarray      # detected delays, aligned with `active`
    iterations: int
    diagnostics: list = field(default_factory=list)  # one dict per iteration
    diverged: bool = False
