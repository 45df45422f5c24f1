"""
Training Session Manager
Runs the optimisation loop of one model on one image pair and keeps the
loss history
"""

import logging
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .autodiff import OptimizerState, adam_step, backward
from .fusion import AlignmentCache, FASRModel, forward_full
from .losses import LossReport, LossWeights, psnr, total_term

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["step", "l1", "ssim_loss", "fr", "total", "psnr_db"]


class TrainingSession:
    """Adam training of every model parameter against a fixed HR target"""

    def __init__(self, model: FASRModel, weights: Optional[LossWeights] = None,
                 state: Optional[OptimizerState] = None, realign_every: int = 1, log_every: int = 50):
        """
        Initialize the session

        Args:
            model: Model to train in place
            weights: Loss weights
            state: Optimizer state (hyperparameters and moments)
            realign_every: Recompute matches and soft weights every k steps
            log_every: Log a summary every k steps
        """
        if realign_every < 1:
            raise ValueError(f"realign_every must be >= 1, got {realign_every}")
        self.model = model
        self.weights = weights or LossWeights()
        self.state = state or OptimizerState()
        self.realign_every = realign_every
        self.log_every = max(log_every, 1)
        self.cache: Optional[AlignmentCache] = None
        self.history: List[Dict[str, float]] = []

    def step(self, t2_lr: np.ndarray, ref: np.ndarray, hr: np.ndarray) -> LossReport:
        """One forward/backward/update cycle; returns the loss before the update"""
        if self.cache is None or self.state.step % self.realign_every == 0:
            self.cache = AlignmentCache()
        sr, _ = forward_full(self.model, t2_lr, ref, self.cache)
        report = total_term(sr, hr, self.weights)
        grads = backward(report.node)

        params = self.model.named_parameters()
        adam_step(params, {name: grads[p] for name, p in params.items() if p in grads}, self.state)

        row = {"step": self.state.step, **report.as_dict(), "psnr_db": psnr(sr.value, hr)}
        self.history.append(row)
        if self.state.step == 1 or self.state.step % self.log_every == 0:
            logger.info(f"step {self.state.step}: total={report.total:.6f} l1={report.l1:.6f} "
                        f"psnr={row['psnr_db']:.3f} dB")
        return report

    def run(self, t2_lr: np.ndarray, ref: np.ndarray, hr: np.ndarray, steps: int) -> pd.DataFrame:
        for _ in range(steps):
            self.step(t2_lr, ref, hr)
        return self.get_history()

    def get_history(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=HISTORY_COLUMNS)

    def get_progress(self) -> Dict[str, float]:
        if not self.history:
            return {"steps": 0}
        first, last = self.history[0], self.history[-1]
        return {
            "steps": self.state.step,
            "initial_total": first["total"],
            "final_total": last["total"],
            "loss_ratio": last["total"] / first["total"] if first["total"] > 0 else 0.0,
        }


def predict(model: FASRModel, t2_lr: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Inference with freshly computed matches"""
    sr, _ = forward_full(model, t2_lr, ref)
    return np.asarray(sr.value, dtype=np.float64)


def create_session(model: FASRModel, weights: Optional[LossWeights] = None,
                   state: Optional[OptimizerState] = None, realign_every: int = 1,
                   log_every: int = 50) -> TrainingSession:
    return TrainingSession(model, weights, state, realign_every, log_every)
