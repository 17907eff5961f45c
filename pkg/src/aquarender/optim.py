"""Rectified Adam and the PSNR-based early-stopping controller."""

import copy
from dataclasses import dataclass, field

import numpy as np


class RAdam:
    """Rectified Adam over named parameter blocks.

    Moments are exponential moving averages with bias correction; the
    per-parameter adaptive step is enabled only once the variance-rectification
    term rho_t exceeds 4, otherwise the update is plain bias-corrected momentum.
    """

    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """Update `params` (dict of arrays) in place from matching `grads`."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient in parameter block {name!r}")
            if params[name].shape != g.shape:
                raise ValueError(f"gradient shape mismatch for block {name!r}")
        self.t += 1
        t, b1, b2 = self.t, self.beta1, self.beta2
        rho_inf = 2.0 / (1.0 - b2) - 1.0
        b2t = b2**t
        rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            m_hat = m / (1.0 - b1**t)
            if rho_t > 4.0:
                r_t = np.sqrt(
                    ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
                )
                v_hat = np.sqrt(v / (1.0 - b2t))
                params[name] -= self.lr * r_t * m_hat / (v_hat + self.eps)
            else:
                params[name] -= self.lr * m_hat
        return params


def radam_step(state, params, grads):
    """Single functional step; `state` is a RAdam instance carrying (t, m, v)."""
    return state.step(params, grads)


@dataclass
class EarlyStopState:
    """Halt when validation PSNR drops below the best seen; keeps the best params."""

    interval: int = 2000
    best_psnr: float = -np.inf
    best_iteration: int = 0
    best_params: dict = field(default=None, repr=False)
    halted: bool = False

    def check(self, iteration, validation_psnr, params=None):
        """Returns True when training should halt. Call at multiples of `interval`."""
        if self.interval <= 0:
            raise ValueError("early-stop interval must be positive")
        if iteration % self.interval != 0:
            raise ValueError(f"early-stop check at iteration {iteration} is not a multiple of {self.interval}")
        if validation_psnr < self.best_psnr:
            self.halted = True
            return True
        self.best_psnr = validation_psnr
        self.best_iteration = iteration
        if params is not None:
            self.best_params = copy.deepcopy(params)
        return False
