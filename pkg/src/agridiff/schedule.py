"""Noise schedules and the Gaussian forward/reverse diffusion kernels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with 1-based step indexing (t in 1..T).

    Only the descriptor ``(T, beta_start, beta_end, family)`` is persisted;
    the arrays are regenerated from it.
    """

    T: int
    beta_start: float
    beta_end: float
    family: str = "linear"
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family != "linear":
            raise ValueError(f"unsupported schedule family {self.family!r}")
        if not isinstance(self.T, (int, np.integer)) or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T!r}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )
        betas = np.linspace(self.beta_start, self.beta_end, int(self.T), dtype=np.float64)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for name, arr in (("betas", betas), ("alphas", alphas), ("alpha_bars", alpha_bars)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def descriptor(self) -> dict:
        return {"T": int(self.T), "beta_start": float(self.beta_start),
                "beta_end": float(self.beta_end), "family": self.family}

    @classmethod
    def from_descriptor(cls, d: dict) -> "NoiseSchedule":
        return cls(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]), d.get("family", "linear"))

    def check_step(self, t) -> None:
        tt = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
        if tt.size == 0 or tt.min() < 1 or tt.max() > self.T:
            raise IndexError(f"step index out of range 1..{self.T}: {t}")

    def _coef(self, arr: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
        """Gather ``arr[t-1]`` and broadcast against a batch-first tensor."""
        self.check_step(t)
        if isinstance(t, torch.Tensor) and t.ndim == 1:
            c = torch.tensor(arr, dtype=like.dtype)[t.long() - 1]
            return c.view(-1, *([1] * (like.ndim - 1)))
        return torch.tensor(arr[int(t) - 1], dtype=like.dtype)

    def snr(self) -> np.ndarray:
        return self.alpha_bars / (1.0 - self.alpha_bars)


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    return NoiseSchedule(T, beta_start, beta_end)


def default_schedule(T: int = 50) -> NoiseSchedule:
    """Desk-scale schedule; endpoints rescaled from the usual 1000-step values."""
    return make_linear_schedule(T, 1e-4 * 1000 / T, 0.02 * 1000 / T)


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_sample(x0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Closed-form marginal q(x_t | x_0). ``t`` is an int or a per-item tensor."""
    _check_shapes(x0, eps)
    ab = s._coef(s.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def forward_step(x_prev: torch.Tensor, t, eps_t: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """One transition of the forward chain q(x_t | x_{t-1})."""
    _check_shapes(x_prev, eps_t)
    b = s._coef(s.betas, t, x_prev)
    return (1.0 - b).sqrt() * x_prev + b.sqrt() * eps_t


def reverse_step(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor, s: NoiseSchedule,
                 noise: torch.Tensor | None = None) -> torch.Tensor:
    """Ancestral update x_t -> x_{t-1} with fixed variance beta_t."""
    _check_shapes(x_t, eps_hat)
    s.check_step(t)
    t = int(t)
    if noise is None:
        noise = torch.zeros_like(x_t)
    _check_shapes(x_t, noise)
    if t == 1 and bool(torch.any(noise != 0)):
        raise ValueError("noise must be zero at the final step t=1")
    beta = float(s.betas[t - 1])
    alpha = float(s.alphas[t - 1])
    ab = float(s.alpha_bars[t - 1])
    mean = (x_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    return mean + np.sqrt(beta) * noise
