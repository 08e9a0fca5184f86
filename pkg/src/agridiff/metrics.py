"""FID and Inception Score over features of a trained classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .nets import Classifier

FEATURE_DIM = 256
MIN_EXTRACTOR_ACCURACY = 0.9
LOG_FLOOR = 1e-12


class NumericsError(ArithmeticError):
    pass


class UntrainedExtractorError(ValueError):
    pass


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        d = self.mu.shape[0]
        if self.mu.ndim != 1 or self.sigma.shape != (d, d):
            raise ValueError(f"inconsistent shapes mu {self.mu.shape}, sigma {self.sigma.shape}")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-9, rtol=0):
            raise ValueError("covariance is not symmetric")
        if self.n < 2:
            raise ValueError("need at least two samples")

    @classmethod
    def from_features(cls, feats) -> "FeatureStats":
        f = np.asarray(feats, dtype=np.float64)
        if f.ndim != 2 or len(f) < 2:
            raise ValueError("features must be [n >= 2, d]")
        sigma = np.cov(f, rowvar=False, ddof=1)
        return cls(f.mean(0), 0.5 * (sigma + sigma.T), len(f))

    def to_dict(self) -> dict:
        return {"n": self.n, "dim": int(self.mu.shape[0]), "mean_norm": float(np.linalg.norm(self.mu)),
                "trace_cov": float(np.trace(self.sigma))}


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min(initial=0.0) < -1e-6:
        raise NumericsError(f"{what} has eigenvalue {w.min():.3g} below -1e-6")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(real: FeatureStats, gen: FeatureStats) -> float:
    """Frechet distance between two Gaussian feature fits.

    The trace of (S1 S2)^1/2 is taken from the eigenvalues of the symmetric
    product S1^1/2 S2 S1^1/2, which shares its spectrum.
    """
    if real.mu.shape != gen.mu.shape:
        raise ValueError(f"feature dimension mismatch: {real.mu.shape[0]} vs {gen.mu.shape[0]}")
    diff = real.mu - gen.mu
    s1 = _psd_sqrt(real.sigma, "real covariance")
    _psd_sqrt(gen.sigma, "generated covariance")
    prod = s1 @ gen.sigma @ s1
    w = np.linalg.eigvalsh(0.5 * (prod + prod.T))
    if w.min(initial=0.0) < -1e-6:
        raise NumericsError(f"covariance product has eigenvalue {w.min():.3g} below -1e-6")
    tr_covmean = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    val = float(diff @ diff + np.trace(real.sigma) + np.trace(gen.sigma) - 2.0 * tr_covmean)
    return max(val, 0.0)


def _check_simplex(p: np.ndarray) -> None:
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("probabilities must be a non-empty [n, C] array")
    if (p < 0).any() or not np.allclose(p.sum(1), 1.0, atol=1e-9, rtol=0):
        raise ValueError("probability rows must be non-negative and sum to 1")


def inception_score(p, splits: int = 10) -> tuple[float, float]:
    """Mean and std over splits of exp(E_x KL(p(y|x) || p(y))); the last split takes the remainder."""
    p = np.asarray(p, dtype=np.float64)
    _check_simplex(p)
    if splits < 1:
        raise ValueError("splits must be >= 1")
    n = len(p)
    if splits > n:
        raise ValueError(f"{splits} splits for {n} rows")
    size = n // splits
    scores = []
    for i in range(splits):
        part = p[i * size:(i + 1) * size if i < splits - 1 else n]
        marg = part.mean(0)
        kl = (part * (np.log(np.maximum(part, LOG_FLOOR)) - np.log(np.maximum(marg, LOG_FLOOR)))).sum(1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


def check_extractor(meta: dict) -> None:
    acc = meta.get("accuracy")
    if acc is None or acc < MIN_EXTRACTOR_ACCURACY:
        raise UntrainedExtractorError(
            f"feature extractor accuracy {acc} below required {MIN_EXTRACTOR_ACCURACY}")


@torch.no_grad()
def _batched(fn, images, batch_size):
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32) if not torch.is_tensor(images) else images.float()
    if x.ndim == 3:
        x = x[None]
    return torch.cat([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]).double().numpy()


def extract_features(classifier: Classifier, images, meta: dict | None = None, batch_size: int = 128) -> np.ndarray:
    """Penultimate 256-d features in eval mode. ``meta`` is the checkpoint metadata gate."""
    if meta is not None:
        check_extractor(meta)
    classifier.eval()
    return _batched(classifier.features, images, batch_size)


def class_probabilities(classifier: Classifier, images, meta: dict | None = None, batch_size: int = 128) -> np.ndarray:
    if meta is not None:
        check_extractor(meta)
    classifier.eval()
    return _batched(lambda x: torch.softmax(classifier(x).double(), 1), images, batch_size)
