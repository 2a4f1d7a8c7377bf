"""JumpReLU sparse autoencoder: encode/decode/loss, training, planted-feature validation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .model import ActivationRecord, NumericalError

log = logging.getLogger(__name__)


@dataclass
class SAEParams:
    W_enc: np.ndarray  # (d_model, d_sae)
    b_enc: np.ndarray  # (d_sae,)
    threshold: np.ndarray  # (d_sae,), >= 0
    W_dec: np.ndarray  # (d_sae, d_model)
    b_dec: np.ndarray  # (d_model,)
    layer: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def d_model(self) -> int:
        return self.W_enc.shape[0]

    @property
    def d_sae(self) -> int:
        return self.W_enc.shape[1]

    def direction(self, j: int) -> np.ndarray:
        """Unit-normalized decoder row ``j`` (the latent's direction in residual space)."""
        row = self.W_dec[j].astype(np.float64)
        return row / np.linalg.norm(row)


@dataclass
class SAETrainConfig:
    l0_coef: float = 0.05  # lambda
    bandwidth: float | None = None  # epsilon; None -> 0.001 * activation scale
    lr: float = 2e-3
    steps: int = 3000
    batch: int = 256
    seed: int = 0
    expansion: int = 8
    threshold_init: float = 0.001

    def __post_init__(self):
        if self.l0_coef < 0:
            raise ValueError("l0_coef must be >= 0")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")


def jumprelu(z, threshold):
    """``z * H(z - threshold)`` with H(0) = 0: a latent must strictly exceed its threshold."""
    z = np.asarray(z, dtype=np.float64)
    return np.where(z > threshold, z, 0.0)


def encode(x, sae: SAEParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return jumprelu(x @ sae.W_enc.astype(np.float64) + sae.b_enc, sae.threshold)


def decode(a, sae: SAEParams) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) @ sae.W_dec.astype(np.float64) + sae.b_dec


def sae_loss(x, sae: SAEParams, l0_coef: float):
    """(total, reconstruction, l0) for one vector, or batch means for a matrix."""
    if l0_coef < 0:
        raise ValueError("l0_coef must be >= 0")
    a = encode(x, sae)
    err = np.asarray(x, dtype=np.float64) - decode(a, sae)
    recon = np.sum(err**2, axis=-1)
    l0 = np.count_nonzero(a, axis=-1).astype(np.float64)
    total = recon + l0_coef * l0
    if np.ndim(total):
        return float(total.mean()), float(recon.mean()), float(l0.mean())
    return float(total), float(recon), float(l0)


class _JumpReLU(torch.autograd.Function):
    """Exact gradient to z on active latents; rectangle-kernel pseudo-gradient to the threshold."""

    @staticmethod
    def forward(ctx, z, threshold, bandwidth):
        ctx.save_for_backward(z, threshold)
        ctx.bandwidth = bandwidth
        return z * (z > threshold).to(z.dtype)

    @staticmethod
    def backward(ctx, grad):
        z, threshold = ctx.saved_tensors
        eps = ctx.bandwidth
        kernel = ((z - threshold).abs() < eps / 2).to(z.dtype)
        grad_z = grad * (z > threshold).to(z.dtype)
        grad_theta = (-(threshold / eps) * kernel * grad).sum(0)
        return grad_z, grad_theta, None


class _Step(torch.autograd.Function):
    """H(z - threshold), with a pseudo-gradient to the threshold only."""

    @staticmethod
    def forward(ctx, z, threshold, bandwidth):
        ctx.save_for_backward(z, threshold)
        ctx.bandwidth = bandwidth
        return (z > threshold).to(z.dtype)

    @staticmethod
    def backward(ctx, grad):
        z, threshold = ctx.saved_tensors
        eps = ctx.bandwidth
        kernel = ((z - threshold).abs() < eps / 2).to(z.dtype)
        return torch.zeros_like(z), (-(1.0 / eps) * kernel * grad).sum(0), None


def training_loss(params: dict[str, torch.Tensor], x: torch.Tensor, l0_coef: float, bandwidth: float):
    """Batch-mean training objective; returns (total, reconstruction, l0) tensors."""
    z = x @ params["W_enc"] + params["b_enc"]
    a = _JumpReLU.apply(z, params["threshold"], bandwidth)
    recon = ((x - (a @ params["W_dec"] + params["b_dec"])) ** 2).sum(-1).mean()
    l0 = _Step.apply(z, params["threshold"], bandwidth).sum(-1).mean()
    return recon + l0_coef * l0, recon, l0


def _as_matrix(records) -> tuple[np.ndarray, int]:
    if isinstance(records, np.ndarray):
        return records.astype(np.float32), -1
    records = list(records)
    if not records:
        raise ValueError("train_sae needs at least one record")
    layers = {r.layer for r in records}
    if len(layers) != 1:
        raise ValueError(f"records span several layers: {sorted(layers)}")
    return np.stack([r.vector for r in records]).astype(np.float32), layers.pop()


def init_sae_params(d_model: int, config: SAETrainConfig, data_mean: np.ndarray | None = None) -> dict[str, torch.Tensor]:
    gen = torch.Generator().manual_seed(config.seed)
    d_sae = config.expansion * d_model
    W_dec = torch.randn(d_sae, d_model, generator=gen)
    W_dec /= W_dec.norm(dim=1, keepdim=True)
    b_dec = torch.zeros(d_model) if data_mean is None else torch.as_tensor(data_mean, dtype=torch.float32)
    return {
        "W_enc": W_dec.T.clone(),
        "b_enc": torch.zeros(d_sae),
        "threshold": torch.full((d_sae,), config.threshold_init),
        "W_dec": W_dec,
        "b_dec": b_dec,
    }


def train_sae(records: Sequence[ActivationRecord] | np.ndarray, config: SAETrainConfig, layer: int | None = None) -> SAEParams:
    """Fit a JumpReLU SAE with Adam; decoder rows are renormalized after every step."""
    X, rec_layer = _as_matrix(records)
    layer = rec_layer if layer is None else layer
    scale = float(np.sqrt((X**2).sum(1).mean() / X.shape[1]))  # rms per coordinate
    eps = config.bandwidth if config.bandwidth is not None else 0.001 * scale
    params = init_sae_params(X.shape[1], config, X.mean(0))
    for p in params.values():
        p.requires_grad_(True)
    opt = torch.optim.Adam(params.values(), lr=config.lr)
    data = torch.as_tensor(X)
    rng = np.random.default_rng(config.seed)
    history = []
    for step in range(config.steps):
        idx = torch.as_tensor(rng.integers(0, len(X), size=config.batch))
        total, recon, l0 = training_loss(params, data[idx], config.l0_coef, eps)
        if not torch.isfinite(total):
            raise NumericalError(f"SAE loss diverged at step {step}")
        opt.zero_grad()
        total.backward()
        opt.step()
        with torch.no_grad():
            params["W_dec"] /= params["W_dec"].norm(dim=1, keepdim=True).clamp_min(1e-12)
            params["threshold"].clamp_(min=0.0)
        history.append((recon.item(), l0.item()))
        if step % 1000 == 0 or step == config.steps - 1:
            log.info("sae layer %s step %d recon %.4f l0 %.2f", layer, step, history[-1][0], history[-1][1])
    out = {k: v.detach().numpy().astype(np.float32) for k, v in params.items()}
    meta = {"layer": layer, "lambda": config.l0_coef, "epsilon": eps, "seed": config.seed,
            "steps": config.steps, "lr": config.lr}
    sae = SAEParams(out["W_enc"], out["b_enc"], out["threshold"], out["W_dec"], out["b_dec"], layer, meta)
    sae.meta["history"] = history
    return sae


@dataclass
class PlantedDictionary:
    features: np.ndarray  # (n_true, d_model), unit rows
    probs: np.ndarray  # (n_true,)
    mag_low: float = 1.0
    mag_high: float = 2.0
    noise_std: float = 0.0

    def __post_init__(self):
        if not np.allclose(np.linalg.norm(self.features, axis=1), 1.0, atol=1e-6):
            raise ValueError("planted features must be unit vectors")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ValueError("firing probabilities must lie in [0, 1]")

    @classmethod
    def random(cls, d_model: int, n_true: int, prob: float, seed: int = 0, **kw) -> "PlantedDictionary":
        rng = np.random.default_rng(seed)
        f = rng.standard_normal((n_true, d_model))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        return cls(f, np.full(n_true, prob), **kw)


def generate_superposition_data(planted: PlantedDictionary, n: int, seed: int = 0):
    """Samples that are sparse nonnegative combinations of the planted features plus noise.

    Returns (activations (n, d_model), codes (n, n_true)).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    k, d = planted.features.shape
    fired = rng.random((n, k)) < planted.probs
    mags = rng.uniform(planted.mag_low, planted.mag_high, size=(n, k))
    codes = np.where(fired, mags, 0.0)
    X = codes @ planted.features
    if planted.noise_std > 0:
        X = X + rng.normal(0.0, planted.noise_std, size=X.shape)
    return X, codes


@dataclass
class FeatureMatch:
    mean_abs_cos: float
    assignment: dict[int, int]  # true feature -> learned latent
    cosines: dict[int, float]


def match_features(learned: SAEParams | np.ndarray, planted: PlantedDictionary | np.ndarray) -> FeatureMatch:
    """Greedy one-to-one matching by |cosine| between decoder rows and true features."""
    L = learned.W_dec if isinstance(learned, SAEParams) else np.asarray(learned)
    T = planted.features if isinstance(planted, PlantedDictionary) else np.asarray(planted)
    if len(L) == 0 or len(T) == 0:
        raise ValueError("dictionaries must be nonempty")
    Ln = L / np.linalg.norm(L, axis=1, keepdims=True)
    Tn = T / np.linalg.norm(T, axis=1, keepdims=True)
    C = np.abs(Tn @ Ln.T)
    order = np.argsort(-C, axis=None, kind="stable")
    assignment: dict[int, int] = {}
    used: set[int] = set()
    for flat in order:
        i, j = divmod(int(flat), C.shape[1])
        if i in assignment or j in used:
            continue
        assignment[i] = j
        used.add(j)
        if len(assignment) == min(C.shape):
            break
    cosines = {i: float(C[i, j]) for i, j in assignment.items()}
    # unmatched true features (more true than learned) count as zero
    mean = float(sum(cosines.values()) / len(T))
    return FeatureMatch(mean, dict(sorted(assignment.items())), cosines)
