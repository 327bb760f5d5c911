"""Signal representation model: convolutional encoder, residual vector
quantizer, and decoder, trained with an MSE reconstruction objective.

The encoder downsamples by ``prod(strides)`` (ratio R), so a signal of length
T becomes F = ceil(T / R) latent frames of width ``latent_dim``; inputs are
zero right-padded to a multiple of R and decoder output is cropped back to T.
The quantizer runs ``n_codebooks`` residual stages; each stage picks the
nearest codebook entry to the running residual. Entry 0 of every stage is
pinned to the zero vector so a stage can abstain — this makes the per-stage
residual norms non-increasing for any input, trained or not. Codebooks learn
by exponential-moving-average updates with straight-through gradients and a
commitment penalty on the encoder side; entries unused for a whole epoch are
re-seeded from recent latents.

``n_codebooks = 0`` bypasses quantization entirely (plain autoencoder), which
is also the configuration used for finite-difference gradient checks.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn

from . import checkpoint
from .errors import DimensionError, ParameterError, StateError, TrainingError
from .seeding import derive_seed, rng_from_seed
from .signals import Signal

CODEC_MAGIC = b"ICLCDC01"


@dataclass(frozen=True)
class CodecConfig:
    strides: tuple[int, ...] = (4, 4, 4)
    channels: tuple[int, ...] = (32, 64, 128)  # per-stage widths, one per stride
    latent_dim: int = 64
    n_codebooks: int = 4
    codebook_size: int = 1024
    commitment_weight: float = 0.25
    ema_decay: float = 0.99
    learning_rate: float = 3e-4
    batch_size: int = 32
    epochs: int = 30
    num_threads: int | None = None  # None: leave torch's default; 1 for bit-reproducibility

    def __post_init__(self):
        if len(self.strides) == 0 or any(s < 2 for s in self.strides):
            raise ParameterError(f"strides must be >= 2, got {self.strides}")
        if len(self.channels) != len(self.strides):
            raise ParameterError("need one channel width per stride")
        if self.n_codebooks < 0:
            raise ParameterError("n_codebooks must be >= 0 (0 bypasses quantization)")
        if self.codebook_size < 2:
            raise ParameterError("codebook_size must be >= 2")
        if self.latent_dim < 1:
            raise ParameterError("latent_dim must be >= 1")

    @property
    def downsample_ratio(self) -> int:
        return int(np.prod(self.strides))

    def frame_count(self, length: int) -> int:
        return -(-length // self.downsample_ratio)

    @classmethod
    def paper_scale(cls) -> "CodecConfig":
        return cls(strides=(4, 4, 4, 5), channels=(32, 64, 96, 128),
                   latent_dim=128, n_codebooks=8)


@dataclass(frozen=True)
class TokenSequence:
    """Quantized latent frames for one signal."""

    indices: np.ndarray  # (F, n_codebooks) int64
    latents: np.ndarray  # (F, latent_dim) float32
    original_length: int
    scale: float = 1.0

    def __post_init__(self):
        if self.latents.ndim != 2:
            raise DimensionError("latents must be (frames, latent_dim)")
        if self.indices.shape[0] != self.latents.shape[0]:
            raise DimensionError("indices and latents disagree on frame count")

    @property
    def frames(self) -> int:
        return self.latents.shape[0]


# --- torch modules ----------------------------------------------------------


class _ResidualUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv3 = nn.Conv1d(channels, channels, 3, padding=1)
        self.conv1 = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        return x + self.conv1(torch.nn.functional.elu(self.conv3(torch.nn.functional.elu(x))))


def _down_args(stride: int) -> dict:
    return dict(kernel_size=2 * stride, stride=stride, padding=(stride + 1) // 2)


class _Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv1d(1, cfg.channels[0], 7, padding=3)]
        in_ch = cfg.channels[0]
        for stride, out_ch in zip(cfg.strides, cfg.channels):
            layers += [_ResidualUnit(in_ch), nn.ELU(), nn.Conv1d(in_ch, out_ch, **_down_args(stride))]
            in_ch = out_ch
        layers += [nn.ELU(), nn.Conv1d(in_ch, cfg.latent_dim, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):  # (B, 1, T') -> (B, D, F)
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv1d(cfg.latent_dim, cfg.channels[-1], 3, padding=1)]
        in_ch = cfg.channels[-1]
        stages = list(zip(cfg.strides, cfg.channels))
        for i, (stride, _) in reversed(list(enumerate(stages))):
            out_ch = cfg.channels[i - 1] if i > 0 else cfg.channels[0]
            args = _down_args(stride)
            layers += [
                nn.ELU(),
                nn.ConvTranspose1d(in_ch, out_ch, output_padding=stride % 2, **args),
                _ResidualUnit(out_ch),
            ]
            in_ch = out_ch
        layers += [nn.ELU(), nn.Conv1d(in_ch, 1, 7, padding=3)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):  # (B, D, F) -> (B, 1, T')
        return self.net(z)


class _ResidualVQ(nn.Module):
    """Multi-stage nearest-neighbour quantizer with EMA codebook updates.

    Entry 0 of each stage is a frozen zero vector (abstention code).
    """

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.n_codebooks = cfg.n_codebooks
        self.codebook_size = cfg.codebook_size
        self.dim = cfg.latent_dim
        self.decay = cfg.ema_decay
        self.eps = 1e-5
        n, k, d = cfg.n_codebooks, cfg.codebook_size, cfg.latent_dim
        self.register_buffer("codebooks", torch.zeros(n, k, d))
        self.register_buffer("ema_counts", torch.zeros(n, k))
        self.register_buffer("ema_sums", torch.zeros(n, k, d))
        self.register_buffer("usage", torch.zeros(n, k, dtype=torch.long))
        self.register_buffer("epoch_usage", torch.zeros(n, k, dtype=torch.long))
        self.register_buffer("stage_ready", torch.zeros(n, dtype=torch.bool))
        self._reservoir: list[torch.Tensor | None] = [None] * n

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Quantize (N, D) vectors; returns (quantized_ste, indices, commitment)."""
        residual = z.detach()
        quantized = torch.zeros_like(residual)
        index_stages = []
        for t in range(self.n_codebooks):
            if self.training and not bool(self.stage_ready[t]):
                self._init_stage(t, residual)
            book = self.codebooks[t]
            d2 = (
                residual.pow(2).sum(1, keepdim=True)
                - 2.0 * residual @ book.t()
                + book.pow(2).sum(1)
            )
            idx = d2.argmin(1)
            picked = book[idx]
            if self.training:
                self._ema_update(t, residual, idx)
                self._reservoir[t] = residual.detach()
            quantized = quantized + picked
            residual = residual - picked
            index_stages.append(idx)
        indices = (
            torch.stack(index_stages, dim=1)
            if index_stages
            else torch.zeros(z.shape[0], 0, dtype=torch.long, device=z.device)
        )
        commitment = torch.nn.functional.mse_loss(z, quantized.detach())
        quantized_ste = z + (quantized - z).detach()
        return quantized_ste, indices, commitment

    def _init_stage(self, t: int, residual: torch.Tensor) -> None:
        """Seed stage t from the first training batch (entry 0 stays zero).

        Uses the global torch RNG, which the trainer seeds deterministically.
        """
        k = self.codebook_size
        pts = residual
        if pts.shape[0] >= k - 1:
            perm = torch.randperm(pts.shape[0])[: k - 1]
            init = pts[perm].clone()
        else:
            reps = -(-(k - 1) // pts.shape[0])
            tiled = pts.repeat(reps, 1)[: k - 1]
            init = tiled + 1e-3 * torch.randn(tiled.shape)
        self.codebooks[t, 1:] = init
        self.ema_counts[t, 1:] = 1.0
        self.ema_sums[t, 1:] = init
        self.stage_ready[t] = True

    def _ema_update(self, t: int, residual: torch.Tensor, idx: torch.Tensor) -> None:
        k = self.codebook_size
        onehot = torch.nn.functional.one_hot(idx, k).to(residual.dtype)
        counts = onehot.sum(0)
        sums = onehot.t() @ residual
        self.ema_counts[t].mul_(self.decay).add_(counts, alpha=1 - self.decay)
        self.ema_sums[t].mul_(self.decay).add_(sums, alpha=1 - self.decay)
        n = self.ema_counts[t].sum()
        smoothed = (self.ema_counts[t] + self.eps) / (n + k * self.eps) * n
        self.codebooks[t] = self.ema_sums[t] / smoothed.unsqueeze(1)
        self.codebooks[t, 0] = 0.0  # abstention entry stays pinned
        self.usage[t] += counts.long()
        self.epoch_usage[t] += counts.long()

    def reseed_dead_entries(self, rng: np.random.Generator) -> int:
        """Replace entries unused this epoch with random recent latents."""
        reseeded = 0
        for t in range(self.n_codebooks):
            if not bool(self.stage_ready[t]) or self._reservoir[t] is None:
                continue
            dead = (self.epoch_usage[t] == 0).nonzero().flatten()
            dead = dead[dead != 0]  # never touch the pinned zero entry
            if dead.numel():
                pool = self._reservoir[t]
                picks = torch.as_tensor(
                    rng.integers(0, pool.shape[0], dead.numel()), dtype=torch.long
                )
                self.codebooks[t, dead] = pool[picks]
                self.ema_counts[t, dead] = 1.0
                self.ema_sums[t, dead] = pool[picks]
                reseeded += int(dead.numel())
        self.epoch_usage.zero_()
        return reseeded


class _CodecNet(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.encoder = _Encoder(cfg)
        self.quantizer = _ResidualVQ(cfg)
        self.decoder = _Decoder(cfg)


def quantize_residual(
    codebooks: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual-quantize one vector against (n_stages, K, D) codebooks.

    Returns (stage indices, quantized sum, residual norms before each stage
    and after the last — a non-increasing sequence).
    """
    codebooks = np.asarray(codebooks, dtype=np.float64)
    if codebooks.ndim != 3:
        raise DimensionError("codebooks must have shape (n_stages, K, D)")
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape[0] != codebooks.shape[2]:
        raise DimensionError(
            f"vector dim {v.shape[0]} != codebook dim {codebooks.shape[2]}"
        )
    residual = v.copy()
    quantized = np.zeros_like(v)
    indices = np.empty(codebooks.shape[0], dtype=np.int64)
    norms = [float(np.linalg.norm(residual))]
    for t, book in enumerate(codebooks):
        idx = int(np.argmin(((residual - book) ** 2).sum(axis=1)))
        indices[t] = idx
        quantized += book[idx]
        residual -= book[idx]
        norms.append(float(np.linalg.norm(residual)))
    return indices, quantized, np.array(norms)


# --- estimator ---------------------------------------------------------------


class SignalCodec(BaseEstimator):
    """Sklearn-style estimator wrapping the encoder/quantizer/decoder stack.

    ``fit`` trains on a matrix of equal-length signals (rows); ``transform``
    maps signals to quantized latent frames and ``inverse_transform`` maps
    latents back to signals. ``encode``/``decode`` are the Signal-level
    equivalents.
    """

    def __init__(self, config: CodecConfig = CodecConfig(), seed: int = 0):
        self.config = config
        self.seed = seed
        self._net: _CodecNet | None = None
        self.loss_curve_: list[float] | None = None
        self.training_seconds_: float | None = None

    # -- state ----------------------------------------------------------------

    @property
    def is_fitted(self) -> bool:
        return self._net is not None and self.loss_curve_ is not None

    def _require_fitted(self) -> _CodecNet:
        if not self.is_fitted:
            raise StateError("codec is untrained; call fit() or load a checkpoint")
        assert self._net is not None
        return self._net

    @property
    def codebooks(self) -> np.ndarray:
        net = self._require_fitted()
        return net.quantizer.codebooks.detach().cpu().numpy().copy()

    @property
    def codebook_usage(self) -> np.ndarray:
        net = self._require_fitted()
        return net.quantizer.usage.detach().cpu().numpy().copy()

    def init_random(self) -> "SignalCodec":
        """Build a randomly initialized (never trained) but usable network.

        Exists for numeric smoke tests and as the starting point of joint
        training; regular use goes through :meth:`fit`.
        """
        torch.manual_seed(derive_seed(self.seed, "codec-init"))
        net = _CodecNet(self.config)
        net.eval()
        self._net = net
        self.loss_curve_ = []
        return self

    # -- training ---------------------------------------------------------------

    def fit(self, X, X_val=None) -> "SignalCodec":
        """Train on rows of equal-length signals (array or list of Signals)."""
        cfg = self.config
        if cfg.num_threads is not None:
            torch.set_num_threads(cfg.num_threads)
        X = _as_matrix(X)
        if X.shape[1] < cfg.downsample_ratio:
            raise ParameterError(
                f"signal length {X.shape[1]} shorter than downsample ratio {cfg.downsample_ratio}"
            )
        torch.manual_seed(derive_seed(self.seed, "codec-init"))
        net = _CodecNet(cfg)
        net.train()
        params = list(net.encoder.parameters()) + list(net.decoder.parameters())
        opt = torch.optim.Adam(params, lr=cfg.learning_rate)
        n_batches = max(1, X.shape[0] // cfg.batch_size)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=max(1, cfg.epochs * n_batches)
        )
        order_rng = rng_from_seed(derive_seed(self.seed, "codec-batches"))
        reseed_rng = rng_from_seed(derive_seed(self.seed, "codec-reseed"))
        data = torch.from_numpy(_pad_to_multiple(X, cfg.downsample_ratio))
        target = torch.from_numpy(X)

        start = time.time()
        self.loss_curve_ = []
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(X.shape[0])
            epoch_loss = 0.0
            for b in range(n_batches):
                rows = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = data[rows].unsqueeze(1)
                opt.zero_grad()
                z = net.encoder(batch)  # (B, D, F)
                flat = z.transpose(1, 2).reshape(-1, cfg.latent_dim)
                if cfg.n_codebooks > 0:
                    q, _, commitment = net.quantizer(flat)
                else:
                    q, commitment = flat, torch.zeros((), dtype=z.dtype)
                q = q.reshape(z.shape[0], -1, cfg.latent_dim).transpose(1, 2)
                recon = net.decoder(q)[:, 0, : X.shape[1]]
                loss = torch.nn.functional.mse_loss(recon, target[rows])
                loss = loss + cfg.commitment_weight * commitment
                if not torch.isfinite(loss):
                    raise TrainingError("codec loss diverged", epoch)
                loss.backward()
                opt.step()
                sched.step()
                epoch_loss += float(loss.detach())
            if cfg.n_codebooks > 0:
                net.quantizer.reseed_dead_entries(reseed_rng)
            self.loss_curve_.append(epoch_loss / n_batches)
        net.eval()
        self._net = net
        self.training_seconds_ = time.time() - start
        return self

    # -- inference ---------------------------------------------------------------

    def encode(self, s: Signal) -> TokenSequence:
        """Map a normalized signal to quantized latent frames."""
        net = self._require_fitted()
        if np.max(np.abs(s.samples)) > 1.0 + 1e-6:
            raise ParameterError("encode expects a peak-normalized signal (peak <= 1)")
        if len(s) < self.config.downsample_ratio:
            raise ParameterError(
                f"signal length {len(s)} shorter than downsample ratio "
                f"{self.config.downsample_ratio}"
            )
        latents, indices = self._encode_rows(s.samples[None, :].astype(np.float32))
        return TokenSequence(indices[0], latents[0], original_length=len(s), scale=s.scale)

    def decode(self, tokens: TokenSequence) -> Signal:
        """Reconstruct a signal from latent frames, cropped to the stored length."""
        net = self._require_fitted()
        latents = np.asarray(tokens.latents, dtype=np.float32)
        if latents.ndim != 2 or latents.shape[1] != self.config.latent_dim:
            raise DimensionError(
                f"latents must be (frames, {self.config.latent_dim}), got {latents.shape}"
            )
        max_len = latents.shape[0] * self.config.downsample_ratio
        if not 0 < tokens.original_length <= max_len:
            raise DimensionError(
                f"original_length {tokens.original_length} incompatible with "
                f"{latents.shape[0]} frames (max {max_len})"
            )
        with torch.no_grad():
            z = torch.from_numpy(latents).t().unsqueeze(0)
            out = net.decoder(z)[0, 0, : tokens.original_length].numpy()
        return Signal(out.astype(np.float64), scale=tokens.scale)

    def _encode_rows(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        net = self._require_fitted()
        cfg = self.config
        with torch.no_grad():
            x = torch.from_numpy(_pad_to_multiple(rows, cfg.downsample_ratio)).unsqueeze(1)
            z = net.encoder(x)  # (B, D, F)
            frames = z.shape[2]
            flat = z.transpose(1, 2).reshape(-1, cfg.latent_dim)
            if cfg.n_codebooks > 0:
                q, idx, _ = net.quantizer(flat)
            else:
                q = flat
                idx = torch.zeros(flat.shape[0], 0, dtype=torch.long)
            latents = q.reshape(rows.shape[0], frames, cfg.latent_dim).numpy()
            indices = idx.reshape(rows.shape[0], frames, -1).numpy()
        return latents, indices

    def transform(self, X) -> np.ndarray:
        """Quantized latents for rows of signals: (N, F, latent_dim)."""
        return self._encode_rows(_as_matrix(X))[0]

    def inverse_transform(self, Z: np.ndarray, original_length: int | None = None) -> np.ndarray:
        net = self._require_fitted()
        Z = np.asarray(Z, dtype=np.float32)
        if Z.ndim != 3 or Z.shape[2] != self.config.latent_dim:
            raise DimensionError(f"latents must be (N, F, {self.config.latent_dim})")
        with torch.no_grad():
            out = net.decoder(torch.from_numpy(Z).transpose(1, 2))[:, 0, :].numpy()
        if original_length is not None:
            out = out[:, :original_length]
        return out

    def quantize_vector(self, v: np.ndarray):
        """Residual-quantize one latent vector with the trained codebooks."""
        self._require_fitted()
        if self.config.n_codebooks == 0:
            raise StateError("codec was configured without codebooks")
        return quantize_residual(self.codebooks, v)

    # -- persistence ---------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        net = self._require_fitted()
        meta = {
            "config": dataclasses.asdict(self.config),
            "seed": self.seed,
            "loss_curve": self.loss_curve_,
            "training_seconds": self.training_seconds_,
        }
        checkpoint.save(path, CODEC_MAGIC, meta, net.state_dict())

    @classmethod
    def load(cls, path: str | Path) -> "SignalCodec":
        meta, state = checkpoint.load(path, CODEC_MAGIC)
        cfg_dict = dict(meta["config"])
        cfg_dict["strides"] = tuple(cfg_dict["strides"])
        cfg_dict["channels"] = tuple(cfg_dict["channels"])
        codec = cls(config=CodecConfig(**cfg_dict), seed=meta["seed"])
        net = _CodecNet(codec.config)
        net.load_state_dict(state)
        net.eval()
        codec._net = net
        codec.loss_curve_ = meta["loss_curve"]
        codec.training_seconds_ = meta["training_seconds"]
        return codec


def _as_matrix(X) -> np.ndarray:
    if isinstance(X, np.ndarray):
        rows = X.astype(np.float32, copy=False)
    else:
        items = list(X)
        if items and isinstance(items[0], Signal):
            lengths = {len(s) for s in items}
            if len(lengths) != 1:
                raise DimensionError("all signals must share one length")
            rows = np.stack([s.samples for s in items]).astype(np.float32)
        else:
            rows = np.asarray(items, dtype=np.float32)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ParameterError("expected a non-empty (n_signals, length) matrix")
    return rows


def _pad_to_multiple(rows: np.ndarray, multiple: int) -> np.ndarray:
    t = rows.shape[1]
    padded_len = -(-t // multiple) * multiple
    if padded_len == t:
        return np.ascontiguousarray(rows, dtype=np.float32)
    out = np.zeros((rows.shape[0], padded_len), dtype=np.float32)
    out[:, :t] = rows
    return out
