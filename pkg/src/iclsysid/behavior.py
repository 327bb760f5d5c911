"""System behavior model: one-shot prediction from a single input/output pair.

Two coupled transformer blocks operate on codec latent frames:

* the embedding block reads a learnable summary token followed by the
  frame-wise concatenation of an (x, y) pair's latents and produces a
  system embedding ``z`` at the summary-token position;
* the prediction block reads ``z`` as a prompt token followed by the query
  input's latent frames and emits predicted output latents, which the frozen
  codec decoder turns back into a signal.

Self-attention uses a learned relative-position bias (one table per block,
shared across its layers, offsets clipped to ``max_relative_offset``).

Training draws batches of B systems with two distinct pairs each: pair 1 is
embedded, pair 2 supplies both the contrastive positive and the prediction
target. The loss is signal-domain reconstruction error plus a temperature-
scaled contrastive term whose negatives are the other systems' positives in
the batch (self excluded).
"""

from __future__ import annotations

import copy
import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn
from torch.nn import functional as F

from . import checkpoint
from .codec import SignalCodec, TokenSequence
from .corpus import CorpusReader
from .errors import DimensionError, ParameterError, StateError, TrainingError
from .seeding import derive_seed, rng_from_seed
from .signals import Signal

BEHAVIOR_MAGIC = b"ICLBEH01"


@dataclass(frozen=True)
class BehaviorConfig:
    model_dim: int = 256
    n_heads: int = 4
    embed_layers: int = 4
    predict_layers: int = 4
    max_relative_offset: int = 128
    temperature: float = 0.1
    contrastive_weight: float = 1.0
    latent_loss_weight: float = 0.0  # optional auxiliary MSE on latents
    mlp_ratio: int = 4
    learning_rate: float = 1e-4
    batch_systems: int = 16
    epochs: int = 50
    val_systems: int = 48
    num_threads: int | None = None

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ParameterError(
                f"model_dim {self.model_dim} must be divisible by n_heads {self.n_heads}"
            )
        if self.temperature <= 0:
            raise ParameterError("temperature must be positive")
        if self.contrastive_weight < 0:
            raise ParameterError("contrastive_weight must be nonnegative")
        if self.batch_systems < 2:
            raise ParameterError("batch_systems must be >= 2 (in-batch negatives)")


@dataclass(frozen=True)
class SystemEmbedding:
    """Fixed-size vector summarizing one system's input/output behavior."""

    z: np.ndarray
    system_id: int | None = None  # evaluation bookkeeping only

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64).ravel()
        if not np.all(np.isfinite(z)):
            raise ParameterError("embedding must be finite")
        if np.linalg.norm(z) == 0.0:
            raise ParameterError("embedding must have nonzero norm")
        z.flags.writeable = False
        object.__setattr__(self, "z", z)


# --- similarity and losses ---------------------------------------------------


def cosine_similarity(u, v) -> float:
    """u.v / (|u||v|), clamped into [-1, 1]; rejects zero vectors."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ParameterError("cosine similarity is undefined for zero vectors")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _contrastive_loss_t(anchors: torch.Tensor, positives: torch.Tensor, temperature: float) -> torch.Tensor:
    """In-batch contrastive loss over cosine similarities.

    Row i's positive is ``positives[i]``; its negatives are the other rows of
    ``positives`` (one per other system, self excluded from the negative set).
    """
    a = F.normalize(anchors, dim=1)
    p = F.normalize(positives, dim=1)
    logits = (a @ p.t()) / temperature
    labels = torch.arange(a.shape[0], device=a.device)
    return F.cross_entropy(logits, labels)


def contrastive_loss(anchors, positives, temperature: float) -> float:
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    if anchors.shape != positives.shape:
        raise DimensionError(
            f"anchors {anchors.shape} and positives {positives.shape} must match"
        )
    if anchors.shape[0] < 2:
        raise ParameterError("contrastive loss needs at least 2 systems in the batch")
    if temperature <= 0:
        raise ParameterError("temperature must be positive")
    for name, arr in (("anchors", anchors), ("positives", positives)):
        if np.any(np.linalg.norm(arr, axis=1) == 0.0):
            raise ParameterError(f"{name} contain a zero embedding")
    return float(
        _contrastive_loss_t(torch.from_numpy(anchors), torch.from_numpy(positives), temperature)
    )


def reconstruction_loss(y_true, y_pred) -> float:
    """Mean over the batch of per-signal mean squared sample error."""
    true_rows = _loss_rows(y_true)
    pred_rows = _loss_rows(y_pred)
    if len(true_rows) != len(pred_rows):
        raise DimensionError(
            f"batch sizes differ: {len(true_rows)} vs {len(pred_rows)}"
        )
    total = 0.0
    for t, p in zip(true_rows, pred_rows):
        if t.shape != p.shape:
            raise DimensionError(f"signal lengths differ: {t.shape} vs {p.shape}")
        total += float(np.mean((t - p) ** 2))
    return total / len(true_rows)


def _loss_rows(batch) -> list[np.ndarray]:
    if isinstance(batch, np.ndarray) and batch.ndim == 2:
        return [row for row in batch.astype(np.float64)]
    rows = []
    for item in batch:
        rows.append(item.samples if isinstance(item, Signal) else np.asarray(item, dtype=np.float64))
    if not rows:
        raise ParameterError("empty batch")
    return rows


# --- torch modules -----------------------------------------------------------


class _RelativeBias(nn.Module):
    """Learned per-head scalar bias indexed by clipped token offset."""

    def __init__(self, max_offset: int, n_heads: int):
        super().__init__()
        self.max_offset = max_offset
        self.table = nn.Parameter(torch.zeros(2 * max_offset + 1, n_heads))

    def forward(self, length: int) -> torch.Tensor:  # (heads, L, L)
        pos = torch.arange(length, device=self.table.device)
        offsets = (pos[None, :] - pos[:, None]).clamp(-self.max_offset, self.max_offset)
        return self.table[offsets + self.max_offset].permute(2, 0, 1)


class _SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        b, l, e = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / self.head_dim**0.5 + bias.unsqueeze(0)
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, l, e))


class _TransformerLayer(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = _SelfAttention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), bias)
        return x + self.mlp(self.ln2(x))


class _Block(nn.Module):
    """Pre-norm transformer stack with one relative-bias table shared by its layers."""

    def __init__(self, dim: int, n_heads: int, n_layers: int, max_offset: int, mlp_ratio: int):
        super().__init__()
        self.rel_bias = _RelativeBias(max_offset, n_heads)
        self.layers = nn.ModuleList(
            [_TransformerLayer(dim, n_heads, mlp_ratio) for _ in range(n_layers)]
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bias = self.rel_bias(x.shape[1])
        for layer in self.layers:
            x = layer(x, bias)
        return self.norm(x)


class _BehaviorNet(nn.Module):
    def __init__(self, cfg: BehaviorConfig, latent_dim: int):
        super().__init__()
        e = cfg.model_dim
        self.latent_dim = latent_dim
        self.pair_proj = nn.Linear(2 * latent_dim, e)
        self.system_token = nn.Parameter(torch.zeros(e))
        self.embed_block = _Block(e, cfg.n_heads, cfg.embed_layers, cfg.max_relative_offset, cfg.mlp_ratio)
        self.query_proj = nn.Linear(latent_dim, e)
        self.predict_block = _Block(e, cfg.n_heads, cfg.predict_layers, cfg.max_relative_offset, cfg.mlp_ratio)
        self.out_head = nn.Linear(e, latent_dim)
        nn.init.normal_(self.system_token, std=0.02)

    def embed(self, x_lat: torch.Tensor, y_lat: torch.Tensor) -> torch.Tensor:
        """(B, F, D) pairs -> (B, E) system embeddings."""
        tokens = self.pair_proj(torch.cat([x_lat, y_lat], dim=-1))
        lead = self.system_token.expand(tokens.shape[0], 1, -1)
        out = self.embed_block(torch.cat([lead, tokens], dim=1))
        return out[:, 0]

    def predict(self, z: torch.Tensor, x_lat: torch.Tensor) -> torch.Tensor:
        """(B, E) embeddings + (B, F, D) query latents -> (B, F, D) output latents."""
        seq = torch.cat([z.unsqueeze(1), self.query_proj(x_lat)], dim=1)
        return self.out_head(self.predict_block(seq)[:, 1:])


# --- estimator ----------------------------------------------------------------


class SystemBehaviorModel(BaseEstimator):
    """Sklearn-style estimator for one-shot input/output prediction.

    ``fit`` pretrains on a corpus; ``predict`` maps (prompt_x, prompt_y,
    query_x) signal triples to predicted outputs through the attached codec.
    """

    TRAIN_MODES = ("two_stage", "joint")

    def __init__(self, config: BehaviorConfig = BehaviorConfig(), seed: int = 0):
        self.config = config
        self.seed = seed
        self.net_: _BehaviorNet | None = None
        self.codec_: SignalCodec | None = None
        self.history_: dict | None = None
        self.training_seconds_: float | None = None
        self.train_mode_: str | None = None
        self.finetuned_ = False

    # -- state ------------------------------------------------------------------

    @property
    def is_fitted(self) -> bool:
        return self.net_ is not None

    def _require_net(self) -> _BehaviorNet:
        if self.net_ is None:
            raise StateError("behavior model is untrained; call fit() or load a checkpoint")
        return self.net_

    def _require_codec(self) -> SignalCodec:
        if self.codec_ is None or not self.codec_.is_fitted:
            raise StateError("no trained codec attached; call attach_codec() first")
        return self.codec_

    def attach_codec(self, codec: SignalCodec) -> "SystemBehaviorModel":
        if not codec.is_fitted:
            raise StateError("cannot attach an untrained codec")
        self.codec_ = codec
        return self

    # -- training ------------------------------------------------------------------

    def fit(self, reader: CorpusReader, codec: SignalCodec, mode: str = "two_stage") -> "SystemBehaviorModel":
        if mode not in self.TRAIN_MODES:
            raise ParameterError(f"mode must be one of {self.TRAIN_MODES}, got {mode!r}")
        cfg = self.config
        if cfg.num_threads is not None:
            torch.set_num_threads(cfg.num_threads)
        if reader.pairs_per_system < 2:
            raise ParameterError("behavior training needs >= 2 pairs per system")
        if mode == "two_stage":
            if not codec.is_fitted:
                raise StateError("two_stage training requires a trained (frozen) codec")
        else:
            if codec.is_fitted:
                raise ParameterError("joint training expects an untrained codec (trained from scratch)")
            from .codec import _CodecNet

            torch.manual_seed(derive_seed(codec.seed, "codec-init"))
            codec._net = _CodecNet(codec.config)

        torch.manual_seed(derive_seed(self.seed, "behavior-init"))
        net = _BehaviorNet(cfg, codec.config.latent_dim)
        net.train()
        self.net_ = net
        self.codec_ = codec
        self.train_mode_ = mode

        start = time.time()
        if mode == "two_stage":
            self._fit_two_stage(reader, codec)
        else:
            self._fit_joint(reader, codec)
        net.eval()
        self.codec_._net.eval()
        self.training_seconds_ = time.time() - start
        return self

    def _train_tensors(self, reader: CorpusReader):
        """Group train-split records by system as (n_sys, pairs, ...) tensors."""
        records = reader.records("train")
        ids = sorted({r.system_id for r in records})
        id_pos = {sid: i for i, sid in enumerate(ids)}
        pairs = reader.pairs_per_system
        t = reader.length
        x = np.zeros((len(ids), pairs, t), dtype=np.float32)
        y = np.zeros_like(x)
        for r in records:
            x[id_pos[r.system_id], r.pair_index] = r.x.samples
            y[id_pos[r.system_id], r.pair_index] = r.y.samples
        return torch.from_numpy(x), torch.from_numpy(y)

    def _val_sets(self, reader: CorpusReader, codec_live: bool):
        """A small held-out subset used only for progress metrics."""
        cfg = self.config
        test_ids = reader.system_ids("test")
        rng = rng_from_seed(derive_seed(self.seed, "behavior-val"))
        take = min(cfg.val_systems, len(test_ids))
        chosen = set(
            np.asarray(test_ids)[rng.choice(len(test_ids), size=take, replace=False)].tolist()
        )
        by_system: dict[int, dict[int, tuple[np.ndarray, np.ndarray]]] = {}
        for r in reader.records("test"):
            if r.system_id in chosen:
                by_system.setdefault(r.system_id, {})[r.pair_index] = (
                    r.x.samples.astype(np.float32),
                    r.y.samples.astype(np.float32),
                )
        px, py, qx, qy = [], [], [], []
        for sid, pairs in by_system.items():
            if 0 in pairs and 1 in pairs:
                px.append(pairs[0][0]); py.append(pairs[0][1])
                qx.append(pairs[1][0]); qy.append(pairs[1][1])
        return (
            torch.from_numpy(np.stack(px)),
            torch.from_numpy(np.stack(py)),
            torch.from_numpy(np.stack(qx)),
            torch.from_numpy(np.stack(qy)),
        )

    def _val_rmse(self, val, codec: SignalCodec) -> float:
        px, py, qx, qy = val
        net = self._require_net()
        net_was_training = net.training
        codec_was_training = codec._net.training
        net.eval()
        codec._net.eval()
        with torch.no_grad():
            px_l = self._encode_t(codec, px)
            py_l = self._encode_t(codec, py)
            qx_l = self._encode_t(codec, qx)
            z = net.embed(px_l, py_l)
            pred_lat = net.predict(z, qx_l)
            pred = codec._net.decoder(pred_lat.transpose(1, 2))[:, 0, : qy.shape[1]]
            value = float(torch.sqrt(((pred - qy) ** 2).mean(dim=1)).mean())
        net.train(net_was_training)
        codec._net.train(codec_was_training)
        return value

    @staticmethod
    def _encode_t(codec: SignalCodec, rows: torch.Tensor) -> torch.Tensor:
        """Encode (B, T) rows to (B, F, D) quantized latents without gradients."""
        from .codec import _pad_to_multiple

        cfg = codec.config
        padded = torch.from_numpy(_pad_to_multiple(rows.numpy(), cfg.downsample_ratio))
        z = codec._net.encoder(padded.unsqueeze(1))
        flat = z.transpose(1, 2).reshape(-1, cfg.latent_dim)
        if cfg.n_codebooks > 0:
            q, _, _ = codec._net.quantizer(flat)
        else:
            q = flat
        return q.reshape(z.shape[0], -1, cfg.latent_dim)

    def _epoch_batches(self, n_systems: int, pairs: int, epoch: int):
        cfg = self.config
        rng = rng_from_seed(derive_seed(self.seed, "behavior-epoch", epoch))
        order = rng.permutation(n_systems)
        n_batches = n_systems // cfg.batch_systems
        for b in range(n_batches):
            sys_idx = order[b * cfg.batch_systems : (b + 1) * cfg.batch_systems]
            pair_choice = np.stack(
                [rng.choice(pairs, size=2, replace=False) for _ in sys_idx]
            )
            yield sys_idx, pair_choice

    def _fit_two_stage(self, reader: CorpusReader, codec: SignalCodec) -> None:
        cfg = self.config
        net = self._require_net()
        x_rows, y_rows = self._train_tensors(reader)
        n_sys, pairs, t = x_rows.shape
        codec._net.eval()
        with torch.no_grad():
            x_lat = self._encode_t(codec, x_rows.reshape(-1, t)).reshape(n_sys, pairs, -1, codec.config.latent_dim)
            y_lat = self._encode_t(codec, y_rows.reshape(-1, t)).reshape(n_sys, pairs, -1, codec.config.latent_dim)
        val = self._val_sets(reader, codec_live=False)

        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
        history = {"train_loss": [], "contrastive": [], "reconstruction": [],
                   "val_one_shot_rmse": [self._val_rmse(val, codec)]}
        for epoch in range(cfg.epochs):
            sums = np.zeros(3)
            count = 0
            for sys_idx, pair_choice in self._epoch_batches(n_sys, pairs, epoch):
                rows = torch.from_numpy(sys_idx.astype(np.int64))
                p1 = torch.from_numpy(pair_choice[:, 0])
                p2 = torch.from_numpy(pair_choice[:, 1])
                x1, y1 = x_lat[rows, p1], y_lat[rows, p1]
                x2, y2 = x_lat[rows, p2], y_lat[rows, p2]
                y2_sig = y_rows[rows, p2]
                opt.zero_grad()
                z1 = net.embed(x1, y1)
                z2 = net.embed(x2, y2)
                l_con = _contrastive_loss_t(z1, z2, cfg.temperature)
                pred_lat = net.predict(z1, x2)
                pred = codec._net.decoder(pred_lat.transpose(1, 2))[:, 0, :t]
                l_rec = F.mse_loss(pred, y2_sig)
                loss = l_rec + cfg.contrastive_weight * l_con
                if cfg.latent_loss_weight > 0:
                    loss = loss + cfg.latent_loss_weight * F.mse_loss(pred_lat, y2)
                if not torch.isfinite(loss):
                    raise TrainingError("behavior loss diverged", epoch)
                loss.backward()
                opt.step()
                sums += [float(loss.detach()), float(l_con.detach()), float(l_rec.detach())]
                count += 1
            history["train_loss"].append(sums[0] / count)
            history["contrastive"].append(sums[1] / count)
            history["reconstruction"].append(sums[2] / count)
            history["val_one_shot_rmse"].append(self._val_rmse(val, codec))
        self.history_ = history

    def _fit_joint(self, reader: CorpusReader, codec: SignalCodec) -> None:
        cfg = self.config
        net = self._require_net()
        ccfg = codec.config
        x_rows, y_rows = self._train_tensors(reader)
        n_sys, pairs, t = x_rows.shape
        codec._net.train()
        val = self._val_sets(reader, codec_live=True)

        from .codec import _pad_to_multiple

        opt = torch.optim.Adam(
            list(net.parameters())
            + list(codec._net.encoder.parameters())
            + list(codec._net.decoder.parameters()),
            lr=cfg.learning_rate,
        )
        reseed_rng = rng_from_seed(derive_seed(codec.seed, "codec-reseed"))
        history = {"train_loss": [], "contrastive": [], "reconstruction": [],
                   "signal": [], "val_one_shot_rmse": []}
        for epoch in range(cfg.epochs):
            sums = np.zeros(4)
            count = 0
            codec._net.train()
            net.train()
            for sys_idx, pair_choice in self._epoch_batches(n_sys, pairs, epoch):
                rows = torch.from_numpy(sys_idx.astype(np.int64))
                p1 = torch.from_numpy(pair_choice[:, 0])
                p2 = torch.from_numpy(pair_choice[:, 1])
                batch_sig = torch.cat(
                    [x_rows[rows, p1], y_rows[rows, p1], x_rows[rows, p2], y_rows[rows, p2]]
                )  # (4B, T)
                b = rows.shape[0]
                opt.zero_grad()
                padded = torch.from_numpy(
                    _pad_to_multiple(batch_sig.numpy(), ccfg.downsample_ratio)
                ).unsqueeze(1)
                zc = codec._net.encoder(padded)
                flat = zc.transpose(1, 2).reshape(-1, ccfg.latent_dim)
                if ccfg.n_codebooks > 0:
                    q, _, commitment = codec._net.quantizer(flat)
                else:
                    q, commitment = flat, torch.zeros(())
                lat = q.reshape(4 * b, -1, ccfg.latent_dim)
                recon = codec._net.decoder(lat.transpose(1, 2))[:, 0, :t]
                l_sig = F.mse_loss(recon, batch_sig) + ccfg.commitment_weight * commitment
                x1l, y1l, x2l, y2l = lat.split(b)
                z1 = net.embed(x1l, y1l)
                z2 = net.embed(x2l, y2l)
                l_con = _contrastive_loss_t(z1, z2, cfg.temperature)
                pred_lat = net.predict(z1, x2l)
                pred = codec._net.decoder(pred_lat.transpose(1, 2))[:, 0, :t]
                l_rec = F.mse_loss(pred, y_rows[rows, p2])
                loss = l_rec + cfg.contrastive_weight * l_con + l_sig
                if not torch.isfinite(loss):
                    raise TrainingError("joint loss diverged", epoch)
                loss.backward()
                opt.step()
                sums += [float(loss.detach()), float(l_con.detach()),
                         float(l_rec.detach()), float(l_sig.detach())]
                count += 1
            if ccfg.n_codebooks > 0:
                codec._net.quantizer.reseed_dead_entries(reseed_rng)
            history["train_loss"].append(sums[0] / count)
            history["contrastive"].append(sums[1] / count)
            history["reconstruction"].append(sums[2] / count)
            history["signal"].append(sums[3] / count)
            history["val_one_shot_rmse"].append(self._val_rmse(val, codec))
        # The codec is now a trained artifact of the joint run.
        codec.loss_curve_ = history["signal"]
        codec.training_seconds_ = 0.0
        self.history_ = history

    # -- inference -----------------------------------------------------------------

    def _tokens_to_lat(self, tokens: TokenSequence | Signal, codec: SignalCodec) -> tuple[torch.Tensor, int]:
        if isinstance(tokens, Signal):
            tokens = codec.encode(tokens)
        lat = torch.from_numpy(np.asarray(tokens.latents, dtype=np.float32))
        return lat, tokens.original_length

    def embed_system(
        self,
        x_tokens: TokenSequence | Signal,
        y_tokens: TokenSequence | Signal,
        system_id: int | None = None,
    ) -> SystemEmbedding:
        """Summarize one (input, output) pair into a system embedding."""
        net = self._require_net()
        codec = self._require_codec()
        x_lat, _ = self._tokens_to_lat(x_tokens, codec)
        y_lat, _ = self._tokens_to_lat(y_tokens, codec)
        if x_lat.shape[0] != y_lat.shape[0]:
            raise DimensionError(
                f"paired token frame counts differ: {x_lat.shape[0]} vs {y_lat.shape[0]}"
            )
        net.eval()
        with torch.no_grad():
            z = net.embed(x_lat.unsqueeze(0), y_lat.unsqueeze(0))[0].numpy()
        return SystemEmbedding(z, system_id)

    def predict_from_embedding(
        self, z: SystemEmbedding | np.ndarray, query_x: TokenSequence | Signal
    ) -> Signal:
        """Predict the system output for a query input, decoded to a signal.

        The returned signal lives in the normalized domain (scale 1); callers
        with physical-unit conventions rescale it themselves.
        """
        net = self._require_net()
        codec = self._require_codec()
        zv = z.z if isinstance(z, SystemEmbedding) else np.asarray(z, dtype=np.float64)
        if zv.ravel().shape[0] != self.config.model_dim:
            raise DimensionError(
                f"embedding dim {zv.ravel().shape[0]} != model_dim {self.config.model_dim}"
            )
        x_lat, original_length = self._tokens_to_lat(query_x, codec)
        net.eval()
        with torch.no_grad():
            zt = torch.from_numpy(zv.ravel().astype(np.float32)).unsqueeze(0)
            pred_lat = net.predict(zt, x_lat.unsqueeze(0))
            out = codec._net.decoder(pred_lat.transpose(1, 2))[0, 0, :original_length]
        return Signal(out.numpy().astype(np.float64), scale=1.0)

    def one_shot(self, prompt_x: Signal, prompt_y: Signal, query_x: Signal) -> Signal:
        z = self.embed_system(prompt_x, prompt_y)
        return self.predict_from_embedding(z, query_x)

    def predict(self, X: Sequence[tuple[Signal, Signal, Signal]]) -> list[Signal]:
        """Sklearn-style batch interface over (prompt_x, prompt_y, query_x) triples."""
        return [self.one_shot(px, py, qx) for px, py, qx in X]

    # -- downstream adaptation -------------------------------------------------------

    def finetune_single_layer(
        self,
        examples: Sequence[tuple[tuple[Signal, Signal], tuple[Signal, Signal]]],
        layer_selector: tuple[str, int] = ("predict", -1),
        epochs: int = 20,
        learning_rate: float = 1e-4,
    ) -> "SystemBehaviorModel":
        """Adapt exactly one attention sublayer on (prompt pair, query pair) examples.

        Returns a new model; every parameter outside the selected layer is
        bit-identical to the source model. The codec stays frozen throughout.
        """
        if len(examples) == 0:
            raise ParameterError("finetuning needs at least one example")
        if epochs < 0:
            raise ParameterError("epochs must be >= 0")
        net = self._require_net()
        codec = self._require_codec()

        tuned = SystemBehaviorModel(config=self.config, seed=self.seed)
        tuned.net_ = copy.deepcopy(net)
        tuned.codec_ = codec
        tuned.history_ = self.history_
        tuned.training_seconds_ = self.training_seconds_
        tuned.train_mode_ = self.train_mode_
        tuned.finetuned_ = True
        if epochs == 0:
            tuned.net_.eval()
            return tuned

        params = _selected_attention_parameters(tuned.net_, layer_selector)
        prompts_x, prompts_y, queries_x, targets = [], [], [], []
        for (px, py), (qx, qy) in examples:
            prompts_x.append(self._tokens_to_lat(px, codec)[0])
            prompts_y.append(self._tokens_to_lat(py, codec)[0])
            queries_x.append(self._tokens_to_lat(qx, codec)[0])
            targets.append(torch.from_numpy(qy.samples.astype(np.float32)))
        px_l = torch.stack(prompts_x)
        py_l = torch.stack(prompts_y)
        qx_l = torch.stack(queries_x)
        y = torch.stack(targets)

        opt = torch.optim.Adam(params, lr=learning_rate)
        tuned.net_.train()
        for epoch in range(epochs):
            opt.zero_grad()
            z = tuned.net_.embed(px_l, py_l)
            pred_lat = tuned.net_.predict(z, qx_l)
            pred = codec._net.decoder(pred_lat.transpose(1, 2))[:, 0, : y.shape[1]]
            loss = F.mse_loss(pred, y)
            if not torch.isfinite(loss):
                raise TrainingError("finetune loss diverged", epoch)
            loss.backward()
            opt.step()
        tuned.net_.eval()
        return tuned

    # -- persistence -------------------------------------------------------------------

    def save(self, path: str | Path, codec_sha256: str | None = None) -> None:
        net = self._require_net()
        meta = {
            "config": dataclasses.asdict(self.config),
            "seed": self.seed,
            "latent_dim": net.latent_dim,
            "train_mode": self.train_mode_,
            "finetuned": self.finetuned_,
            "history": self.history_,
            "training_seconds": self.training_seconds_,
            "codec_sha256": codec_sha256,
        }
        checkpoint.save(path, BEHAVIOR_MAGIC, meta, net.state_dict())

    @classmethod
    def load(cls, path: str | Path, codec: SignalCodec | None = None) -> "SystemBehaviorModel":
        meta, state = checkpoint.load(path, BEHAVIOR_MAGIC)
        cfg = BehaviorConfig(**meta["config"])
        model = cls(config=cfg, seed=meta["seed"])
        net = _BehaviorNet(cfg, meta["latent_dim"])
        net.load_state_dict(state)
        net.eval()
        model.net_ = net
        model.train_mode_ = meta["train_mode"]
        model.finetuned_ = meta["finetuned"]
        model.history_ = meta["history"]
        model.training_seconds_ = meta["training_seconds"]
        model.codec_sha256_ = meta.get("codec_sha256")
        if codec is not None:
            model.attach_codec(codec)
        return model


def _selected_attention_parameters(
    net: _BehaviorNet, selector: tuple[str, int]
) -> list[torch.nn.Parameter]:
    block_name, index = selector
    blocks = {"embed": net.embed_block, "predict": net.predict_block}
    if block_name not in blocks:
        raise ParameterError(f"layer selector block must be 'embed' or 'predict', got {block_name!r}")
    layers = blocks[block_name].layers
    try:
        layer = layers[index]
    except IndexError:
        raise ParameterError(
            f"layer index {index} out of range for {block_name} block with {len(layers)} layers"
        ) from None
    return list(layer.attn.parameters())
