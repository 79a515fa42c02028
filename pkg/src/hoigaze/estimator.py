"""Gaze estimator: head CNN, hand-object ST-GCN, cross-modal attention, gaze head."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import ndcompute as nd
from .datamodel import FrameWindow, build_estimator_input, label_attended_hand, nearest_objects
from .ndcompute import NdArray, ParamSet, ShapeError
from .recognizer import (HEAD_CHANNELS, LATENT, TrainConfig, graph_branch, head_branch,
                         init_graph_branch, init_head_branch, iterate_minibatches, unflatten_nodes)

log = logging.getLogger(__name__)


def attention(x_q: NdArray, x_kv: NdArray, w_q: NdArray, w_k: NdArray, w_v: NdArray):
    """Residual single-head attention ``Y = X_q + softmax(Q K^T / sqrt(n_q)) V``.

    ``x_q`` is B x T x n_q and ``x_kv`` is B x T x n_kv; ``w_k``/``w_v`` map the
    key/value modality into n_q dimensions. Returns ``(Y, attention weights)``.
    """
    if x_q.shape[-2] != x_kv.shape[-2]:
        raise ShapeError(f"query has T={x_q.shape[-2]} steps but key/value has T={x_kv.shape[-2]}")
    n_q = x_q.shape[-1]
    q = nd.matmul(x_q, w_q)
    k = nd.matmul(x_kv, w_k)
    v = nd.matmul(x_kv, w_v)
    scores = nd.mul(nd.matmul(q, nd.swap_last(k)), 1.0 / math.sqrt(n_q))
    weights = nd.softmax(scores, axis=-1)
    return nd.add(x_q, nd.matmul(weights, v)), weights


def self_attention(x, ps: ParamSet, prefix: str) -> NdArray:
    x = nd.as_array(x)
    return attention(x, x, ps[f"{prefix}.W_q"], ps[f"{prefix}.W_k"], ps[f"{prefix}.W_v"])[0]


def cross_attention(x_q, x_kv, ps: ParamSet, prefix: str) -> NdArray:
    return attention(nd.as_array(x_q), nd.as_array(x_kv), ps[f"{prefix}.W_q"],
                     ps[f"{prefix}.W_k"], ps[f"{prefix}.W_v"])[0]


def init_attention(ps: ParamSet, prefix: str, rng: np.random.Generator, n_q: int, n_kv: int) -> None:
    ps.add(f"{prefix}.W_q", nd.uniform_init(rng, (n_q, n_q), n_q))
    ps.add(f"{prefix}.W_k", nd.uniform_init(rng, (n_kv, n_q), n_kv))
    ps.add(f"{prefix}.W_v", nd.uniform_init(rng, (n_kv, n_q), n_kv))


def eye_head_loss(pred: NdArray, gaze: np.ndarray, head: np.ndarray, cos_eh: float = 0.8,
                  f_eh: float = 4.0) -> NdArray:
    """Squared gaze error, weighted by ``f_eh`` on frames where g.h > cos_eh.

    Inputs are B x 3 x T (or 3 x T); the result is the mean over batch and frames.
    """
    w = np.where(np.sum(gaze * head, axis=-2) > cos_eh, f_eh, 1.0)
    diff = nd.sub(pred, gaze)
    per_frame = nd.sum(nd.mul(diff, diff), axis=-2)
    return nd.mean(nd.mul(per_frame, w))


@dataclass
class EstimatorConfig:
    n_joints: int = 20
    n_nearest: int = 1          # K scene objects added to the hand graph
    T: int = 15
    blocks: int = 4
    self_attention: bool = True
    cross_attention: bool = True
    seed: int = 0

    @property
    def n_nodes(self) -> int:
        return self.n_joints + 3 + self.n_nearest


class Estimator:
    """Parameters and forward pass of the gaze estimator."""

    kind = "estimator"

    def __init__(self, config: EstimatorConfig, params: ParamSet | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params(config)
        self.fallback_frames = 0

    @staticmethod
    def _init_params(cfg: EstimatorConfig) -> ParamSet:
        rng = np.random.default_rng(cfg.seed)
        v = cfg.n_nodes
        n_ah = LATENT * v
        ps = ParamSet()
        init_head_branch(ps, "head", rng)
        init_graph_branch(ps, "hand", rng, v, cfg.T, cfg.blocks)
        if cfg.self_attention:
            init_attention(ps, "self_he", rng, HEAD_CHANNELS, HEAD_CHANNELS)
            init_attention(ps, "self_ah", rng, n_ah, n_ah)
        if cfg.cross_attention:
            init_attention(ps, "cross_he", rng, HEAD_CHANNELS, n_ah)
            init_attention(ps, "cross_ah", rng, n_ah, HEAD_CHANNELS)
        cin = n_ah + HEAD_CHANNELS
        ps.add("gaze.conv0.weight", nd.uniform_init(rng, (64, cin, 3), cin * 3))
        ps.add("gaze.conv0.bias", np.zeros(64))
        ps.add("gaze.ln0.gain", np.ones(64))
        ps.add("gaze.ln0.offset", np.zeros(64))
        ps.add("gaze.conv1.weight", nd.uniform_init(rng, (3, 64, 3), 64 * 3))
        ps.add("gaze.conv1.bias", np.zeros(3))
        return ps

    def features(self, h, ah, training: bool = False, rng=None) -> dict[str, NdArray]:
        cfg, ps = self.config, self.params
        ah = nd.as_array(ah)
        if ah.shape[2] != cfg.n_nodes:
            raise ShapeError(f"hand-object graph has {ah.shape[2]} nodes, model expects {cfg.n_nodes}")
        f_he = head_branch(h, ps, "head")                                   # B 32 T
        f_ah = graph_branch(ah, ps, "hand", cfg.blocks, training, rng)      # B 8V T
        x_he = nd.swap_last(f_he)
        x_ah = nd.swap_last(f_ah)
        if cfg.self_attention:
            x_he = self_attention(x_he, ps, "self_he")
            x_ah = self_attention(x_ah, ps, "self_ah")
        if cfg.cross_attention:
            x_he, x_ah = (cross_attention(x_he, x_ah, ps, "cross_he"),
                          cross_attention(x_ah, x_he, ps, "cross_ah"))
        f_he2, f_ah2 = nd.swap_last(x_he), nd.swap_last(x_ah)
        f = nd.concat([f_he2, f_ah2], axis=1)
        return {"f_he": f_he, "f_ah": f_ah, "f_ah_nodes": unflatten_nodes(f_ah, cfg.n_nodes),
                "f_he2": f_he2, "f_ah2": f_ah2, "f": f}

    def raw_output(self, h, ah, training: bool = False, rng=None) -> NdArray:
        """Gaze head output before unit normalisation, B x 3 x T in (-1, 1)."""
        ps = self.params
        f = self.features(h, ah, training, rng)["f"]
        x = nd.conv1d(f, ps["gaze.conv0.weight"], ps["gaze.conv0.bias"])
        x = nd.tanh(nd.layer_norm(x, ps["gaze.ln0.gain"], ps["gaze.ln0.offset"]))
        return nd.tanh(nd.conv1d(x, ps["gaze.conv1.weight"], ps["gaze.conv1.bias"]))

    def forward(self, h, ah, training: bool = False, rng=None) -> NdArray:
        """Unit gaze directions B x 3 x T.

        ``h`` holds the head directions; a frame whose raw output is (near) zero
        falls back to the head direction of that frame.
        """
        h_arr = np.asarray(h.data if isinstance(h, NdArray) else h)
        out, bad = nd.normalize_columns(self.raw_output(h, ah, training, rng), h_arr, axis=-2)
        n_bad = int(np.sum(bad))
        if n_bad:
            self.fallback_frames += n_bad
            log.warning("%d degenerate gaze outputs replaced by head direction", n_bad)
        return out

    def predict(self, batch: "EstimatorBatch", batch_size: int = 256) -> np.ndarray:
        out = []
        for s in range(0, len(batch), batch_size):
            sl = slice(s, s + batch_size)
            out.append(self.forward(batch.h[sl], batch.ah[sl]).data)
        return np.concatenate(out) if out else np.zeros((0, 3, self.config.T))

    def config_echo(self) -> dict:
        c = self.config
        return {"N": c.n_joints, "K": c.n_nearest, "T": c.T, "B_e": c.blocks,
                "self_attention": int(c.self_attention), "cross_attention": int(c.cross_attention),
                "seed": c.seed}


# data and training -------------------------------------------------------------

@dataclass
class EstimatorBatch:
    h: np.ndarray        # B x 3 x T head directions
    ah: np.ndarray       # B x 3 x V x T
    gaze: np.ndarray     # B x 3 x T
    sides: np.ndarray    # attended side used to build ``ah``

    def __len__(self) -> int:
        return self.h.shape[0]

    def take(self, idx) -> "EstimatorBatch":
        return EstimatorBatch(self.h[idx], self.ah[idx], self.gaze[idx], self.sides[idx])

    def astype(self, dtype) -> "EstimatorBatch":
        return EstimatorBatch(self.h.astype(dtype), self.ah.astype(dtype), self.gaze.astype(dtype),
                              self.sides)


def estimator_batch(windows: list[FrameWindow], sides, n_nearest: int = 1) -> EstimatorBatch:
    """Stack estimator inputs; ``sides`` gives the attended hand per window."""
    if not windows:
        raise ValueError("no windows")
    hs, ahs, gs = [], [], []
    for w, side in zip(windows, sides):
        objs = nearest_objects(w, int(side), n_nearest)
        hs.append(w.head_dir.T)
        ahs.append(build_estimator_input(w, int(side), objs))
        gs.append(w.gaze_dir.T)
    return EstimatorBatch(np.stack(hs), np.stack(ahs), np.stack(gs), np.asarray(sides, dtype=int))


def gt_sides(windows: list[FrameWindow]) -> np.ndarray:
    return np.array([label_attended_hand(w).window for w in windows], dtype=int)


@dataclass
class EstimatorTrainConfig(TrainConfig):
    epochs: int = 80
    weight_decay: float = 0.0
    loss: str = "eye-head"      # or "mse"
    cos_eh: float = 0.8
    f_eh: float = 4.0


def estimator_loss(pred: NdArray, batch: EstimatorBatch, cfg: EstimatorTrainConfig) -> NdArray:
    f_eh = 1.0 if cfg.loss == "mse" else cfg.f_eh
    return eye_head_loss(pred, batch.gaze, batch.h, cfg.cos_eh, f_eh)


def mean_angular_error(pred: np.ndarray, gaze: np.ndarray) -> float:
    cos = np.clip(np.sum(pred * gaze, axis=-2), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def train_estimator(data: EstimatorBatch, model: Estimator, cfg: EstimatorTrainConfig,
                    on_epoch=None) -> list[dict]:
    """Adam training (decoupled weight decay only if configured); returns the epoch log."""
    if len(data) == 0:
        raise ValueError("empty training set")
    if cfg.loss not in ("eye-head", "mse"):
        raise ValueError(f"unknown loss {cfg.loss!r}")
    rng = np.random.default_rng(cfg.seed)
    state = nd.OptimState(base_lr=cfg.lr, decay=cfg.lr_decay, weight_decay=cfg.weight_decay)
    with nd.training_precision(model.params, cfg.dtype):
        data = data.astype(cfg.dtype)
        return _estimator_epochs(data, model, cfg, state, rng, on_epoch)


def _estimator_epochs(data, model, cfg, state, rng, on_epoch) -> list[dict]:
    params = list(model.params)
    step = nd.adamw_step if cfg.weight_decay else nd.adam_step
    history = []
    for epoch in range(cfg.epochs):
        total, err, count = 0.0, 0.0, 0
        for idx in iterate_minibatches(len(data), cfg.batch_size, rng):
            b = data.take(idx)
            model.params.zero_grad()
            pred = model.forward(b.h, b.ah, training=True, rng=rng)
            loss = estimator_loss(pred, b, cfg)
            loss.backward()
            step(params, state, epoch)
            total += loss.item() * len(idx)
            err += mean_angular_error(pred.data, b.gaze) * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "loss": total / count, "lr": state.lr(epoch), "error_deg": err / count}
        history.append(row)
        log.info("estimator epoch %d loss %.5f err %.3f", epoch, row["loss"], row["error_deg"])
        if on_epoch is not None:
            on_epoch(epoch, row)
    return history
