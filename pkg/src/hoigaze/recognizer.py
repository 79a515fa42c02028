"""Attended-hand recogniser: head CNN, two hand ST-GCN branches, 2-channel head."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ndcompute as nd
from .datamodel import LEFT, RIGHT, FrameWindow, build_recognizer_inputs, label_attended_hand
from .ndcompute import NdArray, ParamSet, ShapeError

log = logging.getLogger(__name__)

HEAD_CHANNELS = 32
LATENT = 8
DROPOUT = 0.3


# building blocks shared with the estimator --------------------------------------

def init_head_branch(ps: ParamSet, prefix: str, rng: np.random.Generator) -> None:
    cin = 3
    for i in range(3):
        ps.add(f"{prefix}.conv{i}.weight", nd.uniform_init(rng, (HEAD_CHANNELS, cin, 3), cin * 3))
        ps.add(f"{prefix}.conv{i}.bias", np.zeros(HEAD_CHANNELS))
        if i < 2:
            ps.add(f"{prefix}.ln{i}.gain", np.ones(HEAD_CHANNELS))
            ps.add(f"{prefix}.ln{i}.offset", np.zeros(HEAD_CHANNELS))
        cin = HEAD_CHANNELS


def head_branch(h, ps: ParamSet, prefix: str) -> NdArray:
    """Head directions (B x 3 x T) to features (B x 32 x T)."""
    x = nd.as_array(h)
    for i in range(3):
        x = nd.conv1d(x, ps[f"{prefix}.conv{i}.weight"], ps[f"{prefix}.conv{i}.bias"])
        if i < 2:
            x = nd.layer_norm(x, ps[f"{prefix}.ln{i}.gain"], ps[f"{prefix}.ln{i}.offset"])
        x = nd.tanh(x)
    return x


def init_stgcn(ps: ParamSet, prefix: str, rng: np.random.Generator, d_in: int, d_out: int,
               n_nodes: int, t_len: int) -> None:
    ps.add(f"{prefix}.A_T", np.full((t_len, t_len), 1.0 / t_len) + rng.uniform(-0.01, 0.01, (t_len, t_len)))
    ps.add(f"{prefix}.W", nd.uniform_init(rng, (d_in, d_out), d_in))
    ps.add(f"{prefix}.A_S", np.full((n_nodes, n_nodes), 1.0 / n_nodes)
           + rng.uniform(-0.01, 0.01, (n_nodes, n_nodes)))


def _check_stgcn(d_in: int, v: int, t: int, a_t, w, a_s) -> None:
    if a_t.shape != (t, t):
        raise ShapeError(f"temporal axis: input has {t} steps but A_T is {a_t.shape}")
    if w.shape[0] != d_in:
        raise ShapeError(f"feature axis: input has {d_in} features but W is {w.shape}")
    if a_s.shape != (v, v):
        raise ShapeError(f"node axis: input has {v} nodes but A_S is {a_s.shape}")


def stgcn_forward(x, a_t: NdArray, w: NdArray, a_s: NdArray) -> NdArray:
    """Temporal adjacency, then feature map, then spatial adjacency.

    ``x`` is B x d_in x V x T'. With ``a_t`` T' x T', ``w`` d_in x d_out and
    ``a_s`` V x V the output is
    ``y[b, e, u, t] = sum_{v, d, s} a_s[u, v] * w[d, e] * x[b, d, v, s] * a_t[s, t]``.
    """
    x = nd.as_array(x)
    if x.ndim != 4:
        raise ShapeError(f"stgcn expects B x d x V x T input, got {x.shape}")
    b, d_in, v, t = x.shape
    _check_stgcn(d_in, v, t, a_t, w, a_s)
    y = nd.apply_along(x, a_t, axis=3)
    y = nd.matmul(nd.transpose(w, (1, 0)), nd.reshape(y, (b, d_in, v * t)))
    y = nd.reshape(y, (b, w.shape[1], v, t))
    return nd.matmul(a_s, y)


def temporal_duplicate(x: NdArray) -> NdArray:
    return nd.concat([x, x], axis=-1)


def temporal_halve(x: NdArray) -> NdArray:
    t2 = x.shape[-1]
    if t2 % 2:
        raise ShapeError(f"cannot halve odd temporal length {t2}")
    return x[..., : t2 // 2]


def init_graph_branch(ps: ParamSet, prefix: str, rng: np.random.Generator, n_nodes: int,
                      t_len: int, blocks: int) -> None:
    init_stgcn(ps, f"{prefix}.in", rng, 3, LATENT, n_nodes, t_len)
    for b in range(blocks):
        init_stgcn(ps, f"{prefix}.block{b}", rng, LATENT, LATENT, n_nodes, 2 * t_len)
        ps.add(f"{prefix}.block{b}.ln.gain", np.ones((LATENT, n_nodes)))
        ps.add(f"{prefix}.block{b}.ln.offset", np.zeros((LATENT, n_nodes)))


def graph_branch(x, ps: ParamSet, prefix: str, blocks: int, training: bool = False,
                 rng: np.random.Generator | None = None) -> NdArray:
    """B x 3 x V x T joints to node-flattened features B x 8V x T.

    Input ST-GCN, temporal duplication, ``blocks`` residual GCN blocks, then
    the first half of the time axis is kept.
    """
    def g(name):
        return ps[f"{prefix}.{name}"]

    y = stgcn_forward(x, g("in.A_T"), g("in.W"), g("in.A_S"))
    y = temporal_duplicate(y)
    for k in range(blocks):
        z = stgcn_forward(y, g(f"block{k}.A_T"), g(f"block{k}.W"), g(f"block{k}.A_S"))
        z = nd.layer_norm(z, g(f"block{k}.ln.gain"), g(f"block{k}.ln.offset"))
        z = nd.dropout(nd.tanh(z), DROPOUT, training, rng)
        y = y + z
    return flatten_nodes(temporal_halve(y))


def flatten_nodes(x: NdArray) -> NdArray:
    b, d, v, t = x.shape
    return nd.reshape(x, (b, d * v, t))


def unflatten_nodes(x: NdArray, n_nodes: int) -> NdArray:
    b, dv, t = x.shape
    return nd.reshape(x, (b, dv // n_nodes, n_nodes, t))


# recogniser --------------------------------------------------------------------

@dataclass
class RecognizerConfig:
    n_joints: int = 20
    T: int = 15
    blocks: int = 2
    seed: int = 0


class Recognizer:
    """Parameters and forward pass of the attended-hand recogniser."""

    kind = "recognizer"

    def __init__(self, config: RecognizerConfig, params: ParamSet | None = None):
        self.config = config
        if params is None:
            params = self._init_params(config)
        self.params = params

    @staticmethod
    def _init_params(cfg: RecognizerConfig) -> ParamSet:
        rng = np.random.default_rng(cfg.seed)
        v = cfg.n_joints + 3
        ps = ParamSet()
        init_head_branch(ps, "head", rng)
        init_graph_branch(ps, "left", rng, v, cfg.T, cfg.blocks)
        init_graph_branch(ps, "right", rng, v, cfg.T, cfg.blocks)
        cin = 16 * v + HEAD_CHANNELS
        ps.add("cls.conv0.weight", nd.uniform_init(rng, (64, cin, 3), cin * 3))
        ps.add("cls.conv0.bias", np.zeros(64))
        ps.add("cls.ln0.gain", np.ones(64))
        ps.add("cls.ln0.offset", np.zeros(64))
        ps.add("cls.conv1.weight", nd.uniform_init(rng, (2, 64, 3), 64 * 3))
        ps.add("cls.conv1.bias", np.zeros(2))
        return ps

    def features(self, h, lh, rh, training: bool = False, rng=None) -> dict[str, NdArray]:
        ps = self.params
        f_he = head_branch(h, ps, "head")
        f_lh = graph_branch(lh, ps, "left", self.config.blocks, training, rng)
        f_rh = graph_branch(rh, ps, "right", self.config.blocks, training, rng)
        f = nd.concat([f_he, f_lh, f_rh], axis=1)
        v = self.config.n_joints + 3
        return {"f_he": f_he, "f_lh": unflatten_nodes(f_lh, v), "f_rh": unflatten_nodes(f_rh, v), "f": f}

    def logits(self, h, lh, rh, training: bool = False, rng=None) -> NdArray:
        ps = self.params
        f = self.features(h, lh, rh, training, rng)["f"]
        x = nd.conv1d(f, ps["cls.conv0.weight"], ps["cls.conv0.bias"])
        x = nd.tanh(nd.layer_norm(x, ps["cls.ln0.gain"], ps["cls.ln0.offset"]))
        return nd.conv1d(x, ps["cls.conv1.weight"], ps["cls.conv1.bias"])

    def forward(self, h, lh, rh, training: bool = False, rng=None) -> NdArray:
        """Per-frame probabilities B x 2 x T; channel 0 is the left hand."""
        return nd.softmax(self.logits(h, lh, rh, training, rng), axis=1)

    def loss(self, h, lh, rh, labels: np.ndarray, training: bool = True, rng=None) -> NdArray:
        return cross_entropy(self.logits(h, lh, rh, training, rng), labels)

    def predict(self, batch: "RecognizerBatch", batch_size: int = 256) -> np.ndarray:
        out = []
        for s in range(0, len(batch), batch_size):
            sl = slice(s, s + batch_size)
            out.append(self.forward(batch.h[sl], batch.lh[sl], batch.rh[sl]).data)
        return np.concatenate(out) if out else np.zeros((0, 2, self.config.T))

    def config_echo(self) -> dict:
        c = self.config
        return {"N": c.n_joints, "T": c.T, "B_r": c.blocks, "seed": c.seed}


def cross_entropy(logits: NdArray, labels: np.ndarray) -> NdArray:
    """Mean over batch and frames of -log p(true side); ``labels`` is B x T."""
    logp = nd.log_softmax(logits, axis=1)
    onehot = np.stack([labels == LEFT, labels == RIGHT], axis=1).astype(float)
    return nd.mul(nd.mean(nd.mul(logp, onehot)), -2.0)


def infer_attended(probs: np.ndarray) -> tuple[int, float]:
    """Window-level side and confidence from 2 x T probabilities (tie goes right)."""
    m = np.asarray(probs).mean(axis=-1)
    side = LEFT if m[LEFT] > m[RIGHT] else RIGHT
    return side, float(m[side])


# data and training -------------------------------------------------------------

@dataclass
class RecognizerBatch:
    h: np.ndarray
    lh: np.ndarray
    rh: np.ndarray
    labels: np.ndarray        # per frame
    window_labels: np.ndarray

    def __len__(self) -> int:
        return self.h.shape[0]

    def take(self, idx) -> "RecognizerBatch":
        return RecognizerBatch(self.h[idx], self.lh[idx], self.rh[idx], self.labels[idx],
                               self.window_labels[idx])

    def astype(self, dtype) -> "RecognizerBatch":
        return RecognizerBatch(self.h.astype(dtype), self.lh.astype(dtype), self.rh.astype(dtype),
                               self.labels, self.window_labels)


def recognizer_batch(windows: list[FrameWindow]) -> RecognizerBatch:
    if not windows:
        raise ValueError("no windows")
    hs, lhs, rhs, labs, wl = [], [], [], [], []
    for w in windows:
        h, lh, rh = build_recognizer_inputs(w)
        lab = label_attended_hand(w)
        hs.append(h)
        lhs.append(lh)
        rhs.append(rh)
        labs.append(lab.per_frame)
        wl.append(lab.window)
    return RecognizerBatch(np.stack(hs), np.stack(lhs), np.stack(rhs), np.stack(labs), np.array(wl))


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.005
    lr_decay: float = 0.95
    weight_decay: float = 0.05
    seed: int = 0
    dtype: str = "float32"


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def train_recognizer(data: RecognizerBatch, model: Recognizer, cfg: TrainConfig,
                     on_epoch=None) -> list[dict]:
    """AdamW training with per-epoch learning-rate decay; returns the epoch log."""
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    state = nd.OptimState(base_lr=cfg.lr, decay=cfg.lr_decay, weight_decay=cfg.weight_decay)
    with nd.training_precision(model.params, cfg.dtype):
        data = data.astype(cfg.dtype)
        return _recognizer_epochs(data, model, cfg, state, rng, on_epoch)


def _recognizer_epochs(data, model, cfg, state, rng, on_epoch) -> list[dict]:
    params = list(model.params)
    history = []
    for epoch in range(cfg.epochs):
        total, correct, frames = 0.0, 0, 0
        for idx in iterate_minibatches(len(data), cfg.batch_size, rng):
            b = data.take(idx)
            model.params.zero_grad()
            logits = model.logits(b.h, b.lh, b.rh, training=True, rng=rng)
            loss = cross_entropy(logits, b.labels)
            loss.backward()
            nd.adamw_step(params, state, epoch)
            total += loss.item() * len(idx)
            correct += int(np.sum(logits.data.argmax(axis=1) == b.labels))
            frames += b.labels.size
        row = {"epoch": epoch, "loss": total / len(data), "lr": state.lr(epoch),
               "accuracy": correct / frames}
        history.append(row)
        log.info("recognizer epoch %d loss %.5f acc %.4f", epoch, row["loss"], row["accuracy"])
        if on_epoch is not None:
            on_epoch(epoch, row)
    return history


def window_accuracy(model: Recognizer, data: RecognizerBatch) -> float:
    probs = model.predict(data)
    pred = np.array([infer_attended(p)[0] for p in probs])
    return float(np.mean(pred == data.window_labels))
