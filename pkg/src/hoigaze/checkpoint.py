"""Plain-text checkpoints for the recogniser and the gaze estimator."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .datamodel import DataError, format_row
from .estimator import Estimator, EstimatorConfig
from .ndcompute import ParamSet
from .recognizer import Recognizer, RecognizerConfig

MAGIC = "hoigaze-ckpt"


def save_checkpoint(path, model: Recognizer | Estimator, extra: dict | None = None) -> None:
    echo = dict(model.config_echo())
    if extra:
        echo.update(extra)
    header = " ".join([MAGIC, "v1", f"kind={model.kind}"] + [f"{k}={v}" for k, v in echo.items()])
    lines = [header]
    for p in model.params:
        lines.append(f"{p.name} shape={','.join(str(d) for d in p.shape)}")
        lines.append(format_row(p.data.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().split()
    if len(first) < 3 or first[0] != MAGIC or first[1] != "v1":
        raise DataError(f"{path}: not a checkpoint")
    meta = {}
    for tok in first[2:]:
        k, _, v = tok.partition("=")
        meta[k] = v
    return meta


def load_checkpoint(path) -> Recognizer | Estimator:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    meta = read_header(path)
    ps = ParamSet()
    body = lines[1:]
    if len(body) % 2:
        raise DataError(f"{path}: truncated checkpoint")
    for i in range(0, len(body), 2):
        name, _, shape_tok = body[i].partition(" shape=")
        try:
            shape = tuple(int(d) for d in shape_tok.split(","))
            values = np.array([float(v) for v in body[i + 1].split()], dtype=np.float32)
        except ValueError as exc:
            raise DataError(f"{path}: line {i + 2}: {exc}") from exc
        if values.size != int(np.prod(shape)):
            raise DataError(f"{path}: {name} has {values.size} values for shape {shape}")
        ps.add(name, values.astype(np.float64).reshape(shape))
    try:
        if meta.get("kind") == "recognizer":
            cfg = RecognizerConfig(n_joints=int(meta["N"]), T=int(meta["T"]), blocks=int(meta["B_r"]),
                                   seed=int(meta["seed"]))
            model = Recognizer(cfg, ps)
        elif meta.get("kind") == "estimator":
            cfg = EstimatorConfig(n_joints=int(meta["N"]), n_nearest=int(meta["K"]), T=int(meta["T"]),
                                  blocks=int(meta["B_e"]), self_attention=meta["self_attention"] == "1",
                                  cross_attention=meta["cross_attention"] == "1", seed=int(meta["seed"]))
            model = Estimator(cfg, ps)
        else:
            raise DataError(f"{path}: unknown checkpoint kind {meta.get('kind')!r}")
    except KeyError as exc:
        raise DataError(f"{path}: header lacks {exc}") from exc
    expected = model._init_params(model.config)
    if expected.names() != ps.names():
        raise DataError(f"{path}: parameter set does not match the {meta['kind']} architecture")
    for p in expected:
        if p.shape != ps[p.name].shape:
            raise DataError(f"{path}: {p.name} has shape {ps[p.name].shape}, expected {p.shape}")
    return model
