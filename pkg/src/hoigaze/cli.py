"""Command-line entry point: synth, train-recognizer, train-estimator, eval, infer."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path


from . import evalkit
from .checkpoint import load_checkpoint, save_checkpoint
from .datamodel import DataError, load_manifest, load_sequence, windows_from_sequences
from .estimator import (Estimator, EstimatorConfig, EstimatorTrainConfig, estimator_batch, gt_sides,
                        train_estimator)
from .ndcompute import ConfigError
from .pipeline import make_predictor, predict_gaze, recognise_sides
from .recognizer import Recognizer, RecognizerConfig, TrainConfig, recognizer_batch, train_recognizer
from .synthgen import SynthConfig, generate_dataset

log = logging.getLogger("hoigaze")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


@dataclass
class RunConfig:
    T: int = 15
    batch_size: int = 32
    train_stride: int = 1
    eval_stride: int = 15
    seed: int = 0
    lr_decay: float = 0.95
    rec_lr: float = 0.005
    rec_weight_decay: float = 0.05
    rec_epochs: int = 60
    rec_blocks: int = 2
    est_lr: float = 0.005
    est_epochs: int = 80
    est_blocks: int = 4
    objects: int = 1
    cos_eh: float = 0.8
    f_eh: float = 4.0
    loss: str = "eye-head"
    self_attention: bool = True
    cross_attention: bool = True
    use_gt_attended: bool = False
    checkpoint_every: int = 10
    dtype: str = "float32"

    def validate(self) -> None:
        if self.loss not in ("eye-head", "mse"):
            raise ConfigError(f"loss must be 'eye-head' or 'mse', got {self.loss!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("T", "batch_size", "train_stride", "eval_stride", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("rec_epochs", "est_epochs", "rec_blocks", "est_blocks", "objects"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def echo(self) -> list[str]:
        return [f"{k} = {v}" for k, v in asdict(self).items()]


def _coerce(field_type, raw: str, key: str):
    t = field_type if isinstance(field_type, str) else field_type.__name__
    try:
        if t == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    known = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(known[key], raw, key)
    return out


# flag name -> RunConfig field
_FLAG_FIELDS = {
    "T": "T", "batch_size": "batch_size", "stride": "train_stride", "eval_stride": "eval_stride",
    "seed": "seed", "lr_decay": "lr_decay", "checkpoint_every": "checkpoint_every", "dtype": "dtype",
    "rec_lr": "rec_lr", "weight_decay": "rec_weight_decay", "rec_epochs": "rec_epochs",
    "recognizer_gcn_blocks": "rec_blocks", "est_lr": "est_lr", "est_epochs": "est_epochs",
    "estimator_gcn_blocks": "est_blocks", "objects": "objects", "cos_eh": "cos_eh", "f_eh": "f_eh",
    "loss": "loss", "self_attention": "self_attention", "cross_attention": "cross_attention",
    "use_gt_attended": "use_gt_attended",
}


def resolve_config(args) -> RunConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for flag, name in _FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    cfg = RunConfig(**values)
    cfg.validate()
    for line in cfg.echo():
        log.info("config %s", line)
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--T", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--stride", type=int, help="training window stride")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr-decay", dest="lr_decay", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hoigaze", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequences", type=int, default=10)
    p.add_argument("--frames", type=int, default=600)
    p.add_argument("--n", type=int, default=20, help="hand joints per hand")
    p.add_argument("--j", type=int, default=4, help="scene objects")
    p.add_argument("--hand-mode", choices=["dynamic", "static"], default="dynamic")
    p.add_argument("--coordination", type=float, default=SynthConfig.coordination)
    p.add_argument("--noise", type=float, default=SynthConfig.gaze_noise_deg, help="gaze noise, degrees")
    p.add_argument("--head-follow", type=float, default=SynthConfig.head_follow)
    p.add_argument("--test-fraction", type=float, default=0.0,
                   help="also write train.txt/test.txt manifests")

    p = sub.add_parser("train-recognizer", help="train the attended-hand recogniser")
    _common_train_flags(p)
    p.add_argument("--epochs", dest="rec_epochs", type=int)
    p.add_argument("--lr", dest="rec_lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--recognizer-gcn-blocks", type=int)

    p = sub.add_parser("train-estimator", help="train the gaze estimator")
    _common_train_flags(p)
    p.add_argument("--recognizer", help="recogniser checkpoint that picks the attended hand")
    p.add_argument("--use-gt-attended", action="store_true", default=None,
                   help="use gaze-derived attended-hand labels instead of a recogniser")
    p.add_argument("--epochs", dest="est_epochs", type=int)
    p.add_argument("--lr", dest="est_lr", type=float)
    p.add_argument("--estimator-gcn-blocks", type=int)
    p.add_argument("--objects", type=int, help="nearest scene objects added to the hand graph")
    p.add_argument("--loss", choices=["eye-head", "mse"])
    p.add_argument("--cos-eh", type=float)
    p.add_argument("--f-eh", type=float)
    p.add_argument("--no-self-attention", dest="self_attention", action="store_false", default=None)
    p.add_argument("--no-cross-attention", dest="cross_attention", action="store_false", default=None)

    p = sub.add_parser("eval", help="evaluate an estimator or the head-direction baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--estimator")
    group.add_argument("--baseline", choices=["head-direction"])
    p.add_argument("--recognizer")
    p.add_argument("--split-by-recognizer", action="store_true")
    p.add_argument("--eval-stride", type=int)
    p.add_argument("--config")

    p = sub.add_parser("infer", help="write per-window gaze predictions for one sequence")
    p.add_argument("--estimator", required=True)
    p.add_argument("--recognizer")
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-stride", type=int)
    p.add_argument("--config")
    return parser


# commands ----------------------------------------------------------------------

def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_synth(args) -> int:
    cfg = SynthConfig(seed=args.seed, num_sequences=args.sequences, frames_per_sequence=args.frames,
                      n_joints=args.n, n_objects=args.j, hand_mode=args.hand_mode,
                      coordination=args.coordination, gaze_noise_deg=args.noise,
                      head_follow=args.head_follow)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = generate_dataset(cfg, args.out, test_fraction=args.test_fraction)
    print(f"wrote {len(manifest.paths)} sequences to {args.out}")
    return EXIT_OK


class _EpochWriter:
    """Epoch log plus periodic checkpoints."""

    def __init__(self, out: Path, stem: str, model, cfg: RunConfig, columns: list[str], extra=None):
        self.out, self.stem, self.model, self.cfg = out, stem, model, cfg
        self.columns = columns
        self.extra = extra
        self.fh = open(out / f"{stem}.log", "w", encoding="utf-8")
        for line in cfg.echo():
            self.fh.write(f"# {line}\n")
        self.fh.write(" ".join(columns) + "\n")

    def __call__(self, epoch: int, row: dict) -> None:
        self.fh.write(" ".join(str(row[c]) if c == "epoch" else f"{row[c]:.6g}" for c in self.columns) + "\n")
        self.fh.flush()
        if (epoch + 1) % self.cfg.checkpoint_every == 0:
            save_checkpoint(self.out / f"{self.stem}_epoch{epoch + 1:03d}.ckpt", self.model, self.extra)

    def close(self) -> None:
        self.fh.close()
        save_checkpoint(self.out / f"{self.stem}.ckpt", self.model, self.extra)


def _load_windows(manifest, cfg: RunConfig, stride: int):
    seqs = load_manifest(manifest)
    if not seqs:
        raise DataError(f"{manifest}: no sequences")
    windows = windows_from_sequences(seqs, cfg.T, stride)
    if not windows:
        raise DataError(f"{manifest}: no sequence is long enough for T={cfg.T}")
    return seqs, windows


def cmd_train_recognizer(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args.out)
    seqs, windows = _load_windows(args.manifest, cfg, cfg.train_stride)
    model = Recognizer(RecognizerConfig(n_joints=seqs[0].n_joints, T=cfg.T, blocks=cfg.rec_blocks,
                                        seed=cfg.seed))
    data = recognizer_batch(windows)
    tc = TrainConfig(epochs=cfg.rec_epochs, batch_size=cfg.batch_size, lr=cfg.rec_lr,
                     lr_decay=cfg.lr_decay, weight_decay=cfg.rec_weight_decay, seed=cfg.seed,
                     dtype=cfg.dtype)
    writer = _EpochWriter(out, "recognizer", model, cfg, ["epoch", "loss", "lr", "accuracy"])
    try:
        train_recognizer(data, model, tc, on_epoch=writer)
    finally:
        writer.close()
    print(f"recognizer trained on {len(windows)} windows; checkpoint {out / 'recognizer.ckpt'}")
    return EXIT_OK


def _load_model(path, kind: str):
    try:
        model = load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if model.kind != kind:
        raise DataError(f"{path} holds a {model.kind} checkpoint, expected {kind}")
    return model


def _check_compat(model, n_joints: int, T: int, path) -> None:
    if model.config.n_joints != n_joints:
        raise DataError(f"{path} was trained with N={model.config.n_joints} but the data has N={n_joints}")
    if model.config.T != T:
        raise DataError(f"{path} was trained with T={model.config.T} but the run uses T={T}")


def cmd_train_estimator(args) -> int:
    cfg = resolve_config(args)
    if not cfg.use_gt_attended and not args.recognizer:
        raise ConfigError("train-estimator needs --recognizer <ckpt> unless --use-gt-attended is set")
    out = _prepare_out(args.out)
    seqs, windows = _load_windows(args.manifest, cfg, cfg.train_stride)
    n = seqs[0].n_joints
    if cfg.objects > seqs[0].n_objects:
        raise ConfigError(f"objects={cfg.objects} but the data has only J={seqs[0].n_objects}")
    if cfg.use_gt_attended:
        sides = gt_sides(windows)
    else:
        rec = _load_model(args.recognizer, "recognizer")
        _check_compat(rec, n, cfg.T, args.recognizer)
        sides = recognise_sides(rec, windows)[0]
    model = Estimator(EstimatorConfig(n_joints=n, n_nearest=cfg.objects, T=cfg.T, blocks=cfg.est_blocks,
                                      self_attention=cfg.self_attention,
                                      cross_attention=cfg.cross_attention, seed=cfg.seed))
    data = estimator_batch(windows, sides, cfg.objects)
    tc = EstimatorTrainConfig(epochs=cfg.est_epochs, batch_size=cfg.batch_size, lr=cfg.est_lr,
                              lr_decay=cfg.lr_decay, seed=cfg.seed, loss=cfg.loss, cos_eh=cfg.cos_eh,
                              f_eh=cfg.f_eh, dtype=cfg.dtype)
    extra = {"loss": cfg.loss, "cos_eh": cfg.cos_eh, "f_eh": cfg.f_eh,
             "gt_attended": int(cfg.use_gt_attended)}
    writer = _EpochWriter(out, "estimator", model, cfg, ["epoch", "loss", "lr", "error_deg"], extra)
    try:
        train_estimator(data, model, tc, on_epoch=writer)
    finally:
        writer.close()
    print(f"estimator trained on {len(windows)} windows; checkpoint {out / 'estimator.ckpt'}")
    return EXIT_OK


def _eval_config(args) -> RunConfig:
    cfg = RunConfig(**(read_config_file(args.config) if args.config else {}))
    if args.eval_stride is not None:
        cfg.eval_stride = args.eval_stride
    cfg.validate()
    return cfg


def cmd_eval(args) -> int:
    cfg = _eval_config(args)
    if args.split_by_recognizer and not args.recognizer:
        raise ConfigError("--split-by-recognizer needs --recognizer")
    out = _prepare_out(args.out)
    est = rec = None
    if args.estimator:
        est = _load_model(args.estimator, "estimator")
        cfg.T = est.config.T
    if args.recognizer:
        rec = _load_model(args.recognizer, "recognizer")
        cfg.T = rec.config.T
    seqs, windows = _load_windows(args.manifest, cfg, cfg.eval_stride)
    n = seqs[0].n_joints
    for model, path in ((est, args.estimator), (rec, args.recognizer)):
        if model is not None:
            _check_compat(model, n, cfg.T, path)
    if est is not None and est.config.n_nearest > seqs[0].n_objects:
        raise DataError(f"estimator uses K={est.config.n_nearest} objects but the data has J={seqs[0].n_objects}")

    sides = recognise_sides(rec, windows)[0] if rec is not None else None
    if est is not None:
        if rec is None:
            log.info("no recogniser given: using gaze-derived attended-hand labels")
        predictor = make_predictor(est, rec)
        name = "estimator"
    else:
        predictor = evalkit.baseline_predictor
        name = "head-direction"
    report = evalkit.evaluate(predictor, windows, sides if args.split_by_recognizer else None)
    report.extra["method"] = name
    report.extra["T"] = cfg.T
    report.extra["eval_stride"] = cfg.eval_stride
    for prefix, model in (("estimator", est), ("recognizer", rec)):
        if model is not None:
            for k, v in model.config_echo().items():
                report.extra[f"{prefix}_{k}"] = v
    (out / "report.txt").write_text(report.summary(), encoding="utf-8")
    evalkit.export_errors(report.frame_errors, out / "errors.txt")
    evalkit.export_cdf(report.frame_errors, out / "cdf.txt")
    sys.stdout.write(report.summary())
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _eval_config(args)
    est = _load_model(args.estimator, "estimator")
    rec = _load_model(args.recognizer, "recognizer") if args.recognizer else None
    cfg.T = est.config.T
    seq = load_sequence(args.sequence)
    for model, path in ((est, args.estimator), (rec, args.recognizer)):
        if model is not None:
            _check_compat(model, seq.n_joints, cfg.T, path)
    windows = windows_from_sequences([seq], cfg.T, cfg.eval_stride)
    if not windows:
        raise DataError(f"{args.sequence}: shorter than T={cfg.T}")
    sides = recognise_sides(rec, windows)[0] if rec is not None else gt_sides(windows)
    gaze = predict_gaze(est, windows, sides)
    with open(args.out, "w", encoding="utf-8") as fh:
        for w, g in zip(windows, gaze):
            for t in range(g.shape[1]):
                gx, gy, gz = g[:, t]
                fh.write(f"{w.seq_id} {w.start} {t} {gx:.8f} {gy:.8f} {gz:.8f}\n")
    print(f"wrote {len(windows)} windows to {args.out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train-recognizer": cmd_train_recognizer,
            "train-estimator": cmd_train_estimator, "eval": cmd_eval, "infer": cmd_infer}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
