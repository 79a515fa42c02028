"""Seeded generator of coordinated eye-hand-head sequences with known attendance.

Coordinates are metres with y up and z forward. Each sequence is fully
determined by ``(config.seed, sequence_index)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .datamodel import (FPS, LEFT, RIGHT, DatasetManifest, Sequence, write_labels,
                        write_manifest, write_sequence)

log = logging.getLogger(__name__)

EYE_OFFSET = 0.08          # eyes sit this far in front of the head centre
CROSSING_DEG = 2.0


@dataclass
class SynthConfig:
    seed: int = 0
    num_sequences: int = 10
    frames_per_sequence: int = 600
    n_joints: int = 20
    n_objects: int = 4
    hand_mode: str = "dynamic"
    coordination: float = 0.95
    gaze_noise_deg: float = 2.0
    head_follow: float = 0.1
    switch_period_frames: float = 150.0
    min_switch_frames: int = 30
    smoothing: float = 0.9           # EMA coefficient of every smooth random process
    head_speed: float = 0.3          # m/s cap on head translation
    hand_speed: float = 0.8          # m/s cap on wrist translation
    drift_speed_deg: float = 3.0     # deg/frame scale of the free gaze drift
    head_wander_deg: float = 2.5     # deg/frame scale of head motion not driven by gaze

    def validate(self) -> None:
        for name in ("coordination", "head_follow", "smoothing"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.gaze_noise_deg < 0:
            raise ValueError("gaze_noise_deg must be >= 0")
        if self.n_joints < 1 or self.n_objects < 1:
            raise ValueError("need at least one hand joint and one object")
        if self.num_sequences < 0 or self.frames_per_sequence < 1:
            raise ValueError("bad sequence counts")
        if self.hand_mode not in ("dynamic", "static"):
            raise ValueError(f"unknown hand_mode {self.hand_mode!r}")
        if self.switch_period_frames <= 0:
            raise ValueError("switch_period_frames must be positive")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class GeneratedSequence:
    sequence: Sequence
    scripted: np.ndarray   # per-frame attended side
    crossing: np.ndarray   # per-frame bool, both hands within CROSSING_DEG of gaze


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def slerp(u: np.ndarray, v: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation between unit vectors; t=0 gives u, t=1 gives v."""
    if t <= 0.0:
        return u.copy()
    if t >= 1.0:
        return v.copy()
    dot = float(np.clip(u @ v, -1.0, 1.0))
    omega = math.acos(dot)
    if omega < 1e-9:
        return _unit((1 - t) * u + t * v)
    s = math.sin(omega)
    if s < 1e-9:
        # antiparallel: rotate through any perpendicular axis
        perp = np.cross(u, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(u, [0.0, 1.0, 0.0])
        perp = _unit(perp)
        return _unit(math.cos(t * math.pi) * u + math.sin(t * math.pi) * perp)
    return _unit((math.sin((1 - t) * omega) * u + math.sin(t * omega) * v) / s)


def direction(yaw: float, pitch: float) -> np.ndarray:
    cp = math.cos(pitch)
    return np.array([math.sin(yaw) * cp, math.sin(pitch), math.cos(yaw) * cp])


def yaw_pitch(d: np.ndarray) -> tuple[float, float]:
    return math.atan2(d[0], d[2]), math.asin(float(np.clip(d[1], -1.0, 1.0)))


def _angle(a: np.ndarray, b: np.ndarray) -> float:
    return math.degrees(math.acos(float(np.clip(_unit(a) @ _unit(b), -1.0, 1.0))))


def _hand_template(n: int, mirror: float) -> np.ndarray:
    """Joint offsets in the wrist frame: five fingers, joints ordered finger-major per level."""
    out = np.zeros((n, 3))
    for j in range(n):
        finger, level = j % 5, j // 5
        out[j] = (mirror * (finger - 2) * 0.018, 0.0, 0.035 + 0.025 * (level + 1))
    return out


def _rot_y(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _schedule(rng: np.random.Generator, frames: int, cfg: SynthConfig) -> np.ndarray:
    sides = np.empty(frames, dtype=int)
    side = int(rng.integers(2))
    i = 0
    while i < frames:
        dur = max(cfg.min_switch_frames, int(round(rng.exponential(cfg.switch_period_frames))))
        sides[i:i + dur] = side
        i += dur
        side = 1 - side
    return sides


class _Hand:
    def __init__(self, rng, side: int, rest: np.ndarray, n: int, cfg: SynthConfig):
        self.rng = rng
        self.side = side
        self.rest = rest
        self.pos = rest.copy()
        self.vel = np.zeros(3)
        self.target = rest.copy()
        self.target_obj = -1
        self.dwell = 0
        self.yaw = 0.0
        self.yaw_rate = 0.0
        self.grip = 0.3
        self.grip_rate = 0.0
        mirror = -1.0 if side == LEFT else 1.0
        self.template = _hand_template(n, mirror)
        self.cfg = cfg

    def candidates(self, objects: np.ndarray) -> np.ndarray:
        sign = -1.0 if self.side == LEFT else 1.0
        own = np.flatnonzero(objects[:, 0] * sign >= -0.05)
        return own if len(own) else np.arange(len(objects))

    def pick_object(self, objects: np.ndarray) -> None:
        cand = self.candidates(objects)
        if len(cand) > 1:
            cand = cand[cand != self.target_obj]
        self.target_obj = int(cand[self.rng.integers(len(cand))])
        self.dwell = int(self.rng.integers(15, 46))
        self.target = objects[self.target_obj] + np.array([0.0, 0.04, -0.07])

    def step(self, attended: bool, objects: np.ndarray) -> None:
        cfg = self.cfg
        a = cfg.smoothing
        if attended:
            if np.linalg.norm(self.target - self.pos) < 0.03:
                self.dwell -= 1
                if self.dwell <= 0:
                    self.pick_object(objects)
        else:
            self.target = self.rest
        desired = 4.0 * (self.target - self.pos)
        speed = np.linalg.norm(desired)
        if speed > cfg.hand_speed:
            desired *= cfg.hand_speed / speed
        self.vel = a * self.vel + (1 - a) * desired + self.rng.normal(0.0, 0.01, 3)
        self.pos = self.pos + self.vel / FPS
        self.yaw_rate = a * self.yaw_rate + (1 - a) * self.rng.normal(0.0, 0.05)
        self.yaw = float(np.clip(self.yaw + self.yaw_rate, -0.6, 0.6))
        if cfg.hand_mode == "dynamic":
            self.grip_rate = a * self.grip_rate + (1 - a) * self.rng.normal(0.0, 0.05)
            self.grip = float(np.clip(self.grip + self.grip_rate, 0.0, 1.0))

    def joints(self) -> np.ndarray:
        off = self.template.copy()
        if self.cfg.hand_mode == "dynamic":
            level = np.arange(len(off)) // 5 + 1
            off[:, 2] *= 1.0 - 0.35 * self.grip * level / level.max()
            off[:, 1] -= 0.02 * self.grip * level
        return self.pos + off @ _rot_y(self.yaw).T


def generate_sequence(config: SynthConfig, sequence_index: int) -> GeneratedSequence:
    config.validate()
    cfg = config
    rng = np.random.default_rng([cfg.seed, sequence_index])
    frames = cfg.frames_per_sequence
    n, j = cfg.n_joints, cfg.n_objects
    a = cfg.smoothing

    head0 = np.array([0.0, 1.6, 0.0])
    objects = np.column_stack([rng.uniform(-0.45, 0.45, j),
                               1.0 + rng.uniform(-0.05, 0.05, j),
                               rng.uniform(0.3, 0.6, j)])
    scripted = _schedule(rng, frames, cfg)
    hands = [_Hand(rng, LEFT, np.array([-0.22, 1.05, 0.25]), n, cfg),
             _Hand(rng, RIGHT, np.array([0.22, 1.05, 0.25]), n, cfg)]
    hands[scripted[0]].pick_object(objects)

    out = {name: np.empty(shape) for name, shape in (
        ("head_pos", (frames, 3)), ("head_dir", (frames, 3)), ("eye_pos", (frames, 3)),
        ("gaze_dir", (frames, 3)), ("left_wrist", (frames, 3)), ("right_wrist", (frames, 3)),
        ("left_hand", (frames, n, 3)), ("right_hand", (frames, n, 3)), ("objects", (frames, j, 3)))}
    crossing = np.zeros(frames, dtype=bool)

    head_pos = head0.copy()
    head_vel = np.zeros(3)
    drift_yaw, drift_pitch = rng.uniform(-0.8, 0.8), rng.uniform(-0.6, 0.1)
    drift_rate = np.zeros(2)
    wander_rate = np.zeros(2)
    head_dir = direction(drift_yaw, drift_pitch)
    noise = math.radians(cfg.gaze_noise_deg)
    drift_step = math.radians(cfg.drift_speed_deg)
    wander_step = math.radians(cfg.head_wander_deg)

    for t in range(frames):
        # head translation: smoothed noise, weak pull back to the start, hard speed cap
        head_vel = a * head_vel + (1 - a) * rng.normal(0.0, cfg.head_speed, 3) - 0.02 * (head_pos - head0)
        speed = np.linalg.norm(head_vel)
        if speed > cfg.head_speed:
            head_vel *= cfg.head_speed / speed
        if t > 0:
            head_pos = head_pos + head_vel / FPS

        side = int(scripted[t])
        if t > 0 and side != scripted[t - 1]:
            hands[side].pick_object(objects)
        for h in hands:
            h.step(h.side == side, objects)
        joints = [h.joints() for h in hands]

        eye = head_pos + EYE_OFFSET * head_dir
        drift_rate = a * drift_rate + (1 - a) * rng.normal(0.0, drift_step, 2) * math.sqrt((1 + a) / (1 - a))
        drift_yaw = float(np.clip(drift_yaw + drift_rate[0], -1.2, 1.2))
        drift_pitch = float(np.clip(drift_pitch + drift_rate[1], -0.9, 0.3))
        drift = direction(drift_yaw, drift_pitch)
        target = _unit(joints[side].mean(axis=0) - eye)
        gaze = slerp(drift, target, cfg.coordination)
        if noise > 0:
            eps = rng.normal(0.0, noise, 3)
            gaze = _unit(gaze + eps - (eps @ gaze) * gaze)

        wander_rate = a * wander_rate + (1 - a) * rng.normal(0.0, wander_step, 2) * math.sqrt((1 + a) / (1 - a))
        hy, hp = yaw_pitch(head_dir)
        wandered = direction(hy + wander_rate[0], float(np.clip(hp + wander_rate[1], -1.4, 1.4)))
        head_dir = slerp(wandered, gaze, cfg.head_follow)

        out["head_pos"][t] = head_pos
        out["head_dir"][t] = head_dir
        out["eye_pos"][t] = eye
        out["gaze_dir"][t] = gaze
        out["left_wrist"][t] = hands[LEFT].pos
        out["right_wrist"][t] = hands[RIGHT].pos
        out["left_hand"][t] = joints[LEFT]
        out["right_hand"][t] = joints[RIGHT]
        out["objects"][t] = objects
        crossing[t] = all(_angle(jt.mean(axis=0) - eye, gaze) < CROSSING_DEG for jt in joints)

    seq = Sequence(**out, seq_id=f"seq_{sequence_index:03d}", hand_mode=cfg.hand_mode)
    return GeneratedSequence(sequence=seq, scripted=scripted, crossing=crossing)


def generate_dataset(config: SynthConfig, out_dir, test_fraction: float = 0.0) -> DatasetManifest:
    """Write sequences, label sidecars and manifests into ``out_dir``.

    Per sequence ``seq_XXX.txt`` holds the frames, ``seq_XXX.labels`` the
    scripted side per frame and ``seq_XXX.crossing`` the indices of frames in
    which both hands are within 2 degrees of the gaze. ``manifest.txt`` lists
    every sequence; with ``test_fraction > 0`` the last sequences also go to
    ``test.txt`` and the rest to ``train.txt``.
    """
    config.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths, labels = [], []
        for i in range(config.num_sequences):
            gen = generate_sequence(config, i)
            p = out_dir / f"{gen.sequence.seq_id}.txt"
            write_sequence(p, gen.sequence)
            lp = p.with_suffix(".labels")
            write_labels(lp, gen.scripted)
            with open(p.with_suffix(".crossing"), "w", encoding="utf-8") as fh:
                for k in np.flatnonzero(gen.crossing):
                    fh.write(f"{int(k)}\n")
            paths.append(p)
            labels.append(lp)
        comment = (f"hoigaze manifest N={config.n_joints} J={config.n_objects} "
                   f"fps={FPS} hand_mode={config.hand_mode}")
        write_manifest(out_dir / "manifest.txt", paths, comment)
        if test_fraction > 0:
            n_test = math.ceil(test_fraction * len(paths))
            write_manifest(out_dir / "train.txt", paths[:len(paths) - n_test], comment)
            write_manifest(out_dir / "test.txt", paths[len(paths) - n_test:], comment)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out_dir}: {exc}") from exc
    log.info("wrote %d sequences to %s", len(paths), out_dir)
    return DatasetManifest(paths=paths, n_joints=config.n_joints, n_objects=config.n_objects,
                           fps=FPS, hand_mode=config.hand_mode, labels=labels)


def read_crossing(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=int)
