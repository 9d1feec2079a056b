"""Synthetic motion corpus generation, MOTB file IO, and dataset splits.

Motion families are parametric pose generators (sums of a few sinusoids in
axis-angle space plus a family-specific root path), so every sample carries
free ground truth: periodicity, stance phases, exact velocities.  Captions
come from a small grammar at two levels, one body-level sentence plus
per-limb clauses.

The MOTB container is ``magic "MOTB", u32 version=1, u32 format tag,
u32 fps, u32 T, u32 D`` followed by T*D little-endian float32 values,
frame-major.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    BadMagic,
    EmptyManifest,
    InvalidConfig,
    TruncatedFile,
    UnsupportedFormat,
    UnsupportedVersion,
)
from .features import (
    FORMAT_TAGS,
    FORMAT_WIDTHS,
    TAG_FORMATS,
    MotionSequence,
    PoseStream,
    encode_format,
    normalize_format,
)
from .skeleton import REST_ROOT_HEIGHT, axis_angle_to_matrix, default_skeleton

_MOTB_MAGIC = b"MOTB"
_MOTB_VERSION = 1

FAMILIES = ("arm-wave", "squat", "walk-in-circle", "idle-sway")

# a walking leg counts as planted while sin(gait phase) <= this gate
STANCE_GATE = 0.25
# the smoothstep knee pump ramps over this sin(phase) range
_LIFT_RAMP = (0.0, 0.5)
_SHANK_LENGTH = 0.425


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def stance_height_threshold(lift: float = 1.0) -> float:
    """Foot height at the stance gate: the threshold that makes
    :func:`motionbook.features.derive_foot_contact` reproduce the walking
    generator's stance schedule."""
    lo, hi = _LIFT_RAMP
    flex = lift * float(_smoothstep(np.array((STANCE_GATE - lo) / (hi - lo))))
    return _SHANK_LENGTH * (1.0 - np.cos(flex))

_X = np.array([1.0, 0.0, 0.0])
_Y = np.array([0.0, 1.0, 0.0])
_Z = np.array([0.0, 0.0, 1.0])

# joint indices into the 21-entry non-root rotation array (joint index - 1)
_J = {"l_hip": 0, "r_hip": 1, "spine1": 2, "l_knee": 3, "r_knee": 4, "spine2": 5,
      "l_ankle": 6, "r_ankle": 7, "spine3": 8, "l_collar": 12, "r_collar": 13,
      "l_shoulder": 15, "r_shoulder": 16, "l_elbow": 17, "r_elbow": 18}


# -- binary motion files -------------------------------------------------------

def write_motion(path, m: MotionSequence):
    payload = np.ascontiguousarray(m.data, dtype="<f4")
    t, d = payload.shape
    with open(path, "wb") as fh:
        fh.write(_MOTB_MAGIC)
        fh.write(struct.pack("<IIIII", _MOTB_VERSION, FORMAT_TAGS[m.format], m.fps, t, d))
        fh.write(payload.tobytes())


def read_motion(path) -> MotionSequence:
    raw = Path(path).read_bytes()
    if raw[:4] != _MOTB_MAGIC:
        raise BadMagic(f"{path}: not a MOTB file")
    if len(raw) < 24:
        raise TruncatedFile(f"{path}: incomplete MOTB header")
    version, tag, fps, t, d = struct.unpack("<IIIII", raw[4:24])
    if version != _MOTB_VERSION:
        raise UnsupportedVersion(f"{path}: MOTB version {version}")
    if tag not in TAG_FORMATS:
        raise UnsupportedFormat(f"{path}: unknown format tag {tag}")
    need = 24 + 4 * t * d
    if len(raw) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=t * d, offset=24).reshape(t, d)
    return MotionSequence(format=TAG_FORMATS[tag], fps=fps, data=data.copy())


# -- manifests ------------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    caption: str
    part_captions: list[str] = field(default_factory=list)
    split: str = "train"


def save_manifest(entries, path):
    doc = [{"path": e.path, "caption": e.caption, "part_captions": e.part_captions,
            "split": e.split} for e in entries]
    Path(path).write_text(json.dumps(doc, indent=1))


def load_manifest(path) -> list[ManifestEntry]:
    doc = json.loads(Path(path).read_text())
    entries = [ManifestEntry(path=e["path"], caption=e["caption"],
                             part_captions=list(e.get("part_captions", [])),
                             split=e.get("split", "train")) for e in doc]
    if not entries:
        raise EmptyManifest(f"{path}: empty manifest")
    return entries


def split_corpus(entries, ratios=(0.85, 0.05, 0.10), seed: int = 0) -> list[ManifestEntry]:
    """Assign train/val/test tags; counts land within +-1 of the proportions."""
    entries = list(entries)
    if not entries:
        raise EmptyManifest("nothing to split")
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or np.any(r <= 0):
        raise InvalidConfig("ratios must be three positive numbers")
    if r.sum() > 1.0 + 1e-9:
        r = r / r.sum()
    else:
        r = r / r.sum()
    n = len(entries)
    exact = r * n
    counts = np.floor(exact).astype(int)
    remainder = exact - counts
    for _ in range(n - counts.sum()):
        pick = int(np.argmax(remainder))
        counts[pick] += 1
        remainder[pick] = -1.0
    order = np.random.default_rng(seed).permutation(n)
    names = ["train", "val", "test"]
    bounds = np.cumsum(counts)
    for rank, idx in enumerate(order):
        entries[idx].split = names[int(np.searchsorted(bounds, rank, side="right"))]
    return entries


# -- synthetic motion families ------------------------------------------------------

def _identity_rots(t: int) -> np.ndarray:
    return np.broadcast_to(np.eye(3), (t, 21, 3, 3)).copy()


def _static_root(t: int, height: float = REST_ROOT_HEIGHT):
    rot = np.broadcast_to(np.eye(3), (t, 3, 3)).copy()
    pos = np.tile(np.array([0.0, height, 0.0]), (t, 1))
    return rot, pos


def synth_idle_sway(t: int, fps: int, amplitude: float, frequency: float,
                    phase: float = 0.0) -> PoseStream:
    """Standing pose with a gentle sinusoidal torso sway; amplitude 0 is static."""
    time = np.arange(t) / fps
    sway = 0.3 * amplitude * np.sin(2 * np.pi * frequency * time + phase)
    rots = _identity_rots(t)
    rots[:, _J["spine1"]] = axis_angle_to_matrix(_Z, sway)
    rots[:, _J["spine2"]] = axis_angle_to_matrix(_Z, 0.6 * sway)
    rots[:, _J["l_shoulder"]] = axis_angle_to_matrix(_X, 0.2 * sway)
    rots[:, _J["r_shoulder"]] = axis_angle_to_matrix(_X, -0.2 * sway)
    root_rot, root_pos = _static_root(t)
    return PoseStream(fps=fps, root_rotation=root_rot, root_position=root_pos,
                      joint_rotation=rots)


def synth_arm_wave(t: int, fps: int, side: str, amplitude: float, frequency: float,
                   phase: float = 0.0) -> PoseStream:
    """One arm raised and waving; the other hangs still."""
    time = np.arange(t) / fps
    wave = amplitude * np.sin(2 * np.pi * frequency * time + phase)
    lift = 1.2 if side == "left" else -1.2
    shoulder = _J["l_shoulder"] if side == "left" else _J["r_shoulder"]
    elbow = _J["l_elbow"] if side == "left" else _J["r_elbow"]
    rots = _identity_rots(t)
    rots[:, shoulder] = axis_angle_to_matrix(_Z, lift + np.sign(lift) * 0.5 * wave)
    rots[:, elbow] = axis_angle_to_matrix(_Z, np.sign(lift) * 0.6 * amplitude
                                          * np.sin(2 * np.pi * frequency * time + phase + 0.5 * np.pi))
    root_rot, root_pos = _static_root(t)
    return PoseStream(fps=fps, root_rotation=root_rot, root_position=root_pos,
                      joint_rotation=rots)


def synth_squat(t: int, fps: int, depth: float, frequency: float,
                phase: float = 0.0) -> PoseStream:
    """Periodic squats: hips and knees flex while the root dips."""
    time = np.arange(t) / fps
    s = 0.5 * (1.0 - np.cos(2 * np.pi * frequency * time + phase))
    rots = _identity_rots(t)
    for hip in (_J["l_hip"], _J["r_hip"]):
        rots[:, hip] = axis_angle_to_matrix(_X, -depth * s)
    for knee in (_J["l_knee"], _J["r_knee"]):
        rots[:, knee] = axis_angle_to_matrix(_X, 1.8 * depth * s)
    for ankle in (_J["l_ankle"], _J["r_ankle"]):
        rots[:, ankle] = axis_angle_to_matrix(_X, -0.8 * depth * s)
    rots[:, _J["spine1"]] = axis_angle_to_matrix(_X, 0.25 * depth * s)
    root_rot, _ = _static_root(t)
    root_pos = np.zeros((t, 3))
    root_pos[:, 1] = REST_ROOT_HEIGHT - 0.30 * depth * s
    return PoseStream(fps=fps, root_rotation=root_rot, root_position=root_pos,
                      joint_rotation=rots)


def synth_walk_circle(t: int, fps: int, radius: float, speed: float, frequency: float,
                      lift: float = 1.0, clockwise: bool = False,
                      phase: float = 0.0) -> tuple[PoseStream, np.ndarray]:
    """A marching walk along a circle, heading along the tangent.

    The knee pump follows a smoothstep of sin(gait phase), the ankle
    counter-rotates so the foot stays level, and heel/toe share one rest
    height; a leg's foot therefore crosses
    ``stance_height_threshold(lift)`` exactly when sin(gait phase)
    crosses ``STANCE_GATE``.

    Returns the stream plus the generator's stance schedule, a (T, 4)
    {0,1} array ordered like the codec's foot joints (L heel, R heel,
    L toe, R toe): a leg counts as planted while ``sin(gait phase) <=
    STANCE_GATE``.
    """
    time = np.arange(t) / fps
    direction = -1.0 if clockwise else 1.0
    theta = direction * (speed / radius) * time
    root_pos = np.stack([radius * np.cos(theta), np.full(t, REST_ROOT_HEIGHT),
                         radius * np.sin(theta)], axis=1)
    fwd_x = -direction * np.sin(theta)
    fwd_z = direction * np.cos(theta)
    yaw = np.arctan2(fwd_x, fwd_z)
    root_rot = axis_angle_to_matrix(_Y, yaw)

    phi = 2 * np.pi * frequency * time + phase
    lo, hi = _LIFT_RAMP
    swing_l = _smoothstep((np.sin(phi) - lo) / (hi - lo))
    swing_r = _smoothstep((np.sin(phi + np.pi) - lo) / (hi - lo))
    rots = _identity_rots(t)
    rots[:, _J["l_hip"]] = axis_angle_to_matrix(_X, -0.08 * np.sin(phi))
    rots[:, _J["r_hip"]] = axis_angle_to_matrix(_X, -0.08 * np.sin(phi + np.pi))
    rots[:, _J["l_knee"]] = axis_angle_to_matrix(_X, lift * swing_l)
    rots[:, _J["r_knee"]] = axis_angle_to_matrix(_X, lift * swing_r)
    # keep each foot level so heel and toe rise and fall together
    rots[:, _J["l_ankle"]] = axis_angle_to_matrix(_X, -(lift * swing_l - 0.08 * np.sin(phi)))
    rots[:, _J["r_ankle"]] = axis_angle_to_matrix(_X, -(lift * swing_r - 0.08 * np.sin(phi + np.pi)))
    rots[:, _J["l_shoulder"]] = axis_angle_to_matrix(_X, 0.25 * np.sin(phi + np.pi))
    rots[:, _J["r_shoulder"]] = axis_angle_to_matrix(_X, 0.25 * np.sin(phi))
    stance_l = (np.sin(phi) <= STANCE_GATE).astype(np.float64)
    stance_r = (np.sin(phi + np.pi) <= STANCE_GATE).astype(np.float64)
    stance = np.stack([stance_l, stance_r, stance_l, stance_r], axis=1)
    stream = PoseStream(fps=fps, root_rotation=root_rot, root_position=root_pos,
                        joint_rotation=rots)
    return stream, stance


def _speed_word(frequency: float) -> str:
    if frequency < 0.8:
        return "slowly"
    if frequency < 1.2:
        return "at a steady pace"
    return "quickly"


# -- corpus generation ----------------------------------------------------------------

@dataclass
class SyntheticConfig:
    count: int = 2000
    seed: int = 0
    fps: int = 20
    length_range: tuple = (64, 96)
    format: str = "smpl-d135"
    families: tuple = FAMILIES
    amplitude_range: tuple = (0.3, 0.9)
    frequency_range: tuple = (0.5, 1.5)
    split_ratios: tuple = (0.85, 0.05, 0.10)

    def validate(self):
        if self.count < 1:
            raise InvalidConfig("count must be >= 1")
        if self.fps < 1:
            raise InvalidConfig("fps must be >= 1")
        lo, hi = self.length_range
        if lo < 2 or hi < lo:
            raise InvalidConfig("length_range must satisfy 2 <= lo <= hi")
        if self.frequency_range[1] >= self.fps / 2:
            raise InvalidConfig("max frequency violates the Nyquist limit fps/2")
        if self.frequency_range[0] <= 0 or self.amplitude_range[0] < 0:
            raise InvalidConfig("frequency must be positive, amplitude nonnegative")
        for fam in self.families:
            if fam not in FAMILIES:
                raise InvalidConfig(f"unknown family {fam!r}")
        normalize_format(self.format)
        return self


def _sample(cfg: SyntheticConfig, index: int):
    """One deterministic (stream, captions) draw; seeded per sample."""
    rng = np.random.default_rng([cfg.seed, index])
    family = cfg.families[int(rng.integers(len(cfg.families)))]
    t = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
    amplitude = float(rng.uniform(*cfg.amplitude_range))
    frequency = float(rng.uniform(*cfg.frequency_range))
    phase = float(rng.uniform(0.0, 2 * np.pi))
    speed_word = _speed_word(frequency)

    if family == "idle-sway":
        stream = synth_idle_sway(t, cfg.fps, amplitude, frequency, phase)
        caption = "a person stands in place, swaying gently"
        parts = ["the torso sways from side to side",
                 "both arms hang relaxed",
                 "the legs stay planted"]
    elif family == "arm-wave":
        side = "left" if rng.integers(2) == 0 else "right"
        other = "right" if side == "left" else "left"
        stream = synth_arm_wave(t, cfg.fps, side, amplitude, frequency, phase)
        caption = f"a person waves the {side} arm {speed_word}"
        parts = [f"the {side} arm is raised and swings up and down",
                 f"the {other} arm hangs at the side",
                 "the legs stay still"]
    elif family == "squat":
        stream = synth_squat(t, cfg.fps, amplitude, frequency, phase)
        caption = f"a person performs squats {speed_word}"
        parts = ["both knees bend deeply and straighten again",
                 "the hips drop and rise with each repetition",
                 "the arms stay at the sides"]
    else:  # walk-in-circle
        clockwise = bool(rng.integers(2))
        radius = float(rng.uniform(0.8, 2.0))
        speed = float(rng.uniform(0.3, 0.7))
        stream, _ = synth_walk_circle(t, cfg.fps, radius, speed, frequency,
                                      lift=0.6 + 0.5 * amplitude,
                                      clockwise=clockwise, phase=phase)
        turn = "clockwise" if clockwise else "counterclockwise"
        caption = f"a person walks {turn} in a circle {speed_word}"
        parts = ["the legs step with a marching rhythm",
                 "the arms swing in opposition to the legs",
                 f"the body turns steadily {turn}"]
    return stream, caption, parts


def gen_synthetic(cfg: SyntheticConfig, out_dir) -> list[ManifestEntry]:
    """Write ``count`` MOTB files plus ``manifest.json``; fully seeded."""
    cfg.validate()
    out_dir = Path(out_dir)
    motion_dir = out_dir / "motions"
    motion_dir.mkdir(parents=True, exist_ok=True)
    skel = default_skeleton()
    entries = []
    for i in range(cfg.count):
        stream, caption, parts = _sample(cfg, i)
        seq = encode_format(stream, cfg.format, skel=skel)
        rel = f"motions/{i:05d}.motb"
        write_motion(out_dir / rel, seq)
        entries.append(ManifestEntry(path=rel, caption=caption, part_captions=parts))
    split_corpus(entries, ratios=cfg.split_ratios, seed=cfg.seed)
    save_manifest(entries, out_dir / "manifest.json")
    return entries


def load_corpus(manifest_path, split: str | None = None):
    """Read (entries, sequences) for one split (or all splits when None)."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    base = manifest_path.parent
    entries = [e for e in load_manifest(manifest_path)
               if split is None or e.split == split]
    if not entries:
        raise EmptyManifest(f"no entries for split {split!r}")
    sequences = [read_motion(base / e.path) for e in entries]
    return entries, sequences
