"""Synthetic labeled corpus of controller ELF binaries.

A wall-following PD controller is simulated in a straight 2 m corridor; the
observed behavior labels each parameter set (nominal -> good, any fault ->
malware). Parameters are serialized into a ".pydata" section padded with
script-like filler to realistic lengths, wrapped in a minimal ELF, and
recorded in a CSV manifest. Everything is derived deterministically from
the corpus seed, so a manifest row is sufficient to reproduce its file.

The vehicle model is kinematic on purpose: the label oracle only needs the
qualitative fault behaviors (crash, stall, wrong direction, excessive
wander), not simulation fidelity. The car starts mid-corridor with a small
heading offset so that a do-nothing controller drifts into a wall instead
of coasting straight forever.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .elfio import ElfBuildSpec, build_elf

DT = 0.02                 # integration step, seconds
SIM_SECONDS = 30.0
WHEELBASE = 0.3           # meters
STEER_CLAMP = 0.4         # radians
CORRIDOR_WIDTH = 2.0      # meters; crash at either wall
MAX_DEVIATION = 0.5       # meters from target before behavior is a fault
STALL_SPEED = 0.05        # m/s; slower commanded speed counts as not moving
START_DISTANCE = 1.0      # initial lateral position (mid-corridor)
START_HEADING = 0.05      # radians; small offset an honest controller corrects

PAYLOAD_MAGIC = b"RMPD"
PAYLOAD_MIN = 1000
PAYLOAD_MAX = 1300
_HEADER_LEN = 4 + 4 * 8 + 1

BEHAVIORS = ("nominal", "crash", "stalled", "wrong_direction", "excessive_deviation")

# script-like fragments for padding; the classifier must key on the
# parameter bytes, not on filler statistics, so filler is class-independent
_FILLER_TEMPLATES = [
    b"def lidar_callback(self, data):\n",
    b"    error = self.desired_distance - ranges[idx]\n",
    b"    steering = self.kp * error + self.kd * d_error\n",
    b"    msg.drive.speed = self.velocity\n",
    b"    self.drive_pub.publish(msg)\n",
    b"import rospy\nfrom ackermann_msgs.msg import AckermannDriveStamped\n",
    b"rate = rospy.Rate(50)\n",
    b"angle = np.clip(angle, -0.4, 0.4)\n",
    b"prev_error = error\n",
    b"if __name__ == '__main__':\n    main()\n",
]


@dataclass(frozen=True)
class ControllerParams:
    kp: float
    kd: float
    v: float
    d_ref: float
    steer_sign: int  # +1 or -1

    def __post_init__(self):
        if self.steer_sign not in (-1, 1):
            raise ValueError(f"steer_sign must be +1 or -1, got {self.steer_sign}")
        if not all(math.isfinite(x) for x in (self.kp, self.kd, self.v, self.d_ref)):
            raise ValueError("controller parameters must be finite")
        if self.d_ref <= 0:
            raise ValueError(f"d_ref must be positive, got {self.d_ref}")


@dataclass(frozen=True)
class SimResult:
    behavior: str
    max_deviation: float
    progress: float
    steps: int

    @property
    def label(self) -> int:
        return 0 if self.behavior == "nominal" else 1


@dataclass(frozen=True)
class ManifestRow:
    filename: str
    label: int
    kp: float
    kd: float
    v: float
    d_ref: float
    steer_sign: int
    behavior: str
    payload_length: int
    seed: int

    def params(self) -> ControllerParams:
        return ControllerParams(self.kp, self.kd, self.v, self.d_ref, self.steer_sign)


@dataclass
class CorpusManifest:
    rows: list[ManifestRow] = field(default_factory=list)

    FIELDS = ("filename", "label", "kp", "kd", "v", "d_ref", "steer_sign",
              "behavior", "payload_length", "seed")

    def class_counts(self) -> tuple[int, int]:
        malware = sum(r.label for r in self.rows)
        return malware, len(self.rows) - malware

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.FIELDS)
            for r in self.rows:
                writer.writerow([
                    r.filename, r.label, repr(r.kp), repr(r.kd), repr(r.v),
                    repr(r.d_ref), r.steer_sign, r.behavior, r.payload_length, r.seed])

    @classmethod
    def read_csv(cls, path: Path) -> "CorpusManifest":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != cls.FIELDS:
                raise ValueError(f"unexpected manifest header in {path}")
            for rec in reader:
                rows.append(ManifestRow(
                    filename=rec["filename"], label=int(rec["label"]),
                    kp=float(rec["kp"]), kd=float(rec["kd"]), v=float(rec["v"]),
                    d_ref=float(rec["d_ref"]), steer_sign=int(rec["steer_sign"]),
                    behavior=rec["behavior"], payload_length=int(rec["payload_length"]),
                    seed=int(rec["seed"])))
        return cls(rows=rows)


def simulate(params: ControllerParams) -> SimResult:
    """Integrate the corridor model and classify the run's behavior."""
    d = START_DISTANCE
    heading = START_HEADING
    progress = 0.0
    max_dev = abs(d - params.d_ref)
    total_steps = int(SIM_SECONDS / DT)
    crashed = False
    steps = 0
    for steps in range(1, total_steps + 1):
        d_dot = params.v * math.sin(heading)
        u = params.steer_sign * (-params.kp * (d - params.d_ref) - params.kd * d_dot)
        u = max(-STEER_CLAMP, min(STEER_CLAMP, u))
        heading += u * DT * params.v / WHEELBASE
        d += params.v * math.sin(heading) * DT
        progress += params.v * math.cos(heading) * DT
        dev = abs(d - params.d_ref)
        if dev > max_dev:
            max_dev = dev
        if d <= 0.0 or d >= CORRIDOR_WIDTH:
            crashed = True
            break
    if crashed:
        behavior = "crash"
    elif abs(params.v) < STALL_SPEED:
        behavior = "stalled"
    elif progress < 0.0:
        behavior = "wrong_direction"
    elif max_dev > MAX_DEVIATION:
        behavior = "excessive_deviation"
    else:
        behavior = "nominal"
    return SimResult(behavior=behavior, max_deviation=max_dev,
                     progress=progress, steps=steps)


def _param_fragments(params: ControllerParams) -> list[bytes]:
    # the constants appear in the script body the way tampered source would
    return [
        f"        self.kp = {params.kp!r}\n".encode(),
        f"        self.kd = {params.kd!r}\n".encode(),
        f"        self.velocity = {params.v!r}\n".encode(),
        f"        self.desired_distance = {params.d_ref!r}\n".encode(),
        f"        self.steer_sign = {params.steer_sign}\n".encode(),
    ]


def _filler(rng: np.random.Generator, length: int,
            params: ControllerParams | None = None) -> bytes:
    fragments = _param_fragments(params) if params is not None else []
    out = bytearray()
    while len(out) < length:
        roll = rng.random()
        if fragments and roll < 0.25:
            out += fragments[rng.integers(len(fragments))]
        elif roll < 0.95:
            out += _FILLER_TEMPLATES[rng.integers(len(_FILLER_TEMPLATES))]
        else:
            out += rng.integers(0, 256, size=int(rng.integers(4, 12)), dtype=np.uint8).tobytes()
    return bytes(out[:length])


def serialize_payload(params: ControllerParams, target_length: int, noise_seed) -> bytes:
    """Parameter header plus seeded script-like filler, exactly target_length bytes."""
    if not PAYLOAD_MIN <= target_length <= PAYLOAD_MAX:
        raise ValueError(
            f"target_length {target_length} outside [{PAYLOAD_MIN}, {PAYLOAD_MAX}]")
    header = PAYLOAD_MAGIC + struct.pack(
        "<ddddb", params.kp, params.kd, params.v, params.d_ref, params.steer_sign)
    rng = np.random.default_rng(noise_seed)
    return header + _filler(rng, target_length - len(header), params=params)


def decode_payload(payload: bytes) -> ControllerParams:
    if len(payload) < _HEADER_LEN or payload[:4] != PAYLOAD_MAGIC:
        raise ValueError("payload does not start with a controller parameter header")
    kp, kd, v, d_ref, sign = struct.unpack_from("<ddddb", payload, 4)
    return ControllerParams(kp=kp, kd=kd, v=v, d_ref=d_ref, steer_sign=int(sign))


def _q(value: float) -> float:
    # tunings look hand-picked: two decimals, like the values a programmer
    # would type into a controller script
    return round(float(value), 2)


def _draw_good(rng: np.random.Generator) -> ControllerParams:
    return ControllerParams(
        kp=_q(rng.uniform(1.0, 3.5)), kd=_q(rng.uniform(0.2, 1.2)),
        v=_q(rng.uniform(0.6, 1.4)), d_ref=_q(rng.uniform(0.55, 0.95)), steer_sign=1)


def _draw_malware(rng: np.random.Generator) -> ControllerParams:
    mode = rng.integers(6)
    kp = _q(rng.uniform(1.0, 3.5))
    kd = _q(rng.uniform(0.2, 1.2))
    v = _q(rng.uniform(0.6, 1.4))
    d_ref = _q(rng.uniform(0.55, 0.95))
    sign = 1
    if mode == 0:      # gains zeroed out
        kp, kd = 0.0, 0.0
    elif mode == 1:    # proportional gain inverted
        kp = -kp
        kd = kd if rng.random() < 0.5 else -kd
    elif mode == 2:    # control polarity flipped
        sign = -1
    elif mode == 3:    # commanded speed near zero
        v = _q(rng.uniform(-0.04, 0.04))
    elif mode == 4:    # driving backwards
        v = _q(rng.uniform(-1.4, -0.5))
    else:              # destabilizing derivative gain
        kd = -_q(rng.uniform(1.5, 6.0))
    return ControllerParams(kp=kp, kd=kd, v=v, d_ref=d_ref, steer_sign=sign)


def _file_seed(corpus_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((corpus_seed, index)).generate_state(1)[0])


DEFAULT_MALWARE_FRACTION = 232 / 450


def generate_corpus(count: int, malware_fraction: float = DEFAULT_MALWARE_FRACTION,
                    seed: int = 0, out_dir: Path | str = "corpus",
                    max_attempts: int = 500) -> CorpusManifest:
    """Emit `count` labeled ELF files plus manifest.csv under out_dir."""
    if count < 2:
        raise ValueError("need at least 2 files to cover both classes")
    n_malware = round(count * malware_fraction)
    n_malware = min(max(n_malware, 1), count - 1)
    labels = np.array([1] * n_malware + [0] * (count - n_malware))
    np.random.default_rng((seed, 0xC0FFEE)).shuffle(labels)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, label in enumerate(labels):
        fseed = _file_seed(seed, i)
        rng = np.random.default_rng(fseed)
        params = result = None
        for _ in range(max_attempts):
            candidate = _draw_malware(rng) if label == 1 else _draw_good(rng)
            outcome = simulate(candidate)
            if outcome.label == label:
                params, result = candidate, outcome
                break
        if params is None:
            raise RuntimeError(
                f"no {'malware' if label else 'good'} candidate accepted after "
                f"{max_attempts} attempts (file {i}, seed {seed})")
        payload_length = int(rng.integers(PAYLOAD_MIN, PAYLOAD_MAX + 1))
        payload = serialize_payload(params, payload_length, noise_seed=(fseed, 1))
        deco_rng = np.random.default_rng((fseed, 2))
        image = build_elf(ElfBuildSpec(sections=(
            (".text", _filler(deco_rng, int(deco_rng.integers(180, 700)))),
            (".rodata", _filler(deco_rng, int(deco_rng.integers(40, 160)))),
            (".pydata", payload),
        )))
        filename = f"controller_{i:04d}.elf"
        (out_dir / filename).write_bytes(image)
        rows.append(ManifestRow(
            filename=filename, label=int(label), kp=params.kp, kd=params.kd,
            v=params.v, d_ref=params.d_ref, steer_sign=params.steer_sign,
            behavior=result.behavior, payload_length=payload_length, seed=fseed))
    manifest = CorpusManifest(rows=rows)
    manifest.write_csv(out_dir / "manifest.csv")
    return manifest
