"""Skeleton sequences: on-disk corpus format, crop/resize views, synthetic corpora.

Sequence file (text)::

    T V C
    v0.x v0.y v0.z v1.x ...      <- one line per frame, V*C floats

Manifest (CSV) with header ``path,label,subject,view``; paths are relative
to the manifest's directory. An optional ``split.yaml`` next to the
manifest fixes the train/test rule.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from mamp.errors import DataError
from mamp.masking import round_half_up

MANIFEST_HEADER = ["path", "label", "subject", "view"]
SPLIT_FILE = "split.yaml"


@dataclass
class SkeletonSequence:
    frames: np.ndarray  # T x V x C
    label: int | None = None
    subject_id: int | None = None
    view_id: int | None = None
    name: str = ""

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValueError(f"frames must be T x V x C with T, V >= 1, got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError("frames contain non-finite values")


@dataclass
class Corpus:
    train: list[SkeletonSequence]
    test: list[SkeletonSequence]

    @property
    def num_classes(self) -> int:
        labels = {s.label for s in self.train + self.test if s.label is not None}
        return max(labels) + 1 if labels else 0


@dataclass(frozen=True)
class SplitRule:
    """``by`` is ``subject``, ``view`` or ``fraction``.

    For subject/view splits, sequences whose id is in ``test`` form the test
    set. For fraction splits a seeded ``test_fraction`` of entries is held out.
    """

    by: str = "fraction"
    test: tuple[int, ...] = ()
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.by not in ("subject", "view", "fraction"):
            raise ValueError(f"unknown split rule {self.by!r}")
        if self.by == "fraction" and not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {"by": self.by, "test": list(self.test),
                "test_fraction": self.test_fraction, "seed": self.seed}


# ---------------------------------------------------------------------------
# file format


def format_sequence(frames: np.ndarray) -> str:
    T, V, C = frames.shape
    lines = [f"{T} {V} {C}"]
    for frame in frames.reshape(T, V * C):
        lines.append(" ".join(repr(float(x)) for x in frame))
    return "\n".join(lines) + "\n"


def write_sequence(path: Path, frames: np.ndarray) -> None:
    Path(path).write_text(format_sequence(frames), encoding="utf-8", newline="\n")


def read_sequence(path: Path) -> np.ndarray:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read sequence file ({exc.strerror})") from exc
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise DataError(f"{path}:1: empty sequence file")
    header = lines[0].split()
    try:
        T, V, C = (int(x) for x in header)
    except ValueError:
        raise DataError(f"{path}:1: malformed header {lines[0]!r}, expected 'T V C'") from None
    if min(T, V, C) < 1:
        raise DataError(f"{path}:1: header extents must be positive, got {lines[0]!r}")
    body = lines[1:]
    if len(body) != T:
        raise DataError(f"{path}:{len(lines) + 1}: header promises {T} frames, file has {len(body)}")
    out = np.empty((T, V * C), dtype=np.float64)
    for i, line in enumerate(body):
        lineno = i + 2
        fields = line.split()
        if len(fields) != V * C:
            raise DataError(f"{path}:{lineno}: expected {V * C} values, found {len(fields)}")
        try:
            row = [float(x) for x in fields]
        except ValueError:
            raise DataError(f"{path}:{lineno}: unparseable number") from None
        if not all(math.isfinite(x) for x in row):
            raise DataError(f"{path}:{lineno}: non-finite value")
        out[i] = row
    return out.reshape(T, V, C)


# ---------------------------------------------------------------------------
# manifest / corpus


def write_manifest(path: Path, entries: list[tuple[str, int, int, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(entries)


def _int_or_none(s: str):
    s = s.strip()
    return int(s) if s else None


def read_manifest(path: Path) -> list[tuple[str, int | None, int | None, int | None]]:
    path = Path(path)
    try:
        with open(path, encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc.strerror})") from exc
    if not rows or [c.strip() for c in rows[0]] != MANIFEST_HEADER:
        raise DataError(f"{path}:1: manifest header must be {','.join(MANIFEST_HEADER)}")
    entries = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 columns, found {len(row)}")
        rel = row[0].strip()
        if rel in seen:
            raise DataError(f"{path}:{lineno}: duplicate path {rel!r}")
        seen.add(rel)
        try:
            entries.append((rel, *(_int_or_none(c) for c in row[1:])))
        except ValueError:
            raise DataError(f"{path}:{lineno}: label/subject/view must be integers") from None
    if not entries:
        raise DataError(f"{path}: empty corpus")
    return entries


def read_split_rule(manifest: Path) -> SplitRule | None:
    p = Path(manifest).parent / SPLIT_FILE
    if not p.exists():
        return None
    d = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    d["test"] = tuple(d.get("test", ()))
    return SplitRule(**d)


def split_sequences(seqs: list[SkeletonSequence], rule: SplitRule) -> Corpus:
    if rule.by == "fraction":
        rng = np.random.default_rng(rule.seed)
        n_test = max(1, round_half_up(rule.test_fraction * len(seqs)))
        test_idx = set(rng.permutation(len(seqs))[:n_test].tolist())
        is_test = [i in test_idx for i in range(len(seqs))]
    else:
        attr = "subject_id" if rule.by == "subject" else "view_id"
        held = set(rule.test)
        is_test = [getattr(s, attr) in held for s in seqs]
    return Corpus(
        train=[s for s, t in zip(seqs, is_test) if not t],
        test=[s for s, t in zip(seqs, is_test) if t],
    )


def load_corpus(manifest: Path, split: SplitRule | None = None) -> Corpus:
    """Parse a manifest and every sequence it lists, then split train/test.

    ``manifest`` may be the CSV itself or the directory holding
    ``manifest.csv``. Without an explicit ``split`` the corpus' own
    ``split.yaml`` is used, falling back to a seeded 20% fraction split.
    """
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.csv"
    entries = read_manifest(manifest)
    root = manifest.parent
    seqs = []
    for rel, label, subject, view in entries:
        frames = read_sequence(root / rel)
        seqs.append(SkeletonSequence(frames, label, subject, view, name=rel))
    rule = split or read_split_rule(manifest) or SplitRule()
    return split_sequences(seqs, rule)


def label_subset(seqs: list[SkeletonSequence], fraction: float, seed: int) -> list[SkeletonSequence]:
    """Stratified per-class subset keeping ``fraction`` of each class (at least one)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"label fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(seqs)
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_class.setdefault(s.label, []).append(i)
    keep = []
    for label in sorted(by_class):
        idx = by_class[label]
        n = max(1, round_half_up(fraction * len(idx)))
        keep.extend(idx[j] for j in rng.permutation(len(idx))[:n])
    return [seqs[i] for i in sorted(keep)]


# ---------------------------------------------------------------------------
# views


def crop_and_resize(frames: np.ndarray, proportion: float, length: int,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Crop a contiguous ``proportion`` of the frames and resample to ``length``.

    The crop starts at a uniform random offset, or is centred when ``rng`` is
    None. Resampling is linear with aligned endpoints: output frame ``k``
    reads source position ``k * (L - 1) / (length - 1)``.
    """
    if not 0.0 < proportion <= 1.0:
        raise ValueError(f"crop proportion must lie in (0, 1], got {proportion}")
    if length < 2:
        raise ValueError(f"target length must be >= 2, got {length}")
    T = frames.shape[0]
    crop = max(1, round_half_up(proportion * T))
    start = (T - crop) // 2 if rng is None else int(rng.integers(0, T - crop + 1))
    seg = frames[start:start + crop]
    if crop == 1:
        return np.repeat(seg, length, axis=0)
    pos = np.arange(length) * (crop - 1) / (length - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), crop - 2)
    frac = (pos - lo)[:, None, None]
    return seg[lo] * (1.0 - frac) + seg[lo + 1] * frac


TEST_PROPORTION = 0.9
TRAIN_PROPORTION = (0.5, 1.0)


def training_view(frames: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    p = rng.uniform(*TRAIN_PROPORTION)
    return crop_and_resize(frames, p, length, rng)


def eval_view(frames: np.ndarray, length: int) -> np.ndarray:
    return crop_and_resize(frames, TEST_PROPORTION, length, None)


def view_rng(seed: int, epoch: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent random stream for one (seed, epoch, sample) triple."""
    return np.random.default_rng([seed, epoch, index, stream])


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    """Per-class motion signatures over a shared rest pose.

    Every joint carries a small ``base_amplitude`` swing; each class adds
    larger ``amplitude`` swings on ``active_joints`` of its joints. Each
    sequence draws a phase shift (within ``phase_jitter``) plus nuisance
    speed, amplitude scale and body offset.
    """

    num_classes: int = 8
    sequences_per_class: int = 50
    test_per_class: int = 20
    V: int = 15
    C: int = 3
    frames: tuple[int, int] = (48, 96)
    active_joints: tuple[int, int] = (3, 6)
    frequency: tuple[float, float] = (0.25, 0.75)
    amplitude: tuple[float, float] = (0.3, 0.8)
    base_amplitude: tuple[float, float] = (0.05, 0.15)
    harmonics: int = 2
    phase_jitter: float = 0.5
    speed_jitter: float = 0.2
    scale_jitter: float = 0.2
    offset: float = 0.5
    noise: float = 0.005
    subjects: int = 10
    views: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        lo, hi = self.frames
        if not 8 <= lo <= hi <= 10_000:
            raise ValueError(f"frame-count range must lie within [8, 10000], got {self.frames}")
        if self.sequences_per_class < 1 or self.test_per_class < 0:
            raise ValueError("sequences_per_class must be >= 1 and test_per_class >= 0")
        if min(self.noise, self.phase_jitter, self.speed_jitter, self.scale_jitter, self.offset) < 0:
            raise ValueError("noise and jitter magnitudes must be non-negative")
        if not 0 <= self.active_joints[0] <= self.active_joints[1] <= self.V:
            raise ValueError(f"active_joints range must lie within [0, V], got {self.active_joints}")
        if self.harmonics < 1:
            raise ValueError("harmonics must be >= 1")


@dataclass
class ClassSignature:
    direction: np.ndarray  # harmonics x V x C, amplitude-scaled swing axis per joint
    frequency: np.ndarray  # harmonics, cycles per sequence
    phase: np.ndarray      # harmonics x V
    active: np.ndarray     # ids of the strongly moving joints


@dataclass(frozen=True)
class SequenceDraw:
    phase: float = 0.0
    speed: float = 1.0
    scale: float = 1.0
    offset: tuple[float, ...] = ()


@dataclass
class SyntheticCorpus:
    rest_pose: np.ndarray
    signatures: list[ClassSignature]
    config: SyntheticCorpusConfig
    sequences: list[SkeletonSequence] = field(default_factory=list)
    draws: list[SequenceDraw] = field(default_factory=list)

    @property
    def split_rule(self) -> SplitRule:
        n = self.config.subjects
        return SplitRule(by="subject", test=tuple(range(n, 2 * n)))

    def split(self) -> Corpus:
        return split_sequences(self.sequences, self.split_rule)


def class_signatures(cfg: SyntheticCorpusConfig, rng: np.random.Generator) -> list[ClassSignature]:
    sigs = []
    H, V, C = cfg.harmonics, cfg.V, cfg.C
    for _ in range(cfg.num_classes):
        n = int(rng.integers(cfg.active_joints[0], cfg.active_joints[1] + 1))
        active = np.sort(rng.choice(V, size=n, replace=False))
        amp = rng.uniform(*cfg.base_amplitude, size=(H, V, 1))
        amp[:, active] = rng.uniform(*cfg.amplitude, size=(H, n, 1))
        amp /= np.arange(1, H + 1)[:, None, None]
        axis = rng.normal(size=(H, V, C))
        axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
        sigs.append(ClassSignature(
            direction=axis * amp,
            frequency=rng.uniform(*cfg.frequency) * np.arange(1, H + 1),
            phase=rng.uniform(0.0, 2 * np.pi, size=(H, V)),
            active=active,
        ))
    return sigs


def synthesize(rest_pose: np.ndarray, sig: ClassSignature, num_frames: int,
               draw: SequenceDraw, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Rest pose plus every joint swinging along its class axis, plus noise.

    Harmonic ``h`` moves joint ``v`` by ``scale * direction[h, v] *
    sin(2 pi speed f_h t + phase[h, v] + (h + 1) * draw.phase)``, ``t`` in
    [0, 1) over the sequence.
    """
    t = np.arange(num_frames) / num_frames
    frames = np.repeat(rest_pose[None], num_frames, axis=0)
    if draw.offset:
        frames += np.asarray(draw.offset)
    for h, f in enumerate(sig.frequency):
        arg = 2 * np.pi * draw.speed * f * t[:, None] + sig.phase[h][None] + (h + 1) * draw.phase
        frames += draw.scale * np.sin(arg)[..., None] * sig.direction[h][None]
    if noise > 0:
        frames = frames + rng.normal(0.0, noise, size=frames.shape)
    return frames


def draw_sequence(cfg: SyntheticCorpusConfig, rng: np.random.Generator) -> SequenceDraw:
    return SequenceDraw(
        phase=float(rng.uniform(-cfg.phase_jitter, cfg.phase_jitter)),
        speed=float(np.exp(rng.uniform(-cfg.speed_jitter, cfg.speed_jitter))),
        scale=float(np.exp(rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))),
        offset=tuple(float(x) for x in rng.normal(0.0, cfg.offset, size=cfg.C)),
    )


def generate_synthetic_corpus(cfg: SyntheticCorpusConfig, out: Path | None = None) -> SyntheticCorpus:
    """Draw a labelled corpus and, if ``out`` is given, write it to disk.

    Train sequences get subject ids ``0 .. subjects-1`` and test sequences
    held-out ids ``subjects .. 2*subjects-1``; ``split.yaml`` records the
    subject split.
    """
    rng = np.random.default_rng(cfg.seed)
    rest = rng.normal(0.0, 1.0, size=(cfg.V, cfg.C))
    sigs = class_signatures(cfg, rng)
    corpus = SyntheticCorpus(rest, sigs, cfg)
    per_class = cfg.sequences_per_class + cfg.test_per_class
    for c, sig in enumerate(sigs):
        for j in range(per_class):
            is_test = j >= cfg.sequences_per_class
            T = int(rng.integers(cfg.frames[0], cfg.frames[1] + 1))
            draw = draw_sequence(cfg, rng)
            frames = synthesize(rest, sig, T, draw, cfg.noise, rng)
            subject = j % cfg.subjects + (cfg.subjects if is_test else 0)
            corpus.draws.append(draw)
            corpus.sequences.append(SkeletonSequence(
                frames, label=c, subject_id=subject, view_id=j % cfg.views,
                name=f"c{c:03d}_s{j:04d}.txt",
            ))
    if out is not None:
        write_corpus(corpus.sequences, Path(out), corpus.split_rule)
    return corpus


def write_corpus(seqs: list[SkeletonSequence], out: Path, split: SplitRule | None = None) -> Path:
    out = Path(out)
    try:
        (out / "sequences").mkdir(parents=True, exist_ok=True)
        entries = []
        for s in seqs:
            rel = f"sequences/{Path(s.name).name}" if s.name else f"sequences/{len(entries):06d}.txt"
            write_sequence(out / rel, s.frames)
            entries.append((rel, "" if s.label is None else s.label,
                            "" if s.subject_id is None else s.subject_id,
                            "" if s.view_id is None else s.view_id))
        manifest = out / "manifest.csv"
        write_manifest(manifest, entries)
        if split is not None:
            (out / SPLIT_FILE).write_text(yaml.safe_dump(split.to_dict(), sort_keys=True),
                                          encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{out}: cannot write corpus ({exc.strerror})") from exc
    return manifest
