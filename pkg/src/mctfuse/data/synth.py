"""Synthetic paired video/skeleton activity data with multi-hot muscle labels.

An archetype is a per-joint, per-axis sinusoidal motion pattern. A joint axis
"moves" when its amplitude exceeds ``AMPLITUDE_THRESHOLD``; the ten resulting
motion indicators determine the 20 label bits through the fixed rules in
``LABEL_RULES``. Known and new archetypes are disjoint label vectors, and
every bit of a new label also occurs in some known label.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..autodiff.rng import stream_generator
from ..skeleton import star_adjacency

NUM_LABELS = 20
NUM_JOINTS = 5
NUM_INDICATORS = 2 * NUM_JOINTS

MUSCLE_GROUPS = (
    "neck_head", "chest", "shoulder", "biceps", "triceps", "forearms", "upper_back", "latissimus",
    "obliques", "upper_abdominis", "lower_abdominis", "lower_back", "hamstring", "quadriceps",
    "calves", "inner_thigh", "outer_thigh", "gluteus", "feet_ankles", "wrists",
)

# joints: 0 root, 1 left arm, 2 right arm, 3 left leg, 4 right leg
# indicator 2*j is vertical motion of joint j, 2*j+1 horizontal
LABEL_RULES: tuple[tuple[str, tuple[int, ...]], ...] = (
    ("any", (0,)),
    ("all", (2, 4)),
    ("any", (2, 4)),
    ("all", (2, 3)),
    ("all", (4, 5)),
    ("any", (3,)),
    ("and_any", (0, 3, 5)),
    ("all", (3, 5)),
    ("and_any", (1, 2, 4)),
    ("all", (0, 1)),
    ("and_any", (0, 6, 8)),
    ("all", (1, 8)),
    ("all", (6, 7)),
    ("any", (6, 8)),
    ("any", (7,)),
    ("all", (7, 9)),
    ("any", (9,)),
    ("and_any", (8, 7, 9)),
    ("any", (7, 9)),
    ("any", (5,)),
)

# base joint positions, normalised (h, w) in [-1, 1]
BASE_POSITIONS = np.array([[0.0, 0.0], [-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]])

AMPLITUDE_THRESHOLD = 0.094   # normalised units (1.5 px at 32 px)
ACTIVE_AMPLITUDE = (0.19, 0.31)
IDLE_AMPLITUDE = (0.0, 0.025)
INDICATOR_PROB = 0.35


class GenerationError(RuntimeError):
    pass


def labels_from_indicators(ind) -> np.ndarray:
    ind = np.asarray(ind, dtype=bool)
    out = np.zeros(NUM_LABELS, dtype=np.int64)
    for bit, (kind, idx) in enumerate(LABEL_RULES):
        vals = ind[list(idx)]
        if kind == "any":
            out[bit] = vals.any()
        elif kind == "all":
            out[bit] = vals.all()
        else:
            out[bit] = vals[0] and vals[1:].any()
    return out


@dataclass
class ActivityArchetype:
    id: int
    amplitude: np.ndarray   # [J, 2] normalised
    frequency: np.ndarray   # [J, 2] cycles per clip
    phase: np.ndarray       # [J, 2] radians
    label: np.ndarray       # [20] in {0, 1}
    novel: bool = False

    @property
    def indicators(self) -> np.ndarray:
        return (self.amplitude > AMPLITUDE_THRESHOLD).reshape(-1)

    def to_dict(self) -> dict:
        return {
            "id": self.id, "novel": self.novel,
            "amplitude": self.amplitude.tolist(), "frequency": self.frequency.tolist(),
            "phase": self.phase.tolist(), "label": [int(v) for v in self.label],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActivityArchetype":
        return cls(d["id"], np.array(d["amplitude"]), np.array(d["frequency"]), np.array(d["phase"]),
                   np.array(d["label"], dtype=np.int64), bool(d["novel"]))


def _candidate_order(seed: int) -> list[np.ndarray]:
    """All indicator patterns in a seeded order that favours likely patterns (weighted shuffle)."""
    pats = ((np.arange(2 ** NUM_INDICATORS)[:, None] >> np.arange(NUM_INDICATORS)) & 1).astype(bool)
    k = pats.sum(axis=1)
    log_w = k * np.log(INDICATOR_PROB) + (NUM_INDICATORS - k) * np.log1p(-INDICATOR_PROB)
    u = stream_generator(seed, "archetypes/order", 0).random(len(pats))
    keys = np.log(u) / np.exp(log_w)   # Efraimidis-Spirakis: larger key first
    order = np.argsort(-keys, kind="stable")
    return [pats[i] for i in order]


def _motion_for(pattern: np.ndarray, rng: np.random.Generator):
    on = pattern.reshape(NUM_JOINTS, 2)
    amp = np.where(on, rng.uniform(*ACTIVE_AMPLITUDE, on.shape), rng.uniform(*IDLE_AMPLITUDE, on.shape))
    freq = rng.uniform(0.75, 1.5, on.shape)
    phase = rng.uniform(0.0, 2 * np.pi, on.shape)
    return amp, freq, phase


def generate_archetypes(n_known: int, n_new: int, seed: int) -> list[ActivityArchetype]:
    if n_known < 2 or n_new < 1:
        raise GenerationError("need at least 2 known and 1 new archetype")
    known_labels: list[tuple] = []
    known_pats: list[np.ndarray] = []
    candidates = []
    for pat in _candidate_order(seed):
        lab = tuple(labels_from_indicators(pat))
        if not any(lab):
            continue
        candidates.append((pat, lab))
    seen = set()
    rest = []
    for pat, lab in candidates:
        if lab in seen:
            continue
        seen.add(lab)
        if len(known_labels) < n_known:
            known_labels.append(lab)
            known_pats.append(pat)
        else:
            rest.append((pat, lab))
    if len(known_labels) < n_known:
        raise GenerationError(f"only {len(known_labels)} distinct labels are realisable; {n_known} known requested")
    covered = np.any(np.array(known_labels, dtype=bool), axis=0)
    new_pats = [pat for pat, lab in rest if not np.any(np.array(lab, dtype=bool) & ~covered)][:n_new]
    if len(new_pats) < n_new:
        raise GenerationError(f"only {len(new_pats)} novel label combinations available; {n_new} requested")

    out = []
    for i, pat in enumerate(known_pats + new_pats):
        rng = stream_generator(seed, "archetypes/motion", i)
        amp, freq, phase = _motion_for(pat, rng)
        out.append(ActivityArchetype(i, amp, freq, phase, labels_from_indicators(pat), novel=i >= n_known))
    return out


@dataclass
class SynthConfig:
    seed: int = 0
    n_known: int = 24
    n_new: int = 6
    samples_per_archetype: int = 20
    frames: int = 8
    height: int = 32
    width: int = 32
    joints: int = NUM_JOINTS
    jitter: float = 1.0
    video_noise: float = 0.1
    clutter_blobs: int = 3
    clutter_sigma: tuple[float, float] = (1.0, 3.0)
    clutter_intensity: tuple[float, float] = (0.3, 1.0)
    skeleton_noise: float = 0.01
    blob_sigma: float = 1.2
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        self.clutter_sigma = tuple(float(v) for v in self.clutter_sigma)
        self.clutter_intensity = tuple(float(v) for v in self.clutter_intensity)
        if self.joints != NUM_JOINTS:
            raise ValueError(f"the synthetic skeleton has exactly {NUM_JOINTS} joints")
        if min(self.frames, self.height, self.width) < 1:
            raise ValueError("frame dimensions must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("split_ratios", "clutter_sigma", "clutter_intensity"):
            d[k] = list(d[k])
        return d


@dataclass
class SyntheticSample:
    id: str
    archetype: int
    video: np.ndarray      # [T, H, W, 1]
    skeleton: np.ndarray   # [T, J, 2]
    label: np.ndarray      # [20]
    split: str = ""


def trajectory(arch: ActivityArchetype, rng: np.random.Generator | None, frames: int, jitter: float) -> np.ndarray:
    """Normalised joint positions ``[T, J, 2]`` with per-instance jitter."""
    amp, freq, phase = arch.amplitude, arch.frequency, arch.phase
    shift = np.zeros(2)
    if rng is not None and jitter > 0:
        amp = amp * (1.0 + 0.1 * jitter * rng.standard_normal(amp.shape))
        freq = freq * (1.0 + 0.05 * jitter * rng.standard_normal(freq.shape))
        phase = phase + 0.25 * jitter * rng.standard_normal(phase.shape)
        shift = 0.03 * jitter * rng.standard_normal(2)
    t = np.arange(frames)[:, None, None]
    return BASE_POSITIONS[None] + shift + amp[None] * np.sin(2 * np.pi * freq[None] * t / frames + phase[None])


def to_pixels(pos: np.ndarray, height: int, width: int) -> np.ndarray:
    scale = np.array([height - 1, width - 1], dtype=np.float64)
    return (pos + 1.0) * 0.5 * scale


def render_video(pixel_traj: np.ndarray, height: int, width: int, sigma: float = 1.2,
                 rng: np.random.Generator | None = None, noise: float = 0.0, clutter: int = 0,
                 clutter_sigma=(1.0, 3.0), clutter_intensity=(0.3, 1.0)) -> np.ndarray:
    """Gaussian blobs at joint pixel positions, plus optional static clutter and pixel noise."""
    T = pixel_traj.shape[0]
    hh = np.arange(height)[None, :, None]
    ww = np.arange(width)[None, None, :]
    frames = np.zeros((T, height, width))
    for j in range(pixel_traj.shape[1]):
        ph = pixel_traj[:, j, 0][:, None, None]
        pw = pixel_traj[:, j, 1][:, None, None]
        frames += np.exp(-((hh - ph) ** 2 + (ww - pw) ** 2) / (2 * sigma ** 2))
    if rng is not None:
        for _ in range(clutter):
            ch, cw = rng.uniform(0, height - 1), rng.uniform(0, width - 1)
            cs, ci = rng.uniform(*clutter_sigma), rng.uniform(*clutter_intensity)
            frames += ci * np.exp(-((hh - ch) ** 2 + (ww - cw) ** 2) / (2 * cs ** 2))
        if noise > 0:
            frames += noise * rng.standard_normal(frames.shape)
    return frames[..., None]


def synthesize_sample(arch: ActivityArchetype, instance_seed: int, frames: int = 8, height: int = 32,
                      width: int = 32, joints: int = NUM_JOINTS, jitter: float = 1.0, video_noise: float = 0.1,
                      clutter_blobs: int = 3, skeleton_noise: float = 0.01, blob_sigma: float = 1.2,
                      sample_id: str = "", clutter_sigma=(1.0, 3.0),
                      clutter_intensity=(0.3, 1.0)) -> SyntheticSample:
    if joints != arch.amplitude.shape[0]:
        raise ValueError(f"archetype has {arch.amplitude.shape[0]} joints, {joints} requested")
    motion_rng = stream_generator(instance_seed, "sample/motion", 0)
    video_rng = stream_generator(instance_seed, "sample/video", 0)
    skel_rng = stream_generator(instance_seed, "sample/skeleton", 0)
    traj = trajectory(arch, motion_rng, frames, jitter)
    video = render_video(to_pixels(traj, height, width), height, width, blob_sigma, video_rng,
                         video_noise, clutter_blobs, clutter_sigma, clutter_intensity)
    skel = traj.copy()
    if skeleton_noise > 0:
        skel = skel + skeleton_noise * skel_rng.standard_normal(skel.shape)
    return SyntheticSample(sample_id, arch.id, video.astype(np.float32), skel.astype(np.float32),
                           arch.label.copy())


SPLITS = ("train", "known_val", "known_test", "new_val", "new_test")


@dataclass
class SplitManifest:
    train: list[str] = field(default_factory=list)
    known_val: list[str] = field(default_factory=list)
    known_test: list[str] = field(default_factory=list)
    new_val: list[str] = field(default_factory=list)
    new_test: list[str] = field(default_factory=list)
    known_archetypes: list[int] = field(default_factory=list)
    new_archetypes: list[int] = field(default_factory=list)

    def split_of(self) -> dict[str, str]:
        return {sid: name for name in SPLITS for sid in getattr(self, name)}

    def total(self) -> int:
        return sum(len(getattr(self, name)) for name in SPLITS)


def sample_id(arch_id: int, k: int) -> str:
    return f"a{arch_id:03d}_{k:03d}"


def build_protocol_splits(archetypes: list[ActivityArchetype], samples_per_archetype: int, seed: int,
                          ratios=(0.7, 0.15, 0.15)) -> SplitManifest:
    if samples_per_archetype < 2:
        raise GenerationError("every archetype needs at least 2 samples")
    n = samples_per_archetype
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    if n_train < 1 or n_train + n_val >= n:
        raise GenerationError(f"{n} samples per archetype cannot fill train/val/test with ratios {ratios}")
    m = SplitManifest()
    for arch in archetypes:
        order = stream_generator(seed, "splits", arch.id).permutation(n)
        ids = [sample_id(arch.id, int(k)) for k in order]
        if arch.novel:
            m.new_archetypes.append(arch.id)
            m.new_val += ids[: n // 2]
            m.new_test += ids[n // 2:]
        else:
            m.known_archetypes.append(arch.id)
            m.train += ids[:n_train]
            m.known_val += ids[n_train:n_train + n_val]
            m.known_test += ids[n_train + n_val:]
    for name in SPLITS:
        getattr(m, name).sort()
    return m


@dataclass
class Dataset:
    config: SynthConfig
    archetypes: list[ActivityArchetype]
    manifest: SplitManifest
    ids: list[str]
    archetype_of: np.ndarray    # [N]
    video: np.ndarray           # [N, T, H, W, 1]
    skeleton: np.ndarray        # [N, T, J, 2]
    labels: np.ndarray          # [N, 20]
    adjacency: np.ndarray

    def __post_init__(self):
        self._index = {sid: i for i, sid in enumerate(self.ids)}

    def indices(self, split: str) -> np.ndarray:
        return np.array([self._index[s] for s in getattr(self.manifest, split)], dtype=np.int64)

    def split_tags(self) -> list[str]:
        tags = self.manifest.split_of()
        return [tags[s] for s in self.ids]


def generate_dataset(cfg: SynthConfig) -> Dataset:
    archetypes = generate_archetypes(cfg.n_known, cfg.n_new, cfg.seed)
    manifest = build_protocol_splits(archetypes, cfg.samples_per_archetype, cfg.seed, cfg.split_ratios)
    ids, arch_of, videos, skels, labels = [], [], [], [], []
    for arch in archetypes:
        for k in range(cfg.samples_per_archetype):
            sid = sample_id(arch.id, k)
            inst_seed = cfg.seed * 1_000_003 + arch.id * 1009 + k
            s = synthesize_sample(arch, inst_seed, cfg.frames, cfg.height, cfg.width, cfg.joints, cfg.jitter,
                                  cfg.video_noise, cfg.clutter_blobs, cfg.skeleton_noise, cfg.blob_sigma, sid,
                                  cfg.clutter_sigma, cfg.clutter_intensity)
            ids.append(sid)
            arch_of.append(arch.id)
            videos.append(s.video)
            skels.append(s.skeleton)
            labels.append(s.label)
    return Dataset(cfg, archetypes, manifest, ids, np.array(arch_of), np.stack(videos), np.stack(skels),
                   np.stack(labels).astype(np.int64), star_adjacency(cfg.joints))


def _require(cond, message: str) -> None:
    if not cond:
        raise AssertionError(message)


def check_manifest_invariants(ds: Dataset) -> None:
    """Raise AssertionError when the known/new protocol structure is violated."""
    m = ds.manifest
    arch = {sid: int(a) for sid, a in zip(ds.ids, ds.archetype_of)}
    all_ids = [s for name in SPLITS for s in getattr(m, name)]
    _require(len(all_ids) == len(set(all_ids)), "sample ids overlap across splits")
    train_arch = {arch[s] for s in m.train}
    _require(not train_arch & {arch[s] for s in m.new_val + m.new_test}, "new archetypes leak into train")
    _require({arch[s] for s in m.known_val + m.known_test} <= train_arch, "known split holds unseen archetypes")
    by_arch: dict[int, list[int]] = {}
    for s in m.new_val:
        by_arch.setdefault(arch[s], [0, 0])[0] += 1
    for s in m.new_test:
        by_arch.setdefault(arch[s], [0, 0])[1] += 1
    for a, (v, t) in by_arch.items():
        _require(abs(v - t) <= 1, f"new archetype {a} split {v}/{t} is not half/half")
    labels = {i: tuple(ds.labels[i]) for i in range(len(ds.ids))}
    idx = {s: i for i, s in enumerate(ds.ids)}
    train_labels = {labels[idx[s]] for s in m.train}
    seen_bits = np.any(np.array(list(train_labels), dtype=bool), axis=0)
    for s in m.new_val + m.new_test:
        lab = labels[idx[s]]
        _require(lab not in train_labels, "a new-split label vector also occurs in training")
        _require(not np.any(np.array(lab, dtype=bool) & ~seen_bits), "a new-split bit never occurs in training")
