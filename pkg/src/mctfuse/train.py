"""Two-stage training: independent single-branch training, then joint distillation and fusion."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import AdamW, Module, ModuleList, RngStreams, Tensor, no_grad, ops
from .autodiff.rng import stream_generator
from .checkpoint import Checkpoint, config_hash, load_checkpoint, save_checkpoint
from .data.synth import Dataset
from .fusion import (
    HEAD_KINDS, KD_POLICIES, LATE_FUSIONS, TOKEN_FUSIONS, ConfigurationError, KdPlacement, KdSiteRecord,
    LateFusionHead, SiteAdapter, aggregate_predict, build_token_fusion, dual_branch_predict, mctkd_loss,
    video_site_blocks,
)
from .metrics import EVAL_SPLITS, ProtocolReport, mean_average_precision, protocol_evaluate
from .skeleton import GcnBranchConfig, SkeletonBranch
from .video import NUM_LABELS, VideoBranch, VideoBranchConfig

PHASES = ("video", "skeleton", "joint")
KD_FORMATS = ("mctkd", "kd")
LR_SCHEDULES = ("constant", "cosine")
LOG_COLUMNS = ("epoch", "loss_bce", "loss_kd", "map_known_val", "map_new_val")
# keys that shape a single-branch stage-1 run; stage-1 checkpoints are keyed on these only
STAGE1_KEYS = ("seed", "epochs_stage1", "lr", "lr_schedule", "warmup_epochs", "betas", "weight_decay",
               "batch_size", "mct", "head_kind", "loss_weight_bce", "augment", "video", "skeleton")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    epochs_stage1: int = 20
    epochs_stage2: int = 20
    n_mct_epochs: int | None = None
    lr: float = 2e-3
    lr_schedule: str = "constant"
    warmup_epochs: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    batch_size: int = 8
    kd_placement: str = "SP"
    kd_alignment: list[int] | None = None
    kd_symmetric: bool = False
    kd_format: str = "mctkd"
    mct: bool = True
    mctkd: bool = True
    mctf: bool = True
    fusion_kind: str = "mctf"
    late_fusion: str | None = None
    use_skeleton: bool = True
    head_kind: str = "softmax"
    loss_weight_bce: float = 1.0
    loss_weight_kd: float = 1.0
    continue_optimizer: bool = False
    augment: bool = False
    video: dict = field(default_factory=dict)
    skeleton: dict = field(default_factory=dict)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.n_mct_epochs is None:
            self.n_mct_epochs = self.epochs_stage1
        if self.kd_alignment is not None:
            self.kd_alignment = [int(a) for a in self.kd_alignment]
        self.video = dict(self.video)
        self.skeleton = dict(self.skeleton)
        self.validate()

    def validate(self) -> None:
        if min(self.epochs_stage1, self.epochs_stage2, self.n_mct_epochs) < 0:
            raise ConfigurationError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.lr < 0:
            raise ConfigurationError("batch_size must be positive and lr non-negative")
        if (self.mctkd or self.mctf) and not self.mct:
            raise ConfigurationError("mctkd and mctf operate on multi-classification tokens and require mct")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.kd_placement not in KD_POLICIES:
            raise ConfigurationError(f"kd_placement must be one of {KD_POLICIES}")
        if self.kd_format not in KD_FORMATS:
            raise ConfigurationError(f"kd_format must be one of {KD_FORMATS}")
        if self.fusion_kind not in TOKEN_FUSIONS:
            raise ConfigurationError(f"fusion_kind must be one of {TOKEN_FUSIONS}")
        if self.late_fusion is not None and self.late_fusion not in LATE_FUSIONS:
            raise ConfigurationError(f"late_fusion must be null or one of {LATE_FUSIONS}")
        if self.late_fusion is not None and not self.use_skeleton:
            raise ConfigurationError("late fusion needs the skeleton branch")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigurationError(f"head_kind must be one of {HEAD_KINDS}")
        self.video_config()
        self.skeleton_config()

    def video_config(self) -> VideoBranchConfig:
        kw = dict(self.video)
        if not self.mct:
            kw["mct_count"] = 1
        try:
            return VideoBranchConfig(**kw)
        except TypeError as exc:
            raise ConfigurationError(f"video config: {exc}") from exc

    def skeleton_config(self) -> GcnBranchConfig:
        kw = dict(self.skeleton)
        kw["mct_count"] = self.video_config().mct_count
        try:
            return GcnBranchConfig(**kw)
        except TypeError as exc:
            raise ConfigurationError(f"skeleton config: {exc}") from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    def phase_dict(self, phase: str) -> dict:
        d = self.to_dict()
        return {k: d[k] for k in STAGE1_KEYS} if phase != "joint" else d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def config_for_phase(d: dict) -> TrainConfig:
    """Rebuild a config from a stored (possibly stage-1 subset) dictionary."""
    return TrainConfig.from_dict(d)


# -- model -------------------------------------------------------------------------

@dataclass
class ForwardResult:
    y: Tensor
    bce_terms: list[Tensor]
    kd: Tensor | None = None


class MuscleModel(Module):
    """The branches, token fusion, distillation adapters and heads active in one training phase."""

    def __init__(self, cfg: TrainConfig, phase: str, adjacency: np.ndarray, streams: RngStreams):
        super().__init__()
        if phase not in PHASES:
            raise ConfigurationError(f"unknown phase {phase!r}")
        self.cfg, self.phase = cfg, phase
        vcfg, scfg = cfg.video_config(), cfg.skeleton_config()
        joint = phase == "joint"
        self.video = VideoBranch(vcfg, streams) if phase in ("video", "joint") else None
        use_skel = phase == "skeleton" or (joint and cfg.use_skeleton)
        self.skeleton = SkeletonBranch(scfg, streams, adjacency) if use_skel else None
        self.late = self.fusion = self.placement = None
        self.adapters = None
        if joint and cfg.late_fusion is not None:
            self.late = LateFusionHead(cfg.late_fusion, self.video.out_dim, self.skeleton.out_dim, NUM_LABELS,
                                       streams)
        elif joint:
            if cfg.mctf:
                self.fusion = build_token_fusion(cfg.fusion_kind, self.video.out_dim, streams)
            if cfg.mctkd and cfg.use_skeleton:
                self.placement = KdPlacement.build(cfg.kd_placement, vcfg.num_blocks, vcfg.expand_after,
                                                   scfg.site_blocks(), cfg.kd_alignment)
                sites = self.placement_sites()
                widths = vcfg.block_dims()
                self.adapters = ModuleList(SiteAdapter(self.skeleton.out_dim, widths[b][1], streams)
                                           for b, _ in sites)

    def placement_sites(self) -> list[tuple[int, int]]:
        vcfg = self.video.cfg
        blocks = video_site_blocks(self.placement.policy, vcfg.num_blocks, vcfg.expand_after)
        return list(zip(blocks, self.placement.site_alignment))

    def forward(self, clip: Tensor | None, joints: Tensor | None, extras_active: bool = True) -> ForwardResult:
        kind = self.cfg.head_kind
        if self.phase == "skeleton":
            out = self.skeleton(joints)
            y = aggregate_predict(out.cls, self.skeleton.head, kind)
            return ForwardResult(y, [y])
        kd_on = extras_active and self.adapters is not None
        sites = self.placement_sites() if kd_on else []
        v = self.video(clip, [b for b, _ in sites])
        if self.skeleton is None:
            cls = self.fusion(v.cls, v.kd) if (extras_active and self.fusion is not None) else v.cls
            y = aggregate_predict(cls, self.video.head, kind)
            return ForwardResult(y, [y])
        s = self.skeleton(joints, sorted({a for _, a in sites}))
        if self.late is not None:
            y = self.late(ops.mean(v.cls, axis=-2), ops.mean(s.cls, axis=-2), kind)
            return ForwardResult(y, [y])
        cls = self.fusion(v.cls, v.kd) if (extras_active and self.fusion is not None) else v.cls
        y_v = aggregate_predict(cls, self.video.head, kind)
        y_s = aggregate_predict(s.cls, self.skeleton.head, kind)
        kd = None
        if kd_on:
            s_kd = dict(zip(s.site_blocks, s.site_kd))
            records = []
            for (b, a), adapter, r in zip(sites, self.adapters, v.site_kd):
                snd = s_kd[a]
                if self.cfg.kd_format == "kd":
                    r, snd = ops.mean(r, axis=-2, keepdims=True), ops.mean(snd, axis=-2, keepdims=True)
                records.append(KdSiteRecord(b, r, snd, adapter))
            kd = mctkd_loss(records, symmetric=self.cfg.kd_symmetric)
        return ForwardResult(dual_branch_predict(y_v, y_s), [y_v, y_s], kd)


def batch_inputs(ds: Dataset, idx: np.ndarray, phase: str, augment_rng: np.random.Generator | None = None):
    clip = joints = None
    if phase != "skeleton":
        v = ds.video[idx]
        if augment_rng is not None:
            v = v + 0.05 * augment_rng.standard_normal(v.shape).astype(v.dtype)
        clip = Tensor(v)
    if phase != "video":
        s = ds.skeleton[idx]
        if augment_rng is not None:
            s = s + 0.01 * augment_rng.standard_normal(s.shape).astype(s.dtype)
        joints = Tensor(s)
    return clip, joints


@dataclass
class StepStats:
    loss: float
    bce: float
    kd: float
    grad_norm: float


def learning_rate(cfg: TrainConfig, epochs: int, step: int, steps_per_epoch: int) -> float:
    """Per-step lr: linear warmup over ``warmup_epochs``, then constant or cosine decay to zero."""
    total = max(1, epochs * steps_per_epoch)
    warm = min(cfg.warmup_epochs * steps_per_epoch, total)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * (step - warm) / max(1, total - warm)))


def train_step(model: MuscleModel, optimizer: AdamW, clip, joints, labels: np.ndarray,
               extras_active: bool = True) -> StepStats:
    cfg = model.cfg
    model.train()
    optimizer.zero_grad()
    res = model(clip, joints, extras_active)
    target = Tensor(labels.astype(res.y.dtype))
    bce = ops.bce_loss(res.bce_terms[0], target)
    for y in res.bce_terms[1:]:
        bce = ops.add(bce, ops.bce_loss(y, target))
    loss = ops.mul(bce, cfg.loss_weight_bce)
    kd_val = 0.0
    if res.kd is not None:
        loss = ops.add(loss, ops.mul(res.kd, cfg.loss_weight_kd))
        kd_val = float(res.kd.data)
    lval = float(loss.data)
    if not math.isfinite(lval):
        raise FloatingPointError("non-finite loss")
    loss.backward()
    sq = math.fsum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in optimizer.params
                   if p.grad is not None)
    optimizer.step()
    return StepStats(lval, float(bce.data), kd_val, math.sqrt(sq))


def predict(model: MuscleModel, ds: Dataset, idx: np.ndarray, batch_size: int = 64,
            extras_active: bool = True) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(idx), batch_size):
            b = idx[start:start + batch_size]
            clip, joints = batch_inputs(ds, b, model.phase)
            out.append(np.asarray(model(clip, joints, extras_active).y.data, dtype=np.float64))
    model.train()
    return np.concatenate(out) if out else np.zeros((0, NUM_LABELS))


def evaluate_checkpoint(path, ds: Dataset) -> ProtocolReport:
    """Protocol report of a checkpoint on the four evaluation splits."""
    ckpt = load_checkpoint(path)
    model = model_from_checkpoint(ckpt, ds.adjacency)
    idx = np.concatenate([ds.indices(s) for s in EVAL_SPLITS])
    tags = np.concatenate([[s] * len(ds.indices(s)) for s in EVAL_SPLITS])
    meta = {"source": "checkpoint", "phase": ckpt.phase, "epoch": ckpt.epoch, "config_hash": ckpt.config_hash,
            "batch_size": ckpt.config["batch_size"], "weight_decay": ckpt.config["weight_decay"],
            "data_config_hash": config_hash(ds.config.to_dict())}
    return protocol_evaluate(predict(model, ds, idx), ds.labels[idx], tags, meta, NUM_LABELS)


# -- phase runner ------------------------------------------------------------------

def _rng_restore(streams: RngStreams, state: dict) -> None:
    streams.counters.clear()
    streams.counters.update(state.get("counters", {}))


def build_model(cfg: TrainConfig, phase: str, ds_adjacency: np.ndarray) -> tuple[MuscleModel, RngStreams]:
    streams = RngStreams(cfg.seed)
    return MuscleModel(cfg, phase, ds_adjacency, streams), streams


def model_from_checkpoint(ckpt: Checkpoint, adjacency: np.ndarray) -> MuscleModel:
    cfg = config_for_phase(ckpt.config)
    model, streams = build_model(cfg, ckpt.phase, adjacency)
    model.load_state_dict(ckpt.params)
    _rng_restore(streams, ckpt.rng)
    return model


def _make_checkpoint(cfg, phase, epoch, model, optimizer, streams, history) -> Checkpoint:
    return Checkpoint(phase, epoch, cfg.phase_dict(phase), model.state_dict(),
                      int(optimizer.state.get("step", 0)), optimizer.state_arrays(), streams.state(),
                      list(history))


def _write_log(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])


def _init_joint(model: MuscleModel, optimizer: AdamW, stage1: dict[str, Checkpoint], continue_opt: bool):
    """Load stage-1 branch weights (and optionally their optimizer moments) into the joint model."""
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    steps = [0]
    for branch in ("video", "skeleton"):
        sub = getattr(model, branch)
        if sub is None:
            continue
        ck = stage1[branch]
        prefix = branch + "."
        sub.load_state_dict({n[len(prefix):]: a for n, a in ck.params.items() if n.startswith(prefix)})
        if continue_opt and ck.optimizer_step:
            names = list(ck.params)
            for i, n in enumerate(names):
                moments[n] = (ck.optimizer[f"m.{i}"], ck.optimizer[f"v.{i}"])
            steps.append(ck.optimizer_step)
    if continue_opt and max(steps):
        arrays = {}
        for i, (n, p) in enumerate(model.named_parameters()):
            m, v = moments.get(n, (np.zeros_like(p.data), np.zeros_like(p.data)))
            arrays[f"m.{i}"], arrays[f"v.{i}"] = m, v
        optimizer.load_state(max(steps), arrays)


def run_phase(cfg: TrainConfig, ds: Dataset, phase: str, out_dir, stage1: dict[str, Checkpoint] | None = None,
              resume: bool = True, stop_after: int | None = None,
              log: Callable[[str], None] | None = None) -> Path | None:
    """Train one phase, checkpointing after every epoch into ``out_dir/last``.

    Returns the ``final`` checkpoint path, or None when ``stop_after`` epochs
    of this run elapsed first (the run can then be resumed).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    epochs = cfg.epochs_stage1 if phase != "joint" else cfg.epochs_stage2
    model, streams = build_model(cfg, phase, ds.adjacency)
    optimizer = AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    expected = config_hash(cfg.phase_dict(phase))
    history: list[dict] = []
    start = 0
    final = out / "final"
    if resume and final.exists():
        load_checkpoint(final, expected)
        return final
    if resume and (out / "last").exists():
        ck = load_checkpoint(out / "last", expected)
        model.load_state_dict(ck.params)
        optimizer.load_state(ck.optimizer_step, ck.optimizer)
        _rng_restore(streams, ck.rng)
        history, start = list(ck.history), ck.epoch
    elif phase == "joint":
        if stage1 is None:
            raise ConfigurationError("the joint phase needs stage-1 checkpoints")
        _init_joint(model, optimizer, stage1, cfg.continue_optimizer)

    train_idx = ds.indices("train")
    val_known, val_new = ds.indices("known_val"), ds.indices("new_val")
    labels = ds.labels
    ran = 0
    for epoch in range(start, epochs):
        if stop_after is not None and ran >= stop_after:
            return None
        extras = phase == "joint" and cfg.epochs_stage1 + epoch >= cfg.n_mct_epochs
        order = train_idx[stream_generator(cfg.seed, f"shuffle/{phase}", epoch).permutation(len(train_idx))]
        aug = stream_generator(cfg.seed, f"augment/{phase}", epoch) if cfg.augment else None
        bces, kds = [], []
        per_epoch = -(-len(order) // cfg.batch_size)
        for k, s in enumerate(range(0, len(order), cfg.batch_size)):
            optimizer.lr = learning_rate(cfg, epochs, epoch * per_epoch + k, per_epoch)
            b = order[s:s + cfg.batch_size]
            clip, joints = batch_inputs(ds, b, phase, aug)
            try:
                st = train_step(model, optimizer, clip, joints, labels[b], extras)
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"{phase} training diverged at epoch {epoch}: {exc}") from exc
            bces.append(st.bce * len(b))
            kds.append(st.kd * len(b))
        row = {
            "epoch": epoch,
            "loss_bce": math.fsum(bces) / len(order),
            "loss_kd": math.fsum(kds) / len(order),
            "map_known_val": mean_average_precision(predict(model, ds, val_known, extras_active=extras),
                                                    labels[val_known]),
            "map_new_val": mean_average_precision(predict(model, ds, val_new, extras_active=extras),
                                                  labels[val_new]),
        }
        history.append(row)
        _write_log(out / "log.csv", history)
        save_checkpoint(_make_checkpoint(cfg, phase, epoch + 1, model, optimizer, streams, history), out / "last")
        ran += 1
        if log:
            log(f"[{phase}] epoch {epoch + 1}/{epochs} bce={row['loss_bce']:.4f} kd={row['loss_kd']:.4f} "
                f"known_val={row['map_known_val']:.4f} new_val={row['map_new_val']:.4f}")
    if not history:
        _write_log(out / "log.csv", history)
    save_checkpoint(_make_checkpoint(cfg, phase, epochs, model, optimizer, streams, history), final)
    return final


def train_pipeline(cfg: TrainConfig, ds: Dataset, out_dir, stage: str = "all", resume: bool = True,
                   log: Callable[[str], None] | None = None, stage1_cache: Path | None = None) -> Path | None:
    """Stage 1 trains each branch alone; stage 2 trains jointly. Returns the final checkpoint path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    s1_root = Path(stage1_cache) if stage1_cache is not None else out
    branches = ["video"] + (["skeleton"] if cfg.use_skeleton else [])
    paths = {}
    if stage in ("1", "all"):
        for b in branches:
            paths[b] = run_phase(cfg, ds, b, s1_root / f"stage1_{b}", resume=resume, log=log)
        if stage == "1":
            return paths["video"]
    if stage not in ("2", "all"):
        raise ConfigurationError(f"unknown stage {stage!r}")
    ckpts = {}
    for b in branches:
        p = s1_root / f"stage1_{b}" / "final"
        ckpts[b] = load_checkpoint(p, config_hash(cfg.phase_dict(b)))
    final = run_phase(cfg, ds, "joint", out / "stage2", stage1=ckpts, resume=resume, log=log)
    link = out / "final"
    save_checkpoint(load_checkpoint(final), link)
    return link
