"""Acceptance suite: one recorded pass/fail line per criterion, printed after the run.

Criteria 6 and 7 train on the default synthetic dataset and dominate the runtime
(about 12 minutes on one CPU core).
"""
import inspect
import json
import math
import shutil
import time

import numpy as np
import pytest

from conftest import TINY_SKELETON, TINY_VIDEO, criterion, tiny_config
from metrics_oracles import brute_force_ap, labelled_rankings, prevalence_oracle
from mctfuse.ablate import DEFAULT_GRID, grid_cells, run_ablation
from mctfuse.autodiff import AdamW, Linear, RngStreams, Tensor
from mctfuse.autodiff import ops as ops_module
from mctfuse.checkpoint import load_checkpoint
from mctfuse.cli import main
from mctfuse.data import SynthConfig, generate_dataset
from mctfuse.data.synth import check_manifest_invariants
from mctfuse.fusion import MCTF, KdPlacement, KdSiteRecord, aggregate_predict, mctkd_loss, video_site_blocks
from mctfuse.gradsuite import CASES, TOLERANCE, run_suite
from mctfuse.metrics import (
    EVAL_SPLITS, REPORT_ROWS, ProtocolReport, average_precision, baseline_predict, mean_average_precision,
    protocol_evaluate,
)
from mctfuse.skeleton import GcnBranchConfig, SetProjection, mct_inject, node_to_token_merge
from mctfuse.train import (
    TrainConfig, batch_inputs, build_model, evaluate_checkpoint, run_phase, train_pipeline, train_step,
)
from mctfuse.video import VideoBranch, VideoBranchConfig

SEEDS = (0, 1, 2)
NOT_DIFFERENTIABLE = {"detach", "pool_output_shape"}


# -- 1 ----------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    with criterion(1, "gradient suite") as notes:
        public = {n for n, f in inspect.getmembers(ops_module, inspect.isfunction)
                  if f.__module__ == ops_module.__name__ and not n.startswith("_")}
        missing = sorted(public - NOT_DIFFERENTIABLE - set(CASES))
        assert not missing, f"ops without a gradient case: {missing}"
        assert {"video_branch_2block", "skeleton_branch_2block"} <= set(CASES)
        start = time.perf_counter()
        results = run_suite(instances=100, seed=0)
        elapsed = time.perf_counter() - start
        worst = max(results, key=lambda r: r.max_rel_err)
        notes.append(f"{len(results)} cases x 100 instances, worst {worst.name} rel-err {worst.max_rel_err:.1e}, "
                     f"{elapsed:.0f}s")
        failed = [r.name for r in results if not r.passed]
        assert not failed, f"rel-err >= {TOLERANCE}: {failed}"
        assert elapsed < 120, f"suite took {elapsed:.0f}s"


# -- 2 ----------------------------------------------------------------------------

def test_criterion_2_mechanism_identities():
    rng = np.random.default_rng(2)
    with criterion(2, "mechanism identities") as notes:
        m = MCTF(6, RngStreams(0), dtype=np.float64)
        for lin in (m.p_f, m.mlp.fc2):
            lin.weight.data[:] = 0
            lin.bias.data[:] = 0
        a, b = rng.standard_normal((3, 4, 6)), rng.standard_normal((3, 4, 6))
        assert np.array_equal(m.eval()(Tensor(a), Tensor(b)).data, (a + b) / 2), "fusion residual identity"

        nodes, cls_m, cls_r = (rng.standard_normal((2, n, 5)) for n in (12, 4, 4))
        proj = SetProjection(5, RngStreams(0), np.float64)
        proj.mix.data[:] = 0
        out = mct_inject(Tensor(nodes), Tensor(cls_m), Tensor(cls_r), proj)
        assert all(np.array_equal(x.data, y) for x, y in zip(out, (nodes, cls_m, cls_r))), "injection identity"
        merge = Linear(5, 5, RngStreams(0), dtype=np.float64)
        merge.weight.data[:] = 0
        merge.bias.data[:] = 0
        assert np.array_equal(node_to_token_merge(Tensor(nodes), Tensor(cls_m), merge).data, cls_m), \
            "zero-projection merge identity"

        t = rng.standard_normal((2, 4, 6))
        assert float(mctkd_loss([KdSiteRecord(k, Tensor(t), Tensor(t)) for k in range(3)]).data) == 0.0
        sites = [KdSiteRecord(k, Tensor(rng.standard_normal((2, 4, 6))), Tensor(rng.standard_normal((2, 4, 6))))
                 for k in range(3)]
        base = float(mctkd_loss(sites).data)
        doubled = float(mctkd_loss([s for s in sites for _ in range(2)]).data)
        assert math.isclose(base, doubled, rel_tol=1e-12), "distillation loss changed under site duplication"

        head = Linear(6, 20, RngStreams(0), dtype=np.float64)
        y = aggregate_predict(Tensor(rng.standard_normal((16, 4, 6)) * 10), head).data
        dev = float(np.abs(y.sum(-1) - 1).max())
        assert dev <= 1e-6 and np.all(y >= 0), "prediction is not a probability vector"
        notes.append(f"max |sum-1| {dev:.1e}")


# -- 3 ----------------------------------------------------------------------------

def test_criterion_3_kd_site_counts():
    cfg = VideoBranchConfig.full_scale(input_size=(4, 64, 64), path_drop=0.0)
    want = {"SP": 4, "DE": 16, "FL": 1}
    with criterion(3, "distillation site counts on the 16-block layout") as notes:
        assert (cfg.num_blocks, tuple(cfg.expand_after)) == (16, (1, 3, 14))
        net = VideoBranch(cfg, RngStreams(0)).eval()
        clip = Tensor(np.zeros((1, 4, 64, 64, 3), dtype=np.float32))
        got = {}
        for policy in want:
            sites = video_site_blocks(policy, cfg.num_blocks, cfg.expand_after)
            KdPlacement.build(policy, cfg.num_blocks, cfg.expand_after, GcnBranchConfig().site_blocks())
            got[policy] = len(net(clip, site_blocks=sites).site_blocks)
        notes.append(" ".join(f"{k}={v}" for k, v in got.items()))
        assert got == want


# -- 4 ----------------------------------------------------------------------------

def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(4)
    with criterion(4, "metric oracles") as notes:
        checked = 0
        for n in range(1, 9):
            for scores, labels in labelled_rankings(n):
                assert average_precision(scores, labels) == float(brute_force_ap(scores, labels)), (scores, labels)
                checked += 1
        notes.append(f"{checked} rankings exact")

        y = (rng.random((300, 20)) < rng.uniform(0.05, 0.6, 20)).astype(int)
        dev = abs(mean_average_precision(baseline_predict("all-ones", 300), y) - prevalence_oracle(y))
        assert dev < 1e-9, f"all-ones deviates by {dev}"

        ds = generate_dataset(SynthConfig(seed=4, n_known=40, n_new=10, samples_per_archetype=20))
        assert len(ds.labels) == 1000
        gap = abs(mean_average_precision(baseline_predict("random", 1000, seed=0), ds.labels)
                  - prevalence_oracle(ds.labels))
        notes.append(f"all-ones dev {dev:.1e}, random gap {gap:.3f}")
        assert gap <= 0.05


# -- 5 ----------------------------------------------------------------------------

def test_criterion_5_protocol_identities():
    rng = np.random.default_rng(5)
    with criterion(5, "protocol identities") as notes:
        for _ in range(200):
            n = 40
            y = rng.integers(0, 2, (n, 20))
            y[:, rng.integers(20)] = 1
            r = protocol_evaluate(rng.random((n, 20)), y, np.repeat(EVAL_SPLITS, n // 4))
            assert r.mean_val == (r.known_val + r.new_val) / 2
            assert r.mean_test == (r.known_test + r.new_test) / 2
        configs = [SynthConfig()] + [SynthConfig(seed=s, n_known=8 + s, n_new=3 + s % 3, samples_per_archetype=6)
                                     for s in range(1, 13)]
        for cfg in configs:
            check_manifest_invariants(generate_dataset(cfg))
        notes.append(f"200 reports, {len(configs)} datasets")


# -- 6 and 7 --------------------------------------------------------------------

@pytest.fixture(scope="module")
def default_data():
    return {s: generate_dataset(SynthConfig(seed=s)) for s in SEEDS}


@pytest.fixture(scope="module")
def seed0_video(default_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("c6") / "stage1_video"
    start = time.perf_counter()
    final = run_phase(TrainConfig(seed=0), default_data[0], "video", out)
    return final, time.perf_counter() - start


def test_criterion_6_video_stage1(default_data, seed0_video, tmp_path):
    final, elapsed = seed0_video
    with criterion(6, "stage-1 video learning") as notes:
        report = evaluate_checkpoint(final, default_data[0])
        notes.append(f"known-test {report.known_test:.3f} in {elapsed:.0f}s")
        assert report.known_test >= 0.90
        assert elapsed < 600
        again = run_phase(TrainConfig(seed=0), default_data[0], "video", tmp_path / "again")
        for f in ("tensors.bin", "state.json"):
            assert (final / f).read_bytes() == (again / f).read_bytes(), f"rerun differs in {f}"
        notes.append("rerun byte-identical")


def test_criterion_7_directional_generalisation(default_data, seed0_video, tmp_path):
    arms = {"full": {}, "video_only": {"use_skeleton": False, "mctkd": False, "mctf": False}}
    with criterion(7, "full model vs video-only") as notes:
        rows = {arm: [] for arm in arms}
        for s in SEEDS:
            cache = tmp_path / f"s{s}" / "stage1"
            if s == 0:
                shutil.copytree(seed0_video[0].parent, cache / "stage1_video")
            for arm, kw in arms.items():
                final = train_pipeline(TrainConfig(seed=s, **kw), default_data[s], tmp_path / f"s{s}" / arm,
                                       stage1_cache=cache)
                r = evaluate_checkpoint(final, default_data[s])
                rows[arm].append((r.known_test, r.new_test))
        (full_k, full_n), (vid_k, vid_n) = (np.mean(rows[a], axis=0) for a in arms)
        gap_new, drop_known = full_n - vid_n, vid_k - full_k
        per_seed = ", ".join(f"s{s} {rows['full'][i][1] - rows['video_only'][i][1]:+.3f}" for i, s in enumerate(SEEDS))
        notes.append(f"new-test gap {gap_new:+.4f} ({per_seed}), known-test drop {drop_known:+.4f}, "
                     f"full {full_k:.3f}/{full_n:.3f}, video-only {vid_k:.3f}/{vid_n:.3f}")
        assert gap_new >= 0, "full model is worse on new activities"
        assert drop_known < 0.02, "known-test degraded by 0.02 or more"


# -- 8 ----------------------------------------------------------------------------

TINY = {"epochs_stage1": 1, "epochs_stage2": 1, "video": TINY_VIDEO, "skeleton": TINY_SKELETON}


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(SynthConfig(seed=8, n_known=6, n_new=4, samples_per_archetype=8))


def _grads(model):
    return {n: (np.zeros_like(p.data) if p.grad is None else p.grad) for n, p in model.named_parameters()}


def _step_grads(cfg, ds, extras=True):
    model, _ = build_model(cfg, "joint", ds.adjacency)
    idx = ds.indices("train")[:4]
    clip, joints = batch_inputs(ds, idx, "joint")
    stats = train_step(model, AdamW(model.parameters(), lr=0.0), clip, joints, ds.labels[idx], extras)
    return _grads(model), stats


def test_criterion_8_ablation(tiny_data, tmp_path):
    with criterion(8, "ablation grid") as notes:
        base = TrainConfig(**TINY)
        cells = grid_cells(DEFAULT_GRID, base)
        reports = run_ablation(base, tiny_data, tmp_path / "abl")
        assert set(reports) == {c.name for c in cells}
        for name, path in reports.items():
            r = ProtocolReport.from_csv(path)
            vals = [getattr(r, k) for k in REPORT_ROWS]
            assert all(0.0 <= v <= 1.0 for v in vals), name
        index = json.loads((tmp_path / "abl" / "index.json").read_text())
        assert len(index) == len(cells)
        notes.append(f"{len(cells)} cells reported")

        checked = 0
        for cell in cells:
            cfg = cell.config(base)
            grads, stats = _step_grads(cfg, tiny_data)
            kd_live = cfg.mctkd and cfg.late_fusion is None
            fuse_live = cfg.mctf and cfg.late_fusion is None
            assert kd_live or (stats.kd == 0.0 and not any(n.startswith("adapters.") for n in grads)), cell.name
            assert fuse_live or not any(n.startswith("fusion.") for n in grads), cell.name
            if cfg.mct and cfg.late_fusion is None and not kd_live:
                # same model with distillation present but weighted zero: shared gradients must match
                muted = TrainConfig.from_dict(dict(cfg.to_dict(), mctkd=True, loss_weight_kd=0.0))
                g_muted, _ = _step_grads(muted, tiny_data)
                for n, g in grads.items():
                    assert np.array_equal(g, g_muted[n]), f"{cell.name}: {n}"
                checked += 1
        grads, stats = _step_grads(base, tiny_data, extras=False)
        assert stats.kd == 0.0
        assert not any(g.any() for n, g in grads.items() if n.startswith(("fusion.", "adapters.")))
        notes.append(f"zero-gradient equality on {checked} cells")


# -- 9 ----------------------------------------------------------------------------

def _cli_pipeline(root, config):
    data = root / "data"
    assert main(["-q", "synth", "--seed", "9", "--archetypes-known", "6", "--archetypes-new", "4",
                 "--samples-per", "8", "--out", str(data)]) == 0
    assert main(["-q", "train", "--data", str(data), "--config", str(config), "--out", str(root / "run")]) == 0
    assert main(["-q", "eval", "--ckpt", str(root / "run" / "final"), "--data", str(data),
                 "--report", str(root / "report.csv")]) == 0
    return root / "report.csv", root / "report.json"


def test_criterion_9_determinism_and_resume(tiny_data, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps(dict(TINY, epochs_stage1=2, epochs_stage2=2)))
    with criterion(9, "determinism and resume") as notes:
        a = _cli_pipeline(tmp_path / "a", config)
        b = _cli_pipeline(tmp_path / "b", config)
        for x, y in zip(a, b):
            assert x.read_bytes() == y.read_bytes(), f"{x.name} differs between runs"
        notes.append("reports byte-identical")

        cfg = tiny_config(epochs_stage1=3, epochs_stage2=3)
        straight = train_pipeline(cfg, tiny_data, tmp_path / "straight")
        cut = tmp_path / "cut"
        train_pipeline(cfg, tiny_data, cut, stage="1")
        assert run_phase(cfg, tiny_data, "video", tmp_path / "cut_v", stop_after=1) is None
        stage1 = {b: load_checkpoint(cut / f"stage1_{b}" / "final") for b in ("video", "skeleton")}
        assert run_phase(cfg, tiny_data, "joint", cut / "stage2", stop_after=2, stage1=stage1) is None
        resumed = train_pipeline(cfg, tiny_data, cut)
        resumed_v = run_phase(cfg, tiny_data, "video", tmp_path / "cut_v")
        for f in ("tensors.bin", "state.json"):
            assert (straight / f).read_bytes() == (resumed / f).read_bytes(), f"joint resume differs in {f}"
            assert (tmp_path / "straight" / "stage1_video" / "final" / f).read_bytes() == \
                (resumed_v / f).read_bytes(), f"stage-1 resume differs in {f}"
        notes.append("mid-run resume bit-exact in both stages")
