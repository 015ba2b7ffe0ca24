import json

import numpy as np
import pytest

from oracles import checked_case, fd_setup_config, relative_check
from pairsplat import config
from pairsplat.dropout import DropoutMask
from pairsplat.errors import CheckpointError, ConfigError, NonFiniteError
from pairsplat.harness import build_protocol
from pairsplat.imageops import gaussian_blur
from pairsplat.regularize import LossWeights, rgb_loss_grad
from pairsplat.render import render, render_backward
from pairsplat.scene import GROUPS, GaussianField, logit, make_orbit_cameras
from pairsplat.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    evaluate_views,
    load_checkpoint,
    loss_and_grad,
    position_lr,
    save_checkpoint,
    train,
    view_for_iteration,
)

from conftest import small_field

TINY = {"scene": {"count": 30}, "image": {"size": 24}, "views": {"n": 6, "train": 2},
        "loss": {"t_warm": 20}, "train": {"iterations": 30, "eval_every": 10}}


@pytest.fixture(scope="module")
def tiny():
    cfg = config.resolve(TINY)
    return cfg, build_protocol(cfg)


def lr_table(value=1e-2):
    return {name: value for name, _ in GROUPS}


class TestAdam:
    def test_zero_grads_no_change(self, rng):
        f = small_field(rng)
        before = f.params.copy()
        adam_step(f, AdamState.fresh(f, lr_table()))
        assert np.array_equal(f.params, before)

    def test_first_step_closed_form(self, rng):
        f = small_field(rng)
        table = {"position": 1e-3, "scale": 2e-3, "rotation": 3e-3, "opacity": 4e-3, "color": 5e-3}
        g = rng.normal(size=f.params.shape)
        f.grads[:] = g
        before = f.params.copy()
        state = AdamState.fresh(f, table)
        adam_step(f, state)
        for name, cols in GROUPS:
            expected = -table[name] * g[:, cols] / (np.abs(g[:, cols]) + state.eps)
            assert np.allclose(f.params[:, cols] - before[:, cols], expected, rtol=1e-12, atol=0)
        assert not np.any(f.grads) and state.step_count == 1

    def test_non_finite_names_group(self, rng):
        f = small_field(rng)
        f.grads[2, 10] = np.nan
        with pytest.raises(NonFiniteError, match="opacity"):
            adam_step(f, AdamState.fresh(f, lr_table()))

    def test_deterministic(self, rng):
        f = small_field(rng)
        g = rng.normal(size=f.params.shape)
        outs = []
        for _ in range(2):
            h = f.copy()
            s = AdamState.fresh(h, lr_table())
            for _ in range(3):
                h.grads[:] = g
                adam_step(h, s)
            outs.append(h.params.tobytes())
        assert outs[0] == outs[1]


def test_position_lr_endpoints():
    cfg = TrainConfig(iterations=100)
    assert position_lr(0, cfg) == pytest.approx(1.6e-4)
    assert position_lr(100, cfg) == pytest.approx(1.6e-6)
    assert position_lr(50, cfg) == pytest.approx(1.6e-5)


@pytest.mark.parametrize("field,value", [("iterations", 0), ("branches", 0), ("eval_every", 0)])
def test_config_guards(field, value):
    with pytest.raises(ConfigError):
        TrainConfig(**{field: value})


def test_view_shuffle_covers_each_epoch():
    train_idx = [3, 7, 9, 11]
    for epoch in range(5):
        seen = [view_for_iteration(train_idx, 0, epoch * 4 + i) for i in range(4)]
        assert sorted(seen) == train_idx


class TestLossAndGrad:
    def test_single_branch_has_no_consistency(self, cam16, rng):
        f = small_field(rng)
        gt = rng.random((16, 16, 3))
        cfg = TrainConfig(branches=1, weights=LossWeights(t_warm=10))
        b, _ = loss_and_grad(f, cam16, gt, [DropoutMask.ones(5)], cfg, 50)
        assert b.lfc == 0.0 and b.n_pairs == 0 and b.reassembles(cfg.weights.beta)

    def test_branch_gradients_add(self, cam16, rng):
        f = small_field(rng)
        gt = rng.random((16, 16, 3))
        ma = DropoutMask(np.array([True, True, False, True, True]), 0.1)
        mb = DropoutMask(np.array([True, False, True, True, True]), 0.1)
        cfg = TrainConfig(branches=2, weights=LossWeights(lambda_max=0.0))
        joint = f.copy()
        loss_and_grad(joint, cam16, gt, [ma, mb], cfg, 5)
        alone = f.copy()
        for mask, weight in ((ma, 1.0), (mb, cfg.weights.beta)):
            img = render(alone, mask, cam16, cfg.background, opacity_scale=1 / 0.9)
            _, g = rgb_loss_grad(img, gt, cfg.weights.lambda_dssim)
            render_backward(alone, mask, cam16, cfg.background, weight * g, opacity_scale=1 / 0.9)
        assert np.max(np.abs(joint.grads - alone.grads)) <= 1e-10

    @pytest.mark.parametrize("branches", [2, 3])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_finite_differences(self, branches, seed):
        cfg = fd_setup_config(branches=branches)
        analytic, fd, _ = checked_case(seed, cfg, t=60)
        ok, worst = relative_check(analytic, fd)
        assert ok, worst


class TestStopGradient:
    def test_identical_branches_zero_gradient(self, cam16, rng):
        f = small_field(rng)
        mask = DropoutMask(np.array([True, False, True, True, True]), 0.1)
        cfg = TrainConfig(branches=2, weights=LossWeights(t_warm=1))
        b, renders = loss_and_grad(f, cam16, rng.random((16, 16, 3)), [mask, mask], cfg, 10,
                                   reconstruction=False)
        assert b.lfc == 0.0
        assert np.array_equal(renders[0], renders[1])
        assert not np.any(f.grads)

    def test_far_primitive_gets_zero_gradient(self):
        # two small splats at opposite ends of a wide image; only the left one differs between branches
        cam = make_orbit_cameras(1, 4.0, width=64, height=16, fov_deg=50.0)[0]
        right = cam.rotation[0]
        rows = []
        for offset in (-1.4, 1.4):
            row = np.zeros(14)
            row[0:3] = offset * right
            row[3:6] = np.log(0.03)
            row[6] = 1.0
            row[10] = logit(0.6)
            row[11:14] = 0.5
            rows.append(row)
        f = GaussianField(np.array(rows))
        ma = DropoutMask(np.array([True, True]), 0.1)
        mb = DropoutMask(np.array([False, True]), 0.1)
        cfg = TrainConfig(branches=2, weights=LossWeights(t_warm=1))
        _, renders = loss_and_grad(f, cam, np.zeros((16, 64, 3)), [ma, mb], cfg, 10, reconstruction=False)
        k = cfg.kernel
        differs = np.any(gaussian_blur(renders[0], k) != gaussian_blur(renders[1], k), axis=(0, 2))
        assert differs[:20].any() and not differs[44:].any()
        assert np.any(f.grads[0] != 0.0)
        assert not np.any(f.grads[1])


class TestTraining:
    def test_deterministic(self, tiny):
        cfg, proto = tiny
        tcfg = TrainConfig.from_dict(cfg)
        a, ha, _ = train(tcfg, proto.init, proto.views)
        b, hb, _ = train(tcfg, proto.init, proto.views)
        assert a.params.tobytes() == b.params.tobytes()
        assert ha.records == hb.records
        assert [e.per_view for e in ha.evals] == [e.per_view for e in hb.evals]

    def test_parallel_matches_serial(self, tiny):
        cfg, proto = tiny
        serial = TrainConfig.from_dict(cfg)
        par = TrainConfig.from_dict(config.with_overrides(cfg, {"train": {"parallel": True}}))
        a, ha, _ = train(serial, proto.init, proto.views)
        b, hb, _ = train(par, proto.init, proto.views)
        assert abs(ha.evals[-1].psnr - hb.evals[-1].psnr) <= 0.05
        assert a.params.tobytes() == b.params.tobytes()

    def test_history_invariants(self, tiny):
        cfg, proto = tiny
        tcfg = TrainConfig.from_dict(cfg)
        _, h, _ = train(tcfg, proto.init, proto.views)
        its = [r.iteration for r in h.records]
        assert its == list(range(30))
        assert all(r.reassembles(tcfg.weights.beta) for r in h.records)
        assert [e.iteration for e in h.evals] == [0, 10, 20, 30]
        assert h.records[0].lambda_t == 0.0 and h.records[-1].lambda_t == tcfg.weights.lambda_max
        with pytest.raises(ValueError):
            h.append(h.records[0])

    def test_training_reduces_loss(self, tiny):
        cfg, proto = tiny
        cfg = config.with_overrides(cfg, {"train": {"iterations": 60}})
        _, h, _ = train(TrainConfig.from_dict(cfg), proto.init, proto.views)
        first = np.mean([r.rgb_a for r in h.records[:6]])
        last = np.mean([r.rgb_a for r in h.records[-6:]])
        assert last < first

    def test_truth_init_is_near_exact(self):
        cfg = config.resolve({"init": {"noise": 0.0}})
        proto = build_protocol(cfg)
        rows = evaluate_views(proto.init, proto.views, proto.views.heldout, cfg["image"]["background"])
        assert min(p for _, p, _, _ in rows) >= 40.0


class TestCheckpoint:
    def test_round_trip(self, tiny, tmp_path):
        cfg, proto = tiny
        tcfg = TrainConfig.from_dict(cfg)
        f, _, state = train(tcfg, proto.init, proto.views, stop=5)
        save_checkpoint(f, state, 5, tmp_path / "ck.json", "abc")
        g, st, t, h = load_checkpoint(tmp_path / "ck.json")
        assert g.params.tobytes() == f.params.tobytes()
        assert st.m.tobytes() == state.m.tobytes() and st.v.tobytes() == state.v.tobytes()
        assert (st.step_count, t, h) == (state.step_count, 5, "abc")
        assert set(json.loads((tmp_path / "ck.json").read_text())) == {"iteration", "field", "adam", "config_hash"}

    def test_truncated(self, tiny, tmp_path):
        cfg, proto = tiny
        save_checkpoint(proto.init, AdamState.fresh(proto.init, lr_table()), 0, tmp_path / "ck.json")
        text = (tmp_path / "ck.json").read_text()
        (tmp_path / "bad.json").write_text(text[: len(text) // 2])
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(tmp_path / "bad.json")
        assert info.value.offset is not None and info.value.offset > 0

    def test_resume_equals_straight_run(self, tiny, tmp_path):
        cfg, proto = tiny
        tcfg = TrainConfig.from_dict(cfg)
        straight, _, _ = train(tcfg, proto.init, proto.views)
        train(tcfg, proto.init, proto.views, stop=13, checkpoint_path=tmp_path / "ck.json", checkpoint_every=13)
        f, state, t, _ = load_checkpoint(tmp_path / "ck.json")
        assert t == 13
        resumed, _, _ = train(tcfg, f, proto.views, start=t, state=state)
        assert resumed.params.tobytes() == straight.params.tobytes()
