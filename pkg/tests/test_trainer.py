import math
from collections import OrderedDict

import numpy as np
import pytest

from conftest import TINY_PYRAMID
from localmim import tensor as T
from localmim.data import ScaleRecipe, Tap, random_mask
from localmim.descriptors import TapTarget, TargetBundle
from localmim.harness import load_dataset
from localmim.tensor import Prng, Tensor
from localmim.trainer import (
    AdamW,
    CheckpointError,
    NonFiniteGradient,
    adamw_update,
    build_model,
    checkpoint_entries,
    load_checkpoint,
    local_mim_loss,
    lr_schedule,
    make_batch_masks,
    make_checkpoint,
    make_heads,
    run_pretrain,
    save_checkpoint,
    train_step,
)
from localmim import tensorfile


def bundle_of(targets, masks):
    return TargetBundle([TapTarget(t, m, "pixel", m.shape[-1]) for t, m in zip(targets, masks)])


# objective


def test_loss_zero_when_predictions_match():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(2, 16, 5))
    m = np.stack([random_mask(16, 0.5, rng).bits for _ in range(2)])
    total, parts = local_mim_loss([Tensor(t)], bundle_of([t], [m]), [1.0])
    assert float(total.data) == 0.0 and len(parts) == 1


def test_single_tap_matches_global_masked_mse_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pred, tgt = rng.normal(size=(3, 16, 7)), rng.normal(size=(3, 16, 7))
        m = np.stack([random_mask(16, 0.75, rng).bits for _ in range(3)])
        total, _ = local_mim_loss([Tensor(pred)], bundle_of([tgt], [m]), [1.0])
        flat = m.reshape(3, 16)
        per_row = ((pred - tgt) ** 2).mean(axis=-1)
        oracle = (per_row * flat).sum() / flat.sum()
        assert abs(float(total.data) - oracle) <= 1e-10


def test_weighted_sum_over_taps():
    rng = np.random.default_rng(2)
    preds = [Tensor(rng.normal(size=(1, 16, 3))), Tensor(rng.normal(size=(1, 4, 3)))]
    tgts = [rng.normal(size=(1, 16, 3)), rng.normal(size=(1, 4, 3))]
    masks = [np.ones((1, 4, 4), bool), np.ones((1, 2, 2), bool)]
    total, parts = local_mim_loss(preds, bundle_of(tgts, masks), [0.5, 2.0])
    assert math.isclose(float(total.data), 0.5 * float(parts[0].data) + 2.0 * float(parts[1].data), rel_tol=1e-14)


def test_unmasked_target_rows_do_not_matter():
    rng = np.random.default_rng(3)
    pred, tgt = rng.normal(size=(2, 16, 4)), rng.normal(size=(2, 16, 4))
    m = np.stack([random_mask(16, 0.5, rng).bits for _ in range(2)])
    base = float(local_mim_loss([Tensor(pred)], bundle_of([tgt], [m]), [1.0])[0].data)
    noisy = tgt.copy()
    noisy[~m.reshape(2, 16)] += rng.normal(size=noisy[~m.reshape(2, 16)].shape) * 100
    assert float(local_mim_loss([Tensor(pred)], bundle_of([noisy], [m]), [1.0])[0].data) == base


def test_empty_tap_mask_is_named():
    t = np.zeros((1, 4, 2))
    masks = [np.ones((1, 2, 2), bool), np.zeros((1, 2, 2), bool)]
    with pytest.raises(ValueError, match="tap 1"):
        local_mim_loss([Tensor(t), Tensor(t)], bundle_of([t, t], masks), [1.0, 1.0])


# schedule


def test_lr_schedule_examples():
    assert lr_schedule(0, 10, 100, 2e-4, 256) == 0.0
    assert math.isclose(lr_schedule(10, 10, 100, 2e-4, 256), 2e-4, rel_tol=1e-15)
    assert abs(lr_schedule(100, 10, 100, 2e-4, 256)) <= 1e-12
    assert math.isclose(lr_schedule(10, 10, 100, 2e-4, 4096), 2e-4 * 16)
    assert math.isclose(lr_schedule(5, 10, 100, 1.0, 256), 0.5)
    assert math.isclose(lr_schedule(55, 10, 100, 1.0, 256), 0.5, abs_tol=1e-12)
    with pytest.raises(ValueError):
        lr_schedule(0, 10, 10, 1.0, 256)


def test_lr_schedule_monotone_pieces():
    lrs = [lr_schedule(s, 20, 200, 1e-3, 64) for s in range(201)]
    assert all(a <= b for a, b in zip(lrs[:21], lrs[1:21]))
    assert all(a >= b for a, b in zip(lrs[20:], lrs[21:]))


# optimiser


def test_zero_gradient_applies_decoupled_decay_only_to_matrices():
    w = Tensor(np.full((2, 2), 3.0), requires_grad=True)
    b = Tensor(np.full(2, 3.0), requires_grad=True)
    named = OrderedDict(w=w, b=b)
    state = AdamW(weight_decay=0.05)
    adamw_update(named, {"w": np.zeros((2, 2)), "b": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_allclose(w.data, 3.0 * (1 - 0.1 * 0.05), rtol=1e-15)
    np.testing.assert_array_equal(b.data, 3.0)


def test_adamw_matches_reference_step():
    rng = np.random.default_rng(4)
    p0, g1, g2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    p = Tensor(p0.copy(), requires_grad=True)
    st = AdamW((0.9, 0.95), 0.05)
    lr = 1e-2
    ref, m, v = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
    for t, g in enumerate([g1, g2], start=1):
        adamw_update(OrderedDict(p=p), {"p": g}, st, lr)
        ref *= 1 - lr * 0.05
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        ref -= lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.95**t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-13)


def test_adamw_converges_on_quadratic():
    x = Tensor(np.array([5.0]), requires_grad=True)
    st = AdamW(weight_decay=0.0)
    for _ in range(500):
        adamw_update(OrderedDict(x=x), {"x": 2 * (x.data - 1.5)}, st, lr=0.05)
    assert abs(x.data[0] - 1.5) < 1e-2


def test_non_finite_gradient_rejected_without_update():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    st = AdamW()
    with pytest.raises(NonFiniteGradient):
        adamw_update(OrderedDict(x=x), {"x": np.array([[1.0, np.nan], [0, 0]])}, st, 0.1)
    np.testing.assert_array_equal(x.data, 1.0)
    assert st.step == 0 and not st.m


# heads and modes


def test_heads_per_mode():
    recipe = ScaleRecipe([Tap(2, 16), Tap(4, 8), Tap(6, 4), Tap(8, 2)], 4)
    assert [(h.layer, h.scale) for h in make_heads("local-multi", recipe, 8, 4)] == [(2, 16), (4, 8), (6, 4), (8, 2)]
    assert [(h.layer, h.scale) for h in make_heads("local-single", recipe, 8, 4)] == [(2, 4), (4, 4), (6, 4), (8, 4)]
    assert [(h.layer, h.scale) for h in make_heads("global-multi", recipe, 8, 4)] == [(8, 16), (8, 8), (8, 4), (8, 2)]
    assert [(h.layer, h.scale) for h in make_heads("global-single", recipe, 8, 4)] == [(8, 4)]
    assert [(h.layer, h.scale) for h in make_heads("fusion", recipe, 8, 4)] == [(0, 4)]
    with pytest.raises(ValueError):
        make_heads("local-triple", recipe, 8, 4)


@pytest.mark.parametrize("mode", ["local-multi", "local-single", "global-multi", "global-single", "fusion"])
def test_every_mode_trains_one_step(make_cfg, mode):
    cfg = make_cfg(train={"mode": mode})
    model = build_model(cfg)
    data = load_dataset(cfg)[:4]
    bits = make_batch_masks(cfg, 1, 4, Prng(0))
    res = train_step(model, AdamW(), data, bits, 1e-3)
    assert np.isfinite(res.loss) and res.loss > 0
    assert len(res.tap_losses) == len(model.heads)


def test_fusion_projects_every_tap_to_top_width(make_cfg):
    model = build_model(make_cfg(train={"mode": "fusion"}))
    assert sorted(model.fuse) == ["2", "4", "6", "8"]
    assert all(lin.weight.shape == (16, 16) for lin in model.fuse.values())
    assert list(model.decoders) == ["fusion"]


@pytest.mark.parametrize("mode", ["local-multi", "fusion", "global-single"])
def test_pyramid_model_trains_one_step(make_cfg, mode):
    cfg = make_cfg(TINY_PYRAMID, train={"mode": mode})
    model = build_model(cfg)
    bits = make_batch_masks(cfg, 1, 2, Prng(0))
    blocks = bits.reshape(2, 2, 8, 2, 8)
    assert (blocks.all(axis=(2, 4)) | ~blocks.any(axis=(2, 4))).all()
    res = train_step(model, AdamW(), load_dataset(cfg)[:2], bits, 1e-3)
    assert np.isfinite(res.loss)
    if mode == "local-multi":
        assert [h.scale for h in model.heads] == [8, 4, 2, 2]


def test_train_step_deterministic(make_cfg):
    cfg = make_cfg()
    data = load_dataset(cfg)[:4]
    bits = make_batch_masks(cfg, 1, 4, Prng(0))
    runs = []
    for _ in range(2):
        model, opt = build_model(cfg), AdamW()
        runs.append([train_step(model, opt, data, bits, 1e-3).loss for _ in range(2)])
    assert runs[0] == runs[1]


def test_masks_shared_across_modes(make_cfg):
    a = make_batch_masks(make_cfg(train={"mode": "local-multi"}), 3, 4, Prng(0))
    b = make_batch_masks(make_cfg(train={"mode": "fusion"}), 3, 4, Prng(0))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, make_batch_masks(make_cfg(), 4, 4, Prng(0)))


def _segments(model):
    groups = model.encoder.layer_params()
    bounds = [0] + model.recipe.layers
    segs = []
    for lo, hi in zip(bounds, bounds[1:]):
        members = [p for i, (_, ps) in enumerate(groups) if lo < i <= hi or (lo == 0 and i == 0) for p in ps]
        segs.append(members)
    return segs


def test_grad_isolation_zeroes_other_segments(make_cfg):
    cfg = make_cfg(train={"grad_isolated": True})
    model = build_model(cfg)
    data = load_dataset(cfg)[:4]
    bits = make_batch_masks(cfg, 1, 4, Prng(0))
    segs = _segments(model)
    params = model.parameters()
    for j in range(4):
        w = [0.0] * 4
        w[j] = 1.0
        total, _, _ = model.loss(data, bits, w)
        grads = T.backward(total, params)
        own = {id(p) for p in segs[j]} | {id(p) for p in model.decoders[model.heads[j].name].parameters()}
        assert any(grads[p].any() for p in segs[j])
        for p in params:
            if id(p) not in own:
                assert not grads[p].any()


def test_without_isolation_lower_segments_get_gradient(make_cfg):
    cfg = make_cfg()
    model = build_model(cfg)
    total, _, _ = model.loss(load_dataset(cfg)[:4], make_batch_masks(cfg, 1, 4, Prng(0)), [0, 0, 0, 1.0])
    grads = T.backward(total, model.parameters())
    assert any(grads[p].any() for p in _segments(model)[0])


# checkpoints and runs


def test_checkpoint_round_trip_byte_identical(make_cfg, tmp_path):
    cfg = make_cfg()
    model, opt = build_model(cfg), AdamW()
    train_step(model, opt, load_dataset(cfg)[:4], make_batch_masks(cfg, 1, 4, Prng(0)), 1e-3)
    ck = make_checkpoint(model, opt, 1, 1, cfg)
    save_checkpoint(ck, tmp_path / "a.lmim")
    back = load_checkpoint(tmp_path / "a.lmim", expected_digest=cfg.digest())
    save_checkpoint(back, tmp_path / "b.lmim")
    assert (tmp_path / "a.lmim").read_bytes() == (tmp_path / "b.lmim").read_bytes()
    assert back.step == 1 and back.opt_step == 1 and back.config_digest == cfg.digest()


def test_checkpoint_rejections(make_cfg, tmp_path):
    cfg = make_cfg()
    model, opt = build_model(cfg), AdamW()
    ck = make_checkpoint(model, opt, 0, 0, cfg)
    path = tmp_path / "c.lmim"
    save_checkpoint(ck, path)
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path, expected_digest="0" * 64)
    raw = path.read_bytes()
    for cut in (3, 20, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.lmim").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.lmim")
    shapes = {k: v.shape for k, v in ck.params.items()}
    name = next(iter(shapes))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path, shapes={**shapes, name: (1, 2, 3)})


def test_tampered_shape_field_rejected(make_cfg, tmp_path):
    cfg = make_cfg()
    entries = checkpoint_entries(make_checkpoint(build_model(cfg), AdamW(), 0, 0, cfg))
    buf = bytearray(tensorfile.dumps(entries))
    name = b"param/encoder.patch_embed.weight"
    at = bytes(buf).index(name) + len(name) + 2  # skip dtype and rank bytes
    buf[at] += 1  # first dim grows by one
    (tmp_path / "x.lmim").write_bytes(bytes(buf))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.lmim")


def test_run_pretrain_outputs(make_cfg, tmp_path):
    cfg = make_cfg()
    res = run_pretrain(cfg, load_dataset(cfg), tmp_path / "r")
    lines = (tmp_path / "r" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,lr,loss_total,loss_tap1,loss_tap2,loss_tap3,loss_tap4,wall_ms"
    assert len(lines) == 1 + cfg.total_steps
    assert all(line.endswith(",0.000") for line in lines[1:])
    assert (tmp_path / "r" / "ckpt_epoch001.lmim").exists() and (tmp_path / "r" / "last.lmim").exists()
    assert res.checkpoint.step == cfg.total_steps


def test_run_pretrain_reports_bad_output_path(make_cfg, tmp_path):
    cfg = make_cfg()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        run_pretrain(cfg, load_dataset(cfg), blocker / "sub")


def test_resume_reproduces_next_step(make_cfg, tmp_path):
    cfg = make_cfg(train={"epochs": 3, "warmup_epochs": 1})
    data = load_dataset(cfg)
    full = run_pretrain(cfg, data, tmp_path / "full")
    ck = load_checkpoint(tmp_path / "full" / "ckpt_epoch002.lmim", expected_digest=cfg.digest())
    part = run_pretrain(cfg, data, tmp_path / "part", resume=ck, max_steps=1)
    assert part.rows[0]["loss_total"] == full.rows[ck.step]["loss_total"]


def test_resume_refuses_other_config(make_cfg, tmp_path):
    cfg = make_cfg()
    run_pretrain(cfg, load_dataset(cfg), tmp_path / "a", max_steps=1)
    ck = load_checkpoint(tmp_path / "a" / "last.lmim")
    other = make_cfg(train={"seed": 1})
    with pytest.raises(CheckpointError):
        run_pretrain(other, load_dataset(other), tmp_path / "b", resume=ck)
