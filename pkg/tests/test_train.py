import json

import numpy as np
import pytest

from stvfm import autodiff as ad
from stvfm.autodiff import Tensor
from stvfm.backbone import BackboneConfig
from stvfm.gridio import SplitSpec, SynthParams, synthesize
from stvfm.model import STVFM, ModelConfig, apply_variant
from stvfm.optim import AdamState, AdamW, adamw_step
from stvfm.prevfm import PatchLayout
from stvfm.train import (TrainConfig, TrainingDiverged, evaluate_checkpoint, load_checkpoint,
                         loss_flow, loss_st, prepare, save_checkpoint, total_loss, train)


# -- losses -----------------------------------------------------------------------

def triple_loop_loss(pred, target):
    """Sum of squared channel-vector norms over (t, h, w), divided by T*H*W (per window)."""
    B, T, C, H, W = pred.shape
    total = 0.0
    for b in range(B):
        for t in range(T):
            for h in range(H):
                for w in range(W):
                    d = pred[b, t, :, h, w] - target[b, t, :, h, w]
                    total += float(d @ d)
    return total / (B * T * H * W)


def test_equal_prediction_gives_zero_loss():
    x = np.random.default_rng(0).normal(size=(2, 3, 1, 4, 4))
    assert loss_st(Tensor(x), x).item() == 0.0


def test_unit_residual_gives_unit_loss():
    x = np.zeros((2, 3, 1, 4, 4))
    assert loss_st(Tensor(x + 1.0), x).item() == pytest.approx(1.0)
    assert loss_flow(Tensor(x - 1.0), x).item() == pytest.approx(1.0)


def test_channels_are_summed_not_averaged():
    x = np.zeros((1, 2, 3, 2, 2))
    assert loss_st(Tensor(x + 1.0), x).item() == pytest.approx(3.0)


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_triple_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = (2, 3, int(rng.integers(1, 4)), 4, 5)
    pred, target = rng.normal(size=shape), rng.normal(size=shape)
    assert loss_st(Tensor(pred), target).item() == pytest.approx(triple_loop_loss(pred, target), abs=1e-6)
    assert loss_flow(Tensor(pred), target).item() == pytest.approx(triple_loop_loss(pred, target), abs=1e-6)


def test_loss_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        loss_st(Tensor(np.zeros((1, 2, 1, 4, 4))), np.zeros((1, 3, 1, 4, 4)))


def test_total_loss_examples():
    assert total_loss(0.5, 0.5, 1.0) == 1.0
    assert total_loss(0.7, 9.9, 0.0) == 0.7
    with pytest.raises(ValueError):
        total_loss(0.5, 0.5, -0.1)


def test_total_loss_is_affine_in_lambda():
    l_st, l_flow = Tensor(np.float64(0.37)), Tensor(np.float64(1.91))
    vals = [total_loss(l_st, l_flow, lam).item() for lam in (0.0, 1.0, 2.0)]
    assert vals[0] == l_st.item()
    assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0]) == pytest.approx(1.91)


def test_lambda_sweep_keeps_st_share_ordered():
    shares = [0.4 / total_loss(0.4, 0.8, lam) for lam in (0.1, 0.5, 1.0, 2.0)]
    assert shares == sorted(shares, reverse=True)


# -- optimiser ----------------------------------------------------------------------

def test_zero_grad_zero_decay_is_a_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_first_step_is_minus_lr():
    p = {"w": np.array([0.0])}
    state = adamw_step(p, {"w": np.array([1.0])}, AdamState(), lr=1e-3, weight_decay=0.0)
    assert p["w"][0] == pytest.approx(-1e-3, rel=1e-6)
    assert state.step == 1


def test_decoupled_decay_shrinks_by_constant_factor():
    p = {"w": np.array([2.0])}
    state = AdamState()
    for _ in range(3):
        adamw_step(p, {"w": np.array([0.0])}, state, lr=0.01, weight_decay=0.1)
    assert p["w"][0] == pytest.approx(2.0 * 0.999 ** 3, rel=1e-12)


def test_state_shape_mismatch():
    state = AdamState()
    adamw_step({"w": np.zeros(2)}, {"w": np.ones(2)}, state)
    with pytest.raises(ad.ShapeError):
        adamw_step({"w": np.zeros(3)}, {"w": np.ones(3)}, state)
    with pytest.raises(ad.ShapeError):
        adamw_step({"w": np.zeros(3)}, {"w": np.ones(2)}, AdamState())


def test_matches_reference_adamw_over_several_steps():
    rng = np.random.default_rng(0)
    w = rng.normal(size=4)
    p = {"w": w.copy()}
    state = AdamState()
    m = v = np.zeros(4)
    lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 1e-8, 0.05
    for t in range(1, 6):
        g = rng.normal(size=4)
        adamw_step(p, {"w": g}, state, lr, (b1, b2), eps, wd)
        w = w - lr * wd * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)


# -- training loop --------------------------------------------------------------------

def tiny(variant="full", seed=0, **kw):
    cfg = apply_variant(ModelConfig(d_temporal=8, temporal_blocks=1, temporal_heads=2, coord_heads=2,
                                    prompt_len=2, coord_layers=1, decoder_blocks=1, decoder_heads=2,
                                    mlp_hidden=16, seed=seed, **kw), variant)
    return STVFM(cfg, BackboneConfig(depth=1, dim=8, heads=2), PatchLayout(6, 8, 1, 2), 3, 2)


@pytest.fixture(scope="module")
def data():
    g = synthesize("advection", SynthParams(height=6, width=8, steps=60, sigma=1.0), seed=1)
    return prepare(g, 3, 2, SplitSpec(0.6, 0.2, 0.2))


def test_prepare_shapes_and_normaliser(data):
    assert data.train["history"].shape[1:] == (3, 1, 6, 8)
    assert data.train["target"].shape[1:] == (2, 1, 6, 8)
    assert abs(float(data.train["history"].mean())) < 0.2


def test_short_split_rejected():
    g = synthesize("advection", SynthParams(height=4, width=4, steps=20), seed=0)
    with pytest.raises(ValueError, match="fewer than"):
        prepare(g, 6, 6)


def test_training_log_and_best_checkpoint_semantics(data, tmp_path):
    model = tiny()
    log = tmp_path / "log.jsonl"
    res = train(model, data, TrainConfig(P=3, Q=2, epochs=3, batch_size=8), log_path=log)
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2, 3]
    assert set(records[0]) == {"epoch", "step", "l_st", "l_flow", "total", "val_mae", "val_rmse"}
    assert res.best_val_rmse == min(r["val_rmse"] for r in records)
    best = next(r for r in records if r["val_rmse"] == res.best_val_rmse)
    assert res.best_step == best["step"]


def test_restored_weights_reproduce_best_score(data, tmp_path):
    model = tiny()
    res = train(model, data, TrainConfig(P=3, Q=2, epochs=2, batch_size=8))
    save_checkpoint(tmp_path / "m.ntc", model, data.normalizer, res.best_val_rmse)
    ck = load_checkpoint(tmp_path / "m.ntc")
    assert evaluate_checkpoint(ck, data.val).rmse == res.best_val_rmse == ck.val_rmse


def test_invalid_config_lists_every_error(data):
    with pytest.raises(ValueError) as exc:
        train(tiny(), data, TrainConfig(P=3, Q=2, lam=-1.0, lr=0.0, batch_size=0))
    assert all(s in str(exc.value) for s in ("lambda", "lr", "batch_size"))


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_aborts_with_diagnostic(data):
    bad = {k: {kk: vv.copy() for kk, vv in getattr(data, k).items()} for k in ("train", "val", "test")}
    bad["train"]["target"][:] = 1e30
    broken = type(data)(data.normalizer, data.meta, bad["train"], bad["val"], bad["test"])
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        train(tiny(), broken, TrainConfig(P=3, Q=2, epochs=1, batch_size=8))


def test_lambda_zero_leaves_flow_heads_without_gradient(data):
    norms = []

    def watch(step, l_st, l_flow, total, model):
        assert total == l_st
        norms.append(sum(float(np.abs(p.grad).sum()) for n, p in model.trainable()
                         if n.startswith("flow_head.")))

    train(tiny(), data, TrainConfig(P=3, Q=2, epochs=1, batch_size=8, lam=0.0), on_step=watch)
    assert norms and all(n == 0.0 for n in norms)


def test_branch_tokenizers_move_independently(data):
    model = tiny()
    before = {n: p.data.copy() for n, p in model.trainable()}
    train(model, data, TrainConfig(P=3, Q=2, epochs=1, batch_size=8))
    st = model.st_tok.w_adapt.data - before["st_tok.w_adapt"]
    fl = model.flow_tok.w_adapt.data - before["flow_tok.w_adapt"]
    assert np.abs(st).max() > 0 and np.abs(fl).max() > 0
    assert not np.allclose(st, fl)


def test_same_seed_gives_identical_checkpoint_bytes(data, tmp_path):
    paths = []
    for i in range(2):
        model = tiny(seed=4)
        res = train(model, data, TrainConfig(P=3, Q=2, epochs=1, batch_size=8, seed=4))
        paths.append(tmp_path / f"{i}.ntc")
        save_checkpoint(paths[-1], model, data.normalizer, res.best_val_rmse, TrainConfig(seed=4))
    assert paths[0].read_bytes() == paths[1].read_bytes()
