import numpy as np
import pytest

from stvfm import autodiff as ad
from stvfm.backbone import BackboneConfig
from stvfm.gradcheck import check_end_to_end, micro_model
from stvfm.model import GROUPS, STVFM, VARIANTS, ModelConfig, apply_variant, build_model
from stvfm.postvfm import MLPDecoder, TemporalDecoder
from stvfm.prevfm import PatchLayout


def small(variant="full", **kw):
    base = dict(d_temporal=8, temporal_blocks=1, temporal_heads=2, coord_heads=2, prompt_len=2,
                decoder_blocks=1, decoder_heads=2, mlp_hidden=16)
    cfg = apply_variant(ModelConfig(**{**base, **kw}), variant)
    return STVFM(cfg, BackboneConfig(depth=1, dim=8, heads=2), PatchLayout(4, 6, 1, 2), 3, 2)


def inputs(seed=0, B=2):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(B, 3, 1, 4, 6)).astype(np.float32),
            rng.normal(size=(B, 3, 1, 4, 6)).astype(np.float32))


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_variants_build_and_predict(variant):
    m = small(variant)
    st, flow = m(*inputs())
    assert st.shape == (2, 2, 1, 4, 6)
    assert (flow is not None) == m.config.use_flow_branch
    if flow is not None:
        assert flow.shape == st.shape


def test_variant_wiring():
    v1, v2, v3, v4, full = (small(v) for v in ("1", "2", "3", "4", "full"))
    assert isinstance(v1.st_dec, MLPDecoder) and v1.st_tok.encoder is None
    assert isinstance(v2.st_dec, TemporalDecoder) and v2.st_tok.encoder is None
    assert v3.st_tok.encoder is not None and not v3.backbone.adapter_parameters()
    assert v4.backbone.adapter_parameters() and not hasattr(v4, "flow_tok")
    assert hasattr(full, "coord") and hasattr(full, "flow_head")
    assert apply_variant(ModelConfig(), "#4") == apply_variant(ModelConfig(), "4")
    with pytest.raises(ValueError, match="unknown variant"):
        apply_variant(ModelConfig(), "5")


def test_every_group_is_populated_in_full_model():
    groups = small().groups()
    assert set(groups) == set(GROUPS)
    for g, names in groups.items():
        assert names, g
    assert all(".adapter." in n for n in groups["adapters"])
    assert all(n.startswith("coord.") for n in groups["prompts"])


def test_frozen_tensors_are_exactly_the_backbone():
    m = small()
    frozen = {n for n, p in m.named_parameters() if not p.requires_grad}
    assert frozen == set(m.groups()["backbone"])


def test_config_errors_are_listed_together():
    cfg = ModelConfig(patch=0, decoder="rnn", use_flow_branch=False, temporal_patch=2)
    errors = cfg.validate()
    assert len(errors) == 4
    with pytest.raises(ValueError, match="decoder"):
        STVFM(cfg, BackboneConfig(), PatchLayout(4, 4, 1, 2), 2, 2)


def test_history_shape_checked():
    with pytest.raises(ad.ShapeError):
        small()(np.zeros((1, 2, 1, 4, 6)), np.zeros((1, 2, 1, 4, 6)))


def test_zero_init_prompt_paths_make_st_invariant_to_flow():
    m = small()
    hist, flow = inputs(1)
    a, _ = m(hist, flow)
    b, _ = m(hist, np.zeros_like(flow))
    np.testing.assert_array_equal(a.data, b.data)


def test_zero_prompt_length_decouples_branches_after_training_like_perturbation():
    m = small(prompt_len=0, zero_init_prompt_proj=False)
    rng = np.random.default_rng(2)
    for _, p in m.trainable():
        p.data = p.data + rng.normal(0, 0.05, size=p.shape).astype(p.dtype)
    hist, flow = inputs(2)
    a, _ = m(hist, flow)
    b, _ = m(hist, 3 * flow)
    np.testing.assert_allclose(a.data, b.data, atol=1e-6)


def test_prompts_couple_branches_once_projections_are_nonzero():
    m = small(zero_init_prompt_proj=False)
    hist, flow = inputs(3)
    a, _ = m(hist, flow)
    b, _ = m(hist, 3 * flow)
    assert np.abs(a.data - b.data).max() > 1e-6


def test_describe_round_trip_rebuilds_identical_model():
    m = small()
    m2 = build_model(m.describe())
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()


def test_shared_branch_weights():
    m = small(share_branch_weights=True)
    assert m.flow_tok is m.st_tok
    assert not any(n.startswith("flow_tok.") for n, _ in m.named_parameters())


def test_end_to_end_gradient():
    result = check_end_to_end()
    assert result.ok, result


def test_micro_model_is_float64():
    m = micro_model()
    assert all(p.dtype == np.float64 for p in m.parameters())
