import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crackseg import tensor as T
from crackseg.architectures import (FAMILIES, EnsembleConfig, MetaBlock, ResUNetConfig,
                                    build_ensemble, build_model, build_residual_unet,
                                    build_segnet, build_unet, count_parameters, set_trainable)
from crackseg.errors import ConfigError, ShapeError
from crackseg.layers import build_residual_block
from crackseg.tensor import Tensor

from oracles import count_meta_params, count_segnet_params, count_unet_params

TINY = ResUNetConfig(kernel_size=3, depth=2, base_filters=2)


def tiny_ensemble(seed=0, kernels=(3, 5)):
    bases = [build_residual_unet(ResUNetConfig(k, 2, 2), seed=seed + i) for i, k in enumerate(kernels)]
    return build_ensemble(bases, EnsembleConfig(kernels, meta_channels=4), seed=seed)


def image(rng, n=1, h=16, w=16):
    return rng.uniform(0, 1, (n, 1, h, w)).astype(np.float32)


# ------------------------------------------------------------------ configs

@pytest.mark.parametrize("kwargs", [dict(kernel_size=4), dict(kernel_size=1), dict(depth=1),
                                    dict(base_filters=0), dict(in_channels=3)])
def test_resunet_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ResUNetConfig(**kwargs)


def test_ensemble_config_validation():
    with pytest.raises(ConfigError):
        EnsembleConfig(base_kernel_sizes=(3,))
    with pytest.raises(ConfigError):
        EnsembleConfig(base_kernel_sizes=(3, 4))
    assert EnsembleConfig().base_count == 4


# ------------------------------------------------------------ residual block

def test_residual_block_with_zeroed_main_path_is_identity():
    block = build_residual_block(3, 3, 3, seed=1)
    for name, p in block.named_parameters():
        p.data[...] = 0
    x = np.random.default_rng(0).uniform(0, 2, (2, 3, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(block(Tensor(x)).data, x)


def test_residual_block_projection_only_when_channels_differ():
    assert "shortcut.weight" not in dict(build_residual_block(4, 4, 3).named_parameters())
    assert "shortcut.weight" in dict(build_residual_block(2, 4, 3).named_parameters())
    with pytest.raises(ConfigError):
        build_residual_block(2, 2, 4)


# ------------------------------------------------------------------ shapes

@pytest.mark.parametrize("family", ["unet", "segnet", "resunet"])
def test_shape_and_range(family):
    model = build_model(family, vars(TINY), seed=0)
    out = model.predict(image(np.random.default_rng(1), n=2, h=16, w=24))
    assert out.shape == (2, 1, 16, 24)
    assert ((out > 0) & (out < 1)).all()


@settings(max_examples=8, deadline=None)
@given(st.sampled_from(["unet", "segnet", "resunet", "ensemble"]),
       st.sampled_from([32, 64, 128]), st.sampled_from([32, 64, 128]))
def test_every_family_preserves_spatial_dims(family, h, w):
    model = tiny_ensemble() if family == "ensemble" else build_model(family, vars(TINY))
    out = model.predict(image(np.random.default_rng(h * w), h=h, w=w))
    assert out.shape == (1, 1, h, w)
    assert ((out > 0) & (out < 1)).all()


@pytest.mark.parametrize("builder", [build_unet, build_segnet, build_residual_unet])
def test_indivisible_input_rejected(builder):
    model = builder(ResUNetConfig(3, 3, 2))
    with pytest.raises(ShapeError, match="divisible"):
        model.predict(np.zeros((1, 1, 20, 16), np.float32))


def test_wrong_channel_count_rejected():
    with pytest.raises(ShapeError):
        build_unet(TINY).predict(np.zeros((1, 2, 16, 16), np.float32))


# ------------------------------------------------------------ parameter audit

def test_resunet_parameter_count_matches_layer_walk():
    model = build_residual_unet(ResUNetConfig(3, 3, 16))
    assert count_parameters(model) == count_unet_params(3, 3, 16, residual=True)


@pytest.mark.parametrize("k,depth,base", [(3, 2, 4), (5, 3, 8), (7, 2, 3)])
def test_parameter_counts_for_every_family(k, depth, base):
    cfg = ResUNetConfig(k, depth, base)
    assert count_parameters(build_unet(cfg)) == count_unet_params(k, depth, base)
    assert count_parameters(build_residual_unet(cfg)) == count_unet_params(k, depth, base, residual=True)
    assert count_parameters(build_segnet(cfg)) == count_segnet_params(k, depth, base)


def test_resunet_differs_from_unet_only_by_shortcuts():
    cfg = ResUNetConfig(3, 3, 4)
    plain = {n: p.shape for n, p in build_unet(cfg).named_parameters()}
    res = {n: p.shape for n, p in build_residual_unet(cfg).named_parameters()}
    extra = {n for n in res if ".shortcut." in n}
    assert extra
    assert {n: s for n, s in res.items() if n not in extra} == plain


def test_parameter_names_are_unique_and_stable():
    a = [n for n, _ in build_residual_unet(TINY, seed=1).named_parameters()]
    b = [n for n, _ in build_residual_unet(TINY, seed=2).named_parameters()]
    assert a == b and len(set(a)) == len(a)


# ------------------------------------------------------------ graph structure

def ops_of(model, h=16):
    x = Tensor(image(np.random.default_rng(0), h=h, w=h))
    for p in model.parameters().values():
        p.requires_grad = True
    return set(T.graph_ops(model(x)))


def test_segnet_graph_has_unpool_and_no_concat():
    ops = ops_of(build_segnet(TINY))
    assert "max_unpool2d" in ops and "concat" not in ops


@pytest.mark.parametrize("builder", [build_unet, build_residual_unet])
def test_unet_graphs_have_concat_and_no_unpool(builder):
    ops = ops_of(builder(TINY))
    assert "concat" in ops and "max_unpool2d" not in ops
    assert "conv2d_transpose" in ops


def test_only_resunet_adds():
    assert "add" in ops_of(build_residual_unet(TINY))
    assert "add" not in ops_of(build_unet(TINY))


# ------------------------------------------------------------------ ensemble

def test_ensemble_zeroed_head_outputs_half():
    ens = tiny_ensemble()
    ens.meta.head.weight.data[...] = 0
    ens.meta.head.bias.data[...] = 0
    out = ens.predict(image(np.random.default_rng(2)))
    np.testing.assert_array_equal(out, np.full_like(out, 0.5))


def test_ensemble_decomposition_equivalence():
    ens = tiny_ensemble(seed=3)
    x = image(np.random.default_rng(3), n=2)
    maps = np.concatenate([b.predict(x) for b in ens.bases], axis=1)
    iso = MetaBlock(2, 4, 2, np.random.default_rng(0))
    for (name, p), (_, q) in zip(iso.named_parameters(), ens.meta.named_parameters()):
        p.data = q.data.copy()
    np.testing.assert_array_equal(ens.predict(x), iso(Tensor(maps)).data)


def test_ensemble_trainable_flags_and_count():
    ens = tiny_ensemble()
    flags = ens.trainable()
    assert all(not v for n, v in flags.items() if n.startswith("base."))
    assert all(v for n, v in flags.items() if n.startswith("meta."))
    assert count_parameters(ens, trainable_only=True) == count_meta_params(2, 4, 2)
    assert count_parameters(ens) == count_meta_params(2, 4, 2) + sum(
        count_parameters(b) for b in ens.bases)


def test_ensemble_rejects_bad_bases():
    b = build_residual_unet(TINY)
    with pytest.raises(ConfigError):
        build_ensemble([b], EnsembleConfig((3, 5)))
    with pytest.raises(ConfigError):
        build_ensemble([b, b, b], EnsembleConfig((3, 5)))
    deep = build_residual_unet(ResUNetConfig(3, 3, 2))
    mismatched = build_ensemble([b, deep], EnsembleConfig((3, 3)))
    with pytest.raises(ShapeError):
        mismatched.predict(np.zeros((1, 1, 12, 12), np.float32))


# ------------------------------------------------------------- set_trainable

def test_set_trainable_freeze_all_then_step_changes_nothing():
    from crackseg.training import TrainConfig, init_optimizer_state, optimizer_step
    model = build_unet(TINY)
    set_trainable(model, "*", False)
    params = model.parameters()
    before = {n: p.data.tobytes() for n, p in params.items()}
    for p in params.values():
        p.grad = np.ones_like(p.data)
    cfg = TrainConfig(learning_rate=0.1)
    optimizer_step(params, init_optimizer_state(params, cfg), cfg)
    assert before == {n: p.data.tobytes() for n, p in params.items()}


def test_set_trainable_patterns_round_trip():
    ens = tiny_ensemble()
    names = set_trainable(ens, "base.*", True)
    assert names and all(n.startswith("base.") for n in names)
    assert all(ens.trainable().values())
    set_trainable(ens, "base.*", False)
    assert not any(v for n, v in ens.trainable().items() if n.startswith("base."))
    with pytest.raises(ConfigError):
        set_trainable(ens, "nothing.*", True)


def test_build_model_rebuilds_from_config_echo():
    ens = tiny_ensemble(seed=4)
    again = build_model("ensemble", ens.config_dict(), seed=4)
    assert [n for n, _ in again.named_parameters()] == [n for n, _ in ens.named_parameters()]
    with pytest.raises(ConfigError):
        build_model("vgg", {})
    assert set(FAMILIES) >= {"unet", "segnet", "resunet", "ensemble"}


def test_models_are_deterministic_per_seed():
    x = image(np.random.default_rng(5))
    a = build_residual_unet(TINY, seed=7).predict(x)
    b = build_residual_unet(TINY, seed=7).predict(x)
    c = build_residual_unet(TINY, seed=8).predict(x)
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()
