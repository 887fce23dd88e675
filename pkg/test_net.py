import numpy as np
import pytest

from stadb import tensor as T
from stadb.config import Config
from stadb.dataset import Batch
from stadb.errors import ContractError, DimensionError
from stadb.gradcheck import tiny_config
from stadb.net import (
    BranchTag,
    auxiliary_branch,
    backbone_forward,
    branch_forward,
    branch_loss,
    embed_images,
    inference_embedding,
    init_params,
    select_branch,
    train_forward,
)
from stadb.optim import AdamState
from stadb.tensor import Tensor
from stadb.trainer import apply_gradients


def random_images(rng, config, n=4):
    return Tensor(rng.uniform(size=(n, 3, config.image_height, config.image_width)))


def tiny_batch(rng, config):
    return Batch(random_images(rng, config), [0, 0, 1, 1], [0, 1, 0, 1], [0, 1, 2, 3])


def zero_gates(params):
    for name in ("attention.channel.w1", "attention.channel.w2", "attention.spatial.kernel"):
        params[name].data = np.zeros(params[name].shape)


# --- backbone ---

def test_backbone_output_size_default_config():
    config = Config()
    params = init_params(config, 4)
    out = backbone_forward(Tensor(np.zeros((1, 3, 64, 32))), params, config)
    assert out.shape == (1, 64, 8, 4)
    np.testing.assert_array_equal(out.data, 0.0)


def test_backbone_matches_op_composition(rng):
    config = tiny_config()
    params = init_params(config, 3)
    images = random_images(rng, config, n=2)
    x = images
    for i, stride in enumerate(config.backbone_strides):
        x = T.relu(T.conv2d(x, params[f"backbone.{i}.weight"], params[f"backbone.{i}.bias"], stride, 1))
    np.testing.assert_array_equal(backbone_forward(images, params, config).data, x.data)


def test_backbone_rejects_wrong_input(rng):
    config = tiny_config()
    params = init_params(config, 3)
    with pytest.raises(DimensionError):
        backbone_forward(Tensor(np.zeros((1, 1, 16, 8))), params, config)
    with pytest.raises(DimensionError):
        backbone_forward(Tensor(np.zeros((1, 3, 8, 8))), params, config)


# --- branches ---

def test_global_head_on_zero_featmap():
    config = tiny_config()
    params = init_params(config, 5)
    out = branch_forward(Tensor(np.zeros((2, 8, 8, 4))), BranchTag.GLOBAL, params, config)
    np.testing.assert_array_equal(out.embedding.data, 0.0)
    np.testing.assert_allclose(T.softmax_rows(out.logits).data, 0.2, rtol=0, atol=1e-15)
    assert out.embedding.shape == (2, config.d2) and out.logits.shape == (2, 5)


@pytest.mark.parametrize("alpha", [1.0, 1.5])
def test_drop_with_large_alpha_is_undropped(rng, alpha):
    config = tiny_config(alpha=alpha)
    params = init_params(config, 3)
    featmap = backbone_forward(random_images(rng, config), params, config)
    out = branch_forward(featmap, BranchTag.DROP, params, config)
    emb = T.linear(T.flatten(T.pool(featmap, "gmp")), params["drop.fc.weight"], params["drop.fc.bias"])
    np.testing.assert_array_equal(out.mask.values.data, 1.0)
    np.testing.assert_array_equal(out.embedding.data, emb.data)


def test_attention_with_zero_gates_sees_quarter_featmap(rng):
    config = tiny_config()
    params = init_params(config, 3)
    zero_gates(params)
    featmap = backbone_forward(random_images(rng, config), params, config)
    out = branch_forward(featmap, BranchTag.ATTENTION, params, config)
    pooled = T.flatten(T.pool(T.mul(featmap, 0.25), "gap"))
    expected = T.linear(pooled, params["attention.fc.weight"], params["attention.fc.bias"])
    np.testing.assert_allclose(out.embedding.data, expected.data, rtol=1e-12, atol=1e-15)


def test_drop_mask_follows_mask_source(rng):
    config = tiny_config(alpha=0.5)
    params = init_params(config, 3)
    featmap = backbone_forward(random_images(rng, config), params, config)
    source = np.zeros(featmap.shape)
    source[:, :, 0, 0] = 1.0
    out = branch_forward(featmap, BranchTag.DROP, params, config, mask_source=Tensor(source))
    expected = np.ones((4, 1, 8, 4))
    expected[:, :, 0, 0] = 0.0
    np.testing.assert_array_equal(out.mask.values.data, expected)


def test_random_block_branch_needs_rng(rng):
    config = tiny_config(drop_mode="random_block", use_channel_attention=False, use_spatial_attention=False)
    params = init_params(config, 3)
    featmap = backbone_forward(random_images(rng, config), params, config)
    with pytest.raises(ContractError):
        branch_forward(featmap, BranchTag.DROP, params, config)
    out = branch_forward(featmap, BranchTag.DROP, params, config, rng=np.random.default_rng(0))
    assert (out.mask.values.data == 0.0).any()


def test_unknown_or_disabled_branch():
    config = tiny_config(use_drop=False)
    params = init_params(config, 3)
    featmap = Tensor(np.zeros((1, 8, 8, 4)))
    with pytest.raises(ContractError):
        branch_forward(featmap, "local", params, config)
    with pytest.raises(ContractError):
        branch_forward(featmap, BranchTag.DROP, params, config)


# --- branch selection ---

def test_select_branch_extremes(rng):
    assert {select_branch(0.0, rng) for _ in range(1000)} == {BranchTag.ATTENTION}
    assert {select_branch(1.0, rng) for _ in range(1000)} == {BranchTag.DROP}


def test_select_branch_frequency():
    rng = np.random.default_rng(3)
    draws = 100000
    drops = sum(select_branch(0.25, rng) is BranchTag.DROP for _ in range(draws))
    assert abs(drops / draws - 0.25) < 0.01


def test_select_branch_consumes_one_draw():
    a, b = np.random.default_rng(9), np.random.default_rng(9)
    select_branch(0.5, a)
    b.random()
    assert a.random() == b.random()


def test_select_branch_rejects_bad_rho(rng):
    for rho in (-0.1, 1.1):
        with pytest.raises(ContractError):
            select_branch(rho, rng)


@pytest.mark.parametrize("overrides,expected", [
    ({}, [BranchTag.GLOBAL, BranchTag.ATTENTION, BranchTag.DROP]),
    ({"use_drop": False}, [BranchTag.GLOBAL, BranchTag.ATTENTION]),
    ({"use_channel_attention": False, "use_spatial_attention": False}, [BranchTag.GLOBAL, BranchTag.DROP]),
    ({"use_drop": False, "use_channel_attention": False, "use_spatial_attention": False}, [BranchTag.GLOBAL]),
])
def test_ablation_branch_sets(rng, overrides, expected):
    params = init_params(tiny_config(**overrides), 3)
    assert params.branches() == expected
    aux = auxiliary_branch(params, 0.5, rng)
    assert aux is None if expected == [BranchTag.GLOBAL] else aux in expected


def test_partial_attention_parameters():
    params = init_params(tiny_config(use_spatial_attention=False), 3)
    assert params.spatial_attention() is None and params.channel_attention() is not None
    params = init_params(tiny_config(use_channel_attention=False), 3)
    assert params.channel_attention() is None and params.spatial_attention() is not None


# --- train_forward ---

def test_rho_zero_always_trains_attention(rng):
    config = tiny_config()
    params = init_params(config, 2)
    batch = tiny_batch(rng, config)
    for seed in range(10):
        step = train_forward(batch, params, config, np.random.default_rng(seed), rho=0.0)
        assert step.selected is BranchTag.ATTENTION
        assert set(step.outputs) == {"global", "attention"}


def test_train_forward_is_deterministic(rng):
    config = tiny_config()
    params = init_params(config, 2)
    batch = tiny_batch(rng, config)
    first = train_forward(batch, params, config, np.random.default_rng(4))
    second = train_forward(batch, params, config, np.random.default_rng(4))
    assert first.loss.item() == second.loss.item()
    assert first.selected == second.selected


def test_train_loss_is_sum_of_branch_losses(rng):
    config = tiny_config()
    params = init_params(config, 2)
    batch = tiny_batch(rng, config)
    for rho in (0.0, 1.0):
        step = train_forward(batch, params, config, np.random.default_rng(0), rho=rho)
        featmap = backbone_forward(batch.images, params, config)
        total = 0.0
        for tag in (BranchTag.GLOBAL, step.selected):
            total += branch_loss(branch_forward(featmap, tag, params, config), batch.labels, config).total.item()
        assert step.loss.item() == pytest.approx(total, rel=1e-12)
        assert sum(c["ce"] + c["triplet"] for c in step.components.values()) == pytest.approx(total, rel=1e-12)


def test_alpha_override_reaches_drop_mask(rng):
    config = tiny_config()
    params = init_params(config, 2)
    step = train_forward(tiny_batch(rng, config), params, config, np.random.default_rng(0), rho=1.0, alpha=2.0)
    np.testing.assert_array_equal(step.outputs["drop"].mask.values.data, 1.0)


def test_parameter_count_constant_across_training_steps(rng):
    config = tiny_config()
    params = init_params(config, 2)
    before = (len(params), params.count())
    state = AdamState()
    batch = tiny_batch(rng, config)
    for seed in range(3):
        step = train_forward(batch, params, config, np.random.default_rng(seed))
        T.backward(step.loss)
        apply_gradients(params, state, 1e-3)
    assert (len(params), params.count()) == before
    assert params.all_finite()


def test_idle_branch_weights_stay_put(rng):
    config = tiny_config()
    params = init_params(config, 2)
    state = AdamState()
    batch = tiny_batch(rng, config)

    step = train_forward(batch, params, config, np.random.default_rng(0), rho=1.0)
    assert step.selected is BranchTag.DROP
    T.backward(step.loss)
    assert not any(n.startswith("attention.") for n in params.with_grad())
    apply_gradients(params, state, 1e-3)
    drop_before = {n: params[n].data.copy() for n in params.tensors if n.startswith("drop.")}
    attention_before = {n: params[n].data.copy() for n in params.tensors if n.startswith("attention.")}

    step = train_forward(batch, params, config, np.random.default_rng(1), rho=0.0)
    assert step.selected is BranchTag.ATTENTION
    T.backward(step.loss)
    moved = apply_gradients(params, state, 1e-3)

    assert moved < len(params)
    for name, data in drop_before.items():
        np.testing.assert_array_equal(params[name].data, data)
    assert any(not np.array_equal(params[n].data, d) for n, d in attention_before.items())
    assert state.step == 2
    assert state.t["global.cls.weight"] == 2
    assert state.t["drop.cls.weight"] == 1
    assert state.t["attention.cls.weight"] == 1


# --- inference ---

def test_inference_embedding_width_and_composition(rng):
    config = Config(image_height=16, image_width=8, backbone_channels=(4, 8), backbone_strides=(2, 1),
                    reduction=2, spatial_kernel=3)
    params = init_params(config, 3)
    images = random_images(rng, config, n=3)
    emb = inference_embedding(images, params, config)
    assert emb.shape == (3, 128)

    featmap = backbone_forward(images, params, config)
    parts = [branch_forward(featmap, tag, params, config).embedding.data
             for tag in (BranchTag.GLOBAL, BranchTag.ATTENTION)]
    np.testing.assert_array_equal(emb.data, np.concatenate(parts, axis=1))


def test_inference_is_repeatable_and_drop_free(rng):
    config = tiny_config()
    params = init_params(config, 3)
    images = random_images(rng, config)
    first = inference_embedding(images, params, config)
    second = inference_embedding(images, params, config)
    np.testing.assert_array_equal(first.data, second.data)
    assert not first.requires_grad
    assert first.shape == (4, 2 * config.d2)

    no_attention = tiny_config(use_channel_attention=False, use_spatial_attention=False)
    assert inference_embedding(images, init_params(no_attention, 3), no_attention).shape == (4, config.d2)


def test_embed_images_chunks(rng):
    config = tiny_config()
    params = init_params(config, 3)
    images = rng.uniform(size=(5, 3, 16, 8))
    whole = embed_images(images, params, config)
    chunked = embed_images(images, params, config, batch_size=2)
    np.testing.assert_allclose(whole, chunked, rtol=1e-12, atol=1e-14)


def test_init_params_rejects_single_identity():
    with pytest.raises(ContractError):
        init_params(tiny_config(), 1)
