import numpy as np
import pytest

from leukonet import functional as F
from leukonet.model import (
    LR_GROUPS,
    BlockConfig,
    ModelConfig,
    build_model,
    forward,
    init_block,
    se_module,
    se_resnext_block,
)
from leukonet.training import weighted_bce
from leukonet.tensor import ConfigurationError, DimensionError, Tape, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def _tensors(d):
    return {k: Tensor(v, requires_grad=True) for k, v in d.items()}


# --- SE module ------------------------------------------------------------


def _se_params(rng, c, hidden, zero=False):
    make = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.standard_normal(s))
    return _tensors(
        {"fc1.weight": make(hidden, c), "fc1.bias": make(hidden), "fc2.weight": make(c, hidden), "fc2.bias": make(c)}
    )


def test_se_zero_weights_halve_input(rng):
    u = rng.standard_normal((2, 4, 3, 3))
    out = se_module(Tensor(u), _se_params(rng, 4, 2, zero=True))
    np.testing.assert_array_equal(out.data, 0.5 * u)


def test_se_zero_input(rng):
    out = se_module(Tensor(np.zeros((2, 4, 3, 3))), _se_params(rng, 4, 2))
    np.testing.assert_array_equal(out.data, 0.0)


def test_se_matches_hand_composition(rng):
    u = rng.standard_normal((3, 6, 4, 5))
    p = _se_params(rng, 6, 3)
    z = u.mean(axis=(2, 3))
    h = np.maximum(z @ p["fc1.weight"].data.T + p["fc1.bias"].data, 0)
    s = 1 / (1 + np.exp(-(h @ p["fc2.weight"].data.T + p["fc2.bias"].data)))
    expect = u * s[:, :, None, None]
    np.testing.assert_allclose(se_module(Tensor(u), p).data, expect, rtol=0, atol=1e-12)
    assert ((s > 0) & (s < 1)).all()


def test_se_reduction_larger_than_channels():
    with pytest.raises(ConfigurationError):
        BlockConfig(4, 4, 4, 2, se_reduction=8).validate()


# --- block ------------------------------------------------------------------


def _block(rng, cfg, bn=True):
    p, b = init_block(cfg, rng, bn)
    return _tensors(p), b


def test_dead_branch_gives_relu_of_input(rng):
    cfg = BlockConfig(8, 4, 8, cardinality=2, se_reduction=4)
    params, buffers = _block(rng, cfg)
    for name in ("conv1.weight", "conv2.weight", "conv3.weight"):
        params[name].data[...] = 0.0
    x = rng.standard_normal((2, 8, 5, 5))
    out = se_resnext_block(Tensor(x), cfg, params, buffers, training=True)
    np.testing.assert_array_equal(out.data, np.maximum(x, 0))


def test_block_channel_mismatch(rng):
    cfg = BlockConfig(8, 4, 8, cardinality=2, se_reduction=4)
    params, buffers = _block(rng, cfg)
    with pytest.raises(ConfigurationError):
        se_resnext_block(Tensor(np.zeros((1, 6, 4, 4))), cfg, params, buffers)


def _bn_eval(x, p, b, name, sl=slice(None)):
    g = p[f"{name}.gamma"].data[sl]
    beta = p[f"{name}.beta"].data[sl]
    rm = b[f"{name}.running_mean"][sl]
    rv = b[f"{name}.running_var"][sl]
    return (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5) * g[None, :, None, None] + beta[
        None, :, None, None
    ]


def explicit_sum_block(x, cfg, p, b):
    """Eval-mode block written as an explicit sum over per-path bottlenecks."""
    d = cfg.bottleneck_channels // cfg.cardinality
    total = 0.0
    for i in range(cfg.cardinality):
        sl = slice(i * d, (i + 1) * d)
        h = F.conv2d(Tensor(x), Tensor(p["conv1.weight"].data[sl])).data
        h = np.maximum(_bn_eval(h, p, b, "bn1", sl), 0)
        h = F.conv2d(Tensor(h), Tensor(p["conv2.weight"].data[sl]), stride=cfg.stride, padding=1).data
        h = np.maximum(_bn_eval(h, p, b, "bn2", sl), 0)
        total = total + F.conv2d(Tensor(h), Tensor(p["conv3.weight"].data[:, sl])).data
    branch = _bn_eval(total, p, b, "bn3")
    se = {k[3:]: v for k, v in p.items() if k.startswith("se.")}
    gated = se_module(Tensor(branch), se).data
    if cfg.has_projection:
        sc = _bn_eval(F.conv2d(Tensor(x), Tensor(p["proj.weight"].data), stride=cfg.stride).data, p, b, "proj_bn")
    else:
        sc = x
    return np.maximum(sc + gated, 0)


def _randomize_norm(rng, p, b):
    for k in p:
        if k.endswith(".gamma"):
            p[k].data[...] = rng.random(p[k].shape) + 0.5
        if k.endswith(".beta"):
            p[k].data[...] = rng.standard_normal(p[k].shape) * 0.1
    for k in b:
        b[k][...] = rng.random(b[k].shape) + (0.5 if k.endswith("var") else -0.5)


@pytest.mark.parametrize("cardinality", [2, 4])
@pytest.mark.parametrize("stride,cin", [(1, 8), (2, 4)])
def test_grouped_block_equals_explicit_path_sum(rng, cardinality, stride, cin):
    cfg = BlockConfig(cin, 8, 8, cardinality=cardinality, stride=stride, se_reduction=2)
    p, b = _block(rng, cfg)
    _randomize_norm(rng, p, b)
    x = rng.standard_normal((2, cin, 6, 6))
    out = se_resnext_block(Tensor(x), cfg, p, b, training=False).data
    np.testing.assert_allclose(out, explicit_sum_block(x, cfg, p, b), rtol=0, atol=1e-10)


def test_cardinality_one_is_dense_bottleneck(rng):
    cfg = BlockConfig(6, 4, 6, cardinality=1, se_reduction=2)
    p, b = _block(rng, cfg, bn=False)
    x = rng.standard_normal((2, 6, 5, 5))
    out = se_resnext_block(Tensor(x), cfg, p, b).data

    def conv(h, name, **kw):
        return F.conv2d(Tensor(h), Tensor(p[f"{name}.weight"].data), Tensor(p[f"{name}.bias"].data), **kw).data

    h = np.maximum(conv(x, "conv1"), 0)
    h = np.maximum(conv(h, "conv2", padding=1, groups=1), 0)
    h = conv(h, "conv3")
    se = {k[3:]: v for k, v in p.items() if k.startswith("se.")}
    expect = np.maximum(x + se_module(Tensor(h), se).data, 0)
    np.testing.assert_allclose(out, expect, rtol=0, atol=1e-12)


# --- whole model ----------------------------------------------------------


def test_same_seed_identical_parameters():
    a = build_model(ModelConfig.toy(), 3)
    b = build_model(ModelConfig.toy(), 3)
    for (ka, pa), (kb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert ka == kb and pa.data.tobytes() == pb.data.tobytes()
    c = build_model(ModelConfig.toy(), 4)
    assert any(not np.array_equal(pa.data, pc.data) for pa, pc in zip(a.parameters(), c.parameters()))


def test_toy_output_shape(rng):
    model = build_model(ModelConfig.toy(), 0)
    out = forward(model, rng.random((2, 3, 64, 64)), "eval")
    assert out.shape == (2, 1)


def _expected_param_count(cfg: ModelConfig) -> int:
    s = cfg.stem
    total = cfg.input_channels * s.channels * s.kernel**2 + 2 * s.channels
    cin = s.channels
    for idx, (count, cout) in enumerate(zip(cfg.stage_block_counts, cfg.stage_channels)):
        w = cout // 2
        hidden = cout // cfg.se_reduction
        for i in range(count):
            stride = 2 if idx > 0 and i == 0 else 1
            total += cin * w + 2 * w
            total += (w // cfg.cardinality) * w * 9 + 2 * w
            total += w * cout + 2 * cout
            total += cout * hidden + hidden + hidden * cout + cout
            if stride != 1 or cin != cout:
                total += cin * cout + 2 * cout
            cin = cout
    return total + cfg.stage_channels[-1] + 1


def test_toy_parameter_count():
    cfg = ModelConfig.toy()
    model = build_model(cfg, 0)
    assert model.num_parameters() == _expected_param_count(cfg)
    # worked by hand: stem 232, stages 210 / 852 / 3176 / 12240, head 65
    assert model.num_parameters() == 232 + 210 + 852 + 3176 + 12240 + 65


def test_resnext50_parameter_layout():
    cfg = ModelConfig.resnext50()
    blocks = cfg.block_configs()
    assert [len(s) for s in blocks] == [3, 4, 6, 3]
    assert blocks[0][0].bottleneck_channels == 128 and blocks[-1][0].bottleneck_channels == 1024
    assert [s[0].stride for s in blocks] == [1, 2, 2, 2]


def test_lr_groups_partition_parameters():
    model = build_model(ModelConfig.toy(), 0)
    groups = model.param_groups()
    assert set(groups) == set(LR_GROUPS)
    names = [n for g in groups.values() for n in g]
    assert sorted(names) == sorted(model.params)
    assert len(names) == len(set(names))
    assert all(groups[g] for g in LR_GROUPS)
    assert all(n.startswith("stem.") for n in groups["stage1"])


def test_identical_images_identical_logits(rng):
    model = build_model(ModelConfig.toy(), 1)
    img = rng.random((1, 3, 64, 64))
    out = forward(model, np.concatenate([img, img]), "eval").data
    assert out[0, 0] == out[1, 0]


def test_eval_batch_independence_and_permutation(rng):
    model = build_model(ModelConfig.toy(), 1)
    batch = rng.random((5, 3, 64, 64))
    full = forward(model, batch, "eval").data
    alone = forward(model, batch[2:3], "eval").data
    np.testing.assert_allclose(alone[0], full[2], rtol=0, atol=1e-10)
    perm = rng.permutation(5)
    np.testing.assert_allclose(forward(model, batch[perm], "eval").data, full[perm], rtol=0, atol=1e-10)


def test_input_too_small():
    model = build_model(ModelConfig.toy(), 0)
    with pytest.raises(DimensionError):
        forward(model, np.zeros((1, 3, 1, 1)), "eval")
    with pytest.raises(DimensionError):
        forward(model, np.zeros((1, 1, 64, 64)), "eval")


def test_train_mode_updates_running_stats_only_in_train(rng):
    model = build_model(ModelConfig.toy(), 0)
    before = {k: v.copy() for k, v in model.buffers.items()}
    forward(model, rng.random((2, 3, 32, 32)), "eval")
    assert all(np.array_equal(before[k], model.buffers[k]) for k in before)
    forward(model, rng.random((2, 3, 32, 32)), "train")
    assert any(not np.array_equal(before[k], model.buffers[k]) for k in before)


def end_to_end_gradient_error(n_params=50, seed=0, h=1e-5):
    """Max relative error of the training-loss gradient over sampled scalar parameters."""
    rng = np.random.default_rng(seed)
    model = build_model(ModelConfig.toy(), seed)
    x = rng.random((4, 3, 32, 32))
    y = np.array([1.0, 0.0, 1.0, 0.0])
    w = 0.7

    def loss_value():
        z = model.forward(x, training=True).data[:, 0]
        return float(np.mean(w * y * np.logaddexp(0, -z) + (1 - y) * np.logaddexp(0, z)))

    with Tape() as tape:
        loss = weighted_bce(model.forward(x, training=True), y, w)
    model.zero_grad()
    tape.backward(loss)

    flat = [(n, i) for n, p in model.params.items() for i in range(p.size)]
    worst = 0.0
    for k in rng.choice(len(flat), size=n_params, replace=False):
        name, i = flat[k]
        arr = model.params[name].data.reshape(-1)
        analytic = model.params[name].grad.reshape(-1)[i]
        old = arr[i]
        arr[i] = old + h
        fp = loss_value()
        arr[i] = old - h
        fm = loss_value()
        arr[i] = old
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7))
    return worst


def test_end_to_end_gradient_check():
    assert end_to_end_gradient_error() < 1e-3
