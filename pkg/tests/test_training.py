import numpy as np
import pytest

from tomofocus.errors import ContainerError, IncompatibleCheckpoint, InvalidBatch, InvalidConfig
from tomofocus.geometry import build_steering
from tomofocus.lvamp import forward, init_network, segments
from tomofocus.synth import DatasetSpec, generate_arrays
from tomofocus.training import (CHUNK, Adam, GradientSet, TrainConfig, TrainingDiverged,
                                backward, checkpoint_meta, keys_for, load_checkpoint, loss,
                                param_items, save_checkpoint, train_layerwise, write_log)


def _random_net(model, T, rng):
    """Untrained net with every parameter perturbed off its structured start."""
    p = init_network(model, T)
    twoM = 2 * model.M
    for th in [p.theta0] + [L.theta for L in p.layers]:
        th[:, 0] = rng.uniform(0.3, 0.8, twoM)
        th[:, 1] = th[:, 0] + rng.uniform(0.3, 0.8, twoM)
        th[:, 2:] = rng.uniform(0.05, 0.6, (twoM, 3))
    for L in p.layers:
        L.G = L.G + 0.05 * rng.normal(size=L.G.shape)
        L.R = L.R * rng.uniform(0.8, 1.2, L.R.shape)
        L.beta = rng.uniform(0.7, 1.3, twoM)
    p.R0 = p.R0 * rng.uniform(0.8, 1.2, p.R0.shape)
    p.beta0 = rng.uniform(0.7, 1.3, twoM)
    return p


def _batch(model, n, seed, snr=10.0):
    d = generate_arrays(model, DatasetSpec(P=n, snr_db=snr, seed=seed))
    return d["g_embed"], d["gamma_embed"]


def _signature(p, g):
    """Active eta2 segments and clamp states along the whole recursion."""
    _, tr = forward(p, None, g, record_trace=True)
    lo, hi = p.alpha_min, 1 - p.alpha_min
    parts = [segments(tr.init.v2, tr.init.chi2, p.theta0).ravel(),
             ((tr.init.alpha2_raw > lo) & (tr.init.alpha2_raw < hi)).ravel()]
    for L, st_ in zip(p.layers, tr):
        parts.append(segments(st_.v2, st_.chi2, L.theta).ravel())
        parts.append(np.atleast_1d((st_.alpha2_raw > lo) & (st_.alpha2_raw < hi)).ravel())
        parts.append(np.atleast_1d(lo < st_.alpha1_raw < hi))
    return np.concatenate([x.astype(int) for x in parts])


# loss -----------------------------------------------------------------------

def test_loss_zero_when_output_is_truth(tiny, rng):
    p = _random_net(tiny, 2, rng)
    g, _ = _batch(tiny, 4, 0)
    out, _ = forward(p, tiny, g)
    assert loss(p, tiny, (g, out)) == 0.0


def test_loss_of_zero_output_network(tiny):
    p = init_network(tiny, 1)
    p.layers[0].theta[:, 2:] = 0.0  # every slope zero: output is identically zero
    g, y = _batch(tiny, 5, 1)
    y = y / np.linalg.norm(y, axis=1, keepdims=True)
    assert loss(p, tiny, (g, y)) == pytest.approx(1.0)


def test_loss_two_hand_built_samples(tiny):
    p = init_network(tiny, 1)
    p.layers[0].theta[:, 2:] = 0.0
    g = np.ones((2, 8))
    y = np.zeros((2, 12))
    y[0, 0] = 3.0
    y[1, :2] = [1.0, 2.0]
    assert loss(p, tiny, (g, y)) == pytest.approx((9.0 + 5.0) / 2)


def test_loss_rejects_bad_batches(tiny):
    p = init_network(tiny, 1)
    with pytest.raises(InvalidBatch):
        loss(p, tiny, (np.ones((2, 7)), np.ones((2, 12))))
    with pytest.raises(InvalidBatch):
        loss(p, tiny, (np.ones((2, 8)), np.ones((3, 12))))
    with pytest.raises(InvalidBatch):
        loss(p, tiny, (np.ones((0, 8)), np.ones((0, 12))))


# gradients --------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(tiny, seed):
    rng = np.random.default_rng([99, seed])
    p = _random_net(tiny, 2, rng)
    g, y = _batch(tiny, 3, seed)
    value, grads = backward(p, tiny, (g, y))
    assert value == pytest.approx(loss(p, tiny, (g, y)), rel=1e-12)
    base = _signature(p, g)
    h = 1e-6
    checked = 0
    gd = dict(grads.items())
    for key, arr in param_items(p):
        ad_grad = gd[key]
        for i in np.ndindex(arr.shape):
            x0 = arr[i]
            arr[i] = x0 + h
            lp, sp = loss(p, tiny, (g, y)), _signature(p, g)
            arr[i] = x0 - h
            lm, sm = loss(p, tiny, (g, y)), _signature(p, g)
            arr[i] = x0
            if not (np.array_equal(sp, base) and np.array_equal(sm, base)):
                continue  # a knot or clamp boundary lies within the step
            fd = (lp - lm) / (2 * h)
            scale = max(abs(fd), abs(ad_grad[i]), 1e-3 * value)
            assert abs(fd - ad_grad[i]) / scale < 1e-5, (key, i, fd, ad_grad[i])
            checked += 1
    assert checked > 0.9 * sum(a.size for _, a in param_items(p))


def test_last_layer_R_gradient_closed_form(tiny, rng):
    p = _random_net(tiny, 1, rng)
    g, y = _batch(tiny, 4, 3)
    _, grads = backward(p, tiny, (g, y))
    out, tr = forward(p, tiny, g, record_trace=True)
    st_ = tr[-1]
    delta = rng.normal(size=p.layers[0].R.shape)
    slope = st_.deriv
    dv2 = (g @ delta.T) / (1 - st_.alpha1)
    expected = 2.0 / g.shape[0] * np.sum((out - y) * slope * dv2)
    assert np.sum(grads.layers[0].R * delta) == pytest.approx(expected, rel=1e-10)


def test_duplicated_batch_leaves_loss_and_gradient(tiny, rng):
    p = _random_net(tiny, 2, rng)
    g, y = _batch(tiny, 3, 4)
    l1, g1 = backward(p, tiny, (g, y))
    l2, g2 = backward(p, tiny, (np.vstack([g, g]), np.vstack([y, y])))
    assert l2 == pytest.approx(l1, rel=1e-12)
    for (k, a), (_, b) in zip(g1.items(), g2.items()):
        assert np.allclose(a, b, rtol=1e-10, atol=1e-14), k


def test_trainable_subset_zeroes_others(tiny, rng):
    p = _random_net(tiny, 2, rng)
    batch = _batch(tiny, 3, 5)
    _, grads = backward(p, tiny, batch, trainable=keys_for(p, [2], include_init=False))
    gd = dict(grads.items())
    assert np.all(gd["L1.G"] == 0) and np.all(gd["R0"] == 0)
    assert np.any(gd["L2.G"] != 0)


def test_backward_independent_of_workers(tiny, rng):
    p = _random_net(tiny, 2, rng)
    batch = _batch(tiny, 2 * CHUNK + 17, 6)
    l1, g1 = backward(p, tiny, batch, workers=1)
    l3, g3 = backward(p, tiny, batch, workers=3)
    assert l1 == l3
    for (_, a), (_, b) in zip(g1.items(), g3.items()):
        assert a.tobytes() == b.tobytes()


# optimizer --------------------------------------------------------------------

def test_adam_first_step_is_signed_lr(tiny, rng):
    p = _random_net(tiny, 1, rng)
    before = p.copy()
    grads = GradientSet.zeros_like(p)
    grads.layers[0].G[:] = rng.normal(size=grads.layers[0].G.shape)
    Adam(1e-2).step(p, grads, {"L1.G"})
    step = before.layers[0].G - p.layers[0].G
    assert np.allclose(step, 1e-2 * np.sign(grads.layers[0].G), rtol=1e-5)
    assert np.array_equal(p.layers[0].R, before.layers[0].R)


def test_zero_learning_rate_keeps_params(tiny, rng):
    p = _random_net(tiny, 2, rng)
    before = p.copy()
    opt = Adam(0.0)
    for s in range(3):
        _, grads = backward(p, tiny, _batch(tiny, 4, s))
        opt.step(p, grads, keys_for(p))
    for (_, a), (_, b) in zip(param_items(p), param_items(before)):
        assert np.array_equal(a, b)


def test_descent_on_fixed_batch(tiny):
    p = init_network(tiny, 1)
    batch = _batch(tiny, 64, 7)
    keys = keys_for(p)
    opt = Adam(1e-3)
    start = loss(p, tiny, batch)
    for _ in range(50):
        _, grads = backward(p, tiny, batch, keys)
        opt.step(p, grads, keys)
    assert loss(p, tiny, batch) < start


# layer-wise schedule ----------------------------------------------------------

def _small_cfg(**kw):
    base = dict(P=600, Q=50, T=3, val_size=100, patience=2, eval_every=4, max_rounds=4,
                seed=3, snr_db=10.0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_data(tiny):
    return generate_arrays(tiny, DatasetSpec(P=600, snr_db=10.0, seed=11))


@pytest.fixture(scope="module")
def small_run(tiny, small_data):
    return train_layerwise(tiny, _small_cfg(), small_data)


def _val(model, params, data):
    return loss(params, model, (data["g_embed"][500:], data["gamma_embed"][500:]))


def test_layer_one_beats_untrained(tiny, small_data):
    untrained = init_network(tiny, 1)
    params, _ = train_layerwise(tiny, _small_cfg(T=1), small_data)
    assert _val(tiny, params, small_data) <= _val(tiny, untrained, small_data)


def test_deeper_network_not_worse(tiny, small_data, small_run):
    params1, _ = train_layerwise(tiny, _small_cfg(T=1), small_data)
    params3, log = small_run
    assert params3.T == 3
    assert _val(tiny, params3, small_data) <= _val(tiny, params1, small_data)
    assert {r["layer"] for r in log} == {1, 2, 3}
    assert {r["phase"] for r in log} == {"A", "B"}


def test_identical_seeds_identical_logs(tiny, small_data, small_run, tmp_path):
    params_a, log_a = small_run
    params_b, log_b = train_layerwise(tiny, _small_cfg(), small_data)
    strip = [{k: v for k, v in r.items() if k != "wallclock_s"} for r in log_a]
    assert strip == [{k: v for k, v in r.items() if k != "wallclock_s"} for r in log_b]
    for (_, a), (_, b) in zip(param_items(params_a), param_items(params_b)):
        assert a.tobytes() == b.tobytes()
    write_log(tmp_path / "log.csv", log_a)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "layer,phase,epoch,step,train_loss,val_loss,wallclock_s"
    assert len(lines) == len(log_a) + 1


def test_training_needs_validation_split(tiny, small_data):
    with pytest.raises(InvalidConfig):
        train_layerwise(tiny, _small_cfg(val_size=600), small_data)


def test_divergence_aborts_with_log(tiny, small_data):
    data = dict(small_data)
    data["g_embed"] = small_data["g_embed"].copy()
    data["g_embed"][:, 0] = 1e200  # overflows the squared energy term
    with pytest.raises(TrainingDiverged) as info:
        train_layerwise(tiny, _small_cfg(T=1), data)
    assert isinstance(info.value.log, list)


def test_train_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(Q=0)
    with pytest.raises(InvalidConfig):
        TrainConfig(lr_new=-1.0)
    with pytest.raises(InvalidConfig):
        TrainConfig.from_dict({"P": 10, "bogus": 1})


# checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tiny, tiny_cfg, rng, tmp_path):
    p = _random_net(tiny, 2, rng)
    path = tmp_path / "net.tfc"
    save_checkpoint(p, path, tiny_cfg, _small_cfg(T=2))
    q = load_checkpoint(path, tiny_cfg, T=2)
    for (ka, a), (kb, b) in zip(param_items(p), param_items(q)):
        assert ka == kb and a.tobytes() == b.tobytes()
    g, _ = _batch(tiny, 5, 8)
    assert forward(p, tiny, g)[0].tobytes() == forward(q, tiny, g)[0].tobytes()
    meta = checkpoint_meta(path)
    assert meta["T"] == 2 and meta["train"]["Q"] == 50


def test_checkpoint_geometry_and_depth_checked(tiny, tiny_cfg, rng, tmp_path):
    p = _random_net(tiny, 2, rng)
    path = tmp_path / "net.tfc"
    save_checkpoint(p, path, tiny_cfg)
    other = tiny_cfg.__class__(**{**tiny_cfg.to_dict(), "M": 8})
    build_steering(other)
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(path, other)
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(path, tiny_cfg, T=3)


def test_truncated_checkpoint_rejected(tiny, tiny_cfg, rng, tmp_path):
    p = _random_net(tiny, 1, rng)
    path = tmp_path / "net.tfc"
    save_checkpoint(p, path, tiny_cfg)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(ContainerError):
        load_checkpoint(path, tiny_cfg)
