import numpy as np
import pytest

from splitguard import tensor_core as tc
from splitguard.attack import AttackConfig
from splitguard.data import synthetic_blobs
from splitguard.errors import ConfigError, ShapeError, TrainingError
from splitguard.federation import (
    BoundaryAudit,
    ClientState,
    ExperimentConfig,
    ServerState,
    client_stream,
    fedavg,
    fedavg_round,
    group_step,
    local_update,
    setup,
    train,
)
from splitguard.models import build_convnet, clone_layers, split
from splitguard.privacy import PrivacyConfig

from helpers import numerical_grad, rel_error

TINY = {"kind": "synthetic", "classes": 4, "train_count": 96, "test_count": 40, "shape": [1, 8, 8]}


def tiny_config(**kw):
    base = dict(method="ufsl", rounds=2, batch_size=8, privacy=PrivacyConfig(), cut="B1", dataset=TINY,
                n_clients=4, seed=3)
    base.update(kw)
    return ExperimentConfig(**base).check()


def kd(sigma2=0.1, k=2):
    return PrivacyConfig(sigma2, k=k, dp_enabled=sigma2 > 0, ka_enabled=k > 1)


def states_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_fedavg_examples():
    a = {"w": np.array([1.0, 2.0], np.float32)}
    b = {"w": np.array([3.0, 6.0], np.float32)}
    np.testing.assert_allclose(fedavg([a, b], [1, 3])["w"], [2.5, 5.0])
    np.testing.assert_array_equal(fedavg([a, a, a], [5, 1, 2])["w"], a["w"])
    assert fedavg([a, b], [1, 1])["w"].dtype == np.float32
    with pytest.raises(ShapeError):
        fedavg([a, {"w": np.zeros(3, np.float32)}], [1, 1])
    with pytest.raises(ShapeError):
        fedavg([a, {"v": np.zeros(2, np.float32)}], [1, 1])
    with pytest.raises(ConfigError):
        fedavg([a, b], [0, 0])


def test_fedavg_matches_weighted_sum(rng):
    sets = [{"x": rng.standard_normal((3, 4)).astype(np.float32)} for _ in range(5)]
    counts = [3, 9, 1, 4, 4]
    brute = sum(c * s["x"].astype(np.float64) for c, s in zip(counts, sets)) / sum(counts)
    np.testing.assert_allclose(fedavg(sets, counts)["x"], brute, atol=1e-6)


def make_client(cid, data, net, seed=0):
    head = tc.Sequential(clone_layers(net.layers), net.input_shape)
    return ClientState(cid, data.images, data.labels, head, head, client_stream(seed, cid))


def test_local_update_zero_lr_is_identity():
    data = synthetic_blobs(3, 24, (1, 8, 8), seed=1)
    net = build_convnet((1, 8, 8), 3)
    start = net.state_dict()
    out = local_update(make_client(0, data, net), net, start, 2, 0.0, batch_size=8)
    assert states_equal(out, start)


def test_local_update_single_step_is_sgd():
    data = synthetic_blobs(3, 8, (1, 8, 8), seed=1)
    net = build_convnet((1, 8, 8), 3).astype(np.float64)
    start = net.state_dict()
    lr = 0.05
    out = local_update(make_client(0, data, net), net, start, 1, lr, batch_size=8)
    net.load_state_dict(start)
    x = data.images.astype(np.float64)
    params = net.params()

    def loss():
        return tc.loss_cross_entropy(net(x), data.labels)[0]

    key = "11.weight"
    expect = start[key] - lr * numerical_grad(loss, params[key], eps=1e-6)
    assert rel_error(out[key], expect) < 1e-4


def test_fedavg_round_is_deterministic():
    data = synthetic_blobs(3, 48, (1, 8, 8), seed=2)
    net = build_convnet((1, 8, 8), 3)
    start = net.state_dict()
    shards = [data.subset(range(i, 48, 3)) for i in range(3)]

    def once():
        clients = [make_client(i, s, net, seed=7) for i, s in enumerate(shards)]
        return fedavg_round(clients, net, start, 1, 0.05, 8)

    assert states_equal(once(), once())
    assert not states_equal(once(), start)


def test_single_client_ufsl_matches_centralized_adam():
    cfg = tiny_config(n_clients=1, rounds=1, local_epochs=2)
    fed = train(cfg)
    got = fed.model.state_dict()

    # oracle: the unsplit network trained with one Adam over all parameters, same batch order
    net = build_convnet((1, 8, 8), 4, rng=np.random.default_rng(np.random.SeedSequence(3, spawn_key=(0,))))
    ref = setup(cfg)
    client = ref.clients[0]
    order_rng = client_stream(cfg.seed, 0)
    opt = tc.AdamState(lr=cfg.lr)
    for _ in range(cfg.local_epochs):
        perm = order_rng.permutation(len(client))
        for j in range(len(client) // cfg.batch_size):
            idx = perm[j * cfg.batch_size:(j + 1) * cfg.batch_size]
            out, caches = net.forward(client.images[idx])
            _, g = tc.loss_cross_entropy(out, client.labels[idx])
            _, grads = net.backward(caches, g.astype(out.dtype))
            tc.adam_step(opt, net.params(), grads)
    want = split(net, "B1").state_dict()
    assert got.keys() == want.keys()
    for k in want:
        np.testing.assert_allclose(got[k], want[k], atol=1e-5, err_msg=k)


def test_zero_lr_leaves_global_model_unchanged():
    cfg = tiny_config(lr=0.0)
    before = setup(cfg).model.state_dict()
    after = train(cfg).model.state_dict()
    assert states_equal(before, after)


def test_ufsl_learns_synthetic_task():
    cfg = tiny_config(rounds=25, dataset=dict(TINY, train_count=160), lr=3e-3)
    fed = train(cfg)
    assert fed.records[-1].train_loss < 0.1
    assert fed.records[-1].accuracy == 1.0


def test_degenerate_kd_equals_ufsl():
    a = train(tiny_config(rounds=3))
    b = train(tiny_config(rounds=3, method="kd_ufsl", privacy=PrivacyConfig(0.0, k=1)))
    for k, v in a.model.state_dict().items():
        np.testing.assert_allclose(b.model.state_dict()[k], v, atol=1e-5, err_msg=k)


def group_nets(rng, size):
    net = build_convnet((1, 8, 8), 3, rng=rng).astype(np.float64)
    parts = [split(net, "B2") for _ in range(size)]
    for p in parts:  # perturb so members differ
        for v in p.head.params().values():
            v += 0.05 * rng.standard_normal(v.shape)
    return parts


@pytest.mark.parametrize("size", [1, 2, 3])
def test_group_step_gradients_match_finite_differences(size):
    rng = np.random.default_rng(size)
    parts = group_nets(rng, size)
    heads = [p.head for p in parts]
    tails = [p.tail for p in parts]
    body = parts[0].body
    xs = [rng.random((4, 1, 8, 8)) for _ in range(size)]
    ys = [rng.integers(0, 3, 4) for _ in range(size)]
    step = group_step(heads, tails, body, xs, ys)

    def total():
        mean = sum(h(x) for h, x in zip(heads, xs)) / size
        b = body(mean)
        return sum(tc.loss_cross_entropy(t(b), y)[0] for t, y in zip(tails, ys))

    assert sum(step.losses) == pytest.approx(total(), rel=1e-12)
    for m in range(size):
        p = heads[m].params()["0.weight"]
        assert rel_error(step.head_grads[m]["0.weight"], numerical_grad(total, p, 1e-6)) < 1e-4
    key = sorted(body.params())[0]
    assert rel_error(step.body_grads[key], numerical_grad(total, body.params()[key], 1e-6)) < 1e-4


def test_audit_keeps_labels_local_and_sees_one_tensor_per_group():
    cfg = tiny_config(method="kd_ufsl", privacy=kd(0.1, 2), rounds=2)
    fed = setup(cfg)
    fed.server.audit = BoundaryAudit(hash_payloads=True)
    from splitguard.federation import run_round_kd_ufsl

    for t in (1, 2):
        run_round_kd_ufsl(fed.clients, fed.server, cfg, fed.model, t, fed.eval_set)
    entries = fed.server.audit.entries
    assert {e["kind"] for e in entries} == {"smashed", "tail_grad"}
    groups = len(fed.server.last_groups)
    assert groups == 2
    steps = {(e["round"], e["step"]) for e in entries}
    for where in steps:
        smashed = {e["digest"] for e in entries if (e["round"], e["step"]) == where and e["kind"] == "smashed"}
        assert len(smashed) == groups
    label_shapes = {c.labels[:cfg.batch_size].shape for c in fed.clients}
    assert all(len(e["shape"]) > 1 for e in entries) and not label_shapes & {e["shape"] for e in entries}


def test_audit_rejects_integer_payload():
    with pytest.raises(TrainingError):
        ServerState().receive("labels", 0, np.arange(4))


def test_zero_rounds_returns_initial_model():
    cfg = tiny_config(rounds=0)
    fed = train(cfg)
    assert fed.records == []
    assert states_equal(fed.model.state_dict(), setup(cfg).model.state_dict())


def test_training_is_deterministic_and_seed_sensitive():
    cfg = tiny_config(method="kd_ufsl", privacy=kd(0.1, 2))
    a, b = train(cfg), train(cfg)
    assert states_equal(a.model.state_dict(), b.model.state_dict())
    assert [r.accuracy for r in a.records] == [r.accuracy for r in b.records]
    c = train(tiny_config(method="kd_ufsl", privacy=kd(0.1, 2), seed=4))
    assert not states_equal(a.model.state_dict(), c.model.state_dict())


def test_groups_are_redrawn_each_round():
    cfg = tiny_config(method="kd_ufsl", privacy=kd(0.1, 2), rounds=1, n_clients=6, dataset=dict(TINY, train_count=96))
    seen = set()
    fed = setup(cfg)
    from splitguard.federation import run_round_kd_ufsl

    for t in range(6):
        run_round_kd_ufsl(fed.clients, fed.server, cfg, fed.model, t + 1)
        seen.add(fed.server.last_groups)
        assert all(len(g) >= 2 for g in fed.server.last_groups)
    assert len(seen) > 1


def test_noise_changes_training():
    a = train(tiny_config(method="ufsl_dp", privacy=PrivacyConfig(0.2, dp_enabled=True)))
    b = train(tiny_config(method="ufsl_dp", privacy=PrivacyConfig(0.0)))
    c = train(tiny_config())
    assert not states_equal(a.model.state_dict(), b.model.state_dict())
    assert states_equal(b.model.state_dict(), c.model.state_dict())


@pytest.mark.parametrize("kw,key", [
    (dict(method="ufsl", privacy=PrivacyConfig(0.1, dp_enabled=True)), "privacy.dp_enabled"),
    (dict(method="kd_ufsl", privacy=PrivacyConfig(0.1, k=3, dp_enabled=True)), "privacy.ka_enabled"),
    (dict(method="kd_ufsl", privacy=kd(0.1, 5)), "privacy.k"),
    (dict(method="fedsgd"), "method"),
    (dict(rounds=-1), "rounds"),
    (dict(attack=AttackConfig(epochs=-1)), "attack.epochs"),
])
def test_config_rejections_name_the_key(kw, key):
    with pytest.raises(ConfigError) as info:
        tiny_config(**kw)
    assert info.value.context["key"] == key


def test_training_error_carries_round():
    cfg = tiny_config(batch_size=64)
    with pytest.raises(TrainingError) as info:
        train(cfg)
    assert info.value.context["round"] == 1 and "round 1" in str(info.value)


def test_config_hash_tracks_content():
    assert tiny_config().config_hash() == tiny_config().config_hash()
    assert tiny_config().config_hash() != tiny_config(seed=9).config_hash()
    assert len(tiny_config().config_hash()) == 12


def test_resnet_federation_runs():
    cfg = tiny_config(arch="resnet", cut="RB1", blocks=2, method="kd_ufsl", privacy=kd(0.05, 2))
    fed = train(cfg)
    assert len(fed.records) == 2 and all(0 <= r.accuracy <= 1 for r in fed.records)
