"""UFSL and KD-UFSL training engine plus the plain FedAvg reference path."""
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_core as tc
from .attack import AttackConfig
from .data import Dataset, carve_attacker_and_eval, load_descriptor, partition_iid
from .errors import ConfigError, ShapeError, SplitGuardError, TrainingError
from .metrics import MetricsRecord, accuracy
from .models import build_convnet, build_small_resnet, split, split_at
from .privacy import PrivacyConfig, gaussian_mechanism, group_clients, microaggregate

METHODS = ("ufsl", "ufsl_dp", "ufsl_ka", "kd_ufsl")
ARCHS = ("convnet", "resnet")

# method -> (uses DP noise, uses microaggregation)
_MECHANISMS = {"ufsl": (False, False), "ufsl_dp": (True, False), "ufsl_ka": (False, True), "kd_ufsl": (True, True)}


def cut_names(arch, blocks=3):
    """Cut names ``build_network`` defines for an architecture."""
    if arch == "convnet":
        return ("B1", "B2", "B3", "B4", "RB1", "RB2", "RB3")
    return tuple(f"RB{i}" for i in range(1, blocks + 1))


@dataclass
class ExperimentConfig:
    method: str = "kd_ufsl"
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-3
    privacy: PrivacyConfig = field(default_factory=lambda: PrivacyConfig(sigma2=0.1, k=3, dp_enabled=True,
                                                                          ka_enabled=True))
    arch: str = "convnet"
    blocks: int = 3
    cut: str = "B2"
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    n_clients: int = 10
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)

    def check(self):
        """Validate ranges and that privacy toggles agree with the method."""
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}", key="method")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}", key="arch")
        for key in ("rounds", "local_epochs", "batch_size", "n_clients"):
            value = getattr(self, key)
            low = 0 if key == "rounds" else 1
            if not isinstance(value, int) or isinstance(value, bool) or value < low:
                raise ConfigError(f"{key} must be an integer >= {low}, got {value!r}", key=key)
        if self.arch == "resnet" and self.blocks not in (2, 3):
            raise ConfigError(f"blocks must be 2 or 3, got {self.blocks}", key="blocks")
        names = cut_names(self.arch, self.blocks)
        if self.cut not in names:
            raise ConfigError(f"cut {self.cut!r} is not defined for {self.arch}; choose from {names}", key="cut")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}", key="lr")
        self.privacy.validate()
        self.attack.validate()
        dp, ka = _MECHANISMS[self.method]
        p = self.privacy
        if p.dp_enabled and not dp:
            raise ConfigError(f"method {self.method} does not use DP but privacy.dp_enabled is true",
                              key="privacy.dp_enabled")
        if p.ka_enabled and not ka:
            raise ConfigError(f"method {self.method} does not use k-anonymity but privacy.ka_enabled is true",
                              key="privacy.ka_enabled")
        # sigma2 == 0 and k == 1 are the degenerate settings under which a method may switch a mechanism off
        if dp and not p.dp_enabled and p.sigma2 > 0:
            raise ConfigError(f"method {self.method} requires privacy.dp_enabled", key="privacy.dp_enabled")
        if ka and not p.ka_enabled and p.k > 1:
            raise ConfigError(f"method {self.method} requires privacy.ka_enabled", key="privacy.ka_enabled")
        if ka and p.k > self.n_clients:
            raise ConfigError(f"k={p.k} exceeds n_clients={self.n_clients}", key="privacy.k")
        return self

    def to_dict(self):
        d = asdict(self)
        d["dataset"] = {k: str(v) if hasattr(v, "__fspath__") else v for k, v in self.dataset.items()}
        return d

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# fixed stream ids under the master seed
_INIT, _PARTITION, _GROUPING, _ATTACK, _PEERS, _CARVE = range(6)
_CLIENT_BASE = 1000


def stream(seed, key):
    """Independent, reproducible generator for a named purpose under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(key),)))


def client_stream(seed, cid):
    return stream(seed, _CLIENT_BASE + cid)


@dataclass
class ClientState:
    cid: int
    images: np.ndarray
    labels: np.ndarray
    head: tc.Sequential
    tail: tc.Sequential
    rng: np.random.Generator
    head_opt: tc.AdamState = field(default_factory=tc.AdamState)
    tail_opt: tc.AdamState = field(default_factory=tc.AdamState)

    def __len__(self):
        return len(self.labels)


class BoundaryAudit:
    """Log of every tensor crossing the client->server boundary."""

    def __init__(self, hash_payloads=False):
        self.hash_payloads = hash_payloads
        self.entries = []
        self.where = (0, 0)

    def record(self, kind, owner, tensor):
        if not np.issubdtype(tensor.dtype, np.floating):
            raise TrainingError(f"non-float payload of kind {kind!r} crossed to the server", kind=kind)
        digest = hashlib.blake2b(tensor.tobytes(), digest_size=16).hexdigest() if self.hash_payloads else None
        self.entries.append({"round": self.where[0], "step": self.where[1], "kind": kind, "owner": owner,
                             "shape": tuple(tensor.shape), "digest": digest})


@dataclass
class ServerState:
    """Body networks keyed by owner (client id in UFSL, group index in KD-UFSL); never holds labels."""

    bodies: dict = field(default_factory=dict)
    opts: dict = field(default_factory=dict)
    audit: BoundaryAudit = field(default_factory=BoundaryAudit)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    last_groups: tuple = ()

    def receive(self, kind, owner, tensor):
        self.audit.record(kind, owner, tensor)
        return tensor


def fedavg(weight_sets, sample_counts):
    """Sample-count weighted average of state dicts (accumulated in float64)."""
    weight_sets = list(weight_sets)
    counts = [int(c) for c in sample_counts]
    if not weight_sets:
        raise ConfigError("fedavg needs at least one weight collection")
    if len(counts) != len(weight_sets):
        raise ConfigError(f"{len(weight_sets)} weight sets but {len(counts)} sample counts")
    if any(c < 0 for c in counts):
        raise ConfigError("sample counts must be non-negative")
    total = sum(counts)
    if total <= 0:
        raise ConfigError("fedavg total sample count is zero")
    keys = set(weight_sets[0])
    out = {}
    for i, ws in enumerate(weight_sets[1:], 1):
        if set(ws) != keys:
            raise ShapeError(f"weight set {i} has different parameter names", index=i)
    for name, ref in weight_sets[0].items():
        acc = np.zeros(ref.shape, np.float64)
        for i, (ws, c) in enumerate(zip(weight_sets, counts)):
            if ws[name].shape != ref.shape:
                raise ShapeError(f"{name}: weight set {i} has shape {ws[name].shape}, expected {ref.shape}",
                                 key=name, index=i)
            acc += (c / total) * ws[name]
        out[name] = acc.astype(ref.dtype)
    return out


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(n // batch_size)]


def local_update(client, network, init_weights, epochs, lr, batch_size=32):
    """Plain FedAvg client step: ``epochs`` passes of mini-batch SGD on the whole network."""
    if len(client) == 0:
        raise TrainingError(f"client {client.cid} has an empty shard", client=client.cid)
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}", key="local_epochs")
    network.load_state_dict(init_weights)
    params = network.params()
    for _ in range(epochs):
        for idx in _batches(len(client), min(batch_size, len(client)), client.rng):
            out, caches = network.forward(client.images[idx], training=True)
            _, g = tc.loss_cross_entropy(out, client.labels[idx])
            _, grads = network.backward(caches, g.astype(out.dtype))
            for k, p in params.items():
                p -= (lr * grads[k]).astype(p.dtype, copy=False)
    return network.state_dict()


def fedavg_round(clients, network, global_weights, epochs, lr, batch_size=32):
    """One round of Alg.-1 style FedAvg over whole-network copies."""
    states = [local_update(c, network, global_weights, epochs, lr, batch_size) for c in clients]
    return fedavg(states, [len(c) for c in clients])


@dataclass
class GroupStep:
    losses: list
    head_grads: list
    tail_grads: list
    body_grads: dict
    smashed: np.ndarray


def group_step(heads, tails, body, xs, ys, server=None, owner=None):
    """Forward/backward for one lockstep batch of a group sharing ``body``.

    Member smashed outputs are microaggregated, the body output is broadcast
    to every member's tail, body gradients are summed over members and each
    head receives the aggregate gradient scaled by 1/|group|.
    """
    size = len(heads)
    outs, head_caches = [], []
    for head, x in zip(heads, xs):
        s, c = head.forward(x, training=True)
        outs.append(s)
        head_caches.append(c)
    smashed = outs[0] if size == 1 else microaggregate(outs, list(range(size)))
    if server is not None:
        server.receive("smashed", owner, smashed)
    b, body_cache = body.forward(smashed, training=True)
    losses, tail_grads = [], []
    grad_b = None
    for tail, y in zip(tails, ys):
        logits, c = tail.forward(b, training=True)
        loss, g = tc.loss_cross_entropy(logits, y)
        gb, tg = tail.backward(c, g.astype(logits.dtype))
        losses.append(loss)
        tail_grads.append(tg)
        grad_b = gb if grad_b is None else grad_b + gb
    if server is not None:
        server.receive("tail_grad", owner, grad_b)
    grad_m, body_grads = body.backward(body_cache, grad_b)
    share = grad_m if size == 1 else grad_m / np.asarray(size, grad_m.dtype)
    head_grads = [head.backward(c, share)[1] for head, c in zip(heads, head_caches)]
    return GroupStep(losses, head_grads, tail_grads, body_grads, smashed)


def _broadcast(clients, server, global_model, owners):
    head_state = global_model.head.state_dict()
    tail_state = global_model.tail.state_dict()
    body_state = global_model.body.state_dict()
    for c in clients:
        c.head.load_state_dict(head_state)
        c.tail.load_state_dict(tail_state)
        c.head_opt = tc.AdamState(lr=c.head_opt.lr)
        c.tail_opt = tc.AdamState(lr=c.tail_opt.lr)
    template = global_model.body
    server.bodies, server.opts = {}, {}
    for owner in owners:
        body = tc.Sequential(_clone(template.layers), template.input_shape)
        body.load_state_dict(body_state)
        server.bodies[owner] = body
        server.opts[owner] = tc.AdamState(lr=clients[0].head_opt.lr)


def _clone(layers):
    from .models import clone_layers

    return clone_layers(layers)


def _run_groups(clients, server, config, global_model, groups, owners, round_index, apply_noise):
    by_id = {c.cid: c for c in clients}
    for c in clients:
        c.head_opt.lr = c.tail_opt.lr = config.lr
    _broadcast(clients, server, global_model, owners)
    for o in owners:
        server.opts[o].lr = config.lr
    steps = min(len(c) for c in clients) // config.batch_size
    if steps == 0:
        raise TrainingError(
            f"batch size {config.batch_size} exceeds the smallest shard ({min(len(c) for c in clients)})",
            round=round_index,
        )
    sigma2 = config.privacy.sigma2 if apply_noise else 0.0
    losses = []
    for _ in range(config.local_epochs):
        order = {c.cid: _batches(len(c), config.batch_size, c.rng)[:steps] for c in clients}
        for j in range(steps):
            server.audit.where = (round_index, j)
            for group, owner in zip(groups, owners):
                members = [by_id[cid] for cid in group]
                try:
                    xs = []
                    for m in members:
                        xb = m.images[order[m.cid][j]]
                        xs.append(gaussian_mechanism(xb, sigma2, m.rng) if sigma2 > 0 else xb)
                    ys = [m.labels[order[m.cid][j]] for m in members]
                    step = group_step([m.head for m in members], [m.tail for m in members],
                                      server.bodies[owner], xs, ys, server, owner)
                except SplitGuardError as err:
                    err.context.update(clients=list(group), step=j)
                    raise
                for m, hg, tg in zip(members, step.head_grads, step.tail_grads):
                    tc.adam_step(m.head_opt, m.head.params(), hg)
                    tc.adam_step(m.tail_opt, m.tail.params(), tg)
                tc.adam_step(server.opts[owner], server.bodies[owner].params(), step.body_grads)
                losses.extend(step.losses)
    return float(np.mean(losses))


def _aggregate(clients, server, global_model, body_counts):
    counts = [len(c) for c in clients]
    global_model.head.load_state_dict(fedavg([c.head.state_dict() for c in clients], counts))
    global_model.tail.load_state_dict(fedavg([c.tail.state_dict() for c in clients], counts))
    owners = list(server.bodies)
    global_model.body.load_state_dict(fedavg([server.bodies[o].state_dict() for o in owners],
                                             [body_counts[o] for o in owners]))


def run_round_ufsl(clients, server, config, global_model, round_index=0, eval_set=None):
    """One UFSL round: a private body per client, optional DP noise (``ufsl_dp``), then FedAvg."""
    clients = sorted(clients, key=lambda c: c.cid)
    groups = [(c.cid,) for c in clients]
    owners = [("client", c.cid) for c in clients]
    noise = config.privacy.dp_enabled and _MECHANISMS[config.method][0]
    start = time.perf_counter()
    loss = _run_groups(clients, server, config, global_model, groups, owners, round_index, noise)
    _aggregate(clients, server, global_model, {("client", c.cid): len(c) for c in clients})
    server.last_groups = tuple(groups)
    return _record(config, global_model, round_index, eval_set, loss, start)


def run_round_kd_ufsl(clients, server, config, global_model, round_index=0, eval_set=None):
    """One KD-UFSL round: regroup, noise each batch, microaggregate per group, one body per group."""
    clients = sorted(clients, key=lambda c: c.cid)
    k = config.privacy.k
    if len(clients) < k:
        raise TrainingError(f"{len(clients)} clients cannot form groups of {k}", round=round_index)
    assignment = group_clients([c.cid for c in clients], k, server.rng, round_index)
    owners = [("group", i) for i in range(len(assignment.groups))]
    start = time.perf_counter()
    loss = _run_groups(clients, server, config, global_model, assignment.groups, owners, round_index,
                       config.privacy.dp_enabled)
    # unweighted mean over groups
    _aggregate(clients, server, global_model, {o: 1 for o in owners})
    server.last_groups = assignment.groups
    return _record(config, global_model, round_index, eval_set, loss, start)


def evaluate_accuracy(model, dataset, batch_size=256):
    correct = 0
    for i in range(0, len(dataset), batch_size):
        logits = model(dataset.images[i:i + batch_size], training=False)
        correct += accuracy(logits, dataset.labels[i:i + batch_size]) * len(logits)
    return correct / len(dataset)


def _record(config, model, round_index, eval_set, loss, start):
    acc = evaluate_accuracy(model, eval_set) if eval_set is not None and len(eval_set) else 0.0
    rec = MetricsRecord(round_index, config.method, acc, wall_time_s=time.perf_counter() - start,
                        config_hash=config.config_hash())
    rec.train_loss = loss
    return rec


def build_network(config, input_shape, classes):
    rng = stream(config.seed, _INIT)
    if config.arch == "convnet":
        return build_convnet(input_shape, classes, rng=rng)
    return build_small_resnet(input_shape, classes, blocks=config.blocks, rng=rng)


@dataclass
class Federation:
    """Everything a run produces: the global split model plus the parties and data splits."""

    config: ExperimentConfig
    model: object
    clients: list
    server: ServerState
    attacker_set: Dataset
    eval_set: Dataset
    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)


def setup(config, train_set=None, test_set=None):
    """Build data splits, the initial global model, clients and the server for ``config``."""
    if train_set is None or test_set is None:
        train_set, test_set = load_descriptor(config.dataset, seed=config.seed)
    network = build_network(config, train_set.shape, train_set.classes)
    model = split(network, split_at(network, config.cut))
    plan = partition_iid(train_set, config.n_clients, seed=int(stream(config.seed, _PARTITION).integers(2**63)))
    clients = []
    for cid, shard in enumerate(plan.shards):
        clients.append(ClientState(
            cid, train_set.images[shard], train_set.labels[shard],
            tc.Sequential(_clone(model.head.layers), model.head.input_shape),
            tc.Sequential(_clone(model.tail.layers), model.tail.input_shape),
            client_stream(config.seed, cid),
        ))
    server = ServerState(rng=stream(config.seed, _GROUPING))
    attacker, evaluation = carve_attacker_and_eval(test_set, seed=int(stream(config.seed, _CARVE).integers(2**63)))
    return Federation(config, model, clients, server, attacker, evaluation)


def train(config, train_set=None, test_set=None, on_round=None, snapshot_rounds=()):
    """Run ``config.rounds`` rounds; returns the :class:`Federation` with per-round records.

    Global head weights after each round listed in ``snapshot_rounds`` (0 is
    the initial model) are kept in ``fed.snapshots``.
    """
    fed = setup(config, train_set, test_set)
    if 0 in snapshot_rounds:
        fed.snapshots[0] = fed.model.head.state_dict()
    run_round = run_round_kd_ufsl if _MECHANISMS[config.method][1] else run_round_ufsl
    for t in range(1, config.rounds + 1):
        try:
            rec = run_round(fed.clients, fed.server, config, fed.model, t, fed.eval_set)
        except SplitGuardError as err:
            err.context["round"] = t
            err.args = (f"round {t}: {err.args[0]}",) + err.args[1:]
            raise
        fed.records.append(rec)
        if t in snapshot_rounds:
            fed.snapshots[t] = fed.model.head.state_dict()
        if on_round is not None:
            on_round(rec)
    return fed
