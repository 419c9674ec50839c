"""Server-side data reconstruction: an inversion network trained against a frozen client head."""
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, ShapeError, TrainingError
from .metrics import batch_mse, batch_ssim
from .models import build_inversion
from .privacy import gaussian_mechanism, microaggregate


@dataclass
class AttackConfig:
    """Inversion training settings.

    The attacker images themselves are the held-out half of the test split
    (see :func:`splitguard.data.carve_attacker_and_eval`). ``snapshot_round``
    of ``None`` means the head is taken after the final round.
    """

    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    target_client: int = 0
    snapshot_round: int | None = None

    def validate(self):
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError(f"attack.epochs must be an integer >= 0, got {self.epochs!r}", key="attack.epochs")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"attack.batch_size must be >= 1, got {self.batch_size!r}", key="attack.batch_size")
        if not self.lr > 0:
            raise ConfigError(f"attack.lr must be > 0, got {self.lr}", key="attack.lr")
        if self.target_client < 0:
            raise ConfigError(f"attack.target_client must be >= 0, got {self.target_client}",
                              key="attack.target_client")
        if self.snapshot_round is not None and self.snapshot_round < 0:
            raise ConfigError(f"attack.snapshot_round must be >= 0, got {self.snapshot_round}",
                              key="attack.snapshot_round")
        return self


def smash(head, images, batch_size=256):
    """Head outputs for ``images`` in inference mode; the head is only read."""
    if len(images) == 0:
        return np.zeros((0,) + tuple(head.output_shape), images.dtype)
    return np.concatenate([head(images[i:i + batch_size], training=False)
                           for i in range(0, len(images), batch_size)])


def train_inversion(head, attacker_images, config, rng, inversion=None):
    """Fit an inversion network mapping ``head`` outputs back to images by MSE.

    Returns ``(inversion, losses)`` where ``losses`` holds the mean training
    loss of each epoch. The head is never updated: its outputs on the
    attacker set are computed once up front and used as fixed inputs.
    """
    config.validate()
    images = np.asarray(attacker_images)
    if len(images) == 0:
        raise TrainingError("attacker dataset is empty")
    if images.shape[1:] != tuple(head.input_shape):
        raise ShapeError(f"attacker images {images.shape[1:]} do not fit head input {head.input_shape}",
                         expected=tuple(head.input_shape), got=images.shape[1:])
    if inversion is None:
        inversion = build_inversion(head, rng)
    if tuple(inversion.input_shape) != tuple(head.output_shape):
        raise ShapeError(f"inversion expects {inversion.input_shape} but head emits {head.output_shape}",
                         expected=tuple(head.output_shape), got=tuple(inversion.input_shape))
    smashed = smash(head, images)
    opt = tc.AdamState(lr=config.lr)
    params = inversion.params()
    batch = min(config.batch_size, len(images))
    losses = []
    for _ in range(config.epochs):
        perm = rng.permutation(len(images))
        total, seen = 0.0, 0
        for i in range(0, len(images) - batch + 1, batch):
            idx = perm[i:i + batch]
            out, caches = inversion.forward(smashed[idx], training=True)
            loss, g = tc.loss_mse(out, images[idx])
            _, grads = inversion.backward(caches, g.astype(out.dtype))
            tc.adam_step(opt, params, grads)
            total += loss * len(idx)
            seen += len(idx)
        losses.append(total / seen)
    return inversion, losses


def reconstruct(inversion, smashed, batch_size=256):
    """Images the attacker recovers from ``smashed`` (deterministic, values in [0, 1])."""
    smashed = np.asarray(smashed)
    if smashed.ndim < 2 or smashed.shape[1:] != tuple(inversion.input_shape):
        raise ShapeError(f"smashed shape {smashed.shape[1:]} does not match inversion input {inversion.input_shape}",
                         expected=tuple(inversion.input_shape), got=smashed.shape[1:])
    return smash(inversion, smashed, batch_size)


def observed_smashed(head, images, privacy, rng, peer_pool=None):
    """What the server sees for ``images`` under ``privacy``.

    With DP each image is noised before the head. With k-anonymity each
    victim tensor is averaged with k-1 peers' tensors, where peer j
    contributes one randomly drawn image from ``peer_pool`` per victim image.
    """
    noisy = privacy.dp_enabled and privacy.sigma2 > 0
    x = gaussian_mechanism(images, privacy.sigma2, rng) if noisy else images
    s = smash(head, x)
    if privacy.ka_enabled and privacy.k > 1:
        if peer_pool is None or len(peer_pool) == 0:
            raise ConfigError("k-anonymous evaluation needs a non-empty peer pool", key="privacy.k")
        members = [s]
        for _ in range(privacy.k - 1):
            peers = peer_pool[rng.integers(0, len(peer_pool), len(images))]
            if noisy:
                peers = gaussian_mechanism(peers, privacy.sigma2, rng)
            members.append(smash(head, peers))
        s = microaggregate(members)
    return s


def evaluate_attack(inversion, head, privacy, test_images, rng, peer_pool=None, return_images=False):
    """Mean per-image MSE and SSIM of reconstructions against the clean ``test_images``."""
    images = np.asarray(test_images)
    if len(images) == 0:
        raise ShapeError("attack evaluation needs a non-empty test set")
    recon = reconstruct(inversion, observed_smashed(head, images, privacy, rng, peer_pool))
    mse = float(np.mean(batch_mse(recon, images)))
    score = float(np.mean(batch_ssim(recon, images)))
    if return_images:
        return mse, score, recon
    return mse, score


def attack_federation(fed, config=None, head=None, return_images=False):
    """Train and score the inversion attack on a finished :class:`~splitguard.federation.Federation`.

    The victim head defaults to the global head; peers for k-anonymous
    evaluation are drawn from every client shard except the target's.
    """
    from .federation import _ATTACK, _PEERS, stream

    config = (config or fed.config.attack).validate()
    if not 0 <= config.target_client < len(fed.clients):
        raise ConfigError(f"attack.target_client {config.target_client} is not a client id",
                          key="attack.target_client")
    head = head if head is not None else fed.model.head
    seed = fed.config.seed
    inversion, losses = train_inversion(head, fed.attacker_set.images, config, stream(seed, _ATTACK))
    others = [c.images for c in fed.clients if c.cid != config.target_client]
    pool = np.concatenate(others) if others else None
    result = evaluate_attack(inversion, head, fed.config.privacy, fed.eval_set.images, stream(seed, _PEERS),
                             pool, return_images)
    return result + (losses,)
