"""P x K identity sampling, learning-rate schedule and momentum SGD."""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, NotEnoughIdentities, ShapeMismatch


@dataclass(frozen=True)
class SamplerConfig:
    P: int = 8
    K: int = 4
    max_batch: int = 4096

    def validate(self, prefix="sampler"):
        if self.P < 2:
            raise InvalidConfig(f"{prefix}.P", "must be >= 2")
        if self.K < 2:
            raise InvalidConfig(f"{prefix}.K", "must be >= 2")
        if self.P * self.K > self.max_batch:
            raise InvalidConfig(f"{prefix}.P", f"P*K exceeds max_batch={self.max_batch}")


@dataclass
class OptimConfig:
    lr0: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 10
    decay_epochs: list = field(default_factory=lambda: [40, 70])
    decay_factor: float = 0.1

    def validate(self, prefix="optim"):
        if not self.lr0 > 0:
            raise InvalidConfig(f"{prefix}.lr0", "must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfig(f"{prefix}.momentum", "must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidConfig(f"{prefix}.weight_decay", "must be >= 0")
        if self.warmup_epochs < 0:
            raise InvalidConfig(f"{prefix}.warmup_epochs", "must be >= 0")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise InvalidConfig(f"{prefix}.decay_epochs", "must be strictly increasing")
        if not 0.0 < self.decay_factor < 1.0:
            raise InvalidConfig(f"{prefix}.decay_factor", "must lie in (0, 1)")


def pk_sample(labels, cfg, rng):
    """Indices of a P x K batch, label-major.

    Labels are drawn without replacement; instances without replacement when
    the label has at least K of them, with replacement otherwise.
    """
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < cfg.P:
        raise NotEnoughIdentities(f"need {cfg.P} distinct labels, found {len(uniq)}")
    chosen = rng.choice(uniq, size=cfg.P, replace=False)
    out = []
    for lab in chosen:
        pool = np.flatnonzero(labels == lab)
        out.append(rng.choice(pool, size=cfg.K, replace=len(pool) < cfg.K))
    return np.concatenate(out)


def lr_at(epoch, cfg):
    """Linear warm-up from lr0/10 to lr0, then step decay at the milestones."""
    if epoch < cfg.warmup_epochs:
        frac = epoch / cfg.warmup_epochs
        return cfg.lr0 * (0.1 + 0.9 * frac)
    steps = sum(1 for e in cfg.decay_epochs if e <= epoch)
    return cfg.lr0 * cfg.decay_factor ** steps


def sgd_step(params, grads, velocity, lr, cfg, frozen=()):
    """Classic momentum SGD with coupled weight decay, in place.

    ``params``, ``grads`` and ``velocity`` are name -> array mappings; any
    name starting with a prefix in ``frozen`` is left untouched.
    """
    for name, p in params.items():
        if name.startswith(tuple(frozen)) and frozen:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= cfg.momentum
        v += g + cfg.weight_decay * p
        p -= lr * v
    return params, velocity
