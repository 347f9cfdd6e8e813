"""Two-stage adaptation: supervised source training, then rounds of
clustering and group contrastive learning on the target domain."""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .clustering import ClusteringConfig, assign_pseudo_labels, cluster_report, dbscan
from .errors import DegenerateBatch, InvalidConfig
from .evaluation import EvalProtocol, evaluate_retrieval, split_query_gallery
from .losses import TripletConfig, group_contrastive_batch, supervised_loss
from .memory import init_memory, update_memory
from .mgr import backward, forward_batch, init_params, parts_for_variant, split_mega_grad
from .numerics import child_seed, make_rng
from .training import OptimConfig, SamplerConfig, lr_at, pk_sample, sgd_step

log = logging.getLogger(__name__)

VARIANTS = ("full", "mgr_only", "mgr_no_h", "mgr_no_hv", "one_iter")
ADAPTING_VARIANTS = ("full", "one_iter")

# rng stream tags
_INIT, _SOURCE, _TARGET = 10, 11, 12


@dataclass
class MemoryConfig:
    momentum: float = 0.2
    temperature: float = 0.2


def _target_optim():
    return OptimConfig(lr0=1e-2, momentum=0.9, weight_decay=5e-4, warmup_epochs=0, decay_epochs=[], decay_factor=0.1)


@dataclass
class RunConfig:
    supervised_epochs: int = 60
    unsupervised_rounds: int = 10
    iterations_per_round: int = 100
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    source_optim: OptimConfig = field(default_factory=OptimConfig)
    target_optim: OptimConfig = field(default_factory=_target_optim)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    margin: float = 0.5
    variant: str = "full"
    normalize_features: bool = True
    center_features: bool = True
    d_g: "int | None" = None
    d_p: "int | None" = None
    seed: int = 0

    def validate(self):
        if self.variant not in VARIANTS:
            raise InvalidConfig("run.variant", f"must be one of {', '.join(VARIANTS)}")
        if self.supervised_epochs < 0:
            raise InvalidConfig("run.supervised_epochs", "must be >= 0")
        if self.unsupervised_rounds < 1:
            raise InvalidConfig("run.unsupervised_rounds", "must be >= 1")
        if self.iterations_per_round < 1:
            raise InvalidConfig("run.iterations_per_round", "must be >= 1")
        if self.margin < 0:
            raise InvalidConfig("run.margin", "must be >= 0")
        if not 0.0 <= self.memory.momentum <= 1.0:
            raise InvalidConfig("run.memory.momentum", "must lie in [0, 1]")
        if not self.memory.temperature > 0:
            raise InvalidConfig("run.memory.temperature", "must be > 0")
        self.sampler.validate("run.sampler")
        self.source_optim.validate("run.source_optim")
        self.target_optim.validate("run.target_optim")
        try:
            self.clustering.validate()
        except InvalidConfig as exc:
            raise InvalidConfig(f"run.{exc.key}", str(exc).split(": ", 1)[1]) from exc

    @property
    def rounds(self):
        return 1 if self.variant == "one_iter" else self.unsupervised_rounds


@dataclass
class RoundReport:
    round: int
    num_groups: int
    noise: int
    mean_loss: "float | None"
    wall_time: float
    status: str = "ok"
    P: int = 0
    group_sizes: list = field(default_factory=list)
    memory_entries: int = 0

    def to_json(self, timing=False):
        doc = {
            "type": "round",
            "round": self.round,
            "status": self.status,
            "num_groups": self.num_groups,
            "noise": self.noise,
            "P": self.P,
            "memory_entries": self.memory_entries,
            "mean_loss": self.mean_loss,
        }
        if timing:
            doc["wall_time"] = self.wall_time
        return doc


def class_indices(identities):
    """Map arbitrary identity labels to 0..n_classes-1 (sorted order)."""
    uniq, inv = np.unique(np.asarray(identities), return_inverse=True)
    return inv, len(uniq)


def make_params(cfg, channels, num_classes):
    rng = make_rng(child_seed(cfg.seed, _INIT))
    return init_params(channels, num_classes, rng, cfg.d_g, cfg.d_p, parts_for_variant(cfg.variant))


def train_source(source, params, cfg):
    """Supervised training on the labelled source domain, in place.

    Returns ``(params, log)``; ``log`` has one entry per epoch with the
    batch losses of that epoch.
    """
    labels, _ = class_indices(source.identities)
    maps = source.sample_maps().astype(np.float64)
    rng = make_rng(child_seed(cfg.seed, _SOURCE))
    batch = cfg.sampler.P * cfg.sampler.K
    n_batches = max(1, -(-len(labels) // batch))
    velocity = {}
    triplet = TripletConfig(cfg.margin)
    history = []
    for epoch in range(cfg.supervised_epochs):
        lr = lr_at(epoch, cfg.source_optim)
        losses = []
        for _ in range(n_batches):
            idx = pk_sample(labels, cfg.sampler, rng)
            desc, cache = forward_batch(maps[idx], params)
            try:
                sup = supervised_loss(desc, labels[idx], triplet)
            except DegenerateBatch as exc:
                raise DegenerateBatch(f"source epoch {epoch}: {exc}") from exc
            grads = backward(cache, params, sup.grad_globals, None, sup.grad_logits)
            sgd_step(params.tensors, grads, velocity, lr, cfg.source_optim)
            losses.append(sup.total)
        history.append({"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)), "batch_losses": losses})
    return params, history


def mega_features(maps, params, normalize=True, center=False, chunk=1024):
    """Mega features of a map batch; optionally mean-centred, then normalised.

    Returns ``(features, mean)``; ``mean`` is the subtracted vector (zeros
    when ``center`` is off).
    """
    out = []
    for start in range(0, len(maps), chunk):
        desc, _ = forward_batch(np.asarray(maps[start:start + chunk], dtype=np.float64), params)
        out.append(desc.mega)
    feats = np.concatenate(out) if out else np.zeros((0, params.mega_dim))
    mean = feats.mean(axis=0) if center and len(feats) else np.zeros(params.mega_dim)
    feats = feats - mean
    if normalize:
        feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    return feats, mean


def extract_mega_features(dataset, params, normalize=True, center=False):
    """Mega feature of every sample, in manifest order."""
    return mega_features(dataset.sample_maps(), params, normalize, center)[0]


def _normalize_with_grad(x):
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    y = x / norms

    def vjp(g):
        return (g - y * np.sum(y * g, axis=1, keepdims=True)) / norms

    return y, vjp


def adapt(target, params, cfg):
    """Rounds of DBSCAN pseudo-labelling and group contrastive training.

    Memory entries only move through the momentum update; classifier heads
    stay frozen.  Returns ``(params, reports)``.
    """
    maps = target.sample_maps().astype(np.float64)
    rng = make_rng(child_seed(cfg.seed, _TARGET))
    velocity = {}
    reports = []
    for rnd in range(cfg.rounds):
        t0 = time.perf_counter()
        feats, mean = mega_features(maps, params, cfg.normalize_features, cfg.center_features)
        assignment = dbscan(feats, cfg.clustering)
        info = cluster_report(assignment)
        if assignment.num_groups == 0:
            log.warning("round %d: clustering produced no groups, skipping", rnd)
            reports.append(RoundReport(rnd, 0, info["noise"], None, time.perf_counter() - t0, "skipped_all_noise"))
            continue
        pseudo = assign_pseudo_labels(target.manifest, assignment, rnd)
        memory = init_memory(feats, assignment, cfg.memory.momentum, cfg.memory.temperature)
        sampler = cfg.sampler
        if assignment.num_groups < sampler.P:
            log.info("round %d: only %d groups, lowering P from %d", rnd, assignment.num_groups, sampler.P)
            sampler = replace(sampler, P=assignment.num_groups)
        lr = lr_at(rnd, cfg.target_optim)
        round_maps = maps[pseudo.indices]
        losses = []
        for _ in range(cfg.iterations_per_round):
            idx = pk_sample(pseudo.labels, sampler, rng)
            group_ids = pseudo.labels[idx]
            desc, cache = forward_batch(round_maps[idx], params)
            queries, vjp = _normalize_with_grad(desc.mega - mean)
            loss, grad_q = group_contrastive_batch(queries, memory, group_ids)
            grad_globals, grad_parts = split_mega_grad(vjp(grad_q), params)
            grads = backward(cache, params, grad_globals, grad_parts, None)
            sgd_step(params.tensors, grads, velocity, lr, cfg.target_optim, frozen=("classifier.",))
            update_memory(memory, queries, group_ids)
            losses.append(loss)
        reports.append(
            RoundReport(
                rnd, assignment.num_groups, info["noise"], float(np.mean(losses)),
                time.perf_counter() - t0, "ok", sampler.P, info["group_sizes"], memory.num_groups,
            )
        )
    return params, reports


def evaluate_target(target, truth, params, protocol=EvalProtocol(), normalize=True, center=False):
    """Retrieval metrics on the target domain with held-out identities.

    The first sample of each (identity, camera) pair queries the rest.
    """
    feats = extract_mega_features(target, params, normalize, center)
    cams = target.cameras
    q, g = split_query_gallery(truth, cams)
    return evaluate_retrieval(feats[q], truth[q], cams[q], feats[g], truth[g], cams[g], protocol)


@dataclass
class VariantResult:
    variant: str
    direct: object
    adapted: object
    source_log: list
    reports: list
    params: object

    @property
    def final(self):
        return self.adapted if self.adapted is not None else self.direct


def run_variant(cfg, pair, protocol=EvalProtocol()):
    """Run one variant end to end on a ``SyntheticPair``-like object.

    ``pair`` needs ``source``, ``target`` and ``target_identities``.
    """
    cfg.validate()
    _, num_classes = class_indices(pair.source.identities)
    params = make_params(cfg, pair.source.manifest.map_shape[0], num_classes)
    params, source_log = train_source(pair.source, params, cfg)
    prot = replace(protocol, metric=cfg.clustering.metric)
    direct = evaluate_target(pair.target, pair.target_identities, params, prot, cfg.normalize_features, cfg.center_features)
    adapted, reports = None, []
    if cfg.variant in ADAPTING_VARIANTS:
        params, reports = adapt(pair.target, params, cfg)
        adapted = evaluate_target(pair.target, pair.target_identities, params, prot, cfg.normalize_features, cfg.center_features)
    return VariantResult(cfg.variant, direct, adapted, source_log, reports, params)
