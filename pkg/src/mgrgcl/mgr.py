"""Multi-granularity representation over a backbone feature map.

Three branches (Global, Middle, Lower) read the same C x H x W map.  Each
branch global-max-pools the map and applies its own affine adapter, giving
``v_g, v_m, v_l``.  The Middle and Lower branches are also cut into stripes,
two and three per direction, and every stripe is pooled and passed through
an affine reducer with ReLU.  Row stripes ("vertical" partitioning) come
first, column stripes ("horizontal") second:

    pMv1 pMv2 pLv1 pLv2 pLv3 pMh1 pMh2 pLh1 pLh2 pLh3

Each part feature also feeds a bias-free identity classifier.  The mega
feature is ``v_g ++ v_m ++ v_l ++ parts`` in that order.
"""

import struct
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import BadMagic, CorruptHeader, ShapeMismatch, StaleCache, TooManyParts

BRANCHES = ("G", "M", "L")

# name -> (branch, axis, number of stripes, stripe index)
PART_SPECS = OrderedDict(
    [
        ("pMv1", ("M", "vertical", 2, 0)),
        ("pMv2", ("M", "vertical", 2, 1)),
        ("pLv1", ("L", "vertical", 3, 0)),
        ("pLv2", ("L", "vertical", 3, 1)),
        ("pLv3", ("L", "vertical", 3, 2)),
        ("pMh1", ("M", "horizontal", 2, 0)),
        ("pMh2", ("M", "horizontal", 2, 1)),
        ("pLh1", ("L", "horizontal", 3, 0)),
        ("pLh2", ("L", "horizontal", 3, 1)),
        ("pLh3", ("L", "horizontal", 3, 2)),
    ]
)
ALL_PARTS = tuple(PART_SPECS)
VERTICAL_PARTS = ALL_PARTS[:5]

CHECKPOINT_MAGIC = b"MGRP"
CHECKPOINT_VERSION = 1


def parts_for_variant(variant):
    """Part names kept by an ablation variant."""
    if variant == "mgr_no_h":
        return VERTICAL_PARTS
    if variant == "mgr_no_hv":
        return ()
    return ALL_PARTS


def default_dims(channels):
    """``(d_g, d_p)`` defaults for a map with ``channels`` channels."""
    return channels, max(8, channels // 4)


# -- pooling and partitioning ------------------------------------------------


def stripe_bounds(extent, n):
    """Contiguous ``(start, stop)`` stripes; the first ``extent % n`` get one extra."""
    if n < 1 or extent < n:
        raise TooManyParts(f"cannot cut extent {extent} into {n} stripes")
    base, extra = divmod(extent, n)
    bounds, start = [], 0
    for i in range(n):
        stop = start + base + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def partition(fmap, axis, n):
    """Split a C x H x W map into ``n`` stripes.

    ``vertical`` cuts the height (each stripe spans the full width),
    ``horizontal`` cuts the width.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if axis == "vertical":
        return [fmap[:, a:b, :] for a, b in stripe_bounds(fmap.shape[1], n)]
    if axis == "horizontal":
        return [fmap[:, :, a:b] for a, b in stripe_bounds(fmap.shape[2], n)]
    raise ValueError(f"unknown axis {axis!r}")


def global_max_pool(fmap):
    fmap = np.asarray(fmap, dtype=np.float64)
    return fmap.reshape(fmap.shape[0], -1).max(axis=1)


def _pool_region(maps, rows, cols):
    """Channelwise max over a spatial window, for a batch."""
    (r0, r1), (c0, c1) = rows, cols
    return maps[:, :, r0:r1, c0:c1].max(axis=(2, 3))


def _pool_argmax(maps, rows, cols):
    """Flat (h * W + w) index of each window max in the full map; first hit in row-major scan."""
    n, c, h, w = maps.shape
    (r0, r1), (c0, c1) = rows, cols
    local = np.argmax(maps[:, :, r0:r1, c0:c1].reshape(n, c, -1), axis=2)
    width = c1 - c0
    return (r0 + local // width) * w + (c0 + local % width)


@lru_cache(maxsize=None)
def _part_window(name, h, w):
    _, axis, n, idx = PART_SPECS[name]
    if axis == "vertical":
        return stripe_bounds(h, n)[idx], (0, w)
    return (0, h), stripe_bounds(w, n)[idx]


# -- parameters --------------------------------------------------------------


@dataclass
class MGRParams:
    """Learnable tensors keyed by name, plus the part layout they serve."""

    tensors: "OrderedDict[str, np.ndarray]"
    part_names: tuple

    @property
    def channels(self):
        return self.tensors["adapter.G.weight"].shape[1]

    @property
    def d_g(self):
        return self.tensors["adapter.G.weight"].shape[0]

    @property
    def d_p(self):
        if not self.part_names:
            return 0
        return self.tensors[f"reducer.{self.part_names[0]}.weight"].shape[0]

    @property
    def num_classes(self):
        if not self.part_names:
            return 0
        return self.tensors[f"classifier.{self.part_names[0]}.weight"].shape[0]

    @property
    def mega_dim(self):
        return 3 * self.d_g + len(self.part_names) * self.d_p

    def num_parameters(self):
        return int(sum(t.size for t in self.tensors.values()))

    def shape_signature(self):
        return tuple((k, v.shape) for k, v in self.tensors.items())

    def copy(self):
        return MGRParams(OrderedDict((k, v.copy()) for k, v in self.tensors.items()), self.part_names)

    def zeros_like(self):
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.tensors.items())


def init_params(channels, num_classes, rng, d_g=None, d_p=None, part_names=ALL_PARTS):
    """Uniform fan-in initialisation; all biases start at zero."""
    dg_default, dp_default = default_dims(channels)
    d_g = dg_default if d_g is None else d_g
    d_p = dp_default if d_p is None else d_p
    bound = 1.0 / np.sqrt(channels)
    tensors = OrderedDict()
    for b in BRANCHES:
        tensors[f"adapter.{b}.weight"] = rng.uniform(-bound, bound, size=(d_g, channels))
        tensors[f"adapter.{b}.bias"] = np.zeros(d_g)
    for name in part_names:
        tensors[f"reducer.{name}.weight"] = rng.uniform(-bound, bound, size=(d_p, channels))
        tensors[f"reducer.{name}.bias"] = np.zeros(d_p)
    cbound = 1.0 / np.sqrt(d_p)
    for name in part_names:
        tensors[f"classifier.{name}.weight"] = rng.uniform(-cbound, cbound, size=(num_classes, d_p))
    return MGRParams(tensors, tuple(part_names))


# -- forward / backward ------------------------------------------------------


@dataclass
class MGRDescriptor:
    global_set: list
    local_set: list

    @property
    def mega(self):
        return np.concatenate(list(self.global_set) + list(self.local_set))


@dataclass
class BatchDescriptors:
    """Batched outputs: ``globals[b]`` is (n, d_g), ``parts[j]`` is (n, d_p)."""

    globals: list
    parts: list
    logits: list

    @property
    def mega(self):
        return np.concatenate(list(self.globals) + list(self.parts), axis=1)

    def __len__(self):
        return self.globals[0].shape[0]

    def sample(self, i):
        return MGRDescriptor([g[i] for g in self.globals], [p[i] for p in self.parts])


@dataclass
class ForwardCache:
    map_shape: tuple
    signature: tuple
    pooled_global: np.ndarray
    pooled_parts: list
    masks: list
    parts: list
    maps: np.ndarray
    windows: list  # (rows, cols) per part

    # argmax positions are only needed for the input gradient, so computed on demand
    @property
    def argmax_global(self):
        _, _, h, w = self.map_shape
        return _pool_argmax(self.maps, (0, h), (0, w))

    @property
    def argmax_parts(self):
        return [_pool_argmax(self.maps, rows, cols) for rows, cols in self.windows]


def _check_maps(maps, params):
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 3:
        maps = maps[None]
    if maps.ndim != 4:
        raise ShapeMismatch(f"expected (n, C, H, W) maps, got {maps.shape}")
    if maps.shape[1] != params.channels:
        raise ShapeMismatch(f"map has {maps.shape[1]} channels, params expect {params.channels}")
    return maps


def forward_batch(maps, params):
    """Forward a batch of maps; returns ``(BatchDescriptors, ForwardCache)``."""
    maps = _check_maps(maps, params)
    n, _, h, w = maps.shape
    t = params.tensors
    pooled = _pool_region(maps, (0, h), (0, w))
    globals_ = [pooled @ t[f"adapter.{b}.weight"].T + t[f"adapter.{b}.bias"] for b in BRANCHES]
    parts, logits, pooled_parts, masks, windows = [], [], [], [], []
    for name in params.part_names:
        rows, cols = _part_window(name, h, w)
        pp = _pool_region(maps, rows, cols)
        pre = pp @ t[f"reducer.{name}.weight"].T + t[f"reducer.{name}.bias"]
        mask = pre > 0
        feat = np.where(mask, pre, 0.0)
        parts.append(feat)
        logits.append(feat @ t[f"classifier.{name}.weight"].T)
        pooled_parts.append(pp)
        masks.append(mask)
        windows.append((rows, cols))
    cache = ForwardCache(maps.shape, params.shape_signature(), pooled, pooled_parts, masks, parts, maps, windows)
    return BatchDescriptors(globals_, parts, logits), cache


def forward(fmap, params):
    desc, _ = forward_batch(np.asarray(fmap, dtype=np.float64)[None], params)
    return desc.sample(0)


def _scatter(grad_pooled, argmax, map_shape, out):
    n, c, h, w = map_shape
    flat = out.reshape(n, c, h * w)
    rows = np.arange(n)[:, None]
    chans = np.arange(c)[None, :]
    np.add.at(flat, (rows, chans, argmax), grad_pooled)


def backward(cache, params, grad_globals=None, grad_parts=None, grad_logits=None, input_grad=False):
    """Exact gradients for every tensor in ``params``.

    Upstream gradients are lists aligned with ``BRANCHES`` / ``params.part_names``;
    ``None`` (the whole list or an entry) means zero.  With ``input_grad`` the
    gradient w.r.t. the input maps is returned too, routed through each max-pool
    to its recorded argmax.
    """
    if cache.signature != params.shape_signature():
        raise StaleCache("parameter shapes changed since forward_batch")
    t = params.tensors
    grads = params.zeros_like()
    n = cache.map_shape[0]
    dmaps = np.zeros(cache.map_shape) if input_grad else None
    argmax_parts = cache.argmax_parts if input_grad else None

    dpooled = np.zeros_like(cache.pooled_global)
    for bi, b in enumerate(BRANCHES):
        g = None if grad_globals is None else grad_globals[bi]
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(n, -1)
        grads[f"adapter.{b}.weight"] += g.T @ cache.pooled_global
        grads[f"adapter.{b}.bias"] += g.sum(axis=0)
        if input_grad:
            dpooled += g @ t[f"adapter.{b}.weight"]
    if input_grad:
        _scatter(dpooled, cache.argmax_global, cache.map_shape, dmaps)

    for j, name in enumerate(params.part_names):
        dp = np.zeros_like(cache.parts[j])
        if grad_parts is not None and grad_parts[j] is not None:
            dp += np.asarray(grad_parts[j], dtype=np.float64).reshape(dp.shape)
        if grad_logits is not None and grad_logits[j] is not None:
            gl = np.asarray(grad_logits[j], dtype=np.float64)
            grads[f"classifier.{name}.weight"] += gl.T @ cache.parts[j]
            dp += gl @ t[f"classifier.{name}.weight"]
        dpre = dp * cache.masks[j]
        grads[f"reducer.{name}.weight"] += dpre.T @ cache.pooled_parts[j]
        grads[f"reducer.{name}.bias"] += dpre.sum(axis=0)
        if input_grad:
            _scatter(dpre @ t[f"reducer.{name}.weight"], argmax_parts[j], cache.map_shape, dmaps)

    if input_grad:
        return grads, dmaps
    return grads


def split_mega_grad(grad_mega, params):
    """Split a gradient on the mega feature into per-member gradients."""
    d_g, d_p = params.d_g, params.d_p
    grad_globals = [grad_mega[:, i * d_g:(i + 1) * d_g] for i in range(3)]
    off = 3 * d_g
    grad_parts = [grad_mega[:, off + j * d_p: off + (j + 1) * d_p] for j in range(len(params.part_names))]
    return grad_globals, grad_parts


# -- checkpoint container ----------------------------------------------------


def save_params(path, params):
    """Write the named-tensor checkpoint (float32 payloads, little-endian)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params.tensors)))
        for name, arr in params.tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not an MGRP checkpoint")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CorruptHeader(f"{path}: unsupported version {version}")
        pos = 12
        tensors = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 4 * size > len(blob):
                raise CorruptHeader(f"{path}: tensor {name!r} truncated")
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).astype(np.float64)
            tensors[name] = arr.reshape(dims)
            pos += 4 * size
    except struct.error as exc:
        raise CorruptHeader(f"{path}: {exc}") from exc
    if pos != len(blob):
        raise CorruptHeader(f"{path}: {len(blob) - pos} trailing bytes")
    part_names = tuple(k.split(".")[1] for k in tensors if k.startswith("reducer.") and k.endswith(".weight"))
    return MGRParams(tensors, part_names)
