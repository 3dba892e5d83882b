"""Per-pixel segmentation network and checkpoint persistence.

The model is a patch MLP: each pixel's k x k x 3 neighborhood (reflect
padded) is flattened and pushed through ReLU hidden layers, a linear map to
a D-dimensional feature, and a growing linear head (row 0 = background).
Forward and backward are exact analytic numpy; there is no autodiff graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .numerics import RNG_ALGORITHM_ID, GradSlot, Rng, softmax
from .prototypes import FeatureBank, PrototypeBank, ProtoEntry

CHECKPOINT_MAGIC = b"FCLK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    patch_size: int
    feature_dim: int
    hidden: Tuple[int, ...]
    blocks: dict  # name -> float64 array
    class_steps: Tuple[Tuple[int, ...], ...]  # registered class ids per step

    @property
    def num_rows(self):
        return self.blocks["head.W"].shape[0]

    @property
    def known_classes(self):
        out = []
        for step in self.class_steps:
            out.extend(step)
        return tuple(out)

    def row_of(self, class_id):
        """Head row for a class id; background/unknown is row 0."""
        if class_id == 0:
            return 0
        for i, cid in enumerate(self.known_classes):
            if cid == class_id:
                return 1 + i
        raise DimensionError(f"class {class_id} not registered")

    def row_map(self):
        rows = {0: 0}
        for i, cid in enumerate(self.known_classes):
            rows[cid] = 1 + i
        return rows

    def class_of_row(self, row):
        if row == 0:
            return 0
        return self.known_classes[row - 1]

    def copy(self):
        return ModelParams(
            patch_size=self.patch_size,
            feature_dim=self.feature_dim,
            hidden=self.hidden,
            blocks={k: v.copy() for k, v in self.blocks.items()},
            class_steps=self.class_steps,
        )

    def block_shapes(self):
        return {k: v.shape for k, v in self.blocks.items()}


@dataclass
class Prediction:
    features: np.ndarray  # (H, W, D)
    logits: np.ndarray  # (H, W, K)
    probs: np.ndarray  # (H, W, K)
    cache: dict = field(default_factory=dict, repr=False)


def _glorot(rng, shape):
    fan_out, fan_in = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    u = rng.uniforms(fan_out * fan_in).reshape(shape)
    return (2.0 * u - 1.0) * bound


def init_params(seed, initial_classes, patch_size=5, feature_dim=16,
                hidden=(64, 32)):
    """Glorot-uniform initialization; head gets 1 + len(initial_classes) rows."""
    if patch_size % 2 == 0 or patch_size < 1:
        raise ConfigError(f"patch_size must be odd and positive, got {patch_size}")
    if feature_dim < 1 or any(h < 1 for h in hidden):
        raise ConfigError("feature_dim and hidden widths must be >= 1")
    root = Rng(seed)
    blocks = {}
    in_dim = patch_size * patch_size * 3
    for i, width in enumerate(hidden):
        blocks[f"enc{i}.W"] = _glorot(root.split(f"init/enc{i}.W"), (width, in_dim))
        blocks[f"enc{i}.b"] = np.zeros(width, dtype=np.float64)
        in_dim = width
    blocks["feat.W"] = _glorot(root.split("init/feat.W"), (feature_dim, in_dim))
    blocks["feat.b"] = np.zeros(feature_dim, dtype=np.float64)
    rows = 1 + len(initial_classes)
    blocks["head.W"] = _glorot(root.split("init/head.W"), (rows, feature_dim))
    blocks["head.b"] = np.zeros(rows, dtype=np.float64)
    return ModelParams(
        patch_size=patch_size,
        feature_dim=feature_dim,
        hidden=tuple(hidden),
        blocks=blocks,
        class_steps=(tuple(initial_classes),),
    )


def grow_head(params, new_classes, rng):
    """Append head rows for new classes; existing rows are untouched.

    New rows use the Glorot rule for the grown head shape, drawn from the
    caller's step-scoped generator; new biases are zero.
    """
    new_classes = tuple(new_classes)
    if len(new_classes) < 1:
        raise ConfigError("grow_head needs at least one new class")
    old_w = params.blocks["head.W"]
    old_b = params.blocks["head.b"]
    d = params.feature_dim
    rows_after = old_w.shape[0] + len(new_classes)
    bound = math.sqrt(6.0 / (d + rows_after))
    u = rng.uniforms(len(new_classes) * d).reshape(len(new_classes), d)
    new_rows = (2.0 * u - 1.0) * bound
    blocks = {k: v.copy() for k, v in params.blocks.items()}
    blocks["head.W"] = np.vstack([old_w, new_rows])
    blocks["head.b"] = np.concatenate([old_b, np.zeros(len(new_classes))])
    return ModelParams(
        patch_size=params.patch_size,
        feature_dim=params.feature_dim,
        hidden=params.hidden,
        blocks=blocks,
        class_steps=params.class_steps + (new_classes,),
    )


def patch_matrix(image, patch_size):
    """(H*W, k*k*3) matrix of flattened reflect-padded neighborhoods."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"image must be (H, W, 3), got {image.shape}")
    h, w, _ = image.shape
    k = patch_size
    if k % 2 == 0 or k > min(h, w):
        raise ConfigError(
            f"patch size {k} must be odd and <= min(H, W) = {min(h, w)}"
        )
    r = k // 2
    padded = np.pad(image, ((r, r), (r, r), (0, 0)), mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    # (H, W, 3, k, k) -> (H, W, k, k, 3) so flattening is (dr, dc, channel)
    patches = np.ascontiguousarray(windows.transpose(0, 1, 3, 4, 2))
    return patches.reshape(h * w, k * k * 3)


@dataclass
class BatchCache:
    x: np.ndarray
    pre: list  # pre-activation per hidden layer, stacked over the batch
    act: list  # ReLU output per hidden layer
    feats: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    shapes: list  # (H, W) per image
    offsets: list  # starting row per image in the stacked arrays


def forward_batch(params, images):
    """Forward a list of images through one stacked set of matmuls."""
    mats = [patch_matrix(img, params.patch_size) for img in images]
    shapes = [img.shape[:2] for img in images]
    offsets = []
    total = 0
    for m in mats:
        offsets.append(total)
        total += m.shape[0]
    x = np.vstack(mats) if len(mats) > 1 else mats[0]
    a = x
    pre, act = [], []
    for i in range(len(params.hidden)):
        z = a @ params.blocks[f"enc{i}.W"].T + params.blocks[f"enc{i}.b"]
        a = np.maximum(z, 0.0)
        pre.append(z)
        act.append(a)
    feats = a @ params.blocks["feat.W"].T + params.blocks["feat.b"]
    logits = feats @ params.blocks["head.W"].T + params.blocks["head.b"]
    probs = softmax(logits, axis=1)
    cache = BatchCache(
        x=x, pre=pre, act=act, feats=feats, logits=logits, probs=probs,
        shapes=shapes, offsets=offsets,
    )
    preds = []
    k = params.num_rows
    d = params.feature_dim
    for i, (h, w) in enumerate(shapes):
        lo = offsets[i]
        hi = lo + h * w
        preds.append(
            Prediction(
                features=feats[lo:hi].reshape(h, w, d),
                logits=logits[lo:hi].reshape(h, w, k),
                probs=probs[lo:hi].reshape(h, w, k),
                cache={"batch": cache, "index": i},
            )
        )
    return preds, cache


def forward(params, image):
    """Forward one image; the Prediction carries what backward needs."""
    preds, _ = forward_batch(params, [image])
    return preds[0]


def backward_batch(params, cache, dfeats, dlogits):
    """Exact parameter gradients from stacked upstream feature/logit grads."""
    if dlogits.shape != cache.logits.shape:
        raise DimensionError(
            f"upstream logits grad shape {dlogits.shape} != {cache.logits.shape}"
        )
    if dfeats.shape != cache.feats.shape:
        raise DimensionError(
            f"upstream features grad shape {dfeats.shape} != {cache.feats.shape}"
        )
    grads = {}
    grads["head.W"] = dlogits.T @ cache.feats
    grads["head.b"] = dlogits.sum(axis=0)
    df = dfeats + dlogits @ params.blocks["head.W"]
    last_act = cache.act[-1] if cache.act else cache.x
    grads["feat.W"] = df.T @ last_act
    grads["feat.b"] = df.sum(axis=0)
    da = df @ params.blocks["feat.W"]
    for i in range(len(params.hidden) - 1, -1, -1):
        dz = da * (cache.pre[i] > 0)
        below = cache.act[i - 1] if i > 0 else cache.x
        grads[f"enc{i}.W"] = dz.T @ below
        grads[f"enc{i}.b"] = dz.sum(axis=0)
        if i > 0:
            da = dz @ params.blocks[f"enc{i}.W"]
    return grads


def backward(params, pred, dfeatures, dlogits):
    """Single-image backward; upstream grads are (H, W, D) and (H, W, K)."""
    cache = pred.cache["batch"]
    if len(cache.shapes) != 1:
        raise DimensionError("backward() expects a single-image prediction")
    n = cache.feats.shape[0]
    df = np.asarray(dfeatures, dtype=np.float64).reshape(n, params.feature_dim)
    dl = np.asarray(dlogits, dtype=np.float64).reshape(n, params.num_rows)
    grads = backward_batch(params, cache, df, dl)
    value = 0.0
    return GradSlot(value=value, grads=grads)


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to resume a continual run at an epoch boundary."""

    step: int
    epoch: int  # epochs completed within the step
    iteration: int  # step-local iteration counter
    params: ModelParams
    momentum: dict  # block name -> velocity array
    protos: PrototypeBank
    bank: FeatureBank
    bank_capacity: int
    pixel_counts: dict  # class id -> supervised pixel count for the step
    rng_state: tuple  # (state, inc, seed)
    distill: dict = None  # frozen previous-step blocks when distilling, else None


def _write_block(fh, name, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    name_b = name.encode("utf-8")
    fh.write(len(name_b).to_bytes(2, "little"))
    fh.write(name_b)
    fh.write(arr.ndim.to_bytes(1, "little"))
    for dim in arr.shape:
        fh.write(int(dim).to_bytes(4, "little"))
    fh.write(arr.astype("<f8").tobytes())


def _blocks_from_checkpoint(ckpt):
    blocks = {}
    p = ckpt.params
    blocks["model/shape"] = np.array(
        [p.patch_size, p.feature_dim, len(p.hidden), *p.hidden], dtype=np.float64
    )
    for name in sorted(p.blocks):
        blocks[f"params/{name}"] = p.blocks[name]
    for name in sorted(ckpt.momentum):
        blocks[f"momentum/{name}"] = ckpt.momentum[name]
    if ckpt.distill:
        for name in sorted(ckpt.distill):
            blocks[f"distill/{name}"] = ckpt.distill[name]
    proto_ids = sorted(ckpt.protos.entries)
    blocks["proto/ids"] = np.array(proto_ids, dtype=np.float64)
    blocks["proto/frozen"] = np.array(
        [1.0 if ckpt.protos.entries[c].frozen else 0.0 for c in proto_ids]
    )
    blocks["proto/initialized"] = np.array(
        [1.0 if ckpt.protos.entries[c].initialized else 0.0 for c in proto_ids]
    )
    for cid in proto_ids:
        blocks[f"proto/vec/{cid}"] = ckpt.protos.entries[cid].vector
    bank_ids = sorted(ckpt.bank.queues)
    blocks["bank/ids"] = np.array(bank_ids, dtype=np.float64)
    for cid in bank_ids:
        queue = ckpt.bank.queues[cid]
        stacked = (
            np.stack(queue)
            if queue
            else np.zeros((0, ckpt.bank.feature_dim), dtype=np.float64)
        )
        blocks[f"bank/queue/{cid}"] = stacked
    count_ids = sorted(ckpt.pixel_counts)
    blocks["counts/ids"] = np.array(count_ids, dtype=np.float64)
    blocks["counts/values"] = np.array(
        [float(ckpt.pixel_counts[c]) for c in count_ids]
    )
    blocks["trainer/progress"] = np.array(
        [float(ckpt.epoch), float(ckpt.iteration), float(ckpt.bank_capacity)]
    )
    return blocks


def save_checkpoint(path, ckpt):
    """Serialize a Checkpoint; block order is canonical, so bytes are stable."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(CHECKPOINT_VERSION.to_bytes(2, "little"))
        algo = RNG_ALGORITHM_ID.encode("utf-8")
        fh.write(len(algo).to_bytes(1, "little"))
        fh.write(algo)
        for word in ckpt.rng_state:
            fh.write(int(word).to_bytes(8, "little"))
        fh.write(int(ckpt.step).to_bytes(4, "little"))
        fh.write(len(ckpt.params.class_steps).to_bytes(4, "little"))
        for step_classes in ckpt.params.class_steps:
            fh.write(len(step_classes).to_bytes(4, "little"))
            for cid in step_classes:
                fh.write(int(cid).to_bytes(4, "little"))
        for name, arr in _blocks_from_checkpoint(ckpt).items():
            _write_block(fh, name, arr)


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint while reading {what}",
                          offset=fh.tell())
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(
                f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC.decode()!r}",
                offset=0,
            )
        version = int.from_bytes(_read_exact(fh, 2, "version"), "little")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        algo_len = _read_exact(fh, 1, "algorithm id length")[0]
        algo = _read_exact(fh, algo_len, "algorithm id").decode("utf-8")
        if algo != RNG_ALGORITHM_ID:
            raise FormatError(
                f"checkpoint written by PRNG {algo!r}, this build uses "
                f"{RNG_ALGORITHM_ID!r}"
            )
        rng_state = tuple(
            int.from_bytes(_read_exact(fh, 8, "rng state"), "little")
            for _ in range(3)
        )
        step = int.from_bytes(_read_exact(fh, 4, "step"), "little")
        n_steps = int.from_bytes(_read_exact(fh, 4, "registry size"), "little")
        class_steps = []
        for _ in range(n_steps):
            n = int.from_bytes(_read_exact(fh, 4, "registry entry"), "little")
            ids = tuple(
                int.from_bytes(_read_exact(fh, 4, "class id"), "little")
                for _ in range(n)
            )
            class_steps.append(ids)
        blocks = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise FormatError("truncated block header", offset=fh.tell())
            name_len = int.from_bytes(head, "little")
            name = _read_exact(fh, name_len, "block name").decode("utf-8")
            rank = _read_exact(fh, 1, "block rank")[0]
            dims = tuple(
                int.from_bytes(_read_exact(fh, 4, "block dim"), "little")
                for _ in range(rank)
            )
            size = 1
            for d in dims:
                size *= d
            payload = _read_exact(fh, size * 8, f"block '{name}' payload")
            blocks[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return _checkpoint_from_blocks(step, tuple(class_steps), rng_state, blocks)


def _checkpoint_from_blocks(step, class_steps, rng_state, blocks):
    try:
        shape = blocks["model/shape"]
        patch_size = int(shape[0])
        feature_dim = int(shape[1])
        n_hidden = int(shape[2])
        hidden = tuple(int(v) for v in shape[3 : 3 + n_hidden])
        param_blocks = {
            name[len("params/"):]: arr
            for name, arr in blocks.items()
            if name.startswith("params/")
        }
        params = ModelParams(
            patch_size=patch_size,
            feature_dim=feature_dim,
            hidden=hidden,
            blocks=param_blocks,
            class_steps=class_steps,
        )
        momentum = {
            name[len("momentum/"):]: arr
            for name, arr in blocks.items()
            if name.startswith("momentum/")
        }
        distill = {
            name[len("distill/"):]: arr
            for name, arr in blocks.items()
            if name.startswith("distill/")
        }
        protos = PrototypeBank(feature_dim)
        proto_ids = [int(v) for v in blocks["proto/ids"]]
        frozen = blocks["proto/frozen"]
        initialized = blocks["proto/initialized"]
        for i, cid in enumerate(proto_ids):
            protos.entries[cid] = ProtoEntry(
                vector=blocks[f"proto/vec/{cid}"],
                frozen=bool(frozen[i]),
                initialized=bool(initialized[i]),
            )
        progress = blocks["trainer/progress"]
        epoch = int(progress[0])
        iteration = int(progress[1])
        capacity = int(progress[2])
        bank = FeatureBank(feature_dim, capacity)
        for cid in (int(v) for v in blocks["bank/ids"]):
            stacked = blocks[f"bank/queue/{cid}"]
            for row in stacked:
                bank.deposit(cid, row)
        count_ids = [int(v) for v in blocks["counts/ids"]]
        count_vals = blocks["counts/values"]
        pixel_counts = {cid: int(count_vals[i]) for i, cid in enumerate(count_ids)}
    except KeyError as exc:
        raise FormatError(f"checkpoint missing block {exc}") from exc
    for name, arr in params.blocks.items():
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"parameter block {name} has non-finite values")
    return Checkpoint(
        step=step,
        epoch=epoch,
        iteration=iteration,
        params=params,
        momentum=momentum,
        protos=protos,
        bank=bank,
        bank_capacity=capacity,
        pixel_counts=pixel_counts,
        rng_state=rng_state,
        distill=distill or None,
    )
