"""Continual training loop: per-step SGD, pseudo-labeling, bookkeeping.

The protocol: step 1 trains background + initial classes from scratch;
every later step grows the classifier head, freezes the prototypes of the
classes learned so far, resets the feature banks, and trains only on
images selected for the new classes.  A tracking wrapper around the
training set enforces that no sample outside the current step's selection
is ever read (the rehearsal-free guarantee).

Everything is deterministic given (config, dataset): per-epoch shuffles
come from streams derived by label from the run seed, so a run resumed
from a checkpoint at an epoch boundary continues bit-identically.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ProtocolError
from .losses import (
    ClassDistribution,
    ConsConfig,
    LossWeights,
    ce_row_weights,
    cluster_loss,
    cons_loss,
    distill_loss,
    weighted_ce,
)
from .model import (
    Checkpoint,
    ModelParams,
    backward_batch,
    forward_batch,
    grow_head,
    init_params,
    save_checkpoint,
)
from .numerics import Rng
from .prototypes import (
    ClusterConfig,
    FeatureBank,
    PrototypeBank,
    freeze_previous,
    pseudo_label_map,
    update_prototypes,
)
from .synthdata import (
    IGNORE_ID,
    TaskSplit,
    collapse_labels,
    select_step_indices,
)

LOG_FIELDS = (
    "step",
    "epoch",
    "iteration",
    "lr",
    "ce",
    "cluster",
    "cons",
    "distill",
    "total",
)


@dataclass
class TrainConfig:
    split: TaskSplit
    epochs: int = 10
    batch_size: int = 6
    lr_initial: float = 0.05
    lr_continual: float = 0.005
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    use_cluster: bool = True
    use_class_weighting: bool = True
    use_cons: bool = True
    use_distill: bool = False
    ce_on_pseudo: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    cons: ConsConfig = field(default_factory=ConsConfig)
    smoothing: float = 1.0
    clamp: Tuple[float, float] = (0.1, 10.0)
    patch_size: int = 5
    feature_dim: int = 16
    hidden: Tuple[int, ...] = (64, 32)
    seed: int = 1

    def validate(self):
        self.split.validate()
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_initial <= 0 or self.lr_continual <= 0:
            raise ConfigError("learning rates must be > 0")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ConfigError("sgd_momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        self.weights.validate()
        self.cluster.validate()
        self.cons.validate()
        if self.smoothing < 0:
            raise ConfigError("smoothing must be >= 0")
        return self

    def ablation(self, preset):
        """Named loss-toggle presets for the standard comparison grid."""
        presets = {
            "fine-tune": dict(
                use_cluster=False, use_class_weighting=False,
                use_cons=False, use_distill=False,
            ),
            "distill": dict(
                use_cluster=False, use_class_weighting=False,
                use_cons=False, use_distill=True,
            ),
            "cluster": dict(
                use_cluster=True, use_class_weighting=False,
                use_cons=False, use_distill=False,
            ),
            "cluster-class": dict(
                use_cluster=True, use_class_weighting=True,
                use_cons=False, use_distill=False,
            ),
            "cluster-cons": dict(
                use_cluster=True, use_class_weighting=False,
                use_cons=True, use_distill=False,
            ),
            "full": dict(
                use_cluster=True, use_class_weighting=True,
                use_cons=True, use_distill=False,
            ),
        }
        if preset not in presets:
            raise ConfigError(
                f"unknown ablation {preset!r}; choose from {sorted(presets)}"
            )
        return replace(self, **presets[preset])


class TrackedDataset:
    """Access-counting wrapper over the training samples.

    ``begin_step`` installs the set of indices the current step may read;
    any fetch outside it raises ProtocolError (the rehearsal-free
    guarantee).  The full read log is kept for auditing.
    """

    def __init__(self, samples, enforce=True):
        self._samples = list(samples)
        self.enforce = enforce
        self.reads = []  # (step, index) in access order
        self._step = None
        self._allowed = frozenset()

    def __len__(self):
        return len(self._samples)

    def begin_step(self, step, allowed_indices):
        self._step = int(step)
        self._allowed = frozenset(int(i) for i in allowed_indices)

    def fetch(self, index):
        if self._step is None:
            raise ProtocolError("fetch before begin_step")
        self.reads.append((self._step, int(index)))
        if self.enforce and index not in self._allowed:
            raise ProtocolError(
                f"step {self._step} read training sample {index} outside "
                "its selection (rehearsal-free violation)"
            )
        return self._samples[index]

    def read_counts(self, step, indices):
        """How many recorded reads at ``step`` hit the given index set."""
        wanted = set(int(i) for i in indices)
        return sum(1 for s, i in self.reads if s == step and i in wanted)


def build_effective_labels(labels, features, protos, step):
    """Merge ground truth with pseudo-labels for one collapsed label map.

    Returns (effective ids, ce_mask).  At step 1 every non-ignore pixel is
    CE-supervised as-is.  Later, foreground pixels keep their label and
    stay supervised while background pixels receive the nearest-prototype
    pseudo-label (possibly 0 = unknown) with CE off; if no prototype is
    initialized yet they are marked ignore.
    """
    y = np.asarray(labels)
    eff = y.astype(np.int64).copy()
    eff[y == IGNORE_ID] = IGNORE_ID
    ce_mask = y != IGNORE_ID
    if step == 1:
        return eff, ce_mask
    bg = y == 0
    ce_mask = ce_mask & ~bg
    if bg.any():
        if protos.initialized_ids():
            feats = np.asarray(features, dtype=np.float64)
            pseudo = pseudo_label_map(protos, feats[bg])
            eff[bg] = pseudo
        else:
            eff[bg] = IGNORE_ID
    return eff, ce_mask


def sgd_update(params, momentum, grads, lr, mu, weight_decay):
    """In-place SGD with momentum and decoupled-from-nothing weight decay.

    v <- mu*v - lr*(g + wd*theta); theta <- theta + v.
    """
    for name in sorted(grads):
        g = grads[name]
        theta = params.blocks[name]
        v = momentum[name]
        v *= mu
        v -= lr * (g + weight_decay * theta)
        theta += v


@dataclass
class StepOutcome:
    step: int
    params: ModelParams
    proto_snapshot: PrototypeBank
    loss_trace: List[dict]
    iterations: int
    counters: dict


@dataclass
class TrainState:
    params: ModelParams
    momentum: dict
    protos: PrototypeBank
    bank: FeatureBank
    step: int = 1
    epoch: int = 0  # completed epochs within the current step
    iteration: int = 0  # step-local iteration counter (Algorithm-style)
    distill_params: Optional[ModelParams] = None
    last_counts: dict = field(default_factory=dict)


def init_state(cfg):
    initial = sorted(cfg.split.classes_at(1))
    params = init_params(
        cfg.seed,
        initial,
        patch_size=cfg.patch_size,
        feature_dim=cfg.feature_dim,
        hidden=cfg.hidden,
    )
    momentum = {n: np.zeros_like(a) for n, a in params.blocks.items()}
    protos = PrototypeBank(cfg.feature_dim)
    protos.register([0] + initial)
    bank = FeatureBank(cfg.feature_dim, cfg.cluster.bank_capacity)
    return TrainState(params=params, momentum=momentum, protos=protos, bank=bank)


def enter_step(state, cfg, step):
    """Step-boundary bookkeeping: grow head, freeze old prototypes, reset banks."""
    if step != state.step + 1:
        raise ProtocolError(
            f"cannot enter step {step} from step {state.step}"
        )
    if cfg.use_distill:
        state.distill_params = state.params.copy()
    rng = Rng(cfg.seed).split(f"grow/step{step}")
    new_classes = sorted(cfg.split.classes_at(step))
    state.params = grow_head(state.params, new_classes, rng)
    for name, arr in state.params.blocks.items():
        if name not in state.momentum or state.momentum[name].shape != arr.shape:
            grown = np.zeros_like(arr)
            if name in state.momentum:
                old = state.momentum[name]
                grown[tuple(slice(0, s) for s in old.shape)] = old
            state.momentum[name] = grown
    old_fg = sorted(c for c in cfg.split.known_through(step - 1) if c != 0)
    freezable = [c for c in old_fg if state.protos.is_initialized(c)]
    freeze_previous(state.protos, freezable)
    state.protos.register(new_classes)
    state.bank.reset()
    state.step = step
    state.epoch = 0
    state.iteration = 0
    state.last_counts = {}
    return state


def _supervised_ids(split, step):
    ids = sorted(split.classes_at(step))
    return ([0] + ids) if step == 1 else ids


def _count_supervised(data, ids):
    counts = {c: 0 for c in ids}
    for _, lab in data:
        for c in ids:
            counts[c] += int(np.count_nonzero(lab == c))
    return counts


def _deposit(bank, protos, features, eff, ce_mask, step, current, cap):
    """Feed per-class feature queues from one image's pixels.

    Current classes deposit from supervised pixels only; the unknown
    cluster 0 takes true background at step 1 and pseudo-unknown pixels
    later.  Frozen classes receive nothing.  At most ``cap`` pixels per
    class per image, first in row-major order.
    """
    flat = features.reshape(-1, features.shape[-1])
    eff_flat = np.asarray(eff).reshape(-1)
    mask_flat = np.asarray(ce_mask).reshape(-1) if step == 1 else None
    for cid in current:
        sel = np.flatnonzero(eff_flat == cid)[:cap]
        if sel.size:
            bank.deposit_many(cid, flat[sel])
    if not protos.is_frozen(0):
        if step == 1:
            zero_sel = np.flatnonzero((eff_flat == 0) & mask_flat)[:cap]
        else:
            zero_sel = np.flatnonzero(eff_flat == 0)[:cap]
        if zero_sel.size:
            bank.deposit_many(0, flat[zero_sel])


def run_step(state, cfg, step, data, log_rows=None, on_epoch_end=None):
    """Train the current step over its image subset.

    ``data`` is a list of (image, collapsed labels) pairs for the step.
    Resumes from state.epoch when it is nonzero.  Returns a StepOutcome
    with per-epoch mean loss terms.
    """
    if not data:
        raise ProtocolError(f"step {step} has no training images")
    if step != state.step:
        raise ProtocolError(f"state is at step {state.step}, not {step}")
    current = sorted(cfg.split.classes_at(step))
    sup_ids = _supervised_ids(cfg.split, step)
    lr = cfg.lr_initial if step == 1 else cfg.lr_continual
    params = state.params
    id_to_row = np.full(IGNORE_ID + 1, -1, dtype=np.int64)
    for cid, row in params.row_map().items():
        id_to_row[cid] = row
    n = len(data)
    per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    counters = {"cluster_skipped_pixels": 0}
    traces = []
    iterations_run = 0
    for epoch in range(state.epoch, cfg.epochs):
        counts = _count_supervised(data, sup_ids)
        state.last_counts = counts
        dist = ClassDistribution(
            counts, smoothing=cfg.smoothing, clamp=cfg.clamp
        ).validate()
        row_weights = (
            ce_row_weights(dist, params.row_map(), params.num_rows)
            if cfg.use_class_weighting
            else None
        )
        order = list(range(n))
        Rng(cfg.seed).split(f"step{step}/epoch{epoch}/order").shuffle(order)
        sums = {"ce": 0.0, "cluster": 0.0, "cons": 0.0, "distill": 0.0}
        for b in range(per_epoch):
            picked = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            images = [data[i][0] for i in picked]
            labels = [data[i][1] for i in picked]
            preds, cache = forward_batch(params, images)
            prev_preds = None
            if cfg.use_distill and state.distill_params is not None:
                prev_preds, _ = forward_batch(state.distill_params, images)
            dfeats = np.zeros_like(cache.feats)
            dlogits = np.zeros_like(cache.logits)
            bsz = len(picked)
            for k, (pred, lab) in enumerate(zip(preds, labels)):
                lo = cache.offsets[k]
                hi = lo + lab.size
                eff, ce_mask = build_effective_labels(
                    lab, pred.features, state.protos, step
                )
                if cfg.ce_on_pseudo and step > 1:
                    ce_mask = eff != IGNORE_ID
                rows = id_to_row[np.minimum(eff, IGNORE_ID)]
                ce_mask = ce_mask & (rows >= 0)
                ce = weighted_ce(pred.logits, rows, ce_mask, row_weights)
                sums["ce"] += ce.value / bsz
                dlogits[lo:hi] += (
                    ce.grads["logits"].reshape(-1, params.num_rows) / bsz
                )
                if cfg.use_cluster:
                    cl = cluster_loss(
                        pred.features, eff, state.protos, cfg.cluster,
                        counters=counters,
                    )
                    sums["cluster"] += cl.value / bsz
                    dfeats[lo:hi] += (
                        cfg.weights.lambda_cluster
                        * cl.grads["features"].reshape(-1, params.feature_dim)
                        / bsz
                    )
                if cfg.use_cons:
                    co = cons_loss(images[k], pred.probs, cfg.cons)
                    sums["cons"] += co.value / bsz
                    dlogits[lo:hi] += (
                        cfg.weights.lambda_cons
                        * co.grads["logits"].reshape(-1, params.num_rows)
                        / bsz
                    )
                if prev_preds is not None:
                    di = distill_loss(pred.features, prev_preds[k].features)
                    sums["distill"] += di.value / bsz
                    dfeats[lo:hi] += (
                        cfg.weights.lambda_distill
                        * di.grads["features"].reshape(-1, params.feature_dim)
                        / bsz
                    )
                if cfg.use_cluster:
                    _deposit(
                        state.bank, state.protos, pred.features, eff, ce_mask,
                        step, current, cfg.cluster.deposit_per_class,
                    )
            grads = backward_batch(params, cache, dfeats, dlogits)
            sgd_update(
                params, state.momentum, grads, lr, cfg.sgd_momentum,
                cfg.weight_decay,
            )
            state.iteration += 1
            iterations_run += 1
            if cfg.use_cluster:
                # The update schedule counts iterations within the current
                # step (banks are reset at step entry), so a fresh step warms
                # up for a full period before its first prototype refresh.
                update_prototypes(
                    state.protos, state.bank, cfg.cluster,
                    epoch * per_epoch + b + 1,
                )
        trace = {k: v / per_epoch for k, v in sums.items()}
        trace["total"] = (
            trace["ce"]
            + cfg.weights.lambda_cluster * trace["cluster"]
            + cfg.weights.lambda_cons * trace["cons"]
            + cfg.weights.lambda_distill * trace["distill"]
        )
        for key, val in trace.items():
            if not np.isfinite(val):
                raise ProtocolError(
                    f"non-finite {key} loss at step {step} epoch {epoch}"
                )
        traces.append(trace)
        state.epoch = epoch + 1
        if log_rows is not None:
            log_rows.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "iteration": state.iteration,
                    "lr": lr,
                    "ce": trace["ce"],
                    "cluster": trace["cluster"],
                    "cons": trace["cons"],
                    "distill": trace["distill"],
                    "total": trace["total"],
                }
            )
        if on_epoch_end is not None:
            on_epoch_end(state, epoch, trace)
    return StepOutcome(
        step=step,
        params=state.params.copy(),
        proto_snapshot=state.protos.snapshot(),
        loss_trace=traces,
        iterations=iterations_run,
        counters=counters,
    )


def state_to_checkpoint(state, cfg):
    return Checkpoint(
        step=state.step,
        epoch=state.epoch,
        iteration=state.iteration,
        params=state.params,
        momentum=state.momentum,
        protos=state.protos,
        bank=state.bank,
        bank_capacity=cfg.cluster.bank_capacity,
        pixel_counts=dict(state.last_counts),
        rng_state=Rng(cfg.seed).state_tuple(),
        distill=(
            dict(state.distill_params.blocks)
            if state.distill_params is not None
            else None
        ),
    )


def state_from_checkpoint(ckpt, cfg):
    state = TrainState(
        params=ckpt.params,
        momentum=ckpt.momentum,
        protos=ckpt.protos,
        bank=ckpt.bank,
        step=ckpt.step,
        epoch=ckpt.epoch,
        iteration=ckpt.iteration,
        last_counts=dict(ckpt.pixel_counts),
    )
    for name, arr in ckpt.params.blocks.items():
        if name not in state.momentum:
            state.momentum[name] = np.zeros_like(arr)
    if ckpt.distill:
        k = len(ckpt.params.class_steps)
        prev_steps = ckpt.params.class_steps[: k - 1] if k > 1 else ()
        state.distill_params = ModelParams(
            patch_size=ckpt.params.patch_size,
            feature_dim=ckpt.params.feature_dim,
            hidden=ckpt.params.hidden,
            blocks={n: a.copy() for n, a in ckpt.distill.items()},
            class_steps=prev_steps,
        )
    return state


@dataclass
class RunResult:
    outcomes: List[StepOutcome]
    state: TrainState
    reports: list
    tracker: TrackedDataset
    log_rows: List[dict]


def write_loss_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})


def run_continual(cfg, samples, out_dir=None, test_samples=None,
                  resume_from=None, enforce_tracking=True):
    """Run every step of the split in sequence.

    When ``out_dir`` is given, writes per-step checkpoints
    (step<t>.ckpt), a rolling latest.ckpt after every epoch, and a loss
    CSV.  When ``test_samples`` is given, evaluates after each step.
    ``resume_from`` restarts from a latest.ckpt at the recorded epoch
    boundary and continues bit-identically.
    """
    from .metrics import evaluate_model  # local import to avoid a cycle

    cfg.validate()
    split = cfg.split
    n_steps = split.num_steps
    allowed = {
        t: select_step_indices(samples, split, t)
        for t in range(1, n_steps + 1)
    }
    tracker = TrackedDataset(samples, enforce=enforce_tracking)
    if resume_from is not None:
        from .model import load_checkpoint

        state = state_from_checkpoint(load_checkpoint(resume_from), cfg)
    else:
        state = init_state(cfg)
    log_rows = []
    outcomes = []
    reports = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    def save_latest(st):
        if out_dir is not None:
            save_checkpoint(
                os.path.join(out_dir, "latest.ckpt"),
                state_to_checkpoint(st, cfg),
            )

    for t in range(1, n_steps + 1):
        if t < state.step:
            continue
        if t > state.step:
            enter_step(state, cfg, t)
            save_latest(state)
        if state.epoch >= cfg.epochs:
            continue  # resumed past this step's training; nothing left to run
        tracker.begin_step(t, allowed[t])
        data = []
        for idx in allowed[t]:
            sample = tracker.fetch(idx)
            data.append(
                (sample.image, collapse_labels(sample, split, t).labels)
            )
        outcome = run_step(
            state, cfg, t, data, log_rows=log_rows,
            on_epoch_end=lambda st, e, tr: save_latest(st),
        )
        outcomes.append(outcome)
        if out_dir is not None:
            save_checkpoint(
                os.path.join(out_dir, f"step{t}.ckpt"),
                state_to_checkpoint(state, cfg),
            )
        if test_samples is not None:
            report, _ = evaluate_model(state.params, test_samples, split, t)
            reports.append(report)
    if reports:
        avg = float(np.mean([r.miou_all for r in reports]))
        reports[-1].miou_avg = avg
    if out_dir is not None:
        write_loss_log(os.path.join(out_dir, "losses.csv"), log_rows)
    return RunResult(
        outcomes=outcomes,
        state=state,
        reports=reports,
        tracker=tracker,
        log_rows=log_rows,
    )
