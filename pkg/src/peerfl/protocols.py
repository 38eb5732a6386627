"""Per-round protocol operations.

All functions here are deterministic given their explicit rng argument and
mutate client state in place (models are swapped or updated, never shared
between clients: anything that crosses a client boundary is deep-copied).

The protocols:

* dfml          - aggregator-side mutual distillation across heterogeneous
                  models, supervision re-weighted by the aggregator's local
                  label skew, distillation weighted by model size.
* dec_fedavg    - architecture-cluster-wise weighted parameter averaging.
* dec_fedprox   - dec_fedavg plus a proximal pull toward each client's own
                  pre-round model during local training (handled by
                  local_train via the anchor).
* dec_heterofl / dec_fedrolex / dec_feddropout - partial training: clients
                  hold width-sliced sub-models of a global model, selected by
                  leading / rolling-window / random output-unit index sets.
* def_kt        - paired transfer: a sender's model mutual-learns against the
                  aggregator's model on the aggregator's data, then replaces
                  both.
* dec_fml       - every participant mutual-learns (personal model, shared-
                  architecture meme model) on its own data; memes are then
                  FedAvg-averaged and redistributed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .data import Dataset
from .losses import (
    LossAndGrad,
    ace_loss,
    cross_entropy,
    kl_distill,
    prox_term,
    scaled_objective,
    wsm_loss,
)
from .nn import Model, ModelSpec, backward, clone_model, forward, param_count, sgd_step

__all__ = [
    "ClientState",
    "TrainSettings",
    "batch_iter",
    "local_train",
    "mutual_learn",
    "dfml_aggregate",
    "peak_update",
    "fedavg_aggregate",
    "heterofl_indices",
    "fedrolex_indices",
    "dropout_indices",
    "full_index_sets",
    "index_sets_for",
    "extract_submodel",
    "pt_aggregate",
    "defkt_round",
    "decfml_round",
]

LOSS_KINDS = ("ce", "wsm", "ace")
WEIGHTINGS = ("size_weighted", "vanilla_average")
TRANSFER_MODES = ("mutual", "vanilla")


@dataclass
class ClientState:
    """Everything one client owns between rounds."""

    id: int
    regular: Model
    train_idx: np.ndarray
    val_idx: np.ndarray
    beta: np.ndarray            # label proportions of the train split
    present: np.ndarray         # classes present in the train split
    cluster: int = 0
    peak: Model | None = None   # best-snapshot model (mutual-distillation protocol only)
    watermark: float = 0.0      # highest alpha seen at a peak update
    meme: Model | None = None   # shared-architecture model (dec_fml only)
    anchor: Model | None = None # pre-round copy for the proximal penalty

    def __post_init__(self) -> None:
        if self.peak is not None and self.peak.spec != self.regular.spec:
            raise ValueError(f"client {self.id}: peak architecture differs from regular")
        if self.train_idx.size == 0:
            raise ValueError(f"client {self.id}: empty train split")

    @property
    def train_size(self) -> int:
        return int(self.train_idx.size)


@dataclass(frozen=True)
class TrainSettings:
    """SGD and loss knobs shared by every training phase."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    temperature: float = 1.0
    loss: str = "wsm"

    def __post_init__(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def _supervision(settings: TrainSettings, beta: np.ndarray, present: np.ndarray):
    """Bind the configured supervision loss to one client's label statistics."""
    if settings.loss == "ce":
        return cross_entropy
    if settings.loss == "wsm":
        return lambda z, y: wsm_loss(z, y, beta)
    return lambda z, y: ace_loss(z, y, present)


def batch_iter(
    num_samples: int, batch_size: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    """Yield shuffled minibatch index arrays; the last batch may be short."""
    perm = rng.permutation(num_samples)
    for start in range(0, num_samples, batch_size):
        yield perm[start : start + batch_size]


# ---------------------------------------------------------------------------
# local supervised phase
# ---------------------------------------------------------------------------

def local_train(
    client: ClientState,
    dataset: Dataset,
    settings: TrainSettings,
    *,
    epochs: int,
    rng: np.random.Generator,
    prox_mu: float | None = None,
) -> int:
    """Supervised SGD on the client's own train split; returns batch-pass count.

    With ``prox_mu`` set, a proximal penalty pulls parameters toward
    ``client.anchor`` (which must have been set to the pre-round model).
    """
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    if prox_mu is not None and client.anchor is None:
        raise ValueError(f"client {client.id}: proximal training without an anchor")
    feats = dataset.features[client.train_idx]
    labels = dataset.labels[client.train_idx]
    supervise = _supervision(settings, client.beta, client.present)
    passes = 0
    for _ in range(epochs):
        for batch in batch_iter(labels.size, settings.batch_size, rng):
            xb, yb = feats[batch], labels[batch]
            logits = forward(client.regular, xb)
            _, logit_grad = supervise(logits, yb)
            grads = backward(client.regular, xb, logit_grad)
            if prox_mu is not None:
                _, pg = prox_term(client.regular, client.anchor, prox_mu)
                grads.grad_w = [g + e for g, e in zip(grads.grad_w, pg.grad_w)]
                grads.grad_b = [g + e for g, e in zip(grads.grad_b, pg.grad_b)]
            sgd_step(client.regular, grads, settings.lr, settings.momentum, settings.weight_decay)
            passes += 1
    return passes


# ---------------------------------------------------------------------------
# mutual distillation
# ---------------------------------------------------------------------------

def mutual_learn(
    models: Sequence[Model],
    features: np.ndarray,
    labels: np.ndarray,
    supervise: Callable[[np.ndarray, np.ndarray], LossAndGrad],
    settings: TrainSettings,
    *,
    sup_scale: float,
    dist_scale: float,
    epochs: int,
    rng: np.random.Generator,
    weighting: str = "size_weighted",
    update_mask: Sequence[bool] | None = None,
) -> tuple[int, bool]:
    """Joint mutual-distillation SGD over a shared data slice.

    Per batch, every model's logits are snapshotted first; each updated model
    then takes one step on sup_scale * supervision + dist_scale * KL against
    the other models' snapshot logits (teachers are constants within the
    batch). ``update_mask`` restricts which models take steps; all models
    still teach. Returns (batch passes, whether any distillation happened).
    """
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}")
    if update_mask is None:
        update_mask = [True] * len(models)
    if len(update_mask) != len(models):
        raise ValueError("update_mask length != models length")
    phis = [param_count(m) for m in models]
    passes = 0
    distilled = False
    for _ in range(epochs):
        for batch in batch_iter(labels.size, settings.batch_size, rng):
            xb, yb = features[batch], labels[batch]
            snapshots = [forward(m, xb) for m in models]
            for i, model in enumerate(models):
                if not update_mask[i]:
                    continue
                sup = supervise(snapshots[i], yb)
                teachers = [(snapshots[j], phis[j]) for j in range(len(models)) if j != i]
                if teachers:
                    dist = kl_distill(snapshots[i], teachers, settings.temperature, weighting)
                    distilled = True
                else:
                    dist = (0.0, np.zeros_like(snapshots[i]))
                _, logit_grad = scaled_objective(sup_scale, dist_scale, sup, dist)
                grads = backward(model, xb, logit_grad)
                sgd_step(model, grads, settings.lr, settings.momentum, settings.weight_decay)
                passes += 1
    return passes, distilled


def dfml_aggregate(
    participants: Sequence[ClientState],
    aggregator: ClientState,
    dataset: Dataset,
    settings: TrainSettings,
    *,
    sup_scale: float,
    dist_scale: float,
    epochs: int,
    rng: np.random.Generator,
    weighting: str = "size_weighted",
    transfer: str = "mutual",
) -> dict:
    """Mutual-distillation aggregation on the aggregator's train split.

    Supervision uses the AGGREGATOR's label statistics (its skew is what the
    visiting models are exposed to). In "mutual" mode every participant's
    model is updated; in "vanilla" mode only the aggregator's model learns and
    the senders' models act purely as teachers.
    """
    if transfer not in TRANSFER_MODES:
        raise ValueError(f"unknown transfer mode {transfer!r}")
    if aggregator not in participants:
        raise ValueError("aggregator must be among the participants")
    feats = dataset.features[aggregator.train_idx]
    labels = dataset.labels[aggregator.train_idx]
    supervise = _supervision(settings, aggregator.beta, aggregator.present)
    mask = [True] * len(participants)
    if transfer == "vanilla":
        mask = [c.id == aggregator.id for c in participants]
    passes, distilled = mutual_learn(
        [c.regular for c in participants],
        feats,
        labels,
        supervise,
        settings,
        sup_scale=sup_scale,
        dist_scale=dist_scale,
        epochs=epochs,
        rng=rng,
        weighting=weighting,
        update_mask=mask,
    )
    return {"passes": passes, "distill_skipped": not distilled}


def peak_update(client: ClientState, alpha_now: float, extra_fire: bool = False) -> bool:
    """Snapshot the regular model into the peak slot when alpha clears the
    client's watermark (or when the schedule marks this a relaxed peak round).

    On firing, the watermark rises to the current alpha (never falls).
    """
    if client.peak is None:
        raise ValueError(f"client {client.id} has no peak model")
    fired = alpha_now >= client.watermark or extra_fire
    if fired:
        client.peak = clone_model(client.regular)
        client.watermark = max(client.watermark, alpha_now)
    return fired


# ---------------------------------------------------------------------------
# parameter averaging
# ---------------------------------------------------------------------------

def fedavg_aggregate(models: Sequence[Model], weights: Sequence[float]) -> list[Model]:
    """Cluster-wise weighted parameter mean.

    Models are grouped by architecture equality; weights are renormalized
    within each cluster. Every returned model is a fresh copy (no shared
    arrays), momentum buffers zeroed. Output order matches input order.
    """
    if len(models) != len(weights):
        raise ValueError("models and weights length mismatch")
    if len(models) == 0:
        raise ValueError("nothing to average")
    if any(w <= 0 for w in weights):
        raise ValueError("weights must be positive")

    clusters: dict[ModelSpec, list[int]] = {}
    for i, m in enumerate(models):
        clusters.setdefault(m.spec, []).append(i)

    out: list[Model | None] = [None] * len(models)
    for spec, members in clusters.items():
        total = float(sum(weights[i] for i in members))
        avg_w = [np.zeros_like(w) for w in models[members[0]].weights]
        avg_b = [np.zeros_like(b) for b in models[members[0]].biases]
        for i in members:
            scale = weights[i] / total
            for k in range(len(avg_w)):
                avg_w[k] += scale * models[i].weights[k]
                avg_b[k] += scale * models[i].biases[k]
        for i in members:
            out[i] = Model(
                spec=spec,
                weights=[w.copy() for w in avg_w],
                biases=[b.copy() for b in avg_b],
            )
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# partial-training index schemes
# ---------------------------------------------------------------------------

def _sub_width(ratio: float, width: int) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    if width < 1:
        raise ValueError(f"width must be >= 1, got {width}")
    count = int(math.floor(ratio * width))
    if count < 1:
        raise ValueError(f"ratio {ratio} of width {width} selects no units")
    return count


def heterofl_indices(ratio: float, width: int) -> np.ndarray:
    """Static leading units: 0 .. floor(ratio * width) - 1."""
    return np.arange(_sub_width(ratio, width), dtype=np.intp)


def fedrolex_indices(ratio: float, width: int, round_index: int) -> np.ndarray:
    """Rolling window of floor(ratio * width) units starting at round mod width.

    The window wraps cyclically, so over successive rounds every unit is
    trained. round_index 0 reproduces the static leading-unit selection.
    """
    if round_index < 0:
        raise ValueError(f"round_index must be >= 0, got {round_index}")
    count = _sub_width(ratio, width)
    start = round_index % width
    return (start + np.arange(count, dtype=np.intp)) % width


def dropout_indices(ratio: float, width: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random choice of floor(ratio * width) units, sorted."""
    count = _sub_width(ratio, width)
    return np.sort(rng.choice(width, size=count, replace=False)).astype(np.intp)


def full_index_sets(spec: ModelSpec) -> list[np.ndarray]:
    """One full range per hidden layer (the identity sub-model)."""
    return [np.arange(w, dtype=np.intp) for w in spec.layer_widths]


def index_sets_for(
    scheme: str,
    global_spec: ModelSpec,
    sub_spec: ModelSpec,
    *,
    round_index: int = 0,
    rng: np.random.Generator | None = None,
) -> list[np.ndarray]:
    """Output-unit index sets into ``global_spec`` realizing ``sub_spec``.

    Per hidden layer the set has exactly the sub-model's width; its members
    come from the scheme: leading units (heterofl), a rolling window keyed on
    the round (fedrolex), or a seeded uniform draw (dropout).
    """
    if len(sub_spec.layer_widths) != len(global_spec.layer_widths):
        raise ValueError("sub-model depth differs from global model")
    if sub_spec.input_dim != global_spec.input_dim or sub_spec.num_classes != global_spec.num_classes:
        raise ValueError("sub-model I/O dims differ from global model")
    sets: list[np.ndarray] = []
    for sub_w, glob_w in zip(sub_spec.layer_widths, global_spec.layer_widths):
        if sub_w > glob_w:
            raise ValueError(f"sub width {sub_w} exceeds global width {glob_w}")
        if scheme == "heterofl":
            sets.append(np.arange(sub_w, dtype=np.intp))
        elif scheme == "fedrolex":
            if round_index < 0:
                raise ValueError(f"round_index must be >= 0, got {round_index}")
            start = round_index % glob_w
            sets.append((start + np.arange(sub_w, dtype=np.intp)) % glob_w)
        elif scheme == "dropout":
            if rng is None:
                raise ValueError("dropout scheme needs an rng")
            sets.append(np.sort(rng.choice(glob_w, size=sub_w, replace=False)).astype(np.intp))
        else:
            raise ValueError(f"unknown partial-training scheme {scheme!r}")
    return sets


def extract_submodel(
    global_model: Model, sub_spec: ModelSpec, index_sets: list[np.ndarray]
) -> Model:
    """Materialize the sub-model the index sets select out of the global model.

    Layer k keeps the rows in its own set and the columns of the previous
    layer's set; the input edge keeps all input dims and the output layer
    keeps all classes. Momentum starts at zero.
    """
    gspec = global_model.spec
    if len(index_sets) != len(gspec.layer_widths):
        raise ValueError("need one index set per hidden layer")
    weights, biases = [], []
    n_layers = len(global_model.weights)
    for k in range(n_layers):
        out_idx = index_sets[k] if k < n_layers - 1 else np.arange(gspec.num_classes, dtype=np.intp)
        in_idx = np.arange(gspec.input_dim, dtype=np.intp) if k == 0 else index_sets[k - 1]
        w = global_model.weights[k][np.ix_(out_idx, in_idx)]
        b = global_model.biases[k][out_idx]
        weights.append(w.copy())
        biases.append(b.copy())
    model = Model(spec=sub_spec, weights=weights, biases=biases)
    return model


def pt_aggregate(
    global_spec: ModelSpec,
    models: Sequence[Model],
    index_sets: Sequence[list[np.ndarray]],
) -> tuple[Model, list[Model]]:
    """Merge width-sliced sub-models into the global model, per-parameter mean.

    Every global parameter covered by at least one sub-model becomes the plain
    mean of the covering models' values; uncovered parameters keep the value
    of the first full-architecture participant (the aggregator-side global
    model). Fresh sub-models are then re-extracted through the same index
    sets. At least one participant must carry the full architecture.
    """
    if len(models) != len(index_sets):
        raise ValueError("models and index_sets length mismatch")
    base = next((m for m in models if m.spec == global_spec), None)
    if base is None:
        raise ValueError("no participant carries the full global architecture")

    shapes = global_spec.layer_shapes()
    n_layers = len(shapes)
    sum_w = [np.zeros(s) for s in shapes]
    cnt_w = [np.zeros(s) for s in shapes]
    sum_b = [np.zeros(s[0]) for s in shapes]
    cnt_b = [np.zeros(s[0]) for s in shapes]

    for model, sets in zip(models, index_sets):
        if len(model.weights) != n_layers:
            raise ValueError("participant depth differs from global architecture")
        if len(sets) != n_layers - 1:
            raise ValueError("need one index set per hidden layer")
        for k in range(n_layers):
            out_idx = sets[k] if k < n_layers - 1 else np.arange(global_spec.num_classes, dtype=np.intp)
            in_idx = np.arange(global_spec.input_dim, dtype=np.intp) if k == 0 else sets[k - 1]
            if model.weights[k].shape != (out_idx.size, in_idx.size):
                raise ValueError(
                    f"layer {k}: sub-model shape {model.weights[k].shape} does not match "
                    f"its index sets {(out_idx.size, in_idx.size)}"
                )
            block = np.ix_(out_idx, in_idx)
            sum_w[k][block] += model.weights[k]
            cnt_w[k][block] += 1.0
            sum_b[k][out_idx] += model.biases[k]
            cnt_b[k][out_idx] += 1.0

    global_model = clone_model(base)
    global_model.vel_w = [np.zeros_like(w) for w in global_model.weights]
    global_model.vel_b = [np.zeros_like(b) for b in global_model.biases]
    for k in range(n_layers):
        covered = cnt_w[k] > 0
        global_model.weights[k][covered] = sum_w[k][covered] / cnt_w[k][covered]
        covered_b = cnt_b[k] > 0
        global_model.biases[k][covered_b] = sum_b[k][covered_b] / cnt_b[k][covered_b]

    subs = [extract_submodel(global_model, m.spec, s) for m, s in zip(models, index_sets)]
    return global_model, subs


# ---------------------------------------------------------------------------
# paired knowledge transfer
# ---------------------------------------------------------------------------

def defkt_round(
    pairs: Sequence[tuple[ClientState, ClientState]],
    dataset: Dataset,
    settings: TrainSettings,
    *,
    alpha: float,
    epochs: int,
    rng: np.random.Generator,
) -> int:
    """Paired mutual learning: each sender's model visits one aggregator.

    The incoming copy of the sender's model and the aggregator's own model
    mutual-learn on the aggregator's train split with a fixed blend; the
    updated incoming model then replaces BOTH the sender's and the
    aggregator's model (the aggregator keeps a deep copy). Pairs must be
    architecture-homogeneous and disjoint.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    seen: set[int] = set()
    for sender, agg in pairs:
        for c in (sender, agg):
            if c.id in seen:
                raise ValueError(f"client {c.id} appears in more than one pair")
            seen.add(c.id)
        if sender.regular.spec != agg.regular.spec:
            raise ValueError(
                f"pair ({sender.id}, {agg.id}): paired transfer needs matching architectures"
            )
    passes = 0
    for sender, agg in pairs:
        incoming = clone_model(sender.regular)
        feats = dataset.features[agg.train_idx]
        labels = dataset.labels[agg.train_idx]
        supervise = _supervision(settings, agg.beta, agg.present)
        p, _ = mutual_learn(
            [incoming, agg.regular],
            feats,
            labels,
            supervise,
            settings,
            sup_scale=1.0 - alpha,
            dist_scale=alpha,
            epochs=epochs,
            rng=rng,
            weighting="vanilla_average",
        )
        passes += p
        sender.regular = incoming
        agg.regular = clone_model(incoming)
    return passes


# ---------------------------------------------------------------------------
# meme-model mutual learning
# ---------------------------------------------------------------------------

def decfml_round(
    participants: Sequence[ClientState],
    dataset: Dataset,
    settings: TrainSettings,
    *,
    alpha: float,
    epochs: int,
    rng: np.random.Generator,
) -> int:
    """Per-client (personal, meme) mutual learning, then meme averaging.

    Each participant runs mutual learning between its heterogeneous personal
    model and the shared-architecture meme model on its OWN train split; the
    memes are then averaged (data-size weights) and the mean is copied back to
    every participant.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if any(c.meme is None for c in participants):
        raise ValueError("every participant needs a meme model")
    meme_spec = participants[0].meme.spec
    if any(c.meme.spec != meme_spec for c in participants):
        raise ValueError("meme models must share one architecture")
    passes = 0
    for client in participants:
        feats = dataset.features[client.train_idx]
        labels = dataset.labels[client.train_idx]
        supervise = _supervision(settings, client.beta, client.present)
        p, _ = mutual_learn(
            [client.regular, client.meme],
            feats,
            labels,
            supervise,
            settings,
            sup_scale=1.0 - alpha,
            dist_scale=alpha,
            epochs=epochs,
            rng=rng,
            weighting="vanilla_average",
        )
        passes += p
    averaged = fedavg_aggregate(
        [c.meme for c in participants], [c.train_size for c in participants]
    )
    for client, meme in zip(participants, averaged):
        client.meme = meme
    return passes
