"""The sequential round loop tying everything together.

One round: plan (aggregator + senders) -> local supervised phase on the
participants -> protocol-specific aggregation -> peak snapshots and schedule
advance (mutual-distillation protocol only) -> evaluation. Everything is
deterministic in the config seed: every random draw comes from a generator
keyed on (seed, phase, round, client), so reruns are bit-identical and no
phase perturbs another's stream.

Costs are tracked as they occur: communication as explicit per-transfer
ledger entries (who sent what to whom, in parameters), compute as the
cumulative count of single-model forward+backward batch passes (evaluation
excluded).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import PT_PROTOCOLS, ExperimentConfig
from .data import (
    Dataset,
    Partition,
    dirichlet_partition,
    holdout_split,
    iid_partition,
    label_proportions,
    load_csv,
    load_idx,
    synth_blobs,
)
from .nn import Model, ModelSpec, clone_model, forward, init_model, model_hash, param_count
from .protocols import (
    ClientState,
    TrainSettings,
    decfml_round,
    defkt_round,
    dfml_aggregate,
    fedavg_aggregate,
    index_sets_for,
    local_train,
    peak_update,
    pt_aggregate,
)
from .schedule import (
    CycleState,
    SchedulerHandoff,
    advance,
    alpha_at,
    component_scales,
    is_peak_round,
    state_from_handoff,
)
from .topology import RoundPlan, build_topology, next_aggregator, select_senders

__all__ = [
    "Transfer",
    "TransferLedger",
    "PeakEvent",
    "RoundMetrics",
    "ExperimentResult",
    "build_dataset",
    "build_clients",
    "evaluate",
    "run_experiment",
    "rounds_to_accuracy",
]

# rng phase tags: distinct streams per concern
_PH_DATA, _PH_PART, _PH_TOPO, _PH_LOCAL, _PH_AGG = 11, 12, 13, 14, 15


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


@dataclass(frozen=True)
class Transfer:
    round: int
    src: int
    dst: int
    kind: str        # "model" | "meme"
    size_params: int


@dataclass
class TransferLedger:
    entries: list[Transfer] = field(default_factory=list)

    def add(self, round_: int, src: int, dst: int, kind: str, size_params: int) -> None:
        self.entries.append(Transfer(round_, src, dst, kind, size_params))

    def count(self, round_: int) -> int:
        return sum(1 for e in self.entries if e.round == round_)

    def params(self, round_: int) -> int:
        return sum(e.size_params for e in self.entries if e.round == round_)


@dataclass(frozen=True)
class PeakEvent:
    """Per-client provenance of the peak snapshot after one round."""

    round: int
    client: int
    fired: bool
    regular_hash: str
    peak_hash: str


@dataclass
class RoundMetrics:
    round: int
    alpha: float
    comm_models: int
    comm_params: int
    compute_passes: int          # cumulative
    distill_skipped: bool
    acc_regular: np.ndarray      # per client
    acc_peak: np.ndarray         # per client (= regular where no peak exists)
    local_acc: np.ndarray        # per client, NaN where the val split is empty
    cluster_regular: np.ndarray  # per architecture cluster
    cluster_peak: np.ndarray

    @property
    def mean_regular(self) -> float:
        return float(np.mean(self.acc_regular))

    @property
    def mean_peak(self) -> float:
        return float(np.mean(self.acc_peak))

    @property
    def mean_local(self) -> float:
        if np.all(np.isnan(self.local_acc)):
            return float("nan")
        return float(np.nanmean(self.local_acc))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    initial: RoundMetrics
    clients: list[ClientState]
    transfers: TransferLedger
    peak_events: list[PeakEvent]
    partition: Partition


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Materialize (client pool, global test set) from the dataset config.

    The global test set is held out before any client partitioning.
    """
    ds = cfg.dataset
    if ds.source == "synth":
        seeds = np.random.SeedSequence([cfg.seed, _PH_DATA]).generate_state(2)
        pool = synth_blobs(ds.num_classes, ds.dim, ds.per_class, ds.spread, int(seeds[0]))
        test = synth_blobs(ds.num_classes, ds.dim, ds.test_per_class, ds.spread, int(seeds[1]))
        return pool, test
    if ds.source == "idx":
        full = load_idx(ds.train_images, ds.train_labels)
        if ds.holdout_fraction is not None:
            hseed = int(np.random.SeedSequence([cfg.seed, _PH_DATA]).generate_state(1)[0])
            pool, test = holdout_split(full, ds.holdout_fraction, hseed)
        else:
            pool, test = full, load_idx(ds.test_images, ds.test_labels)
    else:  # csv
        full = load_csv(ds.train_csv)
        if ds.holdout_fraction is not None:
            hseed = int(np.random.SeedSequence([cfg.seed, _PH_DATA]).generate_state(1)[0])
            pool, test = holdout_split(full, ds.holdout_fraction, hseed)
        else:
            pool, test = full, load_csv(ds.test_csv)
    if pool.dim != test.dim:
        raise ValueError(f"train/test feature dims differ: {pool.dim} vs {test.dim}")
    classes = max(pool.num_classes, test.num_classes)
    pool = Dataset(pool.features, pool.labels, classes)
    test = Dataset(test.features, test.labels, classes)
    return pool, test


def build_clients(cfg: ExperimentConfig, pool: Dataset) -> tuple[list[ClientState], Partition]:
    """Partition the pool and construct the initial client states.

    Architecture clusters are assigned round-robin by client id over the
    configured width lists; same-architecture clients start from identical
    parameters (the init is keyed on seed and architecture only).
    """
    pseed = int(np.random.SeedSequence([cfg.seed, _PH_PART]).generate_state(1)[0])
    if cfg.dataset.partition == "iid":
        part = iid_partition(pool, cfg.clients, pseed)
    else:
        part = dirichlet_partition(pool, cfg.clients, cfg.dataset.dirichlet_beta, pseed)

    specs = [ModelSpec(tuple(w), pool.dim, pool.num_classes) for w in cfg.widths]
    meme_spec = ModelSpec(tuple(cfg.meme_widths), pool.dim, pool.num_classes)
    clients: list[ClientState] = []
    for i in range(cfg.clients):
        cluster = i % len(specs)
        regular = init_model(specs[cluster], cfg.seed)
        train_idx = part.train_indices[i]
        client = ClientState(
            id=i,
            regular=regular,
            train_idx=train_idx,
            val_idx=part.val_indices[i],
            beta=label_proportions(pool, train_idx),
            present=np.unique(pool.labels[train_idx]),
            cluster=cluster,
            peak=clone_model(regular) if cfg.protocol == "dfml" else None,
            meme=init_model(meme_spec, cfg.seed) if cfg.protocol == "dec_fml" else None,
        )
        clients.append(client)
    return clients, part


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model: Model, dataset: Dataset, indices: np.ndarray | None = None) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if indices is None:
        feats, labels = dataset.features, dataset.labels
    else:
        feats, labels = dataset.features[indices], dataset.labels[indices]
    if labels.size == 0:
        return float("nan")
    pred = np.argmax(forward(model, feats), axis=1)
    return float(np.mean(pred == labels))


def _measure(
    cfg: ExperimentConfig,
    clients: list[ClientState],
    pool: Dataset,
    test: Dataset,
    *,
    round_: int,
    alpha: float,
    comm_models: int,
    comm_params: int,
    compute_passes: int,
    distill_skipped: bool,
) -> RoundMetrics:
    n = len(clients)
    acc_reg = np.zeros(n)
    acc_peak = np.zeros(n)
    local = np.full(n, np.nan)
    for i, c in enumerate(clients):
        acc_reg[i] = evaluate(c.regular, test)
        acc_peak[i] = evaluate(c.peak, test) if c.peak is not None else acc_reg[i]
        if c.val_idx.size:
            local[i] = evaluate(c.regular, pool, c.val_idx)
    n_clusters = len(cfg.widths)
    cl_reg = np.full(n_clusters, np.nan)
    cl_peak = np.full(n_clusters, np.nan)
    for k in range(n_clusters):
        members = [i for i, c in enumerate(clients) if c.cluster == k]
        if members:
            cl_reg[k] = float(np.mean(acc_reg[members]))
            cl_peak[k] = float(np.mean(acc_peak[members]))
    return RoundMetrics(
        round=round_,
        alpha=alpha,
        comm_models=comm_models,
        comm_params=comm_params,
        compute_passes=compute_passes,
        distill_skipped=distill_skipped,
        acc_regular=acc_reg,
        acc_peak=acc_peak,
        local_acc=local,
        cluster_regular=cl_reg,
        cluster_peak=cl_peak,
    )


# ---------------------------------------------------------------------------
# the round loop
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    pool, test = build_dataset(cfg)
    clients, partition = build_clients(cfg, pool)
    topo = build_topology(cfg.topology, cfg.clients)
    settings = TrainSettings(
        lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size,
        temperature=cfg.temperature,
        loss=cfg.loss,
    )

    cyclic = cfg.protocol == "dfml" and cfg.scheduler_mode == "cyclic"
    gkind, gamount = cfg.growth_rule()
    cycle = (
        CycleState(
            alpha_min=cfg.alpha_min,
            alpha_max=cfg.alpha_max,
            cycle_len=cfg.initial_period,
            pos=0,
            growth_kind=gkind,
            growth=gamount,
            shape=cfg.cycle_shape,
        )
        if cyclic
        else None
    )
    handoff = SchedulerHandoff(1, 1) if cyclic else None

    topo_rng = _rng(cfg.seed, _PH_TOPO)
    ledger = TransferLedger()
    peak_events: list[PeakEvent] = []
    metrics: list[RoundMetrics] = []
    prev_agg: int | None = None
    compute = 0

    init_alpha = alpha_at(cycle) if cycle is not None else (cfg.fixed_alpha() or 0.0)
    initial = _measure(
        cfg, clients, pool, test,
        round_=0, alpha=init_alpha if cfg.protocol == "dfml" else 0.0,
        comm_models=0, comm_params=0, compute_passes=0, distill_skipped=False,
    )

    for t in range(1, cfg.rounds + 1):
        # ---- plan -------------------------------------------------------
        agg_id = next_aggregator(
            topo, prev_agg, topo_rng,
            mode="rotate" if cfg.aggregator_mode == "rotate" else "fixed",
            fixed_id=cfg.fixed_aggregator() or 0,
        )
        senders = select_senders(topo, agg_id, cfg.sender_fraction, topo_rng)
        extras: tuple[int, ...] = ()
        if cfg.protocol == "def_kt":
            # one distinct aggregator per sender; agg_id anchors the rotation
            others = [i for i in range(cfg.clients) if i != agg_id and i not in senders]
            need = len(senders) - 1
            if need > len(others):
                raise ValueError(
                    f"def_kt needs {len(senders)} disjoint pairs but only "
                    f"{len(others) + 1} non-senders exist"
                )
            if need > 0:
                extras = tuple(
                    sorted(int(x) for x in topo_rng.choice(others, size=need, replace=False))
                )

        if cfg.protocol == "dfml":
            if cycle is not None:
                sup_scale, dist_scale = component_scales(cycle, cfg.component_mode)
                alpha_now = alpha_at(cycle)
            else:
                alpha_now = float(cfg.fixed_alpha())
                pair = {
                    "opposed": (1.0 - alpha_now, alpha_now),
                    "supervision_only": (1.0 - alpha_now, 1.0),
                    "distillation_only": (1.0, alpha_now),
                    "common": (alpha_now, alpha_now),
                }
                sup_scale, dist_scale = pair[cfg.component_mode]
        elif cfg.protocol == "def_kt":
            alpha_now, sup_scale, dist_scale = cfg.defkt_alpha, None, None
        elif cfg.protocol == "dec_fml":
            alpha_now, sup_scale, dist_scale = cfg.fml_alpha, None, None
        else:
            alpha_now, sup_scale, dist_scale = 0.0, None, None

        plan = RoundPlan(
            round=t, aggregator=agg_id, senders=senders,
            alpha=alpha_now, protocol=cfg.protocol, extra_aggregators=extras,
        )
        participants = [clients[i] for i in plan.participants]
        aggregator = clients[agg_id]

        # ---- local supervised phase --------------------------------------
        if cfg.protocol == "dec_fedprox":
            for c in participants:
                c.anchor = clone_model(c.regular)
        if cfg.protocol == "def_kt":
            local_set = [clients[s] for s in senders]
        elif cfg.protocol == "dec_fml":
            local_set = []  # the mutual-learning phase below IS the local phase
        else:
            local_set = participants
        for c in local_set:
            compute += local_train(
                c, pool, settings,
                epochs=cfg.local_epochs,
                rng=_rng(cfg.seed, _PH_LOCAL, t, c.id),
                prox_mu=cfg.mu if cfg.protocol == "dec_fedprox" else None,
            )

        # ---- aggregation --------------------------------------------------
        agg_rng = _rng(cfg.seed, _PH_AGG, t)
        distill_skipped = False

        if cfg.protocol == "dfml":
            for s in senders:
                ledger.add(t, s, agg_id, "model", param_count(clients[s].regular))
            stats = dfml_aggregate(
                participants, aggregator, pool, settings,
                sup_scale=sup_scale, dist_scale=dist_scale,
                epochs=cfg.K, rng=agg_rng,
                weighting=cfg.weighting, transfer=cfg.transfer,
            )
            compute += stats["passes"]
            distill_skipped = stats["distill_skipped"]
            for s in senders:
                ledger.add(t, agg_id, s, "model", param_count(clients[s].regular))
            m = cfg.resolved_peak_updates(len(senders))
            if cycle is not None:
                m = min(m, cycle.cycle_len)
            relax = m > 1 and cycle is not None and is_peak_round(cycle, m)
            fired_now = {c.id: peak_update(c, alpha_now, extra_fire=relax) for c in participants}
            for c in clients:
                peak_events.append(
                    PeakEvent(
                        round=t, client=c.id, fired=fired_now.get(c.id, False),
                        regular_hash=model_hash(c.regular), peak_hash=model_hash(c.peak),
                    )
                )

        elif cfg.protocol in ("dec_fedavg", "dec_fedprox"):
            for s in senders:
                ledger.add(t, s, agg_id, "model", param_count(clients[s].regular))
            averaged = fedavg_aggregate(
                [c.regular for c in participants], [c.train_size for c in participants]
            )
            for c, m_new in zip(participants, averaged):
                c.regular = m_new
            for s in senders:
                ledger.add(t, agg_id, s, "model", param_count(clients[s].regular))

        elif cfg.protocol in PT_PROTOCOLS:
            scheme = {
                "dec_heterofl": "heterofl",
                "dec_fedrolex": "fedrolex",
                "dec_feddropout": "dropout",
            }[cfg.protocol]
            for s in senders:
                ledger.add(t, s, agg_id, "model", param_count(clients[s].regular))
            largest = max(participants, key=lambda c: (param_count(c.regular), -c.id))
            gspec = largest.regular.spec
            sets = [
                index_sets_for(
                    scheme, gspec, c.regular.spec, round_index=t - 1, rng=agg_rng
                )
                for c in participants
            ]
            _, subs = pt_aggregate(gspec, [c.regular for c in participants], sets)
            for c, m_new in zip(participants, subs):
                c.regular = m_new
            for s in senders:
                ledger.add(t, agg_id, s, "model", param_count(clients[s].regular))

        elif cfg.protocol == "def_kt":
            agg_ids = sorted({agg_id, *extras})
            pair_list = [(clients[s], clients[a]) for s, a in zip(sorted(senders), agg_ids)]
            for s, a in zip(sorted(senders), agg_ids):
                ledger.add(t, s, a, "model", param_count(clients[s].regular))
            compute += defkt_round(
                pair_list, pool, settings,
                alpha=cfg.defkt_alpha, epochs=cfg.K, rng=agg_rng,
            )
            for s, a in zip(sorted(senders), agg_ids):
                ledger.add(t, a, s, "model", param_count(clients[s].regular))

        elif cfg.protocol == "dec_fml":
            for c in participants:
                ledger.add(t, c.id, agg_id, "meme", param_count(c.meme))
            compute += decfml_round(
                participants, pool, settings,
                alpha=cfg.fml_alpha, epochs=cfg.K, rng=agg_rng,
            )
            for c in participants:
                ledger.add(t, agg_id, c.id, "meme", param_count(c.meme))

        else:  # pragma: no cover - config validation forbids this
            raise ValueError(f"unhandled protocol {cfg.protocol!r}")

        # ---- schedule advance + handoff consistency -----------------------
        if cycle is not None:
            cycle = advance(cycle)
            last_update = t + 1 if cycle.pos == 0 else handoff.last_period_update_round
            handoff = SchedulerHandoff(t + 1, last_update)
            recon = state_from_handoff(
                handoff,
                alpha_min=cfg.alpha_min, alpha_max=cfg.alpha_max,
                initial_period=cfg.initial_period,
                growth_kind=gkind, growth=gamount, shape=cfg.cycle_shape,
            )
            if recon != cycle:
                raise RuntimeError(f"scheduler handoff drifted from engine state at round {t}")

        # ---- measure -------------------------------------------------------
        if t % cfg.eval_stride == 0 or t == cfg.rounds:
            metrics.append(
                _measure(
                    cfg, clients, pool, test,
                    round_=t, alpha=alpha_now,
                    comm_models=ledger.count(t), comm_params=ledger.params(t),
                    compute_passes=compute, distill_skipped=distill_skipped,
                )
            )
        prev_agg = agg_id

    return ExperimentResult(
        config=cfg,
        metrics=metrics,
        initial=initial,
        clients=clients,
        transfers=ledger,
        peak_events=peak_events,
        partition=partition,
    )


def rounds_to_accuracy(
    metrics: list[RoundMetrics], target: float, series: str = "peak"
) -> int | None:
    """First evaluated round whose mean accuracy reaches the target, else None."""
    if series not in ("peak", "regular"):
        raise ValueError(f"unknown series {series!r}")
    for row in metrics:
        value = row.mean_peak if series == "peak" else row.mean_regular
        if value >= target:
            return row.round
    return None
