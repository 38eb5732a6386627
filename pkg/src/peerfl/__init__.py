"""peerfl: a deterministic desk-scale simulator for decentralized federated
learning with mutual knowledge distillation across heterogeneous models, plus
decentralized baselines (weighted averaging, proximal averaging, partial
training, paired transfer, meme-model mutual learning)."""

__version__ = "0.1.0"

from .config import ConfigError, DatasetConfig, ExperimentConfig, parse_config
from .data import (
    Dataset,
    Partition,
    dirichlet_partition,
    iid_partition,
    label_proportions,
    load_csv,
    load_idx,
    synth_blobs,
)
from .engine import (
    ExperimentResult,
    RoundMetrics,
    build_clients,
    build_dataset,
    evaluate,
    rounds_to_accuracy,
    run_experiment,
)
from .losses import (
    ace_loss,
    composite_objective,
    cross_entropy,
    kl_distill,
    prox_term,
    wsm_loss,
)
from .nn import (
    Gradients,
    Model,
    ModelSpec,
    backward,
    clone_model,
    forward,
    init_model,
    layer_slice,
    model_hash,
    param_count,
    sgd_step,
    write_slice,
)
from .protocols import (
    ClientState,
    TrainSettings,
    decfml_round,
    defkt_round,
    dfml_aggregate,
    dropout_indices,
    extract_submodel,
    fedavg_aggregate,
    fedrolex_indices,
    heterofl_indices,
    local_train,
    mutual_learn,
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
from .topology import RoundPlan, Topology, build_topology, next_aggregator, select_senders
