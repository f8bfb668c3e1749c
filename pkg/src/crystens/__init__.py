"""Crystal-graph property prediction with checkpoint ensembling.

The pieces, in pipeline order: ``structio`` (parsing, datasets, splits),
``cgraph`` (periodic neighbor search and featurization), ``net`` (the
network and its gradients), ``train`` (SGD loop producing one checkpoint
per epoch), ``ensemble`` (rank checkpoints, average the top n), and
``evalrep`` (MAE, sweeps, percentile bands, reports). ``crystens.cli``
wires them into the ``crystens`` command.
"""

__version__ = "0.1.0"

from .cgraph import (
    AtomFeaturizer,
    CrystalGraph,
    GraphConfig,
    build_graph,
    build_graphs,
    find_neighbors,
    load_atom_features,
    one_hot_featurizer,
)
from .ensemble import (
    EnsembleSpec,
    RankedCheckpoints,
    average_params,
    predict_ensemble,
    predict_model_ensemble,
    predict_prediction_ensemble,
    rank_checkpoints,
)
from .errors import CheckpointError, ConfigError, CrystensError, DataError, NumericError
from .evalrep import improvement_pct, mae, percentile_bands, sweep_ensemble
from .net import ArchConfig, batch_graphs, forward, forward_graph, init_model
from .structio import (
    CrystalStructure,
    Dataset,
    SplitIndices,
    import_mp_dump,
    load_dataset,
    parse_cif,
    parse_structure_json,
    split_dataset,
)
from .toy import generate_toy_dataset
from .train import (
    Checkpoint,
    Normalizer,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_run,
)

__all__ = [
    "__version__",
    "ArchConfig",
    "AtomFeaturizer",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "CrystalGraph",
    "CrystalStructure",
    "CrystensError",
    "DataError",
    "Dataset",
    "EnsembleSpec",
    "GraphConfig",
    "Normalizer",
    "NumericError",
    "RankedCheckpoints",
    "SplitIndices",
    "TrainConfig",
    "average_params",
    "batch_graphs",
    "build_graph",
    "build_graphs",
    "find_neighbors",
    "forward",
    "forward_graph",
    "generate_toy_dataset",
    "import_mp_dump",
    "improvement_pct",
    "init_model",
    "load_atom_features",
    "load_checkpoint",
    "load_dataset",
    "one_hot_featurizer",
    "mae",
    "parse_cif",
    "parse_structure_json",
    "percentile_bands",
    "predict_ensemble",
    "predict_model_ensemble",
    "predict_prediction_ensemble",
    "rank_checkpoints",
    "save_checkpoint",
    "split_dataset",
    "sweep_ensemble",
    "train_run",
]
