"""Streaming text learners with an episodic memory.

Train classifiers or span extractors over one pass of a multi-dataset
stream, keep a key-value memory of seen examples, replay a sparse sample
of it while training, and locally adapt the weights on retrieved neighbors
at prediction time.
"""

from .adaptation import (
    AdaptConfig,
    AdaptResult,
    compute_key,
    frozen_key_network,
    locally_adapt,
    predict_adapted,
)
from .core import (
    AdamState,
    ModelConfig,
    ParamVector,
    Prediction,
    TokenSequence,
    adam_step,
    classify,
    encode,
    init_params,
    loss_grad,
    make_batch,
    nll_loss,
    predict,
    predict_span,
)
from .data import (
    DatasetSpec,
    Example,
    Vocabulary,
    balance,
    build_label_space,
    build_stream,
    to_sequence,
    tokenize,
)
from .errors import (
    CapacityError,
    ConfigError,
    DataError,
    EpmemError,
    InputError,
    NumericalError,
    RetrievalUnavailableError,
)
from .evaluation import (
    EvalBundle,
    dataset_score,
    forgetting_curve,
    make_bundle,
    score_many,
    span_f1,
)
from .experiments import (
    DeskOutcome,
    DeskSettings,
    capacity_sweep,
    prepare_data,
    retrieval_sweep,
    run_desk,
)
from .memory import EpisodicMemory
from .trainer import (
    METHODS,
    Checkpoint,
    TrainConfig,
    agem_project,
    load_checkpoint,
    make_checkpoint,
    new_model,
    save_checkpoint,
    train_stream,
)

__version__ = "0.1.0"
