"""quantadapt: configuration-aware low-rank adapters for block-quantized
networks, with Pareto-based configuration search.
"""

__version__ = "0.1.0"

from .errors import InfeasibleError, NumericError, TrainingError
from .nfquant import (
    NfCodebook,
    QuantizedTensor,
    bit_rate,
    dequantize,
    effective_bits,
    nf_codebook,
    quantize_layer,
    rtn_quantize,
    storage_bits,
)
from .qconfig import (
    EmbeddingTables,
    LayerLadder,
    LayerQuantConfig,
    ModelQuantConfig,
    avg_bits,
    build_ladder,
    config_to_ranks,
    embed_layer,
    init_config_set,
    layer_config_error,
    ranks_to_config,
    select_for_budget,
    solve_mckp,
)
from .linalg import truncated_svd
from .tinynet import (
    AdapterStack,
    Dataset,
    TargetNet,
    forward_loss,
    gen_teacher_student,
    grad_check,
    train_lora_per_config,
    train_shared,
    train_theta,
)
from .surrogate import GPModel, ehvi, gp_fit, gp_predict
from .pareto import (
    ParetoArchive,
    hvi,
    hypervolume_2d,
    normalize_accuracy,
    normalize_objectives,
    pareto_front,
    segmented_filter,
)
from .search import CoaRunResult, SearchState, coordinate_step, fd_gradient, run_coa, run_search_epoch
