"""protofed: desk-scale simulator for prototype-based federated learning.

Heterogeneous client image models align their features to server-side
prototypes; the flagship method derives those prototypes from class text
prompts run through a frozen encoder with trainable prefixes, and the
package ships the prototype baselines it is compared against, an experiment
CLI, and property-test-grade numeric kernels.
"""

from .config import ExperimentConfig, parse_config
from .data import (
    ClientDataset,
    Dataset,
    PartitionSpec,
    carve_balanced_holdout,
    dirichlet_partition,
    generate_hierarchical_dataset,
    load_dataset,
    save_dataset,
)
from .metrics import RoundMetrics, RunResult, SimilarityReport, evaluate_client, write_outputs
from .models import ArchitectureSpec, ModelParams, assign_architectures, init_model
from .numerics import (
    contrastive_alignment,
    cosine_similarity_matrix,
    finite_difference_check,
    softmax_cross_entropy,
)
from .protocol import (
    PrototypeBank,
    aggregate_global_prototypes,
    client_local_train,
    compute_local_prototypes,
    run_fedtsp,
    run_pfl_finetune,
    run_protocol,
    sample_participants,
)
from .rng import RngStream
from .text import (
    FrozenEncoder,
    PromptBank,
    TextPrototypes,
    build_frozen_encoder,
    build_prompt_bank,
    build_prompts,
    encode_text_prototypes,
    insert_trainable_prompts,
    load_embedding_bank,
    server_alignment_loss,
    tokenize_and_embed,
    train_prompts,
)

__version__ = "0.1.0"
