"""pairlens: influence analysis for two-encoder contrastive models.

The toolkit trains small text/image paired-encoder models on a symmetric
contrastive loss, splits each training pair's influence into its
positive-sample and negative-sample roles, edits models without retraining,
and validates everything against an exact retraining oracle.
"""

__version__ = "0.1.0"

from .data import (
    BatchSegmentation,
    Pair,
    PairedDataset,
    Seg,
    SyntheticConfig,
    generate_synthetic,
    inject_misalignment,
    load_jsonl,
    locate,
    make_segmentation,
    save_jsonl,
)
from .influence import (
    DampedHessianSpec,
    InfluenceVectors,
    ProjectionPair,
    dense_hessian,
    edit_params,
    hvp,
    influence_vectors,
    kron_project,
    negative_influence,
    positive_influence,
)
from .losses import (
    NegVariant,
    TermGradient,
    batch_loss,
    i2t_col,
    negative_term,
    positive_term,
    removed_negative_loss,
    t2i_row,
    term_gradient,
    total_loss,
    zeta_weighted_loss,
)
from .model import (
    EncoderConfig,
    ModelParams,
    embed,
    flatten,
    init_params,
    load_checkpoint,
    save_checkpoint,
    similarity,
    similarity_matrix,
    unflatten,
)
from .numerics import CgConfig, Rng, cg_solve, finite_diff_grad, smallest_eigenvalue
from .oracle import (
    BoundConstants,
    ErrorReport,
    TrainConfig,
    TrainResult,
    bound_eval,
    error_report,
    estimate_constants,
    newton_step,
    retrain_removed,
    train,
)
from .scores import (
    ScoreRecord,
    rank_pairs,
    relative_is,
    task_related_is,
    test_gradient_batch,
    test_gradient_self,
)
