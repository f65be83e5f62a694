"""Cross-lingual glyph-grid VQA toolkit.

A desk-scale laboratory for the information-theoretic side of cross-lingual
text-rich visual question answering: sequence entropy and noise-contrast
mutual information over autoregressive answer distributions, a directional
distillation training objective on a tiny trainable multimodal model, a
deterministic synthetic bilingual VQA task to exercise it end to end, and
the filter mathematics of an LLM-assisted QA-curation pipeline.
"""

__version__ = "0.1.0"

from .core import (
    AlignmentError,
    ConfigurationError,
    GlyphImage,
    InvariantError,
    LanguageTag,
    MIReport,
    NoiseSpec,
    NumericalError,
    RecordError,
    SequenceDistribution,
    StepDistribution,
    VisualTokens,
    VQASample,
    deserialize_sample,
    serialize_sample,
)
from .infotheory import (
    kl_divergence,
    make_mi_report,
    mutual_information,
    noise_augment,
    sequence_entropy,
    sequence_kl,
    step_entropy,
)
from .objective import (
    DirectionalBatch,
    DirectionalEntry,
    DirectionalInputs,
    LossBreakdown,
    LossWeights,
    cross_entropy,
    forward_batch,
    loss_gradient,
    mvcl_mi_loss,
)
from .synthtask import (
    BilingualLexicon,
    DatasetSplits,
    TaskSpec,
    TaskVocabulary,
    build_lexicon,
    generate_dataset,
    render_question,
)
from .toymodel import (
    ModelConfig,
    ModelState,
    decode_distributions,
    default_noise_spec,
    encode_image,
    generate,
    init_state,
    project,
)
from .trainer import RunRecord, TrainConfig, compare_ablations, train
from .evalkit import (
    EvalResult,
    GapTable,
    evaluate_model,
    gap_table,
    mi_accuracy_report,
    mi_reports,
    normalize_answer,
    token_f1,
)
from .corpus import (
    CandidateQAPair,
    FilterStats,
    FilterThresholds,
    backtranslation_score,
    edit_distance,
    extend_multilingual,
    generate_candidates,
    jaccard,
    run_filter_chain,
)
