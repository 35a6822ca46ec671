"""Speaking-rate-invariant speaker embeddings.

A desk-scale toolkit that augments a corpus with WSOLA time stretching,
extracts MFCC features, trains an embedding network whose pooled output is
decomposed by a channel-attention gate into identity- and rate-related
parts with an adversarial squared-cosine penalty between them, and evaluates
verification with PLDA scoring and EER.
"""

from .corpus import (
    AudioClip,
    SynthSpeakerProfile,
    Trial,
    UtteranceRecord,
    build_manifest,
    load_wav,
    make_record,
    make_trials,
    random_profiles,
    rate_label_for,
    read_manifest,
    save_wav,
    synth_utterance,
    write_manifest,
)
from .tsm import (
    AugmentationPlan,
    TsmConfig,
    augment_corpus,
    naive_resample,
    plan_voxceleb_style,
    time_stretch,
    wsola_align,
)
from .features import (
    FeatureArchive,
    FeatureArchiveWriter,
    FeatureMatrix,
    VadConfig,
    energy_vad,
    extract_features,
    mfcc,
    sliding_cmn,
)
from .model import (
    Decomposition,
    ModelConfig,
    ModelParams,
    attention_decompose,
    cosine_map,
    encode,
    id_logits,
    init_params,
    load_checkpoint,
    rate_logits,
    save_checkpoint,
    stats_pool,
)
from .losses import (
    LossConfig,
    am_softmax_loss,
    cosine_adversarial_loss,
    rate_ce_loss,
    total_loss,
)
from .trainer import (
    AdversarialSchedule,
    SYSTEM_PRESETS,
    TrainerConfig,
    run_training,
    train_step_max,
    train_step_min,
)
from .backend import (
    CosineBackend,
    EmbeddingSet,
    PldaModel,
    compute_eer,
    extract_embeddings,
    rate_sweep_report,
    score_trial,
    train_plda,
)

__version__ = "0.1.0"
