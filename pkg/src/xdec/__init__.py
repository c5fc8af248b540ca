"""xdec: one decoder, five vision-language tasks, desk-scale.

A single transformer decoder reads latent queries (the last one global)
plus text queries over a conv feature pyramid and is trained jointly for
generic segmentation, referring segmentation, image-text retrieval, and
captioning on a deterministic synthetic shapes corpus; VQA rides on the
same decode path at inference time.
"""

from .attention import (
    TaskMode,
    build_cross_bias,
    build_self_attention_mask,
    combine_cross_bias,
    validate_mode_counts,
)
from .config import (
    AttentionSwitches,
    Config,
    DataConfig,
    LossWeights,
    MatchWeights,
    ModelConfig,
    TrainConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
)
from .data import (
    Dataset,
    Sample,
    SceneSpec,
    build_vocabulary,
    category_names,
    generate_corpus,
    generate_sample,
    plan_batches,
    write_dataset,
)
from .decoder import DecoderOutput, XDecoder, build_model
from .encoders import (
    ConceptEmbeddingTable,
    ImagePyramidEncoder,
    PixelFuser,
    TextEncoder,
    encode_concepts,
)
from .errors import FormatError, InputError, TrainingError, XDecError
from .losses import (
    Assignment,
    LossReport,
    bce_mask_loss,
    caption_loss,
    contrastive_loss,
    dice_loss,
    hungarian_match,
    mask_classification_loss,
    matching_cost,
    total_loss,
)
from .metrics import (
    MetricReport,
    caption_metrics,
    cumulative_iou,
    mask_ap,
    mean_iou,
    panoptic_quality,
    recall_at_k,
)
from .tasks import (
    CaptionResult,
    PanopticResult,
    RetrievalRanking,
    compose_referring_caption,
    compose_region_retrieval,
    evaluate_model,
    generate_caption,
    referring_segment,
    run_retrieval,
    run_vqa,
    segmentation_inference,
)
from .training import (
    TensorCorpus,
    TrainState,
    checkpoint_load,
    checkpoint_save,
    create_train_state,
    run_training,
    train_step,
)
from .vocab import Vocabulary, TokenSequence, detokenize, tokenize

__version__ = "0.1.0"
