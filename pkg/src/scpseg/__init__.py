"""Spatially covariant pixel-aligned segmentation heads, comparators, and a
desk-scale CPU training/analysis harness."""

from .analysis import ComplexityReport, WeightStats, count_complexity, export_stats_pgm, weight_stats
from .backbone import BackboneConfig, BackboneParams, ConfigError, backbone_forward, build_backbone
from .heads import (
    CoordHeadVariant,
    HeadVariant,
    PhiNet,
    ScpForm,
    ScpHead,
    SharedHead,
    base_forward,
    coord_head_forward,
    init_head,
    phi_forward,
    scp_forward_final,
    scp_forward_musigma,
    scp_forward_pq,
)
from .metrics import (
    Connectivity,
    LesionMetricsReport,
    StatisticsError,
    TTestResult,
    connected_components,
    dice,
    lesion_metrics,
    paired_ttest,
)
from .model import ModelSpec, SegModel, build_model, load_checkpoint, model_forward, save_checkpoint
from .posenc import PositionEncoding, coord_channels, encode_positions
from .synthdata import DatasetSplits, Sample, SynthSpec, generate, load_dataset, save_dataset, zscore
from .tensor import Graph, GraphError, ShapeError, Tensor, backward, load_tensor, save_tensor
from .trainer import (
    AdamState,
    LossKind,
    RunRecord,
    TrainConfig,
    TrainingError,
    adam_step,
    compare_runs,
    evaluate,
    loss_bce_dice,
    train,
)

__version__ = "0.1.0"
