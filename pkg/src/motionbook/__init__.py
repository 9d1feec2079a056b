"""Motion features, 2D lookup-free motion tokenization, and a toy motion LM."""

from . import exceptions, metrics, nn, quantizers
from .data import SyntheticConfig, gen_synthetic, read_motion, split_corpus, write_motion
from .lm import MotionLanguageModel, Vocab, apply_template, build_example
from .tokenizer import MotionTokenizer, PartPartition, utilization_sweep
from .features import (
    FORMAT_WIDTHS,
    MotionSequence,
    PoseStream,
    decode_format,
    decode_smpl_d135,
    derive_foot_contact,
    encode_format,
    encode_smpl_d135,
    to_joint_positions,
)
from .skeleton import (
    RootTransform,
    Skeleton,
    default_skeleton,
    forward_kinematics,
    matrix_to_sixd,
    sixd_to_matrix,
)

__version__ = "0.1.0"

__all__ = [
    "FORMAT_WIDTHS", "MotionLanguageModel", "MotionSequence", "MotionTokenizer",
    "PartPartition", "PoseStream", "RootTransform", "Skeleton", "SyntheticConfig",
    "Vocab", "apply_template", "build_example", "decode_format", "decode_smpl_d135",
    "default_skeleton", "derive_foot_contact", "encode_format", "encode_smpl_d135",
    "exceptions", "forward_kinematics", "gen_synthetic", "matrix_to_sixd", "metrics",
    "nn", "quantizers", "read_motion", "sixd_to_matrix", "split_corpus",
    "to_joint_positions", "utilization_sweep", "write_motion",
]
