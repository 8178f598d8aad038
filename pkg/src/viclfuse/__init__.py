"""viclfuse: desk-scale visual in-context learning with grouped prompt fusion.

The pipeline, end to end:

1. ``taskgen`` renders synthetic segmentation / detection / colorization
   datasets of image-label pairs.
2. ``tokenizer`` fits a deterministic patch codebook so labels can be
   predicted as discrete tokens.
3. ``backbone`` trains a small transformer to inpaint the masked quadrant
   of a 2x2 prompt canvas (``core_types``).
4. ``retrieval`` ranks support pairs against a query and splits the top-K
   into holistic / high-similarity / low-similarity groups.
5. ``prompt_generator`` condenses each group plus the query into a single
   fused support pair.
6. ``multi_fusion`` decodes the query through a trainable mainstream branch
   that cross-attends, block by block, to two frozen guidance branches.
7. ``eval_harness`` scores methods (mIoU / MSE) and runs ablation sweeps;
   ``cli`` orchestrates the stages and persists checkpoints.
"""

__version__ = "0.1.0"

from .core_types import (
    Canvas,
    CanvasConfig,
    Image,
    Label,
    LabelKind,
    Quadrant,
    SupportPair,
    compose_canvas,
    extract_quadrant,
    masked_patch_indices,
)
from .tokenizer import Codebook, TokenGrid, decode, encode, fit_codebook

__all__ = [
    "Canvas",
    "CanvasConfig",
    "Codebook",
    "Image",
    "Label",
    "LabelKind",
    "Quadrant",
    "SupportPair",
    "TokenGrid",
    "compose_canvas",
    "decode",
    "encode",
    "extract_quadrant",
    "fit_codebook",
    "masked_patch_indices",
]
