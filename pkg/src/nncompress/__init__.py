"""Post-training compression of CNN weights by k-means scalar quantization
and magnitude pruning, with storage accounting and evaluation tools."""

from .codec import (
    CompressedModel,
    CompressionPlan,
    LayerPlan,
    Order,
    compress_model,
    decompress_model,
    load_compressed,
    measure,
    save_compressed,
    size_report,
)
from .errors import CompressionError
from .model_store import LayerKind, LayerSpec, Model, alexnet_reference_shapes, load_model, save_model
from .pruner import prune_layer
from .quantizer import Codebook, exact_kmeans_1d, fit_codebook, quantize_layer

__version__ = "0.1.0"
