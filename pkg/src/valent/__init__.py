"""Training-free sentence embeddings from decoder-only transformers.

Attention value vectors, hidden states and attention outputs of a small
reference decoder are pooled into sentence embeddings, scored on STS,
retrieval and reranking tasks, and inspected with two layerwise probes.
"""

__version__ = "0.1.0"

from .errors import ValentError  # noqa: E402
from .pooling import PoolSpec, embed, embed_many  # noqa: E402
from .transformer import Model, ModelConfig, forward  # noqa: E402

__all__ = ["Model", "ModelConfig", "PoolSpec", "ValentError", "__version__", "embed", "embed_many", "forward"]
