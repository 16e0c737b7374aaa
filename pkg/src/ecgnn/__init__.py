"""Weak-classifier graph rewiring and two-processor GNNs for node
classification under heterophily.

The pipeline has two phases. First, a weak classifier (a label-trained
pointwise network, a structure-trained self-supervised encoder, or a
combination) embeds every node; a directed top-k cosine-neighbour graph is
built from those frozen embeddings. Second, a GNN runs two processors per
layer, one over the input graph and one over the rewired graph (with edge
dropout), fusing the two representations linearly before the nonlinearity.
"""

__version__ = "0.1.0"

from .config import RunConfig, SweepGrid, seed_stream, substream_seed
from .graph import (Graph, NodeTable, SplitSet, generate_synthetic,
                    graph_from_edges, load_dataset, make_splits, save_dataset)
from .homophily import (HomophilyReport, adjusted_homophily, edge_homophily,
                        label_informativeness, report)
from .embeddings import (BgrlState, EmbeddingMatrix, concat_embeddings,
                         extract_gnn_embeddings, load_embeddings,
                         save_embeddings, train_bgrl, train_mlp)
from .rewiring import EcgEdges, cosine_topk, drop_edge, ecg_homophily
from .models import (EcgGnnModel, TrainResult, accuracy, backbone_layer,
                     ecg_forward, load_checkpoint, roc_auc, save_checkpoint,
                     train)
from .harness import (EvalResult, ExperimentResult, SweepResult,
                      export_projection, run_experiment, run_sweep)
