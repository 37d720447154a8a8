"""Fair node classification without sensitive attributes.

The pipeline pretrains an encoder whose low-dimensional output serves as
pseudo-sensitive attributes, retrieves real-node counterfactuals that differ
in one binarized attribute but share the (pseudo-)label, and fine-tunes a GNN
so that nodes and their counterfactuals get similar embeddings. Per-attribute
weights are solved in closed form over the probability simplex.
"""

from .graph import Graph, SyntheticSpec, generate_synthetic, load_graph_csv
from .train import TrainConfig, train_fairwos, train_vanilla

__all__ = ["Graph", "SyntheticSpec", "TrainConfig", "generate_synthetic", "load_graph_csv",
           "train_fairwos", "train_vanilla"]
__version__ = "0.1.0"
