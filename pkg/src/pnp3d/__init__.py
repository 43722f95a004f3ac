"""PnP-3D: a plug-and-play point-cloud refinement block in plain NumPy."""
from .core import (
    PnpConfig, PnpParams, bilinear_response, count_flops, count_params, global_descriptor,
    global_perception, local_context_fusion, pnp3d_backward, pnp3d_forward,
)
from .numerics import Tape
from .spatial import PointCloud, ball_query, build_feature_graph, build_geometric_graph, knn_search

__all__ = [
    "PnpConfig", "PnpParams", "PointCloud", "Tape",
    "ball_query", "bilinear_response", "build_feature_graph", "build_geometric_graph",
    "count_flops", "count_params", "global_descriptor", "global_perception", "knn_search",
    "local_context_fusion", "pnp3d_backward", "pnp3d_forward",
]
