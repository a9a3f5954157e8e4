"""Anomaly detection in 3D fibre-material images.

Pipeline: simulate (RSA) -> Hessian direction field -> window features
(mean direction, nearest-neighbour entropy) -> clustering (spatial SEM or
AWC) -> evaluation / VTK export.
"""
from .awc import AwcParams, awc_fit, ball_overlap_q, components
from .clusters import ClusterMap, select_anomaly
from .directions import DirectionField, Volume3D, aggregate_to_cubes, direction_field, hessian_directions
from .evaluation import evaluate
from .features import FeatureGrid, WindowSpec, extract_features, mean_direction, nn_entropy
from .geometry import canonicalize, geodesic_distance
from .rsa import FibreSystem, RsaParams, generate_rsa, ground_truth_labels, voxelize
from .sem import SemParams, sem_fit

__version__ = "0.1.0"
