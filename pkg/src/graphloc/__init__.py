"""Point-line graph pose tracking against compact polyline priors."""

from .geometry import (DomainError, FeatureGraph, LineFeature, PointFeature, Pose2, Twist2,
                       build_knn_graph, compose, inverse, se2_exp, se2_log, wrap_angle)
from .prior_map import PriorMap, SensorModel, load_map, map_to_graph, raycast_visible, save_map
from .scan_sim import Scan, Scenario, generate_scenario, simulate_scan
from .frontend import FrontendConfig, register
from .matching import MatchConfig, build_candidates, solve_uot
from .estimator import EstimatorConfig, TrackerState, predict_cv, track_step
from .harness import AteReport, Trajectory, compute_ate, run_scenario, run_tracking

__version__ = "0.1.0"
