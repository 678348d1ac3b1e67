"""Monitoring of manual assembly from multi-view detections.

A task is declared as predicates and steps; its reachable configurations
form a state graph that a Viterbi decoder tracks from fused per-frame
observations.
"""

from .config import MonitorConfig, SimulationConfig, load_config, load_simulation_config
from .evaluate import TimelineComparison, evaluate
from .fusion import (CameraCalibration, Detection2D, FusionPipeline, ObservationLayout, TrayRegion,
                     backproject, cloud_intersection_count, cloud_iou, consolidate,
                     match_across_views, smooth)
from .ingest import (DetectionMessage, FrameBundle, decode_message, encode_message, read_log,
                     replay, synchronize, write_log)
from .pipeline import Monitor
from .planner import StateGraph, build_state_graph, enumerate_plans, transition_matrix
from .reasoner import (StateEstimator, current_belief, deviation_check, expected_observation,
                       observation_likelihood, viterbi_init, viterbi_path, viterbi_step)
from .simulator import NoiseModel, Rig, random_session, simulate
from .task import (Configuration, Predicate, Step, TaskDefinition, apply_step, check_preconditions,
                   load_task, parse_task_definition, serialize_task)

__version__ = "0.1.0"
