"""Simulator and library for acoustic adversarial attacks on drone self-localization."""

from .acoustics import Rir, Room, Waveform, compute_rir, image_sources, propagate, rir_position_jacobian, sdf
from .attack import (AttackConfig, AttackProblem, AttackReport, FrequencyBasis, PerturbationSpec,
                     adversarial_objective, build_basis, constraint_loss, pgd_attack, synth_perturbation,
                     targeted_attack)
from .defense import DelineationResult, delineate, delta_sensitivity, recover_and_localize
from .drone import DroneConfig, DroneState, PhaseModulation, SceneTransfer, default_drone, scene_response
from .errors import *  # noqa: F401,F403
from .harness import (ExperimentConfig, GridSpec, HeatmapReport, default_room, evaluate, generate_dataset,
                      noise_sweep, resource_log, run_campaign)
from .localizer import (Dataset, LocalizerModel, TrainConfig, forward, input_gradient, scaled_rms, train)

__version__ = "0.1.0"
