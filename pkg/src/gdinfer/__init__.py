"""Statistical inference along proximal gradient descent trajectories."""

from .gd import NonFiniteIterate, Trajectory, gd_step, run
from .inference import (InferenceReport, Inferencer, bias_estimate, bias_from_information,
                        confidence_intervals, debiased_iterate, gen_error_estimate, loocv_gen_error,
                        run_with_inference, signal_strength_onebit, variance_estimate,
                        variance_via_gen_error, z_hat)
from .numerics import RngStream
from .onsager import InferenceUnavailable, OnsagerEstimates, omega_hat
from .problem import (DesignSpec, InvalidConfig, LossSpec, ModelSpec, NoiseSpec, ProblemInstance,
                      ProxSpec, SignalSpec, generate_instance)
from .state_evolution import StateEvolution

__version__ = "0.1.0"
