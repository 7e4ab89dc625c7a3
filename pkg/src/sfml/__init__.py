"""Learning stochastic flow maps of non-autonomous systems from snapshot data."""
from .dataset import (NormStats, SnapshotPair, TrainingSet, compute_norm_stats, extract_pairs,
                      generate_training_set, load, save)
from .errors import (ConfigurationError, DivergenceError, DomainError, FormatError, ModelError,
                     NumericalError, RunawayError, SFMLError, TrainingError)
from .excitation import (BasisSpec, ExcitationSignal, LocalExcitationParams, eval_basis,
                         parameterize_fit, parameterize_piecewise_linear, parameterize_steps,
                         reconstruct, sample_gamma)
from .flow import FlowModel, load_flow, save_flow
from .predict import (SimulatorMap, TrajectoryEnsemble, ValidationReport, ensemble, moments,
                      rollout, snapshot_distance, truth_ensemble, validate)
from .systems import (BUILTIN_NAMES, BuiltinSystem, ReactionNetworkSpec, SdeSpec, SpdeSpec,
                      builtin_system, em_step, mnrm_simulate, ou_moment_oracle, spde_step)
from .training import TrainConfig, TrainState, fit, lr_schedule, nll_loss, resume, train

__version__ = "0.1.0"
