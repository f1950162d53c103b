"""KL divergence between flow-matching probability paths: identities, bounds and a counterexample."""

from .autodiff import Dual, Dual2, derivatives, divergence, field_derivatives, grad_divergence, jacobian
from .counterexample import (CounterexampleInstance, CounterexampleSpec, build_counterexample,
                             counterexample_fm_loss, counterexample_kl, verify_counterexample)
from .errors import (ArgumentError, DomainError, FlowKLError, FormatError, NumericError, TrainingError,
                     VerificationError)
from .estimators import (EstimatorReport, McConfig, RegularityProfile, bound_check, bound_constants,
                         closed_form_bound, flow_error, identity_curves, identity_integrand, kl_mc, score_gap,
                         tv_from_kl)
from .mlp import Checkpoint, MlpVelocity, checkpoint_load, checkpoint_save, mlp_forward, mlp_init, mlp_loss_grad
from .ode import (IvpConfig, backward_logdensity, backward_score, cumulative_trapezoid, rk4_solve,
                  score_transport_oracle, trapezoid)
from .paths import (GaussianPathState, LinearField, Schedule, ScheduleId, TimeGrid, gaussian_kl, path_state,
                    perturbed_field, sample_pt, schedule_eval, sigma_p)
from .train import AffineSchedule, ClipWindow, TrainConfig, train_affine_cfm, train_direct_fm

__version__ = "0.1.0"
