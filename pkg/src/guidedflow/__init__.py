"""Safety-guided flow-matching planner: a flow-matching trajectory model whose
sampling ODE is corrected at each step by a barrier/consistency QP."""

from .barriers import Box, ConstraintSpec, Halfspace, Obstacle
from .controller import GuidanceConfig, control, phi
from .dynamics import DoubleIntegrator, DoubleIntegratorParams, ForwardModel
from .env import MazeWorld, default_world
from .evaluation import MetricsRow, evaluate
from .flow import VectorFieldModel, velocity
from .lyapunov import lyapunov_gradient, lyapunov_value
from .qp import solve_qp
from .sampler import PlanResult, sample_sad, sample_truncation, sample_uncontrolled
from .trajectory import FlatTrajectory, TrajectoryLayout

__version__ = "0.1.0"
