"""Double obstacle (p,q)-problems on Koch-type pre-fractal domains."""
from .geometry import (GeometryError, IfsParams, PrefractalCurve, PrefractalDomain,
                       SelfIntersectionError, build_domain, fractal_dimension,
                       generate_prefractal, regular_polygon, theta_of_alpha)
from .fibers import FiberArray, FiberParams, build_fibers, lambda_eval, recovery_sequence
from .meshing import Mesh, MeshQualityError, audit, refine, triangulate
from .fem import (DiscreteField, EnergyOverflowError, InfeasibleError, ProblemInstance, energy,
                  energy_gradient, interpolate)
from .solver import (DiscreteSolution, LimitConstraint, SolverConfig, solve_limit_q,
                     solve_lipschitz, solve_ppq, vi_residual)
from .asymptotics import (ExtendedField, SweepReport, default_instance, integrability_diagnostic,
                          limit_n_sweep, n_sweep, p_sweep)

__version__ = "0.1.0"
